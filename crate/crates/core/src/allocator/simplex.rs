//! Dense two-phase simplex for the handful-of-variables programs behind the
//! rate allocators.
//!
//! Variables carry finite box bounds. Ties between optimal points are broken
//! lexicographically: after each objective is optimised, every non-basic
//! column with a nonzero reduced cost is frozen, so later objectives only
//! move along the optimal face of the earlier ones.

use serde::{Deserialize, Serialize};

use super::LpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(name: impl Into<String>, coeffs: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        Self {
            name: name.into(),
            coeffs,
            relation,
            rhs,
        }
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs: f64 = self.coeffs.iter().zip(x).map(|(a, b)| a * b).sum();
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    /// `(lower, upper)` per variable; both finite.
    pub bounds: Vec<(f64, f64)>,
    pub constraints: Vec<Constraint>,
}

const PIVOT_EPS: f64 = 1e-12;

struct Tableau {
    /// Rows of `[A | b]`.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    /// Row names, for infeasibility reports.
    names: Vec<String>,
    active: Vec<bool>,
    ncols: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.rows[r][self.ncols]
    }

    fn reduced_costs(&self, c: &[f64]) -> Vec<f64> {
        let mut red = c.to_vec();
        red.resize(self.ncols, 0.0);
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = c.get(b).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for (j, v) in red.iter_mut().enumerate() {
                    *v -= cb * self.rows[r][j];
                }
            }
        }
        red
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let p = self.rows[pr][pc];
        for v in self.rows[pr].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[pr].clone();
        for (r, row) in self.rows.iter_mut().enumerate() {
            if r == pr {
                continue;
            }
            let f = row[pc];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[pc] = 0.0;
            }
        }
        self.basis[pr] = pc;
    }

    /// Maximises `c` over active columns with Bland's rule.
    fn maximize(&mut self, c: &[f64]) -> Result<(), LpError> {
        let scale = c.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
        let eps = 1e-11 * scale;
        for _ in 0..10_000 {
            let red = self.reduced_costs(c);
            let entering = (0..self.ncols).find(|&j| self.active[j] && red[j] > eps);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][col];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(r) / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-12 * lratio.abs().max(1.0)
                                || (ratio <= lratio + 1e-12 * lratio.abs().max(1.0)
                                    && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            self.pivot(row, col);
        }
        Err(LpError::IterationLimit)
    }

    /// Freezes non-basic columns whose reduced cost is strictly negative, so
    /// the current objective value cannot drop in later stages.
    fn freeze_suboptimal(&mut self, c: &[f64]) {
        let scale = c.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
        let red = self.reduced_costs(c);
        for j in 0..self.ncols {
            if !self.basis.contains(&j) && red[j] < -1e-11 * scale {
                self.active[j] = false;
            }
        }
    }

    fn objective(&self, c: &[f64]) -> f64 {
        self.basis
            .iter()
            .enumerate()
            .map(|(r, &b)| c.get(b).copied().unwrap_or(0.0) * self.rhs(r))
            .sum()
    }
}

impl LinearProgram {
    pub fn new(bounds: Vec<(f64, f64)>) -> Self {
        Self {
            bounds,
            constraints: Vec::new(),
        }
    }

    pub fn with(mut self, c: Constraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn n_vars(&self) -> usize {
        self.bounds.len()
    }

    fn validate(&self) -> Result<(), LpError> {
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(LpError::InvalidInput(format!("x{} needs finite bounds", j + 1)));
            }
            if lo > hi {
                return Err(LpError::Infeasible {
                    constraint: format!("bounds of x{}: {lo} > {hi}", j + 1),
                });
            }
        }
        for c in &self.constraints {
            if c.coeffs.len() != self.n_vars() || !c.rhs.is_finite() {
                return Err(LpError::InvalidInput(format!(
                    "constraint `{}` has {} coefficients for {} variables",
                    c.name,
                    c.coeffs.len(),
                    self.n_vars()
                )));
            }
        }
        Ok(())
    }

    /// Builds the phase-one tableau over the shifted variables `x - lower`.
    fn tableau(&self) -> (Tableau, Vec<usize>) {
        let n = self.n_vars();
        struct Row {
            name: String,
            coeffs: Vec<f64>,
            rel: Relation,
            rhs: f64,
        }
        let mut rows: Vec<Row> = Vec::new();
        for c in &self.constraints {
            let shift: f64 = c.coeffs.iter().zip(&self.bounds).map(|(a, (lo, _))| a * lo).sum();
            rows.push(Row {
                name: c.name.clone(),
                coeffs: c.coeffs.clone(),
                rel: c.relation,
                rhs: c.rhs - shift,
            });
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            let mut coeffs = vec![0.0; n];
            coeffs[j] = 1.0;
            rows.push(Row {
                name: format!("upper bound of x{}", j + 1),
                coeffs,
                rel: Relation::Le,
                rhs: hi - lo,
            });
        }
        for r in rows.iter_mut() {
            if r.rhs < 0.0 {
                r.rhs = -r.rhs;
                r.coeffs.iter_mut().for_each(|v| *v = -*v);
                r.rel = match r.rel {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
            }
        }
        let n_slack = rows.iter().filter(|r| r.rel != Relation::Eq).count();
        let n_art = rows.iter().filter(|r| r.rel != Relation::Le).count();
        let ncols = n + n_slack + n_art;
        let mut t_rows = Vec::with_capacity(rows.len());
        let mut basis = Vec::with_capacity(rows.len());
        let mut artificials = Vec::new();
        let (mut s, mut a) = (n, n + n_slack);
        for r in &rows {
            let mut row = vec![0.0; ncols + 1];
            row[..n].copy_from_slice(&r.coeffs);
            row[ncols] = r.rhs;
            match r.rel {
                Relation::Le => {
                    row[s] = 1.0;
                    basis.push(s);
                    s += 1;
                }
                Relation::Ge => {
                    row[s] = -1.0;
                    s += 1;
                    row[a] = 1.0;
                    basis.push(a);
                    artificials.push(a);
                    a += 1;
                }
                Relation::Eq => {
                    row[a] = 1.0;
                    basis.push(a);
                    artificials.push(a);
                    a += 1;
                }
            }
            t_rows.push(row);
        }
        let tab = Tableau {
            rows: t_rows,
            basis,
            names: rows.into_iter().map(|r| r.name).collect(),
            active: vec![true; ncols],
            ncols,
        };
        (tab, artificials)
    }

    /// Optimises each objective in turn, keeping earlier objectives at their
    /// optimum. Returns the solution in original (unshifted) variables.
    pub fn maximize_lexicographic(&self, objectives: &[Vec<f64>]) -> Result<Vec<f64>, LpError> {
        self.validate()?;
        let n = self.n_vars();
        for o in objectives {
            if o.len() != n {
                return Err(LpError::InvalidInput(format!(
                    "objective has {} coefficients for {n} variables",
                    o.len()
                )));
            }
        }
        let (mut tab, artificials) = self.tableau();

        if !artificials.is_empty() {
            let mut phase1 = vec![0.0; tab.ncols];
            for &a in &artificials {
                phase1[a] = -1.0;
            }
            tab.maximize(&phase1)?;
            let scale = self
                .constraints
                .iter()
                .map(|c| c.rhs.abs())
                .fold(1.0f64, f64::max);
            if tab.objective(&phase1) < -1e-9 * scale {
                let worst = (0..tab.rows.len())
                    .filter(|&r| artificials.contains(&tab.basis[r]))
                    .max_by(|&a, &b| tab.rhs(a).total_cmp(&tab.rhs(b)))
                    .map(|r| tab.names[r].clone())
                    .unwrap_or_else(|| "constraints".into());
                return Err(LpError::Infeasible { constraint: worst });
            }
            // Drive remaining zero-level artificials out of the basis.
            let mut r = 0;
            while r < tab.rows.len() {
                if artificials.contains(&tab.basis[r]) {
                    let col = (0..tab.ncols)
                        .find(|&j| !artificials.contains(&j) && tab.rows[r][j].abs() > 1e-9);
                    match col {
                        Some(j) => tab.pivot(r, j),
                        None => {
                            // redundant row
                            tab.rows.remove(r);
                            tab.basis.remove(r);
                            tab.names.remove(r);
                            continue;
                        }
                    }
                }
                r += 1;
            }
            for &a in &artificials {
                tab.active[a] = false;
            }
        }

        for obj in objectives {
            let mut c = obj.clone();
            c.resize(tab.ncols, 0.0);
            tab.maximize(&c)?;
            tab.freeze_suboptimal(&c);
        }

        let mut x: Vec<f64> = self.bounds.iter().map(|&(lo, _)| lo).collect();
        for (r, &b) in tab.basis.iter().enumerate() {
            if b < n {
                x[b] += tab.rhs(r);
            }
        }
        for (xj, &(lo, hi)) in x.iter_mut().zip(&self.bounds) {
            *xj = xj.clamp(lo, hi);
        }
        Ok(x)
    }
}

/// Maximises `costs` subject to the constraints and box bounds. Ties are
/// broken toward the lexicographically largest point (largest `x1`, then
/// `x2`, ...).
pub fn solve_bounded_lp(
    costs: &[f64],
    constraints: &[Constraint],
    bounds: &[(f64, f64)],
) -> Result<Vec<f64>, LpError> {
    let lp = LinearProgram {
        bounds: bounds.to_vec(),
        constraints: constraints.to_vec(),
    };
    let n = bounds.len();
    let mut objectives = vec![costs.to_vec()];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        objectives.push(e);
    }
    lp.maximize_lexicographic(&objectives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obj(c: &[f64], x: &[f64]) -> f64 {
        c.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn single_variable() {
        let x = solve_bounded_lp(
            &[1.0],
            &[Constraint::new("cap", vec![1.0], Relation::Le, 1.0)],
            &[(0.0, 2.0)],
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_objective_picks_canonical_point() {
        let cons = [Constraint::new("sum", vec![1.0, 1.0], Relation::Le, 1.5)];
        let x = solve_bounded_lp(&[0.0, 0.0], &cons, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn equality_and_lower_bounds() {
        // max x + y s.t. x - 2y = 0, x + y <= 3, x in [1, 5], y in [0.2, 5]
        let cons = [
            Constraint::new("couple", vec![1.0, -2.0], Relation::Eq, 0.0),
            Constraint::new("budget", vec![1.0, 1.0], Relation::Le, 3.0),
        ];
        let x = solve_bounded_lp(&[1.0, 1.0], &cons, &[(1.0, 5.0), (0.2, 5.0)]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_names_constraint() {
        let cons = [Constraint::new("budget", vec![1.0, 1.0], Relation::Le, 0.5)];
        let err = solve_bounded_lp(&[1.0, 1.0], &cons, &[(0.4, 1.0), (0.4, 1.0)]).unwrap_err();
        match err {
            LpError::Infeasible { constraint } => assert!(constraint.contains("budget"), "{constraint}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inverted_bounds_are_infeasible() {
        let err = solve_bounded_lp(&[1.0], &[], &[(1.0, 0.0)]).unwrap_err();
        assert!(matches!(err, LpError::Infeasible { .. }));
    }

    /// Dense grid oracle over the box, step 1e-3 along each free axis.
    fn grid_oracle_3(costs: &[f64; 3], cons: &[Constraint], bounds: &[(f64, f64); 3]) -> Option<f64> {
        let steps = |(lo, hi): (f64, f64)| ((hi - lo) / 1e-3).round() as usize;
        let mut best: Option<f64> = None;
        let (n0, n1) = (steps(bounds[0]), steps(bounds[1]));
        for i in 0..=n0 {
            let x0 = bounds[0].0 + (bounds[0].1 - bounds[0].0) * i as f64 / n0.max(1) as f64;
            for j in 0..=n1 {
                let x1 = bounds[1].0 + (bounds[1].1 - bounds[1].0) * j as f64 / n1.max(1) as f64;
                // the third coordinate enters linearly, so scan its interval exactly
                let (mut lo, mut hi) = bounds[2];
                let mut ok = true;
                for c in cons {
                    let rest = c.coeffs[0] * x0 + c.coeffs[1] * x1;
                    let a = c.coeffs[2];
                    let room = c.rhs - rest;
                    match (c.relation, a.partial_cmp(&0.0).unwrap()) {
                        (Relation::Le, std::cmp::Ordering::Greater) => hi = hi.min(room / a),
                        (Relation::Le, std::cmp::Ordering::Less) => lo = lo.max(room / a),
                        (Relation::Le, std::cmp::Ordering::Equal) => ok &= room >= -1e-12,
                        _ => unreachable!(),
                    }
                }
                if !ok || lo > hi + 1e-12 {
                    continue;
                }
                let x2 = if costs[2] >= 0.0 { hi } else { lo };
                let v = costs[0] * x0 + costs[1] * x1 + costs[2] * x2;
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        best
    }

    #[test]
    fn random_three_variable_instances_match_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let costs = [rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0)];
            let bounds = [(0.0, rng.gen_range(0.2..1.0)), (0.0, rng.gen_range(0.2..1.0)), (0.0, 1.0)];
            let cons: Vec<Constraint> = (0..2)
                .map(|k| {
                    Constraint::new(
                        format!("c{k}"),
                        vec![rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(-0.5..1.0)],
                        Relation::Le,
                        rng.gen_range(0.3..1.5),
                    )
                })
                .collect();
            let Some(oracle) = grid_oracle_3(&costs, &cons, &bounds) else {
                continue;
            };
            let x = solve_bounded_lp(&costs, &cons, &bounds).unwrap();
            for c in &cons {
                assert!(c.violation(&x) < 1e-9);
            }
            let v = obj(&costs, &x);
            // the simplex optimum can only beat the grid
            assert!(v >= oracle - 1e-9, "simplex {v} below grid {oracle}");
            assert!(v - oracle <= 2e-3, "simplex {v} vs grid {oracle}");
            checked += 1;
        }
    }
}
