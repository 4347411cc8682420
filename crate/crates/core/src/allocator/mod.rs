//! Per-block sampling-rate allocation.
//!
//! Two small linear programs decide how many measurements each block gets.
//! [`solve_lp1`] splits the frame by camera-derived azimuth categories and a
//! near/far range split; [`solve_lp2`] gives tracked ("important") blocks a
//! boosted rate and everything else a floor rate. Both maximise the spent
//! budget, so many optima exist; ties are broken toward the important blocks.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BlockGrid, BlockIndex};
use crate::sensing::{measurement_count, MatrixKind};

pub mod simplex;

pub use simplex::{solve_bounded_lp, Constraint, LinearProgram, Relation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("infeasible: `{constraint}` cannot be satisfied; fall back to a uniform rate")]
    Infeasible { constraint: String },
    #[error("objective is unbounded")]
    Unbounded,
    #[error("simplex iteration limit reached")]
    IterationLimit,
    #[error("invalid LP input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("plan covers a {plan_az}x{plan_rng} grid, expected {grid_az}x{grid_rng}")]
    GridMismatch {
        plan_az: usize,
        plan_rng: usize,
        grid_az: usize,
        grid_rng: usize,
    },
    #[error("block ({az}, {rng}) has no category")]
    Uncategorized { az: usize, rng: usize },
    #[error("category {class:?} has no rate in a {n_rates}-rate solution")]
    MissingRate { class: BlockClass, n_rates: usize },
    #[error("rate {0} outside [0, 1]")]
    InvalidRate(f64),
}

/// Camera-derived category of an azimuth sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AzCategory {
    /// Pedestrians or bicycles.
    Vulnerable,
    Car,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lp1Inputs {
    /// Azimuth-block counts for vulnerable, car and other sectors.
    pub a: [usize; 3],
    /// Near range-block count.
    pub r1: usize,
    /// Far range-block count.
    pub r2: usize,
    /// CFAR promotion terms; `b[0] >= 0`, the others `<= 0`, summing to zero.
    pub b: [i64; 3],
    /// Total block count.
    pub s: f64,
    pub budget_fraction: f64,
    /// Box for `x1..x3`.
    pub x_bounds: (f64, f64),
    pub x4_bounds: (f64, f64),
}

impl Lp1Inputs {
    pub fn new(a: [usize; 3], r1: usize, r2: usize, b: [i64; 3]) -> Self {
        Self {
            a,
            r1,
            r2,
            b,
            s: ((a[0] + a[1] + a[2]) * (r1 + r2)) as f64,
            budget_fraction: 0.1,
            x_bounds: (0.05, 0.4),
            x4_bounds: (0.02, 0.025),
        }
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let bad = |m: String| Err(LpError::InvalidInput(m));
        let [b1, b2, b3] = self.b;
        if b1 + b2 + b3 != 0 {
            return bad(format!("b terms sum to {}, expected 0", b1 + b2 + b3));
        }
        if b1 < 0 || b2 > 0 || b3 > 0 {
            return bad("b1 must be >= 0 and b2, b3 <= 0".into());
        }
        let r1 = self.r1 as i64;
        if self.a[1] as i64 * r1 + b2 < 0 || self.a[2] as i64 * r1 + b3 < 0 {
            return bad("a2*r1 + b2 and a3*r1 + b3 must be non-negative".into());
        }
        let total = ((self.a.iter().sum::<usize>()) * (self.r1 + self.r2)) as f64;
        if self.s != total {
            return bad(format!("S = {} but the categories cover {total} blocks", self.s));
        }
        if !(self.budget_fraction.is_finite() && self.budget_fraction >= 0.0) {
            return bad(format!("budget fraction {}", self.budget_fraction));
        }
        Ok(())
    }

    /// Objective coefficients on `(x1, x2, x3, x4)`.
    pub fn coefficients(&self) -> [f64; 4] {
        let r1 = self.r1 as f64;
        let [a1, a2, a3] = self.a.map(|v| v as f64);
        let [b1, b2, b3] = self.b.map(|v| v as f64);
        [a1 * r1 + b1, a2 * r1 + b2, a3 * r1 + b3, (a1 + a2 + a3) * self.r2 as f64]
    }

    pub fn budget(&self) -> f64 {
        self.budget_fraction * self.s
    }

    pub fn program(&self) -> LinearProgram {
        let c = self.coefficients();
        LinearProgram::new(vec![self.x_bounds, self.x_bounds, self.x_bounds, self.x4_bounds])
            .with(Constraint::new("x1 - 3x3 = 0", vec![1.0, 0.0, -3.0, 0.0], Relation::Eq, 0.0))
            .with(Constraint::new("x2 - 2x3 = 0", vec![0.0, 1.0, -2.0, 0.0], Relation::Eq, 0.0))
            .with(Constraint::new("budget f(x) <= fS", c.to_vec(), Relation::Le, self.budget()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lp1Solution {
    pub x: [f64; 4],
    pub objective: f64,
}

/// Maximises the block-equivalent budget spent, then `x3`, then `x4`.
pub fn solve_lp1(inputs: &Lp1Inputs) -> Result<Lp1Solution, LpError> {
    inputs.validate()?;
    let c = inputs.coefficients();
    let lp = inputs.program();
    let x = lp.maximize_lexicographic(&[
        c.to_vec(),
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ])?;
    // Re-impose the couplings so they hold bit-for-bit.
    let x3 = x[2];
    let x = [3.0 * x3, 2.0 * x3, x3, x[3]];
    let objective = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    Ok(Lp1Solution { x, objective })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lp2Inputs {
    /// Important block count.
    pub important: usize,
    /// Other block count.
    pub other: usize,
    /// Block width in range cells.
    pub w: usize,
    /// Block height in azimuth cells.
    pub h: usize,
    /// Sample budget.
    pub s: f64,
    pub x1_bounds: (f64, f64),
    pub x2_bounds: (f64, f64),
}

impl Lp2Inputs {
    /// Inputs for a frame budgeted at `target_rate` of its samples. Above a
    /// 0.55 target the important ceiling follows the target; below 0.07 the
    /// floor does.
    pub fn for_target(important: usize, grid: &BlockGrid, target_rate: f64) -> Self {
        let total = grid.n_blocks();
        let important = important.min(total);
        Self {
            important,
            other: total - important,
            w: grid.block_cols,
            h: grid.block_rows,
            s: target_rate * (total * grid.block_len()) as f64,
            x1_bounds: (target_rate, target_rate.max(0.55)),
            x2_bounds: (target_rate.min(0.07), target_rate),
        }
    }

    pub fn validate(&self) -> Result<(), LpError> {
        if !(self.s.is_finite() && self.s >= 0.0) {
            return Err(LpError::InvalidInput(format!("budget {}", self.s)));
        }
        if self.w == 0 || self.h == 0 {
            return Err(LpError::InvalidInput("zero block size".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> [f64; 2] {
        let wh = (self.w * self.h) as f64;
        [self.important as f64 * wh, self.other as f64 * wh]
    }

    pub fn program(&self) -> LinearProgram {
        let c = self.coefficients();
        LinearProgram::new(vec![self.x1_bounds, self.x2_bounds])
            .with(Constraint::new("x1 >= 1.1x2", vec![1.0, -1.1], Relation::Ge, 0.0))
            .with(Constraint::new("budget f(x) <= S", c.to_vec(), Relation::Le, self.s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lp2Solution {
    pub x: [f64; 2],
    pub objective: f64,
}

/// Maximises the samples spent, then `x1`, then `x2`.
pub fn solve_lp2(inputs: &Lp2Inputs) -> Result<Lp2Solution, LpError> {
    inputs.validate()?;
    let c = inputs.coefficients();
    let x = inputs
        .program()
        .maximize_lexicographic(&[c.to_vec(), vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let x = [x[0], x[1]];
    Ok(Lp2Solution {
        x,
        objective: c[0] * x[0] + c[1] * x[1],
    })
}

/// Which LP variable a block's rate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockClass {
    X1,
    X2,
    X3,
    X4,
}

impl BlockClass {
    fn slot(self) -> usize {
        match self {
            BlockClass::X1 => 0,
            BlockClass::X2 => 1,
            BlockClass::X3 => 2,
            BlockClass::X4 => 3,
        }
    }
}

/// Where a plan's rates came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Uniform { rate: f64 },
    Lp1 { inputs: Lp1Inputs, solution: Lp1Solution },
    Lp2 { inputs: Lp2Inputs, solution: Lp2Solution },
    /// The LP was infeasible and a uniform rate was used instead.
    Fallback { rate: f64, reason: String },
    Custom,
}

/// Sampling rate for every block of a grid, stored in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    n_az_blocks: usize,
    n_range_blocks: usize,
    rates: Vec<f64>,
    pub provenance: Provenance,
}

impl SamplingPlan {
    /// Same rate everywhere; `rate` is clamped into `[0, 1]`.
    pub fn uniform(grid: &BlockGrid, rate: f64) -> Self {
        let rate = if rate.is_nan() { 0.0 } else { rate.clamp(0.0, 1.0) };
        Self {
            n_az_blocks: grid.n_az_blocks,
            n_range_blocks: grid.n_range_blocks,
            rates: vec![rate; grid.n_blocks()],
            provenance: Provenance::Uniform { rate },
        }
    }

    /// Builds a plan from explicit per-block rates in grid order.
    pub fn from_rates(grid: &BlockGrid, rates: Vec<f64>, provenance: Provenance) -> Result<Self, PlanError> {
        if rates.len() != grid.n_blocks() {
            return Err(PlanError::GridMismatch {
                plan_az: rates.len(),
                plan_rng: 1,
                grid_az: grid.n_az_blocks,
                grid_rng: grid.n_range_blocks,
            });
        }
        if let Some(&r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(PlanError::InvalidRate(r));
        }
        Ok(Self {
            n_az_blocks: grid.n_az_blocks,
            n_range_blocks: grid.n_range_blocks,
            rates,
            provenance,
        })
    }

    pub fn check_grid(&self, grid: &BlockGrid) -> Result<(), PlanError> {
        if self.n_az_blocks != grid.n_az_blocks || self.n_range_blocks != grid.n_range_blocks {
            return Err(PlanError::GridMismatch {
                plan_az: self.n_az_blocks,
                plan_rng: self.n_range_blocks,
                grid_az: grid.n_az_blocks,
                grid_rng: grid.n_range_blocks,
            });
        }
        Ok(())
    }

    /// Rate of block `idx`. Panics if the plan was built for another grid.
    pub fn rate(&self, grid: &BlockGrid, idx: BlockIndex) -> f64 {
        self.rates[grid.ordinal(idx)]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Measurements the plan will take, after per-block rounding.
    pub fn total_measurements(&self, grid: &BlockGrid, kind: MatrixKind) -> usize {
        let n = grid.block_len();
        self.rates.iter().map(|&r| measurement_count(r, n, kind)).sum()
    }

    /// Unrounded sample allowance, `sum(rate * n)`.
    pub fn nominal_samples(&self, grid: &BlockGrid) -> f64 {
        let n = grid.block_len() as f64;
        self.rates.iter().map(|r| r * n).sum()
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self.provenance, Provenance::Fallback { .. })
    }
}

impl fmt::Display for SamplingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for az in 0..self.n_az_blocks {
            let row = &self.rates[az * self.n_range_blocks..(az + 1) * self.n_range_blocks];
            let cells: Vec<String> = row.iter().map(|r| format!("{r:.3}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Assigns each block the rate of its class. `classes` is in grid order.
pub fn plan_from_solution(
    grid: &BlockGrid,
    classes: &[Option<BlockClass>],
    rates: &[f64],
    provenance: Provenance,
) -> Result<SamplingPlan, PlanError> {
    if classes.len() != grid.n_blocks() {
        return Err(PlanError::GridMismatch {
            plan_az: classes.len(),
            plan_rng: 1,
            grid_az: grid.n_az_blocks,
            grid_rng: grid.n_range_blocks,
        });
    }
    let mut out = Vec::with_capacity(classes.len());
    for (idx, class) in grid.blocks().zip(classes) {
        let class = class.ok_or(PlanError::Uncategorized { az: idx.az, rng: idx.rng })?;
        let rate = *rates.get(class.slot()).ok_or(PlanError::MissingRate {
            class,
            n_rates: rates.len(),
        })?;
        out.push(rate);
    }
    SamplingPlan::from_rates(grid, out, provenance)
}

/// Important blocks take `x1`, all others `x2`.
pub fn lp2_classes(grid: &BlockGrid, important: &BTreeSet<BlockIndex>) -> Vec<Option<BlockClass>> {
    grid.blocks()
        .map(|b| Some(if important.contains(&b) { BlockClass::X1 } else { BlockClass::X2 }))
        .collect()
}

/// Solves LP #2 for a set of important blocks and turns the rates into a
/// plan. An infeasible program yields a uniform `target_rate` plan marked as
/// a fallback.
pub fn plan_lp2(grid: &BlockGrid, important: &BTreeSet<BlockIndex>, target_rate: f64) -> SamplingPlan {
    let inputs = Lp2Inputs::for_target(important.len(), grid, target_rate);
    match solve_lp2(&inputs) {
        Ok(solution) => {
            let classes = lp2_classes(grid, important);
            plan_from_solution(grid, &classes, &solution.x, Provenance::Lp2 { inputs, solution })
                .expect("every block is classified")
        }
        Err(e) => fallback(grid, target_rate, e),
    }
}

fn fallback(grid: &BlockGrid, rate: f64, e: LpError) -> SamplingPlan {
    log::warn!("allocator fell back to uniform rate {rate}: {e}");
    let mut plan = SamplingPlan::uniform(grid, rate);
    plan.provenance = Provenance::Fallback {
        rate,
        reason: e.to_string(),
    };
    plan
}

/// Builds LP #1 inputs and the matching block classes.
///
/// `az_categories` has one entry per azimuth block. `cfar_flags` promotes
/// near-range blocks outside vulnerable sectors to `x1`; flags at far range
/// are ignored.
pub fn lp1_assignment(
    grid: &BlockGrid,
    az_categories: &[AzCategory],
    cfar_flags: &BTreeSet<BlockIndex>,
    r1: usize,
) -> Result<(Lp1Inputs, Vec<Option<BlockClass>>), LpError> {
    if az_categories.len() != grid.n_az_blocks {
        return Err(LpError::InvalidInput(format!(
            "{} azimuth categories for {} azimuth blocks",
            az_categories.len(),
            grid.n_az_blocks
        )));
    }
    if r1 > grid.n_range_blocks {
        return Err(LpError::InvalidInput(format!(
            "r1 = {r1} exceeds {} range blocks",
            grid.n_range_blocks
        )));
    }
    let mut a = [0usize; 3];
    for c in az_categories {
        a[*c as usize] += 1;
    }
    let mut b = [0i64; 3];
    let mut classes = Vec::with_capacity(grid.n_blocks());
    for idx in grid.blocks() {
        let cat = az_categories[idx.az];
        let class = if idx.rng >= r1 {
            BlockClass::X4
        } else if cat == AzCategory::Vulnerable {
            BlockClass::X1
        } else if cfar_flags.contains(&idx) {
            b[0] += 1;
            b[cat as usize] -= 1;
            BlockClass::X1
        } else if cat == AzCategory::Car {
            BlockClass::X2
        } else {
            BlockClass::X3
        };
        classes.push(Some(class));
    }
    Ok((Lp1Inputs::new(a, r1, grid.n_range_blocks - r1, b), classes))
}

/// Solves LP #1 and builds the plan; infeasibility falls back to a uniform
/// `fallback_rate` plan.
pub fn plan_lp1(
    grid: &BlockGrid,
    az_categories: &[AzCategory],
    cfar_flags: &BTreeSet<BlockIndex>,
    r1: usize,
    budget_fraction: f64,
    fallback_rate: f64,
) -> Result<SamplingPlan, LpError> {
    let (mut inputs, classes) = lp1_assignment(grid, az_categories, cfar_flags, r1)?;
    inputs.budget_fraction = budget_fraction;
    Ok(match solve_lp1(&inputs) {
        Ok(solution) => plan_from_solution(grid, &classes, &solution.x, Provenance::Lp1 { inputs, solution })
            .expect("every block is classified"),
        Err(e @ LpError::Infeasible { .. }) => fallback(grid, fallback_rate, e),
        Err(e) => return Err(e),
    })
}
