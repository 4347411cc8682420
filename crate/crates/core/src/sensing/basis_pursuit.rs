//! Equality-constrained L1 minimisation (basis pursuit).
//!
//! Solves `min ||c||_1  s.t.  A c = b` with the dual alternating direction
//! method: the dual `max b^T y  s.t. ||A^T y||_inf <= 1` is split as
//! `A^T y = z, ||z||_inf <= 1` and the multiplier of that split converges to
//! the primal solution. Each iteration costs one application of `A` and one
//! of `A^T`, plus a solve with `A A^T` (a scalar for the binary matrices).
//!
//! Progress is certified with the duality gap: every few iterations the
//! primal iterate is projected onto `{A c = b}` and the dual iterate is scaled
//! into the unit box, which brackets the optimum from both sides. A support
//! polishing step (least squares on the dominant coefficients plus the
//! matching dual certificate) closes the gap exactly for sparse solutions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SensingError;

/// Linear map from coefficients (length `n`) to measurements (length `m`).
pub trait SensingOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&mut self, x: &[f64], out: &mut [f64]);
    fn adjoint(&mut self, y: &[f64], out: &mut [f64]);
    /// Solves `(A A^T) out = rhs`.
    fn gram_solve(&mut self, rhs: &[f64], out: &mut [f64]);
    /// Column `j` of `A`.
    fn column(&mut self, j: usize, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Stop once `(primal - dual) / primal` falls below this.
    pub rel_gap_tol: f64,
    /// Iterations between gap evaluations.
    pub check_every: usize,
    /// Attempt support polishing at each gap evaluation.
    pub polish: bool,
    /// Largest support polishing will try to fit.
    pub polish_max_support: usize,
    /// Multiplies the default ADMM penalty `mean(|b|)`.
    pub beta_scale: f64,
    /// Dual step length; convergent for `0 < gamma < (1 + sqrt 5) / 2`.
    pub gamma: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            rel_gap_tol: 1e-5,
            check_every: 10,
            polish: true,
            polish_max_support: 96,
            beta_scale: 1.0,
            gamma: 1.618,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpSolution {
    pub coeffs: Vec<f64>,
    pub iterations: usize,
    /// Certified relative duality gap at termination.
    pub rel_gap: f64,
    /// `||A c - b||_2` of the returned coefficients.
    pub residual: f64,
}

/// Best feasible iterate when the iteration cap is hit.
#[derive(Debug, Clone, PartialEq)]
pub struct NotConverged {
    pub iterations: usize,
    pub rel_gap: f64,
    pub residual: f64,
    pub best: Vec<f64>,
}

fn l1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

struct Certificate {
    primal: Vec<f64>,
    primal_obj: f64,
    dual_obj: f64,
}

impl Certificate {
    fn rel_gap(&self) -> f64 {
        let gap = (self.primal_obj - self.dual_obj).max(0.0);
        gap / self.primal_obj.max(f64::MIN_POSITIVE)
    }
}

pub fn residual_norm<O: SensingOperator>(op: &mut O, coeffs: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; op.rows()];
    op.apply(coeffs, &mut ax);
    ax.iter().zip(b).map(|(a, y)| (a - y).powi(2)).sum::<f64>().sqrt()
}

/// Projects `x` onto `{A x = b}`.
fn project<O: SensingOperator>(op: &mut O, x: &[f64], b: &[f64]) -> Vec<f64> {
    let m = op.rows();
    let mut r = vec![0.0; m];
    op.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri -= bi;
    }
    let mut w = vec![0.0; m];
    op.gram_solve(&r, &mut w);
    let mut corr = vec![0.0; op.cols()];
    op.adjoint(&w, &mut corr);
    x.iter().zip(&corr).map(|(a, c)| a - c).collect()
}

/// Dual objective of `y` after scaling it into the feasible set.
fn dual_value<O: SensingOperator>(op: &mut O, y: &[f64], b: &[f64]) -> f64 {
    let mut aty = vec![0.0; op.cols()];
    op.adjoint(y, &mut aty);
    dot(b, y) / inf_norm(&aty).max(1.0)
}

/// Least squares on the dominant support of `x`, with its sign-pattern dual
/// certificate. Returns `(primal, dual_value)` when the fit is exact.
fn polish<O: SensingOperator>(
    op: &mut O,
    x: &[f64],
    b: &[f64],
    max_support: usize,
) -> Option<(Vec<f64>, f64)> {
    let (m, n) = (op.rows(), op.cols());
    let peak = inf_norm(x);
    if peak == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[j].abs().total_cmp(&x[i].abs()).then(i.cmp(&j)));
    let support: Vec<usize> = order
        .into_iter()
        .take_while(|&i| x[i].abs() > 1e-3 * peak)
        .collect();
    let k = support.len();
    if k == 0 || k >= m || k > max_support {
        return None;
    }
    let mut a_t = DMatrix::<f64>::zeros(m, k);
    let mut col = vec![0.0; m];
    for (c, &j) in support.iter().enumerate() {
        op.column(j, &mut col);
        a_t.column_mut(c).copy_from_slice(&col);
    }
    let svd = a_t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax.max(1e-300) {
        return None;
    }
    let bv = DVector::from_column_slice(b);
    let coef = svd.solve(&bv, 0.0).ok()?;
    let fit = (&a_t * &coef - &bv).norm();
    if fit > 1e-10 * bv.norm().max(1.0) {
        return None;
    }
    let mut primal = vec![0.0; n];
    for (c, &j) in support.iter().enumerate() {
        primal[j] = coef[c];
    }
    // Minimum-norm y with A_T^T y = sign(c_T).
    let signs = DVector::from_iterator(k, coef.iter().map(|v| v.signum()));
    let u = svd.u.as_ref()?;
    let v_t = svd.v_t.as_ref()?;
    let inner = v_t * signs;
    let scaled = DVector::from_iterator(k, inner.iter().zip(svd.singular_values.iter()).map(|(a, s)| a / s));
    let y = u * scaled;
    let dual = dual_value(op, y.as_slice(), b);
    Some((primal, dual))
}

/// Basis pursuit. `b == 0` returns the zero vector.
pub fn solve<O: SensingOperator>(
    op: &mut O,
    b: &[f64],
    settings: &SolverSettings,
) -> Result<BpSolution, SensingError> {
    let (m, n) = (op.rows(), op.cols());
    if b.len() != m {
        return Err(SensingError::DimensionMismatch {
            expected: m,
            got: b.len(),
            what: "measurement vector",
        });
    }
    let b_norm = l2(b);
    if b_norm == 0.0 {
        return Ok(BpSolution {
            coeffs: vec![0.0; n],
            iterations: 0,
            rel_gap: 0.0,
            residual: 0.0,
        });
    }
    let residual_tol = 1e-6 * b_norm.max(1.0);
    if m == n {
        // square and full rank: the constraint alone fixes the solution
        let coeffs = project(op, &vec![0.0; n], b);
        let residual = residual_norm(op, &coeffs, b);
        return Ok(BpSolution {
            coeffs,
            iterations: 0,
            rel_gap: 0.0,
            residual,
        });
    }
    let beta = settings.beta_scale * l1(b) / m as f64;
    let gamma = settings.gamma;

    let mut x = vec![0.0; n];
    let mut ax = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut aty = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut az = vec![0.0; m];
    let mut rhs = vec![0.0; m];

    let mut best: Option<Certificate> = None;
    let mut iterations = 0;
    // Failed polish attempts back off exponentially; each costs a dense SVD.
    let mut polish_wait = 0usize;
    let mut polish_skip = 0usize;
    let check_every = settings.check_every.max(1);

    while iterations < settings.max_iter {
        iterations += 1;
        for ((zi, ai), xi) in z.iter_mut().zip(&aty).zip(&x) {
            *zi = (ai + xi / beta).clamp(-1.0, 1.0);
        }
        op.apply(&z, &mut az);
        for i in 0..m {
            rhs[i] = az[i] - (ax[i] - b[i]) / beta;
        }
        op.gram_solve(&rhs, &mut y);
        op.adjoint(&y, &mut aty);
        for i in 0..n {
            x[i] += gamma * beta * (aty[i] - z[i]);
        }
        // A x_new = A x + gamma * beta * (A A^T y - A z) = A x - gamma (A x - b)
        for i in 0..m {
            ax[i] -= gamma * (ax[i] - b[i]);
        }

        if iterations % check_every == 0 || iterations == settings.max_iter {
            op.apply(&x, &mut ax);
            let xp = project(op, &x, b);
            let primal_obj = l1(&xp);
            let dual_obj = dot(b, &y) / inf_norm(&aty).max(1.0);
            let mut cert = Certificate {
                primal: xp,
                primal_obj,
                dual_obj,
            };
            let try_polish = settings.polish && polish_skip == 0;
            polish_skip = polish_skip.saturating_sub(1);
            if try_polish {
                let polished = polish(op, &cert.primal, b, settings.polish_max_support);
                if polished.is_none() {
                    polish_wait = (polish_wait * 2).clamp(1, 64);
                    polish_skip = polish_wait;
                } else {
                    polish_wait = 0;
                }
                if let Some((p, d)) = polished {
                    let p_obj = l1(&p);
                    if p_obj <= cert.primal_obj {
                        cert.primal = p;
                        cert.primal_obj = p_obj;
                    }
                    cert.dual_obj = cert.dual_obj.max(d);
                }
            }
            if let Some(prev) = &best {
                cert.dual_obj = cert.dual_obj.max(prev.dual_obj);
                if prev.primal_obj < cert.primal_obj {
                    cert.primal = prev.primal.clone();
                    cert.primal_obj = prev.primal_obj;
                }
            }
            let done = cert.rel_gap() <= settings.rel_gap_tol;
            best = Some(cert);
            if done {
                break;
            }
        }
    }

    let cert = best.expect("at least one gap evaluation runs");
    let residual = residual_norm(op, &cert.primal, b);
    let rel_gap = cert.rel_gap();
    if rel_gap <= settings.rel_gap_tol && residual <= residual_tol {
        Ok(BpSolution {
            coeffs: cert.primal,
            iterations,
            rel_gap,
            residual,
        })
    } else {
        Err(SensingError::NotConverged(Box::new(NotConverged {
            iterations,
            rel_gap,
            residual,
            best: cert.primal,
        })))
    }
}

/// Explicit dense matrix; used for small problems and tests.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    a: DMatrix<f64>,
    gram: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseOperator {
    /// Fails when the rows of `a` are linearly dependent.
    pub fn new(a: DMatrix<f64>) -> Option<Self> {
        let gram = nalgebra::Cholesky::new(&a * a.transpose())?;
        Some(Self { a, gram })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl SensingOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.a.nrows()
    }

    fn cols(&self) -> usize {
        self.a.ncols()
    }

    fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        let r = &self.a * DVector::from_column_slice(x);
        out.copy_from_slice(r.as_slice());
    }

    fn adjoint(&mut self, y: &[f64], out: &mut [f64]) {
        let r = self.a.tr_mul(&DVector::from_column_slice(y));
        out.copy_from_slice(r.as_slice());
    }

    fn gram_solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        let r = self.gram.solve(&DVector::from_column_slice(rhs));
        out.copy_from_slice(r.as_slice());
    }

    fn column(&mut self, j: usize, out: &mut [f64]) {
        out.copy_from_slice(self.a.column(j).as_slice());
    }
}
