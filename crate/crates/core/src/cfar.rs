//! Cell-averaging CFAR along range.
//!
//! Each azimuth row is scanned independently. A cell is a detection when it
//! exceeds `alpha * mean(training cells)`, where the training cells sit on
//! both sides of the cell beyond a guard band. Near the row ends the window
//! is truncated and `alpha` is recomputed for the cells actually available,
//! so the false-alarm rate stays at the design value everywhere.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BlockGrid, BlockIndex, RadarFrame};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CfarError {
    #[error("invalid CFAR parameters: {0}")]
    InvalidParams(String),
    #[error("row of {len} cells is too short; need more than {min}")]
    RowTooShort { len: usize, min: usize },
    #[error("grid covers {grid_rows}x{grid_cols} but frame is {rows}x{cols}")]
    GridMismatch {
        grid_rows: usize,
        grid_cols: usize,
        rows: usize,
        cols: usize,
    },
}

/// Window sizes are totals over both sides of the cell under test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfarParams {
    pub n_train: usize,
    pub n_guard: usize,
    pub pfa: f64,
}

impl Default for CfarParams {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_guard: 50,
            pfa: 1e-3,
        }
    }
}

impl CfarParams {
    pub fn validate(&self) -> Result<(), CfarError> {
        if self.n_train < 2 {
            return Err(CfarError::InvalidParams(format!("n_train = {} < 2", self.n_train)));
        }
        if !(self.pfa > 0.0 && self.pfa < 1.0) {
            return Err(CfarError::InvalidParams(format!("pfa = {} outside (0, 1)", self.pfa)));
        }
        Ok(())
    }

    fn train_side(&self) -> usize {
        self.n_train / 2
    }

    fn guard_side(&self) -> usize {
        self.n_guard / 2
    }
}

/// `alpha = n * (pfa^(-1/n) - 1)`: the scale that gives false-alarm rate
/// `pfa` for exponential clutter averaged over `n` cells.
pub fn threshold_factor(n_effective: usize, pfa: f64) -> f64 {
    let n = n_effective as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

/// Precomputed `alpha` for every possible training count.
struct AlphaTable(Vec<f64>);

impl AlphaTable {
    fn new(params: &CfarParams) -> Self {
        let max = 2 * params.train_side();
        let mut v = vec![f64::INFINITY; max + 1];
        for (n, a) in v.iter_mut().enumerate().skip(1) {
            *a = threshold_factor(n, params.pfa);
        }
        Self(v)
    }
}

fn check_row(len: usize, params: &CfarParams) -> Result<(), CfarError> {
    params.validate()?;
    let min = params.n_guard + 2;
    if len <= min {
        return Err(CfarError::RowTooShort { len, min });
    }
    Ok(())
}

fn detect_row_into(row: &[f64], params: &CfarParams, alpha: &AlphaTable, prefix: &mut Vec<f64>, out: &mut [bool]) {
    let len = row.len();
    prefix.clear();
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in row {
        acc += v;
        prefix.push(acc);
    }
    let (t, g) = (params.train_side(), params.guard_side());
    for i in 0..len {
        // left window [i - g - t, i - g - 1], right window [i + g + 1, i + g + t]
        let l_end = i.saturating_sub(g);
        let l_start = i.saturating_sub(g + t);
        let r_start = (i + g + 1).min(len);
        let r_end = (i + g + t + 1).min(len);
        let count = (l_end - l_start) + (r_end - r_start);
        out[i] = if count == 0 {
            false
        } else {
            let sum = (prefix[l_end] - prefix[l_start]) + (prefix[r_end] - prefix[r_start]);
            row[i] > alpha.0[count] * (sum / count as f64)
        };
    }
}

/// Detection mask for one range profile.
pub fn ca_cfar_row(row: &[f64], params: &CfarParams) -> Result<Vec<bool>, CfarError> {
    check_row(row.len(), params)?;
    let alpha = AlphaTable::new(params);
    let mut out = vec![false; row.len()];
    detect_row_into(row, params, &alpha, &mut Vec::with_capacity(row.len() + 1), &mut out);
    Ok(out)
}

/// Detection mask for every azimuth row of a polar frame.
pub fn ca_cfar(data: &Array2<f64>, params: &CfarParams) -> Result<Array2<bool>, CfarError> {
    let (rows, cols) = data.dim();
    check_row(cols, params)?;
    let alpha = AlphaTable::new(params);
    let mut mask = Array2::from_elem((rows, cols), false);
    let mut prefix = Vec::with_capacity(cols + 1);
    let mut row_buf = vec![0.0; cols];
    let mut out = vec![false; cols];
    for r in 0..rows {
        for (dst, src) in row_buf.iter_mut().zip(data.row(r)) {
            *dst = *src;
        }
        detect_row_into(&row_buf, params, &alpha, &mut prefix, &mut out);
        for (dst, src) in mask.row_mut(r).iter_mut().zip(&out) {
            *dst = *src;
        }
    }
    Ok(mask)
}

/// Blocks containing at least one CFAR detection.
pub fn blocks_from_mask(mask: &Array2<bool>, grid: &BlockGrid) -> Result<BTreeSet<BlockIndex>, CfarError> {
    let (rows, cols) = mask.dim();
    if rows != grid.rows() || cols != grid.cols() {
        return Err(CfarError::GridMismatch {
            grid_rows: grid.rows(),
            grid_cols: grid.cols(),
            rows,
            cols,
        });
    }
    Ok(mask
        .indexed_iter()
        .filter(|(_, &hit)| hit)
        .map(|((r, c), _)| BlockIndex {
            az: r / grid.block_rows,
            rng: c / grid.block_cols,
        })
        .collect())
}

/// Blocks of `frame` containing at least one CFAR detection.
pub fn cfar_important_blocks(
    frame: &RadarFrame,
    grid: &BlockGrid,
    params: &CfarParams,
) -> Result<BTreeSet<BlockIndex>, CfarError> {
    let mask = ca_cfar(frame.data(), params)?;
    blocks_from_mask(&mask, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1};

    #[test]
    fn threshold_factor_values() {
        let a = threshold_factor(300, 1e-3);
        let oracle = 300.0 * ((1e3f64).ln() / 300.0).exp_m1();
        assert!((a - oracle).abs() < 1e-12);
        assert!((a - 6.988).abs() < 1e-3, "{a}");
        assert!((threshold_factor(1, 0.5) - 1.0).abs() < 1e-15);
        assert!(threshold_factor(40, 1e-4) > threshold_factor(40, 1e-3));
    }

    #[test]
    fn zero_row_has_no_detections() {
        let mask = ca_cfar_row(&[0.0; 200], &CfarParams::default()).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn short_row_rejected() {
        assert!(matches!(
            ca_cfar_row(&[1.0; 52], &CfarParams::default()),
            Err(CfarError::RowTooShort { .. })
        ));
        assert!(ca_cfar_row(&[1.0; 53], &CfarParams::default()).is_ok());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = CfarParams { pfa: 1.0, ..Default::default() };
        assert!(matches!(ca_cfar_row(&[1.0; 100], &p), Err(CfarError::InvalidParams(_))));
    }

    #[test]
    fn spike_detected_everywhere_including_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hits = 0;
        let trials = 300;
        for t in 0..trials {
            let mut row: Vec<f64> = (0..576).map(|_| Exp1.sample(&mut rng)).collect();
            let pos = (t * 37) % 576;
            row[pos] = 100.0;
            hits += usize::from(ca_cfar_row(&row, &CfarParams::default()).unwrap()[pos]);
        }
        assert!(hits as f64 >= 0.99 * trials as f64, "{hits}/{trials}");
    }

    #[test]
    fn isolated_cell_marks_its_block() {
        let grid = BlockGrid::new(400, 576, 20, 48, 0.9, 0.175).unwrap();
        let mut data = Array2::zeros((400, 576));
        data[[3 * 20 + 5, 7 * 48 + 11]] = 1.0;
        let frame = RadarFrame::new(data, 0.175, 1.0, 0).unwrap();
        let blocks = cfar_important_blocks(&frame, &grid, &CfarParams::default()).unwrap();
        assert_eq!(blocks.into_iter().collect::<Vec<_>>(), vec![BlockIndex { az: 3, rng: 7 }]);

        let zero = RadarFrame::new(Array2::zeros((400, 576)), 0.175, 1.0, 0).unwrap();
        assert!(cfar_important_blocks(&zero, &grid, &CfarParams::default()).unwrap().is_empty());
    }

    #[test]
    fn false_alarm_rate_near_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (rows, cols) = (1000, 1000);
        let data = Array2::from_shape_simple_fn((rows, cols), || Exp1.sample(&mut rng));
        let mask = ca_cfar(&data, &CfarParams::default()).unwrap();
        let rate = mask.iter().filter(|&&m| m).count() as f64 / (rows * cols) as f64;
        assert!((5e-4..=2e-3).contains(&rate), "{rate}");
    }

    proptest! {
        #[test]
        fn mask_is_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f64> = (0..300).map(|_| Exp1.sample(&mut rng)).collect();
            let params = CfarParams { n_train: 40, n_guard: 6, pfa: 0.05 };
            let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
            let a = ca_cfar_row(&row, &params).unwrap();
            let b = ca_cfar_row(&scaled, &params).unwrap();
            // only cells within rounding of the threshold may differ
            let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            prop_assert!(differ == 0, "{differ} cells flipped");
        }

        #[test]
        fn rows_are_independent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_simple_fn((6, 120), || Exp1.sample(&mut rng));
            let params = CfarParams { n_train: 30, n_guard: 4, pfa: 0.05 };
            let mask = ca_cfar(&data, &params).unwrap();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let shuffled = Array2::from_shape_fn((6, 120), |(r, c)| data[[perm[r], c]]);
            let mask2 = ca_cfar(&shuffled, &params).unwrap();
            for r in 0..6 {
                prop_assert_eq!(mask2.row(r), mask.row(perm[r]));
            }
        }
    }
}
