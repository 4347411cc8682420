//! Block compressed sensing: measurement matrices, the DCT sparsity basis,
//! per-block compression, basis-pursuit reconstruction and the uniform
//! quantiser used for anchor frames.
//!
//! Blocks are vectorised row-major (azimuth major). The reconstruction of a
//! block with measurements `y = phi * vec(x)` is `idct2(c)` where `c` solves
//! `min ||c||_1  s.t.  phi * vec(idct2(c)) = y`.

pub mod basis_pursuit;
pub mod dct;
pub mod matrix;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::SamplingPlan;
use crate::geometry::{BlockGrid, BlockIndex, GeometryError, RadarFrame};

pub use basis_pursuit::{BpSolution, NotConverged, SensingOperator, SolverSettings};
pub use dct::SparsityBasis;
pub use matrix::{MatrixDescriptor, MatrixKind, MeasurementMatrix};

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        what: &'static str,
    },
    #[error("invalid measurement matrix: {0}")]
    InvalidMatrix(String),
    #[error(
        "basis pursuit did not converge after {} iterations (relative gap {:.3e}, residual {:.3e})",
        .0.iterations, .0.rel_gap, .0.residual
    )]
    NotConverged(Box<NotConverged>),
    #[error("measurement set does not match its matrix: {0}")]
    DescriptorMismatch(String),
    #[error("sampling plan does not match the grid: {0}")]
    PlanMismatch(String),
    #[error("quantisation depth must be in 1..=16, got {0}")]
    InvalidBits(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Compressed samples of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub block: BlockIndex,
    pub desc: MatrixDescriptor,
    pub y: Vec<f64>,
}

/// `A = phi * Psi^T`: DCT coefficients of a block to its measurements.
pub struct BlockOperator<'a> {
    matrix: &'a MeasurementMatrix,
    basis: &'a SparsityBasis,
    image: Vec<f64>,
    tmp: Array2<f64>,
    out: Array2<f64>,
}

impl<'a> BlockOperator<'a> {
    pub fn new(matrix: &'a MeasurementMatrix, basis: &'a SparsityBasis) -> Result<Self, SensingError> {
        if matrix.n() != basis.len() {
            return Err(SensingError::DimensionMismatch {
                expected: basis.len(),
                got: matrix.n(),
                what: "matrix column count",
            });
        }
        let dim = (basis.rows(), basis.cols());
        Ok(Self {
            matrix,
            basis,
            image: vec![0.0; basis.len()],
            tmp: Array2::zeros(dim),
            out: Array2::zeros(dim),
        })
    }
}

impl SensingOperator for BlockOperator<'_> {
    fn rows(&self) -> usize {
        self.matrix.m()
    }

    fn cols(&self) -> usize {
        self.matrix.n()
    }

    fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        let dim = (self.basis.rows(), self.basis.cols());
        let coeffs = ArrayView2::from_shape(dim, x).expect("coefficient length checked at construction");
        let mut img = ArrayViewMut2::from_shape(dim, &mut self.image[..]).expect("scratch sized to basis");
        self.basis
            .inverse_into(&coeffs, &mut self.tmp.view_mut(), &mut img);
        self.matrix.apply(&self.image, out);
    }

    fn adjoint(&mut self, y: &[f64], out: &mut [f64]) {
        let dim = (self.basis.rows(), self.basis.cols());
        self.matrix.apply_transpose(y, &mut self.image);
        let img = ArrayView2::from_shape(dim, &self.image[..]).expect("scratch sized to basis");
        self.basis
            .forward_into(&img, &mut self.tmp.view_mut(), &mut self.out.view_mut());
        out.copy_from_slice(self.out.as_slice().expect("owned arrays are contiguous"));
    }

    fn gram_solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        // Psi is orthonormal, so A A^T = phi phi^T.
        self.matrix.gram_solve(rhs, out);
    }

    fn column(&mut self, j: usize, out: &mut [f64]) {
        self.basis.basis_image(j, &mut self.image);
        self.matrix.apply(&self.image, out);
    }
}

fn vectorize(block: &ArrayView2<f64>) -> Vec<f64> {
    block.iter().copied().collect()
}

/// `y = phi * vec(block)`.
pub fn compress_block(
    block: &ArrayView2<f64>,
    matrix: &MeasurementMatrix,
    index: BlockIndex,
) -> Result<MeasurementSet, SensingError> {
    if block.len() != matrix.n() {
        return Err(SensingError::DimensionMismatch {
            expected: matrix.n(),
            got: block.len(),
            what: "block",
        });
    }
    let x = vectorize(block);
    let mut y = vec![0.0; matrix.m()];
    matrix.apply(&x, &mut y);
    Ok(MeasurementSet {
        block: index,
        desc: matrix.descriptor(),
        y,
    })
}

fn check_set(ms: &MeasurementSet, basis: &SparsityBasis) -> Result<(), SensingError> {
    if ms.desc.n != basis.len() {
        return Err(SensingError::DimensionMismatch {
            expected: basis.len(),
            got: ms.desc.n,
            what: "measurement descriptor n",
        });
    }
    if ms.y.len() != ms.desc.m {
        return Err(SensingError::DimensionMismatch {
            expected: ms.desc.m,
            got: ms.y.len(),
            what: "measurement vector",
        });
    }
    Ok(())
}

/// Basis-pursuit reconstruction of one block. A set with no measurements
/// reconstructs to the zero block.
pub fn reconstruct_block(
    ms: &MeasurementSet,
    matrix: &MeasurementMatrix,
    basis: &SparsityBasis,
    settings: &SolverSettings,
) -> Result<Array2<f64>, SensingError> {
    check_set(ms, basis)?;
    if ms.desc.m == 0 {
        return Ok(Array2::zeros((basis.rows(), basis.cols())));
    }
    if matrix.descriptor() != ms.desc {
        return Err(SensingError::DescriptorMismatch(format!(
            "{:?} vs {:?}",
            matrix.descriptor(),
            ms.desc
        )));
    }
    if let Some(block) = permutation_inverse(matrix, &ms.y, basis) {
        return Ok(block);
    }
    let mut op = BlockOperator::new(matrix, basis)?;
    let sol = basis_pursuit::solve(&mut op, &ms.y, settings)?;
    coeffs_to_block(&sol.coeffs, basis)
}

/// A square binary matrix with one entry per row is a permutation; its
/// measurements are the samples themselves and are put back directly.
fn permutation_inverse(matrix: &MeasurementMatrix, y: &[f64], basis: &SparsityBasis) -> Option<Array2<f64>> {
    if matrix.m() != matrix.n() {
        return None;
    }
    let mut x = vec![0.0; matrix.n()];
    for (i, &v) in y.iter().enumerate() {
        match matrix.row_support(i)? {
            [j] => x[*j] = v,
            _ => return None,
        }
    }
    Array2::from_shape_vec((basis.rows(), basis.cols()), x).ok()
}

fn coeffs_to_block(coeffs: &[f64], basis: &SparsityBasis) -> Result<Array2<f64>, SensingError> {
    let c = Array2::from_shape_vec((basis.rows(), basis.cols()), coeffs.to_vec())
        .map_err(|e| SensingError::InvalidMatrix(e.to_string()))?;
    basis.idct2(&c.view())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-block matrix seed derived from the run seed, the frame and the block.
pub fn block_seed(base_seed: u64, frame_index: u32, block: BlockIndex) -> u64 {
    let mut h = splitmix64(base_seed);
    h = splitmix64(h ^ u64::from(frame_index));
    h = splitmix64(h ^ block.az as u64);
    splitmix64(h ^ (block.rng as u64).rotate_left(32))
}

/// Measurement count for a block of `n` samples at `rate`: `round(rate * n)`
/// with a floor of one for any positive rate. BPBD additionally needs `m` to
/// divide `n`, so it takes the largest divisor not above that count.
pub fn measurement_count(rate: f64, n: usize, kind: MatrixKind) -> usize {
    if rate <= 0.0 || n == 0 {
        return 0;
    }
    let m = ((rate * n as f64).round() as usize).clamp(1, n);
    match kind {
        MatrixKind::Bpbd => (1..=m).rev().find(|d| n % d == 0).unwrap_or(1),
        _ => m,
    }
}

/// Compresses every block of `frame` at the rate assigned by `plan`, in grid
/// order.
pub fn compress_frame(
    frame: &RadarFrame,
    grid: &BlockGrid,
    plan: &SamplingPlan,
    kind: MatrixKind,
    base_seed: u64,
) -> Result<Vec<MeasurementSet>, SensingError> {
    if grid.rows() != frame.rows() || grid.cols() != frame.cols() {
        return Err(SensingError::PlanMismatch(format!(
            "grid covers {}x{} but frame is {}x{}",
            grid.rows(),
            grid.cols(),
            frame.rows(),
            frame.cols()
        )));
    }
    plan.check_grid(grid)
        .map_err(|e| SensingError::PlanMismatch(e.to_string()))?;
    let n = grid.block_len();
    let blocks: Vec<BlockIndex> = grid.blocks().collect();
    blocks
        .par_iter()
        .map(|&idx| {
            let m = measurement_count(plan.rate(grid, idx), n, kind);
            let seed = block_seed(base_seed, frame.frame_index(), idx);
            if m == 0 {
                return Ok(MeasurementSet {
                    block: idx,
                    desc: MatrixDescriptor { kind, m: 0, n, seed },
                    y: Vec::new(),
                });
            }
            let matrix = MeasurementMatrix::build(kind, m, n, seed)?;
            compress_block(&frame.block(grid, idx), &matrix, idx)
        })
        .collect()
}

/// Outcome of reconstructing a whole frame.
#[derive(Debug, Clone)]
pub struct FrameReconstruction {
    /// Reassembled frame, clamped into `[0, peak]`.
    pub frame: RadarFrame,
    /// Blocks whose solver hit the iteration cap; their best feasible
    /// iterate was used.
    pub unconverged_blocks: usize,
    /// Largest `||A c - y||_2 / max(1, ||y||_2)` over blocks.
    pub max_rel_residual: f64,
    pub total_iterations: usize,
}

/// Reconstructs a frame from per-block measurement sets. `like` supplies the
/// frame metadata (shape, resolution, peak, index).
pub fn reconstruct_frame(
    sets: &[MeasurementSet],
    grid: &BlockGrid,
    like: &RadarFrame,
    settings: &SolverSettings,
) -> Result<FrameReconstruction, SensingError> {
    if sets.len() != grid.n_blocks() {
        return Err(SensingError::PlanMismatch(format!(
            "{} measurement sets for {} blocks",
            sets.len(),
            grid.n_blocks()
        )));
    }
    let basis = SparsityBasis::new(grid.block_rows, grid.block_cols);
    let solved: Vec<(BlockIndex, Array2<f64>, bool, f64, usize)> = sets
        .par_iter()
        .map(|ms| {
            if !grid.contains(ms.block) {
                return Err(SensingError::PlanMismatch(format!("block {:?} outside grid", ms.block)));
            }
            check_set(ms, &basis)?;
            if ms.desc.m == 0 {
                return Ok((ms.block, Array2::zeros((grid.block_rows, grid.block_cols)), false, 0.0, 0));
            }
            let matrix = MeasurementMatrix::from_descriptor(ms.desc)?;
            if let Some(block) = permutation_inverse(&matrix, &ms.y, &basis) {
                return Ok((ms.block, block, false, 0.0, 0));
            }
            let mut op = BlockOperator::new(&matrix, &basis)?;
            let scale = ms.y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            let (coeffs, converged, residual, iters) =
                match basis_pursuit::solve(&mut op, &ms.y, settings) {
                    Ok(sol) => (sol.coeffs, true, sol.residual, sol.iterations),
                    Err(SensingError::NotConverged(nc)) => {
                        log::debug!(
                            "block {:?}: gap {:.2e} after {} iterations",
                            ms.block,
                            nc.rel_gap,
                            nc.iterations
                        );
                        (nc.best, false, nc.residual, nc.iterations)
                    }
                    Err(e) => return Err(e),
                };
            Ok((ms.block, coeffs_to_block(&coeffs, &basis)?, !converged, residual / scale, iters))
        })
        .collect::<Result<_, _>>()?;

    let mut data = Array2::zeros((grid.rows(), grid.cols()));
    let mut unconverged_blocks = 0;
    let mut max_rel_residual: f64 = 0.0;
    let mut total_iterations = 0;
    for (idx, block, unconverged, res, iters) in solved {
        let (r0, c0) = grid.origin(idx);
        data.slice_mut(s![r0..r0 + grid.block_rows, c0..c0 + grid.block_cols])
            .assign(&block);
        unconverged_blocks += usize::from(unconverged);
        max_rel_residual = max_rel_residual.max(res);
        total_iterations += iters;
    }
    let frame = RadarFrame::from_clamped(data, like.range_res(), like.peak_value(), like.frame_index())?;
    Ok(FrameReconstruction {
        frame,
        unconverged_blocks,
        max_rel_residual,
        total_iterations,
    })
}

/// Uniform quantisation of `[0, peak]` into `2^bits` levels, dequantised to
/// bin midpoints. Zero therefore maps to the lowest midpoint `peak / 2^(bits+1)`.
pub fn quantize_frame(frame: &RadarFrame, bits: u32) -> Result<RadarFrame, SensingError> {
    if !(1..=16).contains(&bits) {
        return Err(SensingError::InvalidBits(bits));
    }
    let levels = (1u32 << bits) as f64;
    let step = frame.peak_value() / levels;
    let q = frame.data().mapv(|v| {
        let bin = (v / step).floor().clamp(0.0, levels - 1.0);
        (bin + 0.5) * step
    });
    Ok(frame.with_data(q)?)
}
