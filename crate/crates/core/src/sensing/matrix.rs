use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SensingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// Dense i.i.d. normal entries with variance `1 / m`.
    Gaussian,
    /// Binary permuted block diagonal: each row sums a disjoint group of
    /// `n / m` samples.
    Bpbd,
    /// Binary permuted diagonal: each row selects one sample.
    Bpd,
}

impl MatrixKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            MatrixKind::Gaussian => 0,
            MatrixKind::Bpbd => 1,
            MatrixKind::Bpd => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MatrixKind::Gaussian),
            1 => Some(MatrixKind::Bpbd),
            2 => Some(MatrixKind::Bpd),
            _ => None,
        }
    }
}

impl std::str::FromStr for MatrixKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(MatrixKind::Gaussian),
            "bpbd" => Ok(MatrixKind::Bpbd),
            "bpd" => Ok(MatrixKind::Bpd),
            other => Err(format!("unknown matrix kind `{other}` (gaussian, bpbd, bpd)")),
        }
    }
}

/// Everything needed to rebuild a measurement matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixDescriptor {
    pub kind: MatrixKind,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
enum Entries {
    /// Row-major `m x n`, with the Cholesky factor of `phi * phi^T`.
    Dense {
        values: Vec<f64>,
        gram: Cholesky<f64, Dyn>,
    },
    /// Row `i` sums columns `perm[i * width .. (i + 1) * width]`; BPD is the
    /// `width == 1` case restricted to the first `m` entries of `perm`.
    Groups { perm: Vec<usize>, width: usize },
}

#[derive(Debug, Clone)]
pub struct MeasurementMatrix {
    desc: MatrixDescriptor,
    entries: Entries,
}

impl MeasurementMatrix {
    /// Deterministic for a fixed `(kind, m, n, seed)`.
    pub fn build(kind: MatrixKind, m: usize, n: usize, seed: u64) -> Result<Self, SensingError> {
        if m == 0 || m > n {
            return Err(SensingError::InvalidMatrix(format!(
                "need 1 <= m <= n, got m = {m}, n = {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = match kind {
            MatrixKind::Gaussian => {
                let scale = 1.0 / (m as f64).sqrt();
                let values: Vec<f64> = (0..m * n)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                let phi = DMatrix::from_row_slice(m, n, &values);
                let gram = Cholesky::new(&phi * phi.transpose()).ok_or_else(|| {
                    SensingError::InvalidMatrix("Gaussian rows are linearly dependent".into())
                })?;
                Entries::Dense { values, gram }
            }
            MatrixKind::Bpbd | MatrixKind::Bpd => {
                if kind == MatrixKind::Bpbd && n % m != 0 {
                    return Err(SensingError::InvalidMatrix(format!(
                        "BPBD needs m to divide n, got m = {m}, n = {n}"
                    )));
                }
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let width = if kind == MatrixKind::Bpbd { n / m } else { 1 };
                perm.truncate(m * width);
                Entries::Groups { perm, width }
            }
        };
        Ok(Self {
            desc: MatrixDescriptor { kind, m, n, seed },
            entries,
        })
    }

    pub fn from_descriptor(desc: MatrixDescriptor) -> Result<Self, SensingError> {
        Self::build(desc.kind, desc.m, desc.n, desc.seed)
    }

    pub fn descriptor(&self) -> MatrixDescriptor {
        self.desc
    }

    pub fn kind(&self) -> MatrixKind {
        self.desc.kind
    }

    pub fn m(&self) -> usize {
        self.desc.m
    }

    pub fn n(&self) -> usize {
        self.desc.n
    }

    /// Columns summed by row `i` (binary kinds only).
    pub fn row_support(&self, i: usize) -> Option<&[usize]> {
        match &self.entries {
            Entries::Groups { perm, width } => Some(&perm[i * width..(i + 1) * width]),
            Entries::Dense { .. } => None,
        }
    }

    /// `out = phi * x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.desc.n);
        debug_assert_eq!(out.len(), self.desc.m);
        match &self.entries {
            Entries::Dense { values, .. } => {
                for (o, row) in out.iter_mut().zip(values.chunks_exact(self.desc.n)) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Entries::Groups { perm, width: 1 } => {
                for (o, &j) in out.iter_mut().zip(perm) {
                    *o = x[j];
                }
            }
            Entries::Groups { perm, width } => {
                for (o, group) in out.iter_mut().zip(perm.chunks_exact(*width)) {
                    *o = group.iter().map(|&j| x[j]).sum();
                }
            }
        }
    }

    /// `out = phi^T * y`.
    pub fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.desc.m);
        debug_assert_eq!(out.len(), self.desc.n);
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.entries {
            Entries::Dense { values, .. } => {
                for (yi, row) in y.iter().zip(values.chunks_exact(self.desc.n)) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * yi;
                    }
                }
            }
            Entries::Groups { perm, width } => {
                for (yi, group) in y.iter().zip(perm.chunks_exact(*width)) {
                    for &j in group {
                        out[j] = *yi;
                    }
                }
            }
        }
    }

    /// Solves `(phi * phi^T) out = rhs`.
    pub fn gram_solve(&self, rhs: &[f64], out: &mut [f64]) {
        match &self.entries {
            Entries::Dense { gram, .. } => {
                let sol = gram.solve(&DVector::from_column_slice(rhs));
                out.copy_from_slice(sol.as_slice());
            }
            Entries::Groups { width, .. } => {
                let inv = 1.0 / *width as f64;
                for (o, r) in out.iter_mut().zip(rhs) {
                    *o = r * inv;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let (m, n) = (self.desc.m, self.desc.n);
        match &self.entries {
            Entries::Dense { values, .. } => Array2::from_shape_vec((m, n), values.clone())
                .expect("dense entries have m * n values"),
            Entries::Groups { perm, width } => {
                let mut a = Array2::zeros((m, n));
                for (i, group) in perm.chunks_exact(*width).enumerate() {
                    for &j in group {
                        a[[i, j]] = 1.0;
                    }
                }
                a
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpd_full_rate_is_permutation() {
        let a = MeasurementMatrix::build(MatrixKind::Bpd, 10, 10, 3).unwrap().to_dense();
        for i in 0..10 {
            assert_eq!(a.row(i).sum(), 1.0);
            assert_eq!(a.column(i).sum(), 1.0);
        }
    }

    #[test]
    fn bpd_rows_select_distinct_columns() {
        let mm = MeasurementMatrix::build(MatrixKind::Bpd, 3, 10, 11).unwrap();
        let a = mm.to_dense();
        assert_eq!(a.dim(), (3, 10));
        let mut cols: Vec<usize> = (0..3).map(|i| mm.row_support(i).unwrap()[0]).collect();
        for i in 0..3 {
            assert_eq!(a.row(i).iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(a.row(i).sum(), 1.0);
        }
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(cols.len(), 3);
    }

    #[test]
    fn bpbd_two_by_four_structure() {
        for seed in 0..20 {
            let mm = MeasurementMatrix::build(MatrixKind::Bpbd, 2, 4, seed).unwrap();
            let a = mm.to_dense();
            // enumerate the structure: two ones per row, each column used once
            for i in 0..2 {
                assert_eq!(a.row(i).sum(), 2.0);
            }
            for j in 0..4 {
                assert_eq!(a.column(j).sum(), 1.0);
            }
            let mut cols: Vec<usize> = (0..2).flat_map(|i| mm.row_support(i).unwrap().to_vec()).collect();
            cols.sort_unstable();
            assert_eq!(cols, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn bpbd_requires_divisibility() {
        assert!(MeasurementMatrix::build(MatrixKind::Bpbd, 3, 10, 0).is_err());
    }

    #[test]
    fn invalid_sizes() {
        assert!(MeasurementMatrix::build(MatrixKind::Bpd, 0, 10, 0).is_err());
        assert!(MeasurementMatrix::build(MatrixKind::Gaussian, 11, 10, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [MatrixKind::Gaussian, MatrixKind::Bpbd, MatrixKind::Bpd] {
            let a = MeasurementMatrix::build(kind, 4, 12, 99).unwrap().to_dense();
            let b = MeasurementMatrix::build(kind, 4, 12, 99).unwrap().to_dense();
            let c = MeasurementMatrix::build(kind, 4, 12, 100).unwrap().to_dense();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn gaussian_variance_is_one_over_m() {
        let m = 50;
        let a = MeasurementMatrix::build(MatrixKind::Gaussian, m, 400, 5).unwrap().to_dense();
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var * m as f64 - 1.0).abs() < 0.05, "var*m = {}", var * m as f64);
    }

    #[test]
    fn apply_and_transpose_match_dense() {
        for kind in [MatrixKind::Gaussian, MatrixKind::Bpbd, MatrixKind::Bpd] {
            let mm = MeasurementMatrix::build(kind, 4, 12, 1).unwrap();
            let a = mm.to_dense();
            let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
            let y: Vec<f64> = (0..4).map(|i| (i as f64).cos()).collect();
            let mut ax = vec![0.0; 4];
            let mut aty = vec![0.0; 12];
            mm.apply(&x, &mut ax);
            mm.apply_transpose(&y, &mut aty);
            for i in 0..4 {
                let want: f64 = (0..12).map(|j| a[[i, j]] * x[j]).sum();
                assert!((ax[i] - want).abs() < 1e-12);
            }
            for j in 0..12 {
                let want: f64 = (0..4).map(|i| a[[i, j]] * y[i]).sum();
                assert!((aty[j] - want).abs() < 1e-12);
            }
            // gram solve inverts phi * phi^T
            let g = a.dot(&a.t());
            let mut sol = vec![0.0; 4];
            mm.gram_solve(&y, &mut sol);
            let back = g.dot(&ndarray::Array1::from(sol));
            for i in 0..4 {
                assert!((back[i] - y[i]).abs() < 1e-9);
            }
        }
    }
}
