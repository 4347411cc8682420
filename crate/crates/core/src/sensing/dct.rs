use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::SensingError;

/// Orthonormal type-II DCT matrix of size `n x n`; row `k` is basis vector `k`.
pub fn dct_matrix(n: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

/// Separable orthonormal 2-D DCT over `rows x cols` blocks.
///
/// `dct2(B) = Dr * B * Dc^T` and `idct2(C) = Dr^T * C * Dc`, where `Dr` and
/// `Dc` are the 1-D DCT matrices along azimuth and range.
#[derive(Debug, Clone)]
pub struct SparsityBasis {
    rows: usize,
    cols: usize,
    dr: Array2<f64>,
    dc: Array2<f64>,
}

impl SparsityBasis {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            dr: dct_matrix(rows),
            dc: dct_matrix(cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, dim: (usize, usize)) -> Result<(), SensingError> {
        if dim != (self.rows, self.cols) {
            return Err(SensingError::DimensionMismatch {
                expected: self.rows * self.cols,
                got: dim.0 * dim.1,
                what: "block",
            });
        }
        Ok(())
    }

    pub fn dct2(&self, block: &ArrayView2<f64>) -> Result<Array2<f64>, SensingError> {
        self.check(block.dim())?;
        let mut tmp = Array2::zeros((self.rows, self.cols));
        let mut out = Array2::zeros((self.rows, self.cols));
        self.forward_into(block, &mut tmp.view_mut(), &mut out.view_mut());
        Ok(out)
    }

    pub fn idct2(&self, coeffs: &ArrayView2<f64>) -> Result<Array2<f64>, SensingError> {
        self.check(coeffs.dim())?;
        let mut tmp = Array2::zeros((self.rows, self.cols));
        let mut out = Array2::zeros((self.rows, self.cols));
        self.inverse_into(coeffs, &mut tmp.view_mut(), &mut out.view_mut());
        Ok(out)
    }

    /// Allocation-free forward transform; `tmp` and `out` are `rows x cols`.
    pub(crate) fn forward_into(
        &self,
        block: &ArrayView2<f64>,
        tmp: &mut ArrayViewMut2<f64>,
        out: &mut ArrayViewMut2<f64>,
    ) {
        general_mat_mul(1.0, &self.dr, block, 0.0, tmp);
        general_mat_mul(1.0, &*tmp, &self.dc.t(), 0.0, out);
    }

    pub(crate) fn inverse_into(
        &self,
        coeffs: &ArrayView2<f64>,
        tmp: &mut ArrayViewMut2<f64>,
        out: &mut ArrayViewMut2<f64>,
    ) {
        general_mat_mul(1.0, &self.dr.t(), coeffs, 0.0, tmp);
        general_mat_mul(1.0, &*tmp, &self.dc, 0.0, out);
    }

    /// Spatial image of DCT basis function `j` (row-major coefficient index),
    /// written row-major into `out`.
    pub(crate) fn basis_image(&self, j: usize, out: &mut [f64]) {
        let (p, q) = (j / self.cols, j % self.cols);
        for r in 0..self.rows {
            let a = self.dr[[p, r]];
            for c in 0..self.cols {
                out[r * self.cols + c] = a * self.dc[[q, c]];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Direct O(n^2) evaluation of the orthonormal DCT-II sum.
    fn naive_dct2(b: &Array2<f64>) -> Array2<f64> {
        let (p, q) = b.dim();
        let pi = std::f64::consts::PI;
        Array2::from_shape_fn((p, q), |(k, l)| {
            let sk = if k == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
            let sl = if l == 0 { (1.0 / q as f64).sqrt() } else { (2.0 / q as f64).sqrt() };
            let mut acc = 0.0;
            for i in 0..p {
                for j in 0..q {
                    acc += b[[i, j]]
                        * (pi * (2 * i + 1) as f64 * k as f64 / (2.0 * p as f64)).cos()
                        * (pi * (2 * j + 1) as f64 * l as f64 / (2.0 * q as f64)).cos();
                }
            }
            sk * sl * acc
        })
    }

    #[test]
    fn constant_block_has_only_dc() {
        let basis = SparsityBasis::new(4, 6);
        let c = basis.dct2(&Array2::from_elem((4, 6), 3.0).view()).unwrap();
        assert_abs_diff_eq!(c[[0, 0]], 3.0 * 24f64.sqrt(), epsilon = 1e-12);
        for ((i, j), v) in c.indexed_iter() {
            if (i, j) != (0, 0) {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_block() {
        let basis = SparsityBasis::new(5, 3);
        let c = basis.dct2(&Array2::zeros((5, 3)).view()).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_sum_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = SparsityBasis::new(20, 48);
        let b = Array2::from_shape_fn((20, 48), |_| rng.gen_range(-5.0..5.0));
        let c = basis.dct2(&b.view()).unwrap();
        let naive = naive_dct2(&b);
        for (x, y) in c.iter().zip(naive.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert!((norm(&c) - norm(&b)).abs() <= 1e-10 * norm(&b));
        let back = basis.idct2(&c.view()).unwrap();
        let err = norm(&(&back - &b));
        assert!(err <= 1e-10 * norm(&b));
    }

    #[test]
    fn basis_image_matches_inverse_of_unit_coefficient() {
        let basis = SparsityBasis::new(4, 5);
        let mut img = vec![0.0; 20];
        for j in [0, 3, 7, 19] {
            let mut e = Array2::zeros((4, 5));
            e[[j / 5, j % 5]] = 1.0;
            let want = basis.idct2(&e.view()).unwrap();
            basis.basis_image(j, &mut img);
            for (a, b) in img.iter().zip(want.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rejects_wrong_shape() {
        let basis = SparsityBasis::new(4, 4);
        assert!(basis.dct2(&Array2::zeros((4, 5)).view()).is_err());
    }
}
