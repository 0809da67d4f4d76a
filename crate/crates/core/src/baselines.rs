//! Reference restorers: graph low-pass filtering and iterative hard-impute.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::alt::initial_spatial;
use crate::error::{Error, Result};
use crate::graph::Laplacian;
use crate::matrix::{to_na, truncated_svd, Mat};
use crate::signal::Mask;

pub const GLF_ALPHA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];
pub const SVD_RANK_GRID: std::ops::RangeInclusive<usize> = 1..=8;
pub const SVD_ITERS: usize = 25;

fn check(y: &Mat, mask: &Mask) -> Result<()> {
    if y.dim() != mask.dim() {
        return Err(Error::Dimension(format!("mask {:?} vs signal {:?}", mask.dim(), y.dim())));
    }
    Ok(())
}

/// `X = (I + αL)⁻¹ (M∘Y)`, column by column.
pub fn glf_with_laplacian(y: &Mat, mask: &Mask, l: &Laplacian, alpha: f64) -> Result<Mat> {
    check(y, mask)?;
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
    }
    let n = y.nrows();
    if l.size() != n {
        return Err(Error::Dimension(format!("Laplacian is {}×{0}, signal has {n} rows", l.size())));
    }
    let a = DMatrix::identity(n, n) + to_na(l.matrix()) * alpha;
    let chol = a.cholesky().ok_or_else(|| Error::Numerical("I + αL is not positive definite".into()))?;
    let x = chol.solve(&to_na(&mask.apply(y)));
    Ok(Array2::from_shape_fn(y.dim(), |(i, j)| x[(i, j)]))
}

/// GLF on the 6-NN graph over rows of `M∘Y` (missing entries zero-filled).
pub fn baseline_glf(y: &Mat, mask: &Mask, alpha: f64) -> Result<Mat> {
    check(y, mask)?;
    let l = initial_spatial(y, mask)?;
    glf_with_laplacian(y, mask, &l, alpha)
}

/// Hard-impute: `X ← M∘Y + (1−M)∘svd_r(X)` from `X⁰ = M∘Y`.
pub fn baseline_svd(y: &Mat, mask: &Mask, rank: usize, iters: usize) -> Result<Mat> {
    check(y, mask)?;
    let (n, m) = y.dim();
    if rank == 0 || rank > n.min(m) {
        return Err(Error::Parameter(format!("rank must be in 1..={}, got {rank}", n.min(m))));
    }
    let observed = mask.apply(y);
    let missing = mask.complement();
    let mut x = observed.clone();
    for _ in 0..iters {
        x = &observed + &(&missing * &truncated_svd(&x, rank));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{laplacian_from_adjacency, path_graph};
    use crate::matrix::frob_norm;
    use crate::rng::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(n: usize, m: usize, seed: u64) -> Mat {
        let mut r = rng(seed);
        Array2::from_shape_simple_fn((n, m), || r.sample(StandardNormal))
    }

    #[test]
    fn glf_alpha_zero_is_identity() {
        let y = randn(10, 4, 1);
        let x = baseline_glf(&y, &Mask::full(10, 4), 0.0).unwrap();
        assert!(frob_norm(&(&x - &y)) < 1e-12);
    }

    #[test]
    fn glf_preserves_constants() {
        let y = Array2::from_shape_fn((9, 3), |(_, j)| j as f64 - 1.5);
        for alpha in [0.1, 1.0, 100.0] {
            let x = baseline_glf(&y, &Mask::full(9, 3), alpha).unwrap();
            assert!(frob_norm(&(&x - &y)) < 1e-10);
        }
    }

    #[test]
    fn glf_large_alpha_tends_to_column_mean() {
        let y = randn(12, 3, 2);
        let l = laplacian_from_adjacency(&path_graph(12));
        let x = glf_with_laplacian(&y, &Mask::full(12, 3), &l, 1e6).unwrap();
        for j in 0..3 {
            let mean = y.column(j).mean().unwrap();
            for i in 0..12 {
                assert!((x[[i, j]] - mean).abs() < 1e-3);
            }
        }
        assert!(glf_with_laplacian(&y, &Mask::full(12, 3), &l, -1.0).is_err());
    }

    #[test]
    fn svd_full_mask_returns_observation() {
        let y = randn(8, 6, 3);
        for r in [1, 3, 6] {
            let x = baseline_svd(&y, &Mask::full(8, 6), r, SVD_ITERS).unwrap();
            assert!(frob_norm(&(&x - &y)) < 1e-12);
        }
        assert!(baseline_svd(&y, &Mask::full(8, 6), 0, 5).is_err());
        assert!(baseline_svd(&y, &Mask::full(8, 6), 7, 5).is_err());
    }

    #[test]
    fn svd_recovers_low_rank_truth() {
        let truth = randn(30, 2, 4).dot(&randn(2, 20, 5));
        let mut r = rng(6);
        let mask = Mask::from_bools(30, 20, |_, _| r.random::<f64>() >= 0.1);
        let x = baseline_svd(&truth, &mask, 2, 500).unwrap();
        let miss = mask.complement();
        let err = frob_norm(&(&miss * &(&x - &truth)));
        let scale = frob_norm(&(&miss * &truth));
        assert!(err <= 1e-3 * scale, "{err} vs {scale}");
    }

    #[test]
    fn svd_full_rank_keeps_observed_entries() {
        let y = randn(6, 5, 7);
        let mut r = rng(8);
        let mask = Mask::from_bools(6, 5, |_, _| r.random::<f64>() >= 0.3);
        let x = baseline_svd(&y, &mask, 5, 10).unwrap();
        let obs = mask.values();
        for ((i, j), v) in x.indexed_iter() {
            if obs[[i, j]] == 1.0 {
                assert_eq!(*v, y[[i, j]]);
            }
        }
    }
}
