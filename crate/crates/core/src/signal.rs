//! Signal-side model: observation masks, matrix-normal sampling with Laplacian
//! precisions, the twofold smoothness functional, coupling kernels and
//! SNR-controlled Gaussian noise.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_shape, check_square, Error, Result};
use crate::graph::{Laplacian, SignedLaplacian};
use crate::matrix::{all_finite, frob_inner, min_eigenvalue, pinv_sqrt, symmetrize, Mat};
use crate::rng::rng;

/// Eigenvalues at or below this are the nullspace when sampling.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Binary `N×M` observation mask stored as 0.0 / 1.0 so it can be applied
/// with a Hadamard product.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Mat);

impl Mask {
    pub fn new(m: Mat) -> Result<Self> {
        if let Some(((i, j), v)) = m.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::Validation(format!("mask entry ({i},{j}) = {v} is not binary")));
        }
        Ok(Mask(m))
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask(Array2::ones((rows, cols)))
    }

    pub fn from_bools(rows: usize, cols: usize, mut observed: impl FnMut(usize, usize) -> bool) -> Self {
        Mask(Array2::from_shape_fn((rows, cols), |(i, j)| if observed(i, j) { 1.0 } else { 0.0 }))
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// `1 − M`, the selector of unobserved entries.
    pub fn complement(&self) -> Mat {
        self.0.mapv(|v| 1.0 - v)
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        &self.0 * x
    }

    pub fn missing_count(&self) -> usize {
        self.0.iter().filter(|v| **v == 0.0).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.0.len() as f64
    }
}

/// Draws `X = A Z B` with `A = L_s^{†/2}`, `B = L̄_m^{†/2}` and `Z` i.i.d.
/// standard normal, so that `X ~ MN(0, L_s†, L̄_m†)`.
pub fn sample_matrix_normal(spatial: &Laplacian, modality: &SignedLaplacian, seed: u64) -> Result<Mat> {
    let a = sqrt_covariance(spatial.matrix(), "spatial")?;
    let b = sqrt_covariance(modality.matrix(), "modality")?;
    Ok(sample_with_factors(&a, &b, seed))
}

/// Symmetric square root of the pseudo-inverse of a PSD precision matrix.
pub fn sqrt_covariance(precision: &Mat, name: &str) -> Result<Mat> {
    check_square(name, precision.nrows(), precision.ncols())?;
    let lmin = min_eigenvalue(precision);
    if lmin < -1e-8 {
        return Err(Error::Numerical(format!("{name} precision is not PSD (min eigenvalue {lmin:e})")));
    }
    Ok(pinv_sqrt(precision, PINV_CUTOFF))
}

/// Sampling with precomputed covariance factors; used when many samples share
/// one pair of graphs.
pub fn sample_with_factors(row_factor: &Mat, col_factor: &Mat, seed: u64) -> Mat {
    let mut r = rng(seed);
    let z = Array2::from_shape_simple_fn((row_factor.ncols(), col_factor.nrows()), || StandardNormal.sample(&mut r));
    row_factor.dot(&z).dot(col_factor)
}

fn check_pair(x: &Mat, ls: &Mat, lm: &Mat) -> Result<()> {
    let (n, m) = x.dim();
    check_shape("spatial laplacian", ls.dim(), (n, n))?;
    check_shape("modality laplacian", lm.dim(), (m, m))
}

/// `tr(L_m Xᵀ L_s X)`, evaluated as `⟨L_s X, X L_m⟩_F`.
pub fn twofold_smoothness(x: &Mat, ls: &Mat, lm: &Mat) -> Result<f64> {
    check_pair(x, ls, lm)?;
    Ok(frob_inner(&ls.dot(x), &x.dot(lm)))
}

/// `K = Xᵀ L_s X` (M×M): co-variation of modalities through the spatial graph.
pub fn modality_kernel(x: &Mat, ls: &Mat) -> Result<Mat> {
    check_shape("spatial laplacian", ls.dim(), (x.nrows(), x.nrows()))?;
    Ok(symmetrize(&x.t().dot(&ls.dot(x))))
}

/// `K = X L_m Xᵀ` (N×N): co-variation of nodes through the modality graph.
pub fn spatial_kernel(x: &Mat, lm: &Mat) -> Result<Mat> {
    check_shape("modality laplacian", lm.dim(), (x.ncols(), x.ncols()))?;
    Ok(symmetrize(&x.dot(&lm.dot(&x.t()))))
}

/// Noise variance for a target SNR, measured against per-entry signal power.
pub fn noise_variance(x: &Mat, snr_db: f64) -> Result<f64> {
    let power = frob_inner(x, x) / x.len() as f64;
    if !(power > 0.0) {
        return Err(Error::Parameter("SNR is undefined for an all-zero signal".into()));
    }
    Ok(power / 10f64.powf(snr_db / 10.0))
}

/// `Y = X + E` with `E_ij ~ N(0, σ²)` chosen to hit `snr_db`. An infinite SNR
/// returns `X` unchanged.
pub fn add_noise_snr(x: &Mat, snr_db: f64, seed: u64) -> Result<Mat> {
    if !all_finite(x) {
        return Err(Error::Validation("signal has non-finite entries".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    let sigma = noise_variance(x, snr_db)?.sqrt();
    let mut r = rng(seed);
    Ok(x.mapv(|v| {
        let e: f64 = StandardNormal.sample(&mut r);
        v + sigma * e
    }))
}
