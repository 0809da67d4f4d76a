//! Signal reconstruction for fixed graphs: the masked Sylvester system
//!
//! ```text
//! H(X) = M∘X + μ L_s X L_m = M∘Y
//! ```
//!
//! solved by conjugate gradient on `R^{N×M}` with the Frobenius inner
//! product. `H` is applied as two matrix products; the `NM×NM` Kronecker
//! system is only ever formed by [`dense_oracle_restore`] for testing.

use crate::error::{check_shape, Error, Result};
use crate::matrix::{all_finite, frob_inner, kron, solve_dense, unvec_cols, vec_cols, Mat};
use crate::signal::Mask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestoreConfig {
    /// Weight of the twofold smoothness term.
    pub mu: f64,
    /// Iteration cap.
    pub max_iters: usize,
    /// Residual tolerance on `‖R‖_F`.
    pub tol: f64,
    /// Scale `tol` by `‖M∘Y‖_F`.
    pub relative_tol: bool,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig { mu: 1.0, max_iters: 500, tol: 1e-8, relative_tol: true }
    }
}

impl RestoreConfig {
    /// Exactly `k` CG steps, no early exit except on an exactly zero residual.
    pub fn fixed_steps(mu: f64, k: usize) -> Self {
        RestoreConfig { mu, max_iters: k, tol: 0.0, relative_tol: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || self.max_iters == 0 || !(self.tol >= 0.0) {
            return Err(Error::Parameter(format!("invalid restore config {self:?}")));
        }
        Ok(())
    }
}

fn check_dims(y: &Mat, mask: &Mask, ls: &Mat, lm: &Mat) -> Result<()> {
    let (n, m) = y.dim();
    check_shape("mask", mask.dim(), (n, m))?;
    check_shape("spatial laplacian", ls.dim(), (n, n))?;
    check_shape("modality laplacian", lm.dim(), (m, m))
}

/// `H(X) = M∘X + μ L_s X L_m`.
pub fn apply_operator(x: &Mat, mask: &Mask, mu: f64, ls: &Mat, lm: &Mat) -> Result<Mat> {
    check_dims(x, mask, ls, lm)?;
    Ok(apply_unchecked(x, mask.values(), mu, ls, lm))
}

#[inline]
pub(crate) fn apply_unchecked(x: &Mat, mask: &Mat, mu: f64, ls: &Mat, lm: &Mat) -> Mat {
    let mut out = ls.dot(x).dot(lm);
    out *= mu;
    out += &(mask * x);
    out
}

/// `F(X) = ½‖M∘(Y−X)‖² + (μ/2) tr(L_m Xᵀ L_s X)`.
pub fn restore_objective(x: &Mat, y: &Mat, mask: &Mask, mu: f64, ls: &Mat, lm: &Mat) -> f64 {
    let r = mask.apply(&(y - x));
    0.5 * frob_inner(&r, &r) + 0.5 * mu * frob_inner(&ls.dot(x), &x.dot(lm))
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Mat,
    /// `‖R^{(k)}‖_F` for k = 0..=iters.
    pub residuals: Vec<f64>,
    pub iters: usize,
    /// Set when `⟨P, H(P)⟩` collapsed; `x` is then the last finite iterate.
    pub breakdown: bool,
    /// Step sizes `κ^{(k)}` actually taken.
    pub kappas: Vec<f64>,
    /// Conjugacy coefficients `ξ^{(k)}` actually used.
    pub xis: Vec<f64>,
}

/// Conjugate gradient on the masked Sylvester system. `x0` defaults to `M∘Y`.
pub fn cg_restore(
    y: &Mat,
    mask: &Mask,
    ls: &Mat,
    lm: &Mat,
    cfg: &RestoreConfig,
    x0: Option<&Mat>,
) -> Result<CgOutcome> {
    check_dims(y, mask, ls, lm)?;
    cfg.validate()?;
    let m = mask.values();
    let b = m * y;
    let eps = if cfg.relative_tol { cfg.tol * frob_inner(&b, &b).sqrt() } else { cfg.tol };

    let mut x = match x0 {
        Some(x0) => {
            check_shape("initial guess", x0.dim(), y.dim())?;
            x0.clone()
        }
        None => b.clone(),
    };
    let mut r = &b - &apply_unchecked(&x, m, cfg.mu, ls, lm);
    let mut p = r.clone();
    let mut rr = frob_inner(&r, &r);
    let mut out = CgOutcome {
        x: Mat::zeros((0, 0)),
        residuals: vec![rr.sqrt()],
        iters: 0,
        breakdown: false,
        kappas: Vec::new(),
        xis: Vec::new(),
    };

    while out.iters < cfg.max_iters && rr.sqrt() >= eps && rr > 0.0 {
        let s = apply_unchecked(&p, m, cfg.mu, ls, lm);
        let curv = frob_inner(&p, &s);
        if curv <= 1e-14 * frob_inner(&p, &p) {
            out.breakdown = true;
            break;
        }
        let kappa = rr / curv;
        x.scaled_add(kappa, &p);
        r.scaled_add(-kappa, &s);
        let rr_next = frob_inner(&r, &r);
        let xi = rr_next / rr;
        p *= xi;
        p += &r;
        rr = rr_next;
        out.iters += 1;
        out.kappas.push(kappa);
        out.xis.push(xi);
        out.residuals.push(rr.sqrt());
        if !rr.is_finite() || !all_finite(&x) {
            return Err(Error::Numerical(format!("CG iterate became non-finite at step {}", out.iters)));
        }
    }
    out.x = x;
    Ok(out)
}

/// Direct solve of `(μ L_m ⊗ L_s + diag(vec M)) vec X = vec(M∘Y)`.
/// Test oracle only; limited to `N·M ≤ 4096`.
pub fn dense_oracle_restore(y: &Mat, mask: &Mask, mu: f64, ls: &Mat, lm: &Mat) -> Result<Mat> {
    check_dims(y, mask, ls, lm)?;
    let (n, m) = y.dim();
    if n * m > 4096 {
        return Err(Error::Parameter(format!("dense oracle limited to NM <= 4096, got {}", n * m)));
    }
    let mut sys = kron(lm, ls) * mu;
    let mv = vec_cols(mask.values());
    for (i, v) in mv.iter().enumerate() {
        sys[[i, i]] += v;
    }
    let rhs = vec_cols(&mask.apply(y));
    let (sol, cond) = solve_dense(&sys, &rhs)?;
    if !(cond <= 1e12) {
        return Err(Error::Numerical(format!("dense system is singular (condition {cond:e})")));
    }
    Ok(unvec_cols(&sol, n, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::laplacian;
    use crate::matrix::frob_norm;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn connected_laplacian(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = if j == i + 1 || rng.random::<f64>() < 0.4 { rng.random_range(0.1..1.0) } else { 0.0 };
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
        laplacian(w).unwrap().into_inner()
    }

    fn rand_mask(n: usize, m: usize, missing: f64, rng: &mut ChaCha8Rng) -> Mask {
        Mask::from_bools(n, m, |_, _| rng.random::<f64>() >= missing)
    }

    #[test]
    fn operator_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(5, 4, &mut rng);
        let ls = connected_laplacian(5, &mut rng);
        let lm = connected_laplacian(4, &mut rng);
        let mask = rand_mask(5, 4, 0.3, &mut rng);
        assert_eq!(apply_operator(&x, &mask, 0.0, &ls, &lm).unwrap(), mask.apply(&x));
        let full = Mask::full(5, 4);
        let h = apply_operator(&x, &full, 0.7, &Array2::eye(5), &Array2::eye(4)).unwrap();
        assert!(frob_norm(&(h - &x * 1.7)) < 1e-14);
    }

    #[test]
    fn operator_is_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = rand_mat(5, 4, &mut rng);
            let z = rand_mat(5, 4, &mut rng);
            let ls = connected_laplacian(5, &mut rng);
            let lm = connected_laplacian(4, &mut rng);
            let mask = rand_mask(5, 4, 0.3, &mut rng);
            let a = frob_inner(&apply_operator(&x, &mask, 0.8, &ls, &lm).unwrap(), &z);
            let b = frob_inner(&x, &apply_operator(&z, &mask, 0.8, &ls, &lm).unwrap());
            assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn identity_operator_converges_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_mat(4, 3, &mut rng);
        let cfg = RestoreConfig { mu: 0.0, ..Default::default() };
        let zero = Array2::zeros((4, 3));
        let out = cg_restore(&y, &Mask::full(4, 3), &Array2::eye(4), &Array2::eye(3), &cfg, Some(&zero)).unwrap();
        assert_eq!(out.iters, 1);
        assert!(frob_norm(&(&out.x - &y)) < 1e-14);
    }

    #[test]
    fn zero_data_takes_zero_iterations() {
        let y = Array2::zeros((4, 3));
        let out =
            cg_restore(&y, &Mask::full(4, 3), &Array2::eye(4), &Array2::eye(3), &RestoreConfig::default(), Some(&y))
                .unwrap();
        assert_eq!(out.iters, 0);
        assert_eq!(out.x, y);
    }

    #[test]
    fn cg_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RestoreConfig { mu: 0.5, max_iters: 200, tol: 1e-13, relative_tol: true };
        let mut checked = 0;
        while checked < 10 {
            let y = rand_mat(6, 5, &mut rng);
            let ls = connected_laplacian(6, &mut rng);
            let lm = connected_laplacian(5, &mut rng);
            let mask = rand_mask(6, 5, 0.3, &mut rng);
            let Ok(oracle) = dense_oracle_restore(&y, &mask, 0.5, &ls, &lm) else { continue };
            let cg = cg_restore(&y, &mask, &ls, &lm, &cfg, None).unwrap();
            assert!(frob_norm(&(&cg.x - &oracle)) <= 1e-8 * frob_norm(&oracle));
            let res = apply_operator(&oracle, &mask, 0.5, &ls, &lm).unwrap() - mask.apply(&y);
            assert!(frob_norm(&res) <= 1e-8 * frob_norm(&y));
            checked += 1;
        }
    }

    #[test]
    fn oracle_with_full_mask_and_no_smoothing_returns_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = rand_mat(3, 3, &mut rng);
        let x = dense_oracle_restore(&y, &Mask::full(3, 3), 0.0, &Array2::eye(3), &Array2::eye(3)).unwrap();
        assert!(frob_norm(&(x - &y)) < 1e-14);
    }

    #[test]
    fn oracle_reports_singular_systems() {
        // Nothing observed and constant vectors in both nullspaces.
        let lsn = laplacian(ndarray::array![[0.0, 1.0], [1.0, 0.0]]).unwrap().into_inner();
        let mask = Mask::from_bools(2, 2, |_, _| false);
        let y = Array2::ones((2, 2));
        assert!(matches!(dense_oracle_restore(&y, &mask, 1.0, &lsn, &lsn), Err(Error::Numerical(_))));
    }

    #[test]
    fn non_positive_curvature_sets_breakdown_flag() {
        // An indefinite "Laplacian" gives a search direction with negative
        // curvature; CG stops there instead of dividing by it.
        let indefinite = ndarray::array![[1.0, 2.0], [2.0, 1.0]];
        let mask = Mask::from_bools(2, 2, |_, _| false);
        let y = Array2::zeros((2, 2));
        let x0 = ndarray::array![[1.0, -1.0], [-1.0, 1.0]];
        let out = cg_restore(&y, &mask, &indefinite, &Array2::eye(2), &RestoreConfig::default(), Some(&x0)).unwrap();
        assert!(out.breakdown);
        assert_eq!(out.x, x0);
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let y = rand_mat(6, 5, &mut rng);
            let ls = connected_laplacian(6, &mut rng);
            let lm = connected_laplacian(5, &mut rng);
            let mask = rand_mask(6, 5, 0.3, &mut rng);
            // A k-step run ends at the k-th iterate of any longer run.
            let mut prev = restore_objective(&mask.apply(&y), &y, &mask, 0.5, &ls, &lm);
            for k in 1..=20 {
                let x = cg_restore(&y, &mask, &ls, &lm, &RestoreConfig::fixed_steps(0.5, k), None).unwrap().x;
                let f = restore_objective(&x, &y, &mask, 0.5, &ls, &lm);
                assert!(f <= prev + 1e-10, "step {k}: {f} > {prev}");
                prev = f;
            }
        }
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = rand_mat(5, 4, &mut rng);
        let ls = connected_laplacian(5, &mut rng);
        let lm = connected_laplacian(4, &mut rng);
        let mask = rand_mask(5, 4, 0.2, &mut rng);
        let tight = RestoreConfig { mu: 0.3, max_iters: 500, tol: 1e-14, relative_tol: true };
        let sol = cg_restore(&y, &mask, &ls, &lm, &tight, None).unwrap().x;
        let cfg = RestoreConfig { mu: 0.3, ..Default::default() };
        let again = cg_restore(&y, &mask, &ls, &lm, &cfg, Some(&sol)).unwrap();
        assert_eq!(again.iters, 0);
        assert_eq!(again.x, sol);
    }

    #[test]
    fn restore_is_linear_in_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ls = connected_laplacian(6, &mut rng);
        let lm = connected_laplacian(5, &mut rng);
        let mask = rand_mask(6, 5, 0.2, &mut rng);
        let y1 = rand_mat(6, 5, &mut rng);
        let y2 = rand_mat(6, 5, &mut rng);
        let cfg = RestoreConfig { mu: 0.5, max_iters: 500, tol: 1e-14, relative_tol: true };
        let zero = Array2::zeros((6, 5));
        let solve = |y: &Mat| cg_restore(y, &mask, &ls, &lm, &cfg, Some(&zero)).unwrap().x;
        let combo = solve(&(&y1 * 2.0 - &y2 * 0.5));
        let parts = solve(&y1) * 2.0 - solve(&y2) * 0.5;
        assert!(frob_norm(&(&combo - &parts)) <= 1e-6 * frob_norm(&parts));
    }
}
