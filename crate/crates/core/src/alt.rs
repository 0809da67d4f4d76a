//! Plain alternating minimization over `(X, L_s, L̄_m)`.
//!
//! Each outer cycle learns the signed modality graph from the current signal,
//! then the spatial graph from the spatial kernel under that modality graph,
//! then restores the signal by CG under both graphs. The full objective is
//!
//! ```text
//! ½‖M∘(Y−X)‖² + (μ/2) tr(L̄_m Xᵀ L_s X) + Σ_c β_c ‖L_c‖²_F − γ_c Σ_i log (L_c)_ii.
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::graph::{knn_graph, laplacian_from_adjacency, Laplacian, SignedLaplacian};
use crate::learn::{learn_signed_modality, pdhg_learn, PdhgConfig, PdhgState, SignConfig};
use crate::matrix::{all_finite, frob_inner, frob_norm, Mat};
use crate::restore::{cg_restore, restore_objective, RestoreConfig};
use crate::signal::{spatial_kernel, Mask};

/// Neighbors in the initial spatial kNN graph.
pub const INIT_KNN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AltConfig {
    pub mu: f64,
    pub spatial_cfg: PdhgConfig,
    pub modality_cfg: PdhgConfig,
    pub sign_cfg: SignConfig,
    /// CG settings; its `mu` is overridden by `self.mu`.
    pub restore_cfg: RestoreConfig,
    pub outer_iters: usize,
    /// Stop once `‖X⁺ − X‖_F / ‖X‖_F` drops below this.
    pub outer_tol: f64,
}

impl Default for AltConfig {
    fn default() -> Self {
        AltConfig {
            mu: 1.0,
            spatial_cfg: PdhgConfig::default(),
            modality_cfg: PdhgConfig::default(),
            sign_cfg: SignConfig::default(),
            restore_cfg: RestoreConfig::default(),
            outer_iters: 10,
            outer_tol: 1e-4,
        }
    }
}

impl AltConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || !(self.outer_tol > 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Parameter(format!(
                "outer_iters must be >= 1 and outer_tol, mu positive (got {}, {}, {})",
                self.outer_iters, self.outer_tol, self.mu
            )));
        }
        self.spatial_cfg.validate()?;
        self.modality_cfg.validate()?;
        self.restore_cfg.validate()
    }

    /// Truncated inner solvers as in one unrolled layer: `t` PDHG steps per
    /// graph and `k` CG steps, no early exits.
    pub fn truncated(mut self, t: usize, k: usize) -> Self {
        self.spatial_cfg = self.spatial_cfg.fixed_steps(t);
        self.modality_cfg = self.modality_cfg.fixed_steps(t);
        self.restore_cfg = RestoreConfig::fixed_steps(self.mu, k);
        self
    }

    fn restore(&self) -> RestoreConfig {
        RestoreConfig { mu: self.mu, ..self.restore_cfg }
    }
}

/// Objective split by block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    /// `½‖M∘(Y−X)‖²`.
    pub fit: f64,
    /// `(μ/2) tr(L̄_m Xᵀ L_s X)`.
    pub smooth: f64,
    pub spatial_reg: f64,
    pub modality_reg: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.fit + self.smooth + self.spatial_reg + self.modality_reg
    }
}

/// `β‖L‖²_F − γ Σ log L_ii`.
pub fn graph_regularizer(l: &Mat, cfg: &PdhgConfig) -> f64 {
    let logs: f64 = l.diag().iter().map(|d| d.ln()).sum();
    cfg.beta_frob * frob_inner(l, l) - cfg.gamma_log * logs
}

pub fn objective_parts(x: &Mat, y: &Mat, mask: &Mask, ls: &Mat, lm: &Mat, cfg: &AltConfig) -> ObjectiveParts {
    let r = mask.apply(&(y - x));
    let fit = 0.5 * frob_inner(&r, &r);
    ObjectiveParts {
        fit,
        smooth: restore_objective(x, y, mask, cfg.mu, ls, lm) - fit,
        spatial_reg: graph_regularizer(ls, &cfg.spatial_cfg),
        modality_reg: graph_regularizer(lm, &cfg.modality_cfg),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    /// Objective after the cycle.
    pub objective: ObjectiveParts,
    /// Objective with the new graphs and the previous signal.
    pub before_restore: ObjectiveParts,
    pub modality_iters: usize,
    pub spatial_iters: usize,
    pub cg_iters: usize,
    pub cg_breakdown: bool,
    /// CG step sizes and conjugacy coefficients taken in this cycle.
    pub cg_kappas: Vec<f64>,
    pub cg_xis: Vec<f64>,
    /// `‖X⁺ − X‖_F / ‖X‖_F`.
    pub change: f64,
}

#[derive(Debug, Clone)]
pub struct AltOutcome {
    pub x: Mat,
    pub spatial: Laplacian,
    pub modality: SignedLaplacian,
    pub trace: Vec<CycleRecord>,
}

/// Spatial graph used before anything is learned: Gaussian kNN on the rows of
/// the observed signal.
pub fn initial_spatial(y: &Mat, mask: &Mask) -> Result<Laplacian> {
    let n = y.nrows();
    if n < 2 {
        return Err(Error::Dimension("need at least two nodes".into()));
    }
    let w = knn_graph(&mask.apply(y), INIT_KNN.min(n - 1), None)?;
    Ok(laplacian_from_adjacency(&w))
}

/// Runs the alternating solver from `X⁰ = M∘Y`.
pub fn alternate(y: &Mat, mask: &Mask, cfg: &AltConfig) -> Result<AltOutcome> {
    cfg.validate()?;
    check_shape("mask", mask.dim(), y.dim())?;
    if !all_finite(y) {
        return Err(Error::Validation("observation contains non-finite values".into()));
    }
    let (n, m) = y.dim();
    let mut x = mask.apply(y);
    let mut ls = initial_spatial(y, mask)?;
    let mut lm = SignedLaplacian::from(Laplacian::identity(m));
    let mut spatial_state = PdhgState::zeros(n);
    let mut modality_state = PdhgState::zeros(m);
    let restore_cfg = cfg.restore();
    let mut trace = Vec::new();

    for _ in 0..cfg.outer_iters {
        let modality = learn_signed_modality(&x, ls.matrix(), &cfg.modality_cfg, &cfg.sign_cfg, Some(&modality_state))?;
        lm = modality.laplacian;
        modality_state = modality.pdhg.state;

        let k = spatial_kernel(&x, lm.matrix())?;
        let spatial = pdhg_learn(&k, &cfg.spatial_cfg, Some(&spatial_state))?;
        ls = spatial.laplacian;
        spatial_state = spatial.state;

        let before_restore = objective_parts(&x, y, mask, ls.matrix(), lm.matrix(), cfg);
        let cg = cg_restore(y, mask, ls.matrix(), lm.matrix(), &restore_cfg, Some(&x))?;
        let change = frob_norm(&(&cg.x - &x)) / frob_norm(&x).max(1e-300);
        x = cg.x;
        trace.push(CycleRecord {
            objective: objective_parts(&x, y, mask, ls.matrix(), lm.matrix(), cfg),
            before_restore,
            modality_iters: modality.pdhg.iters,
            spatial_iters: spatial.iters,
            cg_iters: cg.iters,
            cg_breakdown: cg.breakdown,
            cg_kappas: cg.kappas,
            cg_xis: cg.xis,
            change,
        });
        if change < cfg.outer_tol {
            break;
        }
    }
    Ok(AltOutcome { x, spatial: ls, modality: lm, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::max_abs;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, m: usize, missing: f64) -> (Mat, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..n).map(|i| (i as f64 / 3.0).sin()).collect();
        let y = Array2::from_shape_fn((n, m), |(i, j)| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            s * base[i] + 0.05 * rng.random_range(-1.0..1.0)
        });
        let mask = Mask::from_bools(n, m, |_, _| rng.random::<f64>() >= missing);
        (y, mask)
    }

    #[test]
    fn full_mask_and_zero_mu_return_observation() {
        let (y, _) = instance(1, 12, 5, 0.0);
        let mask = Mask::full(12, 5);
        let cfg = AltConfig { mu: 0.0, outer_iters: 1, ..Default::default() };
        let out = alternate(&y, &mask, &cfg).unwrap();
        assert!(max_abs(&(&out.x - &y)) <= 1e-12);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn single_cycle_is_the_three_steps_in_sequence() {
        let (y, mask) = instance(2, 15, 6, 0.2);
        let cfg = AltConfig { mu: 0.5, outer_iters: 1, ..Default::default() };
        let out = alternate(&y, &mask, &cfg).unwrap();

        let x0 = mask.apply(&y);
        let ls0 = initial_spatial(&y, &mask).unwrap();
        let modality = learn_signed_modality(&x0, ls0.matrix(), &cfg.modality_cfg, &cfg.sign_cfg, None).unwrap();
        let k = spatial_kernel(&x0, modality.laplacian.matrix()).unwrap();
        let spatial = pdhg_learn(&k, &cfg.spatial_cfg, None).unwrap();
        let cg =
            cg_restore(&y, &mask, spatial.laplacian.matrix(), modality.laplacian.matrix(), &cfg.restore(), Some(&x0))
                .unwrap();

        assert_eq!(out.x, cg.x);
        assert_eq!(out.spatial.matrix(), spatial.laplacian.matrix());
        assert_eq!(out.modality.matrix(), modality.laplacian.matrix());
    }

    #[test]
    fn restore_step_never_increases_objective() {
        for seed in 0..5 {
            let (y, mask) = instance(10 + seed, 14, 6, 0.3);
            let mut cfg = AltConfig { mu: 2.0, outer_iters: 4, outer_tol: 1e-12, ..Default::default() };
            cfg.restore_cfg.tol = 1e-12;
            let out = alternate(&y, &mask, &cfg).unwrap();
            for rec in &out.trace {
                assert!(rec.objective.total() <= rec.before_restore.total() + 1e-8, "{rec:?}");
                assert_eq!(rec.objective.spatial_reg, rec.before_restore.spatial_reg);
            }
        }
    }

    #[test]
    fn deterministic() {
        let (y, mask) = instance(3, 12, 5, 0.25);
        let cfg = AltConfig { outer_iters: 3, ..Default::default() };
        let a = alternate(&y, &mask, &cfg).unwrap();
        let b = alternate(&y, &mask, &cfg).unwrap();
        assert!(a.x.iter().zip(b.x.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn learned_modality_graph_is_psd_and_signed() {
        let (y, mask) = instance(4, 20, 6, 0.1);
        let cfg = AltConfig { outer_iters: 3, ..Default::default() };
        let out = alternate(&y, &mask, &cfg).unwrap();
        assert!(crate::matrix::min_eigenvalue(out.modality.matrix()) >= -1e-9);
        // columns alternate polarity: same-parity edges negative, others positive
        let lm = out.modality.matrix();
        let mut edges = 0;
        for i in 0..6 {
            for j in (i + 1)..6 {
                if lm[[i, j]].abs() > 1e-6 {
                    edges += 1;
                    assert_eq!(lm[[i, j]] < 0.0, (i + j) % 2 == 0, "{lm:?}");
                }
            }
        }
        assert!(edges > 0);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let (mut y, mask) = instance(5, 8, 3, 0.0);
        assert!(alternate(&y, &mask, &AltConfig { outer_iters: 0, ..Default::default() }).is_err());
        y[[0, 0]] = f64::NAN;
        assert!(matches!(alternate(&y, &mask, &AltConfig::default()), Err(Error::Validation(_))));
    }
}
