//! Laplacian learning from a coupling kernel.
//!
//! For a kernel `K` the target graph minimizes
//!
//! ```text
//! α (dᵀ diag K − tr(W K)) + β (‖d‖² + ‖W‖²_F) − γ Σ log d_i,   d = W 1,
//! ```
//!
//! over symmetric, hollow, nonnegative `W`. [`pdhg_learn`] solves it with a
//! primal-dual hybrid gradient iteration that dualizes `d = W1`: a projected
//! gradient step on `W`, extrapolation, and a closed-form per-node prox on
//! the degrees ([`degree_prox`]).
//!
//! Signed modality graphs reduce to the same problem: with a polarity
//! surrogate `C` ([`sign_surrogate`]) the signed Laplacian
//! `diag(W1) − C∘W` satisfies `tr(L̄ K) = tr(L (C∘K))` when `C` is a binary
//! polarity matrix, so the magnitudes are learned from `C∘K`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, check_square, Error, Result};
use crate::graph::{laplacian_from_adjacency, project_adjacency, AdjacencyMatrix, Laplacian, SignedLaplacian};
use crate::matrix::{all_finite, asymmetry, frob_norm, Mat};
use crate::signal::modality_kernel;

/// Weights and step sizes of one PDHG graph-learning solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdhgConfig {
    /// Kernel-fit weight α.
    pub alpha_fit: f64,
    /// Frobenius weight β on the Laplacian.
    pub beta_frob: f64,
    /// Log-degree barrier weight γ.
    pub gamma_log: f64,
    /// Primal step τ.
    pub tau: f64,
    /// Dual step σ.
    pub sigma: f64,
    pub max_iters: usize,
    /// Stop once the relative change of the iterate `(W, u)` drops below this.
    pub tol: f64,
}

impl Default for PdhgConfig {
    fn default() -> Self {
        PdhgConfig {
            alpha_fit: 1.0,
            beta_frob: 1.0,
            gamma_log: 1.0,
            tau: 0.005,
            sigma: 0.05,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

impl PdhgConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_fit >= 0.0
            && self.beta_frob >= 0.0
            && self.gamma_log > 0.0
            && self.tau > 0.0
            && self.sigma > 0.0
            && self.max_iters >= 1
            && self.tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid PDHG config {self:?}")))
        }
    }

    /// Same weights, `iters` steps, no early stop.
    pub fn fixed_steps(mut self, iters: usize) -> Self {
        self.max_iters = iters;
        self.tol = 0.0;
        self
    }

    /// Largest primal step that keeps the iteration convergent on an
    /// `n`-node graph for the current σ and β.
    pub fn stable_tau(&self, n: usize) -> f64 {
        1.0 / (self.beta_frob + 2.0 * self.sigma * (n.max(2) - 1) as f64)
    }
}

/// Subspace-iteration settings for the polarity surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignConfig {
    pub rank: usize,
    pub iters: usize,
}

impl Default for SignConfig {
    fn default() -> Self {
        SignConfig { rank: 2, iters: 30 }
    }
}

/// Continuous polarity matrix `C = P̃ P̃ᵀ`, entries in `[−1, 1]`, unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignSurrogate {
    pub c: Mat,
    pub rank: usize,
    pub iters: usize,
}

impl SignSurrogate {
    /// The all-ones surrogate: every edge positive.
    pub fn unsigned(m: usize) -> Self {
        SignSurrogate { c: Array2::ones((m, m)), rank: 0, iters: 0 }
    }
}

/// Below this a column (or row) norm counts as zero.
pub(crate) const DEGENERATE_NORM: f64 = 1e-12;

/// Orthonormalizes the columns of `a` by modified Gram-Schmidt. A column that
/// vanishes after orthogonalization is replaced by the first coordinate axis
/// that survives orthogonalization against the columns already accepted; the
/// returned flags mark those columns.
pub(crate) fn orthonormalize(a: &Mat) -> (Mat, Vec<bool>) {
    let (m, r) = a.dim();
    let mut q = Array2::<f64>::zeros((m, r));
    let mut replaced = vec![false; r];
    let scale = frob_norm(a);
    for j in 0..r {
        let mut v = a.column(j).to_owned();
        for i in 0..j {
            let qi = q.column(i);
            let proj = qi.dot(&v);
            v.scaled_add(-proj, &qi);
        }
        let mut norm = v.dot(&v).sqrt();
        if column_degenerate(norm, scale) {
            v = fallback_axis(&q, j);
            norm = v.dot(&v).sqrt();
            replaced[j] = true;
        }
        q.column_mut(j).assign(&(v / norm));
    }
    (q, replaced)
}

/// A column whose orthogonal part is round-off relative to the whole block
/// carries no direction and gets replaced.
pub(crate) fn column_degenerate(norm: f64, scale: f64) -> bool {
    norm <= DEGENERATE_NORM || norm <= 1e-10 * scale
}

/// First coordinate axis with a non-negligible component orthogonal to the
/// first `j` columns of `q`.
pub(crate) fn fallback_axis(q: &Mat, j: usize) -> Array1<f64> {
    let m = q.nrows();
    for axis in 0..m {
        let mut v = Array1::<f64>::zeros(m);
        v[axis] = 1.0;
        for i in 0..j {
            let qi = q.column(i);
            let proj = qi.dot(&v);
            v.scaled_add(-proj, &qi);
        }
        if v.dot(&v).sqrt() > 0.5 {
            return v;
        }
    }
    unreachable!("fewer than m orthonormal columns always leave a free axis")
}

/// Row-normalizes `p`; rows with (near) zero norm become the first axis.
pub(crate) fn row_normalize(p: &Mat) -> Mat {
    let mut out = p.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < DEGENERATE_NORM {
            row.fill(0.0);
            row[0] = 1.0;
        } else {
            row /= norm;
        }
    }
    out
}

/// Polarity surrogate from the leading `rank`-dimensional eigenspace of `K`,
/// found by orthogonal iteration from the first `rank` coordinate axes.
pub fn sign_surrogate(k: &Mat, cfg: &SignConfig) -> Result<SignSurrogate> {
    check_square("kernel", k.nrows(), k.ncols())?;
    let m = k.nrows();
    if cfg.rank == 0 || cfg.rank > m {
        return Err(Error::Parameter(format!("surrogate rank must be in 1..={m}, got {}", cfg.rank)));
    }
    if asymmetry(k) > 1e-8 {
        return Err(Error::Validation(format!("kernel is not symmetric (max deviation {:e})", asymmetry(k))));
    }
    let mut q = Array2::<f64>::zeros((m, cfg.rank));
    for j in 0..cfg.rank {
        q[[j, j]] = 1.0;
    }
    let mut replaced = vec![false; cfg.rank];
    for _ in 0..cfg.iters {
        (q, replaced) = orthonormalize(&k.dot(&q));
    }
    // A column still degenerate after the last step lies outside the range of
    // K; keeping it would tilt the rows, so it is dropped.
    for (j, _) in replaced.iter().enumerate().filter(|(_, &r)| r) {
        q.column_mut(j).fill(0.0);
    }
    let pt = row_normalize(&q);
    let c = pt.dot(&pt.t()).mapv(|v| v.clamp(-1.0, 1.0));
    Ok(SignSurrogate { c, rank: cfg.rank, iters: cfg.iters })
}

/// `K_mag = C ∘ K`.
pub fn modulate_kernel(k: &Mat, c: &Mat) -> Result<Mat> {
    check_shape("surrogate", c.dim(), k.dim())?;
    Ok(k * c)
}

/// Positive minimizer of `β d² + α k d − γ log d + (ρ/2)(d − v)²`.
pub fn degree_prox_weighted(v: f64, k_diag: f64, alpha: f64, beta: f64, gamma: f64, rho: f64) -> f64 {
    let a = 2.0 * beta + rho;
    let b = alpha * k_diag - rho * v;
    let disc = (b * b + 4.0 * a * gamma).sqrt();
    // Pick the cancellation-free form of the positive root.
    if b > 0.0 {
        2.0 * gamma / (b + disc)
    } else {
        (disc - b) / (2.0 * a)
    }
}

/// Closed-form minimizer of
/// `β d² + α k_ii d − γ log d + (1/(2σ))(d − v)²` over `d > 0`.
pub fn degree_prox(v: f64, k_diag: f64, cfg: &PdhgConfig) -> f64 {
    degree_prox_weighted(v, k_diag, cfg.alpha_fit, cfg.beta_frob, cfg.gamma_log, 1.0 / cfg.sigma)
}

/// Proximal weight used inside [`pdhg_learn`]'s dual step for dual step `σ`.
///
/// With the primal step using `u1ᵀ + 1uᵀ`, the dual variable is half the
/// multiplier of `d = W1`; the matching Moreau step evaluates the degree prox
/// with weight `2σ`, which makes every fixed point a KKT point.
pub fn pdhg_prox_weight(sigma: f64) -> f64 {
    2.0 * sigma
}

/// Warm-startable solver state.
#[derive(Debug, Clone, PartialEq)]
pub struct PdhgState {
    pub w: Mat,
    pub u: Array1<f64>,
}

impl PdhgState {
    pub fn zeros(n: usize) -> Self {
        PdhgState { w: Array2::zeros((n, n)), u: Array1::zeros(n) }
    }
}

#[derive(Debug, Clone)]
pub struct PdhgOutcome {
    pub laplacian: Laplacian,
    pub adjacency: AdjacencyMatrix,
    pub iters: usize,
    /// Final state, for warm starts.
    pub state: PdhgState,
    /// Degrees from the last dual step.
    pub degrees: Array1<f64>,
}

/// `W ↦ proj(W − τ(2βW − αK + u1ᵀ + 1uᵀ))`, then extrapolation and the
/// degree prox. Returns the outcome after convergence or `max_iters` steps.
pub fn pdhg_learn(k: &Mat, cfg: &PdhgConfig, warm: Option<&PdhgState>) -> Result<PdhgOutcome> {
    check_square("kernel", k.nrows(), k.ncols())?;
    cfg.validate()?;
    let n = k.nrows();
    let mut state = match warm {
        Some(s) => {
            check_shape("warm-start adjacency", s.w.dim(), (n, n))?;
            if s.u.len() != n {
                return Err(Error::Dimension(format!("warm-start dual has length {}, expected {n}", s.u.len())));
            }
            PdhgState { w: project_adjacency(&s.w).into_inner(), u: s.u.clone() }
        }
        None => PdhgState::zeros(n),
    };
    let kdiag = k.diag().to_owned();
    let rho = pdhg_prox_weight(cfg.sigma);
    let mut degrees = state.w.sum_axis(Axis(1));
    let mut iters = 0;

    while iters < cfg.max_iters {
        let w = &state.w;
        let u = &state.u;
        let mut step = w * (2.0 * cfg.beta_frob);
        step.scaled_add(-cfg.alpha_fit, k);
        for i in 0..n {
            for j in 0..n {
                step[[i, j]] += u[i] + u[j];
            }
        }
        let w_next = project_adjacency(&(w - &(step * cfg.tau))).into_inner();
        if !all_finite(&w_next) {
            return Err(Error::Numerical(format!("PDHG primal step produced non-finite weights at iteration {iters}")));
        }
        let extrap = &w_next * 2.0 - w;
        let s = extrap.sum_axis(Axis(1));
        let mut u_next = u + &(&s * cfg.sigma);
        for i in 0..n {
            let v = u[i] / cfg.sigma + s[i];
            let d = degree_prox_weighted(v, kdiag[i], cfg.alpha_fit, cfg.beta_frob, cfg.gamma_log, rho);
            degrees[i] = d;
            u_next[i] -= cfg.sigma * d;
        }
        if !u_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("PDHG dual step produced non-finite values at iteration {iters}")));
        }
        let du = &u_next - u;
        let change = (frob_norm(&(&w_next - w)) + du.dot(&du).sqrt()) / (frob_norm(w) + u.dot(u).sqrt()).max(1e-12);
        state = PdhgState { w: w_next, u: u_next };
        iters += 1;
        if change < cfg.tol {
            break;
        }
    }
    let adjacency = AdjacencyMatrix::new(state.w.clone()).expect("projection output is a valid adjacency matrix");
    Ok(PdhgOutcome { laplacian: laplacian_from_adjacency(&adjacency), adjacency, iters, state, degrees })
}

/// Value of the graph-learning objective at `W` with `d = W1`. Infinite when
/// some degree is not positive.
pub fn graph_objective(w: &Mat, k: &Mat, cfg: &PdhgConfig) -> f64 {
    let d = w.sum_axis(Axis(1));
    if d.iter().any(|&di| di <= 0.0) {
        return f64::INFINITY;
    }
    let fit = d.dot(&k.diag()) - (w * k).sum();
    let frob = d.dot(&d) + (w * w).sum();
    let barrier: f64 = d.iter().map(|di| di.ln()).sum();
    cfg.alpha_fit * fit + cfg.beta_frob * frob - cfg.gamma_log * barrier
}

/// `diag(W1) − C∘W`.
pub fn continuous_signed_laplacian(w: &AdjacencyMatrix, c: &Mat) -> SignedLaplacian {
    let wm = w.weights();
    let mut l = -(c * wm);
    let d = wm.sum_axis(Axis(1));
    for i in 0..wm.nrows() {
        l[[i, i]] = d[i];
    }
    SignedLaplacian::from_matrix_unchecked(l)
}

#[derive(Debug, Clone)]
pub struct SignedModalityOutcome {
    pub laplacian: SignedLaplacian,
    /// Edge magnitudes `W_m`.
    pub magnitude: AdjacencyMatrix,
    pub surrogate: SignSurrogate,
    pub pdhg: PdhgOutcome,
}

/// Learns the signed modality graph for signal `x` given the spatial
/// Laplacian: kernel, polarity surrogate, PDHG on the modulated kernel.
pub fn learn_signed_modality(
    x: &Mat,
    ls: &Mat,
    cfg: &PdhgConfig,
    sign_cfg: &SignConfig,
    warm: Option<&PdhgState>,
) -> Result<SignedModalityOutcome> {
    let k = modality_kernel(x, ls)?;
    let surrogate = sign_surrogate(&k, sign_cfg)?;
    learn_modality_with_surrogate(&k, surrogate, cfg, warm)
}

/// Modality learning with a caller-supplied surrogate, e.g.
/// [`SignSurrogate::unsigned`] for an unsigned modality graph.
pub fn learn_modality_with_surrogate(
    k: &Mat,
    surrogate: SignSurrogate,
    cfg: &PdhgConfig,
    warm: Option<&PdhgState>,
) -> Result<SignedModalityOutcome> {
    let k_mag = modulate_kernel(k, &surrogate.c)?;
    let pdhg = pdhg_learn(&k_mag, cfg, warm)?;
    let laplacian = continuous_signed_laplacian(&pdhg.adjacency, &surrogate.c);
    Ok(SignedModalityOutcome { laplacian, magnitude: pdhg.adjacency.clone(), surrogate, pdhg })
}
