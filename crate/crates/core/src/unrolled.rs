//! The unrolled network: `L` alternating cycles with `T` PDHG steps per graph
//! and `K` CG-structured signal steps per layer, every scalar trainable.
//!
//! Raw parameters are unconstrained; effective values go through
//! [`softplus`]. In the signal module the residual is recomputed from the
//! operator at every step, and only the step sizes `κ` and conjugacy
//! weights `ξ` are learned:
//!
//! ```text
//! X ← X + κ_k P,   R ← M∘Y − H(X),   P ← R + ξ_k P.
//! ```

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alt::{initial_spatial, AltConfig};
use crate::autodiff::{softplus, softplus_inv, Tape, Var};
use crate::error::{check_shape, Error, Result};
use crate::graph::{laplacian_from_adjacency, path_graph, Laplacian, SignedLaplacian};
use crate::learn::{column_degenerate, fallback_axis, PdhgConfig, DEGENERATE_NORM};
use crate::matrix::{all_finite, frob_inner, frob_norm, Mat};
use crate::signal::Mask;

/// Effective value standing in for a zero conjugacy weight.
pub const XI_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both graphs learned in every layer.
    Full,
    /// Modality graph fixed to the unit-weight path; spatial graph learned.
    FixedModality,
    /// Both graphs frozen at the solver initialization: the kNN spatial
    /// graph and the identity over modalities.
    WithoutGl,
}

impl Variant {
    pub fn learns_modality(self) -> bool {
        self == Variant::Full
    }

    pub fn learns_spatial(self) -> bool {
        self != Variant::WithoutGl
    }
}

/// Raw parameters of one PDHG step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlStep {
    pub alpha_fit: f64,
    pub beta_frob: f64,
    pub gamma_log: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl GlStep {
    fn from_config(cfg: &PdhgConfig) -> Self {
        GlStep {
            alpha_fit: softplus_inv(cfg.alpha_fit),
            beta_frob: softplus_inv(cfg.beta_frob),
            gamma_log: softplus_inv(cfg.gamma_log),
            tau: softplus_inv(cfg.tau),
            sigma: softplus_inv(cfg.sigma),
        }
    }

    fn to_vec(self) -> [f64; 5] {
        [self.alpha_fit, self.beta_frob, self.gamma_log, self.tau, self.sigma]
    }

    fn from_slice(v: &[f64]) -> Self {
        GlStep { alpha_fit: v[0], beta_frob: v[1], gamma_log: v[2], tau: v[3], sigma: v[4] }
    }

    /// Effective step settings.
    pub fn effective(&self) -> PdhgConfig {
        PdhgConfig {
            alpha_fit: softplus(self.alpha_fit),
            beta_frob: softplus(self.beta_frob),
            gamma_log: softplus(self.gamma_log),
            tau: softplus(self.tau),
            sigma: softplus(self.sigma),
            max_iters: 1,
            tol: 0.0,
        }
    }
}

/// Raw signal-module parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrParams {
    pub kappa: Vec<f64>,
    pub xi: Vec<f64>,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub gl_spatial: Vec<GlStep>,
    pub gl_modality: Vec<GlStep>,
    pub sr: SrParams,
}

fn default_sign_iters() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrolledModel {
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "T")]
    pub graph_steps: usize,
    #[serde(rename = "K")]
    pub cg_steps: usize,
    /// Sign-surrogate rank.
    pub r: usize,
    #[serde(default = "default_sign_iters")]
    pub sign_iters: usize,
    pub variant: Variant,
    pub layers: Vec<LayerParams>,
}

/// Trainable scalar count `L·(10T + 2K + 1)` for the full variant.
pub fn param_count(model: &UnrolledModel) -> usize {
    model
        .layers
        .iter()
        .map(|l| 5 * (l.gl_spatial.len() + l.gl_modality.len()) + l.sr.kappa.len() + l.sr.xi.len() + 1)
        .sum()
}

/// Model whose effective parameters equal the iterative solver's scalars,
/// with `κ = 1` and `ξ ≈ 0` (plain gradient steps).
pub fn init_from_iterative(alt_cfg: &AltConfig, l: usize, t: usize, k: usize) -> UnrolledModel {
    init_variant(alt_cfg, l, t, k, Variant::Full)
}

pub fn init_variant(alt_cfg: &AltConfig, l: usize, t: usize, k: usize, variant: Variant) -> UnrolledModel {
    let spatial = GlStep::from_config(&alt_cfg.spatial_cfg);
    let modality = GlStep::from_config(&alt_cfg.modality_cfg);
    let layer = LayerParams {
        gl_spatial: if variant.learns_spatial() { vec![spatial; t] } else { Vec::new() },
        gl_modality: if variant.learns_modality() { vec![modality; t] } else { Vec::new() },
        sr: SrParams {
            kappa: vec![softplus_inv(1.0); k],
            xi: vec![softplus_inv(XI_FLOOR); k],
            mu: softplus_inv(alt_cfg.mu),
        },
    };
    UnrolledModel {
        depth: l,
        graph_steps: t,
        cg_steps: k,
        r: alt_cfg.sign_cfg.rank,
        sign_iters: alt_cfg.sign_cfg.iters,
        variant,
        layers: vec![layer; l],
    }
}

impl UnrolledModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(format!("invalid model: {msg}")));
        if self.layers.len() != self.depth || self.depth == 0 {
            return bad(format!("{} layers for depth {}", self.layers.len(), self.depth));
        }
        let t_spatial = if self.variant.learns_spatial() { self.graph_steps } else { 0 };
        let t_modality = if self.variant.learns_modality() { self.graph_steps } else { 0 };
        for (i, l) in self.layers.iter().enumerate() {
            if l.gl_spatial.len() != t_spatial
                || l.gl_modality.len() != t_modality
                || l.sr.kappa.len() != self.cg_steps
                || l.sr.xi.len() != self.cg_steps
            {
                return bad(format!("layer {i} has the wrong number of parameters"));
            }
        }
        let finite = self.params().iter().all(|v| v.is_finite());
        if !finite {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    /// Raw parameters, layer by layer: modality steps, spatial steps, `κ`,
    /// `ξ`, `μ`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(param_count(self));
        for l in &self.layers {
            for s in l.gl_modality.iter().chain(&l.gl_spatial) {
                out.extend(s.to_vec());
            }
            out.extend(&l.sr.kappa);
            out.extend(&l.sr.xi);
            out.push(l.sr.mu);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), param_count(self), "parameter vector length");
        let mut i = 0;
        for l in &mut self.layers {
            for s in l.gl_modality.iter_mut().chain(l.gl_spatial.iter_mut()) {
                *s = GlStep::from_slice(&p[i..i + 5]);
                i += 5;
            }
            let k = l.sr.kappa.len();
            l.sr.kappa.copy_from_slice(&p[i..i + k]);
            i += k;
            l.sr.xi.copy_from_slice(&p[i..i + k]);
            i += k;
            l.sr.mu = p[i];
            i += 1;
        }
    }

    /// Sets every layer's CG coefficients to the given effective values.
    pub fn set_cg_steps(&mut self, kappas: &[Vec<f64>], xis: &[Vec<f64>]) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for k in 0..layer.sr.kappa.len() {
                if let Some(&v) = kappas[l].get(k) {
                    layer.sr.kappa[k] = softplus_inv(v.max(XI_FLOOR));
                }
                if let Some(&v) = xis[l].get(k) {
                    layer.sr.xi[k] = softplus_inv(v.max(XI_FLOOR));
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: UnrolledModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.validate()?;
        Ok(model)
    }
}

/// Graphs and signal after one layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub x: Mat,
    pub spatial: Mat,
    pub modality: Mat,
    /// CG coefficients used in the signal module.
    pub kappas: Vec<f64>,
    pub xis: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub x: Mat,
    pub spatial: Laplacian,
    pub modality: SignedLaplacian,
    pub layers: Vec<LayerOutput>,
}

/// How the signal module picks its coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CgMode {
    Learned,
    /// Exact CG values computed from the current iterate.
    Exact,
}

struct StepVars {
    alpha: Var,
    beta: Var,
    gamma: Var,
    tau: Var,
    sigma: Var,
}

struct LayerVars {
    spatial: Vec<StepVars>,
    modality: Vec<StepVars>,
    kappa: Vec<Var>,
    xi: Vec<Var>,
    mu: Var,
}

/// Puts the raw parameters on the tape; returns the leaves (in
/// [`UnrolledModel::params`] order) and the effective values.
fn param_vars(tape: &Tape, model: &UnrolledModel) -> (Vec<Var>, Vec<LayerVars>) {
    let mut leaves = Vec::new();
    let mut eff = |raw: f64| {
        let leaf = tape.scalar(raw);
        leaves.push(leaf);
        tape.softplus(leaf)
    };
    let mut layers = Vec::new();
    for l in &model.layers {
        let mut step = |s: &GlStep| StepVars {
            alpha: eff(s.alpha_fit),
            beta: eff(s.beta_frob),
            gamma: eff(s.gamma_log),
            tau: eff(s.tau),
            sigma: eff(s.sigma),
        };
        let modality = l.gl_modality.iter().map(&mut step).collect();
        let spatial = l.gl_spatial.iter().map(&mut step).collect();
        let kappa = l.sr.kappa.iter().map(|&v| eff(v)).collect();
        let xi = l.sr.xi.iter().map(|&v| eff(v)).collect();
        let mu = eff(l.sr.mu);
        layers.push(LayerVars { spatial, modality, kappa, xi, mu });
    }
    (leaves, layers)
}

/// `T` PDHG steps from the warm state `(w, u)`.
fn pdhg_steps(tape: &Tape, k: Var, steps: &[StepVars], w: Var, u: Var) -> (Var, Var) {
    let kdiag = tape.diag_of(k);
    let (mut w, mut u) = (w, u);
    for s in steps {
        let two_beta = tape.scale(s.beta, 2.0);
        let grad = tape.sub(tape.mul_scalar(w, two_beta), tape.mul_scalar(k, s.alpha));
        let grad = tape.add(grad, tape.outer_sum(u));
        let w_next = tape.project_adjacency(tape.sub(w, tape.mul_scalar(grad, s.tau)));
        let extrap = tape.sub(tape.scale(w_next, 2.0), w);
        let sums = tape.row_sums(extrap);
        let v = tape.add(tape.mul_scalar(u, tape.recip(s.sigma)), sums);
        let rho = tape.scale(s.sigma, 2.0);
        let d = tape.degree_prox(v, kdiag, s.alpha, s.beta, s.gamma, rho);
        let u_next = tape.add(u, tape.mul_scalar(sums, s.sigma));
        u = tape.sub(u_next, tape.mul_scalar(d, s.sigma));
        w = w_next;
    }
    (w, u)
}

/// Modified Gram-Schmidt on the tape, same decisions as the plain version.
fn orthonormalize_tape(tape: &Tape, a: Var) -> (Var, Vec<bool>) {
    let av = tape.value(a);
    let (m, r) = av.dim();
    let scale = frob_norm(&av);
    let mut cols: Vec<Var> = Vec::with_capacity(r);
    let mut qvals = Array2::<f64>::zeros((m, r));
    let mut replaced = vec![false; r];
    for j in 0..r {
        let mut v = tape.column(a, j);
        for &qi in &cols {
            let proj = tape.inner(qi, v);
            v = tape.sub(v, tape.mul_scalar(qi, proj));
        }
        let mut norm = tape.sqrt(tape.inner(v, v));
        if column_degenerate(tape.scalar_value(norm), scale) {
            let axis = fallback_axis(&qvals, j);
            v = tape.leaf(axis.insert_axis(ndarray::Axis(1)));
            norm = tape.sqrt(tape.inner(v, v));
            replaced[j] = true;
        }
        let q = tape.mul_scalar(v, tape.recip(norm));
        qvals.column_mut(j).assign(&tape.value(q).column(0));
        cols.push(q);
    }
    (tape.hstack(&cols), replaced)
}

/// Polarity surrogate `C` of a kernel node.
fn sign_surrogate_tape(tape: &Tape, k: Var, rank: usize, iters: usize) -> Var {
    let m = tape.value(k).nrows();
    let rank = rank.min(m);
    let mut q = tape.leaf(Array2::from_shape_fn((m, rank), |(i, j)| if i == j { 1.0 } else { 0.0 }));
    let mut replaced = vec![false; rank];
    for _ in 0..iters {
        (q, replaced) = orthonormalize_tape(tape, tape.matmul(k, q));
    }
    if replaced.iter().any(|&r| r) {
        let keep = Array2::from_shape_fn((m, rank), |(_, j)| if replaced[j] { 0.0 } else { 1.0 });
        q = tape.hadamard_const(q, Rc::new(keep));
    }
    let p = tape.row_normalize(q, DEGENERATE_NORM);
    tape.clamp(tape.matmul(p, tape.transpose(p)), -1.0, 1.0)
}

/// `diag(W1) − W`, or `diag(W1) − C∘W` with a surrogate.
fn laplacian_tape(tape: &Tape, w: Var, c: Option<Var>) -> Var {
    let deg = tape.diag_matrix(tape.row_sums(w));
    match c {
        Some(c) => tape.sub(deg, tape.hadamard(c, w)),
        None => tape.sub(deg, w),
    }
}

fn check_finite(tape: &Tape, v: Var, layer: usize, module: &str) -> Result<()> {
    if all_finite(&tape.value(v)) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("layer {layer} {module} module produced non-finite values")))
    }
}

struct Built {
    x: Var,
    spatial: Var,
    modality: Var,
    layers: Vec<LayerOutput>,
}

/// Modality graph used by the variants that do not learn it: the unit path
/// graph, or the solver's identity initialization when nothing is learned.
fn fixed_modality(m: usize, variant: Variant) -> Mat {
    match variant {
        Variant::WithoutGl => Laplacian::identity(m).into_inner(),
        _ => laplacian_from_adjacency(&path_graph(m)).into_inner(),
    }
}

fn build(tape: &Tape, model: &UnrolledModel, vars: &[LayerVars], y: &Mat, mask: &Mask, mode: CgMode) -> Result<Built> {
    check_shape("mask", mask.dim(), y.dim())?;
    if !all_finite(y) {
        return Err(Error::Validation("observation contains non-finite values".into()));
    }
    let (n, m) = y.dim();
    let maskv = Rc::new(mask.values().clone());
    let b = mask.apply(y);
    let b_var = tape.leaf(b.clone());
    let mut x = b_var;
    let mut ls = tape.leaf(initial_spatial(y, mask)?.into_inner());
    let mut lm = if model.variant.learns_modality() {
        tape.leaf(Laplacian::identity(m).into_inner())
    } else {
        tape.leaf(fixed_modality(m, model.variant))
    };
    let (mut ws, mut us) = (tape.leaf(Array2::zeros((n, n))), tape.leaf(Array2::zeros((n, 1))));
    let (mut wm, mut um) = (tape.leaf(Array2::zeros((m, m))), tape.leaf(Array2::zeros((m, 1))));
    let mut outputs = Vec::with_capacity(vars.len());

    for (l, lv) in vars.iter().enumerate() {
        if model.variant.learns_modality() {
            let xt = tape.transpose(x);
            let k = tape.symmetrize(tape.matmul(xt, tape.matmul(ls, x)));
            let c = sign_surrogate_tape(tape, k, model.r, model.sign_iters);
            let kmag = tape.hadamard(k, c);
            (wm, um) = pdhg_steps(tape, kmag, &lv.modality, wm, um);
            lm = laplacian_tape(tape, wm, Some(c));
            check_finite(tape, lm, l, "modality")?;
        }
        if model.variant.learns_spatial() {
            let xt = tape.transpose(x);
            let k = tape.symmetrize(tape.matmul(x, tape.matmul(lm, xt)));
            (ws, us) = pdhg_steps(tape, k, &lv.spatial, ws, us);
            ls = laplacian_tape(tape, ws, None);
            check_finite(tape, ls, l, "spatial")?;
        }

        let apply = |v: Var| {
            let smooth = tape.matmul(tape.matmul(ls, v), lm);
            tape.add(tape.mul_scalar(smooth, lv.mu), tape.hadamard_const(v, Rc::clone(&maskv)))
        };
        let mut r = tape.sub(b_var, apply(x));
        let mut p = r;
        let (mut kappas, mut xis) = (Vec::new(), Vec::new());
        for k in 0..lv.kappa.len() {
            let (kappa, xi_of) = match mode {
                CgMode::Learned => (lv.kappa[k], None),
                CgMode::Exact => {
                    let pv = tape.value(p);
                    let rv = tape.value(r);
                    let hp = apply_values(&pv, &maskv, tape.scalar_value(lv.mu), &tape.value(ls), &tape.value(lm));
                    let curv = frob_inner(&pv, &hp);
                    let rr = frob_inner(&rv, &rv);
                    if rr == 0.0 || curv <= 0.0 {
                        break;
                    }
                    (tape.scalar(rr / curv), Some(rr))
                }
            };
            kappas.push(tape.scalar_value(kappa));
            x = tape.add(x, tape.mul_scalar(p, kappa));
            r = tape.sub(b_var, apply(x));
            let xi = match xi_of {
                None => lv.xi[k],
                Some(rr) => {
                    let rv = tape.value(r);
                    tape.scalar(frob_inner(&rv, &rv) / rr)
                }
            };
            xis.push(tape.scalar_value(xi));
            p = tape.add(r, tape.mul_scalar(p, xi));
        }
        check_finite(tape, x, l, "signal")?;
        outputs.push(LayerOutput {
            x: (*tape.value(x)).clone(),
            spatial: (*tape.value(ls)).clone(),
            modality: (*tape.value(lm)).clone(),
            kappas,
            xis,
        });
    }
    Ok(Built { x, spatial: ls, modality: lm, layers: outputs })
}

fn apply_values(x: &Mat, mask: &Mat, mu: f64, ls: &Mat, lm: &Mat) -> Mat {
    crate::restore::apply_unchecked(x, mask, mu, ls, lm)
}

fn forward_mode(model: &UnrolledModel, y: &Mat, mask: &Mask, mode: CgMode) -> Result<ForwardOutput> {
    model.validate()?;
    let tape = Tape::new();
    let (_, vars) = param_vars(&tape, model);
    let built = build(&tape, model, &vars, y, mask, mode)?;
    Ok(ForwardOutput {
        x: (*tape.value(built.x)).clone(),
        spatial: Laplacian::from_matrix_unchecked((*tape.value(built.spatial)).clone()),
        modality: SignedLaplacian::from_matrix_unchecked((*tape.value(built.modality)).clone()),
        layers: built.layers,
    })
}

/// Runs the network on one observation.
pub fn forward(model: &UnrolledModel, y: &Mat, mask: &Mask) -> Result<ForwardOutput> {
    forward_mode(model, y, mask, CgMode::Learned)
}

/// Forward pass with exact CG coefficients in every signal module, i.e. the
/// truncated iterative solver under the model's graph parameters.
pub fn forward_exact_cg(model: &UnrolledModel, y: &Mat, mask: &Mask) -> Result<ForwardOutput> {
    forward_mode(model, y, mask, CgMode::Exact)
}

/// Sets `κ`, `ξ` of every layer and step to the mean exact CG coefficients
/// over `samples` (observation, mask).
pub fn calibrate_cg_steps(model: &mut UnrolledModel, samples: &[(Mat, Mask)]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Parameter("calibration needs at least one sample".into()));
    }
    let (l, k) = (model.depth, model.cg_steps);
    let mut sum_k = vec![vec![0.0; k]; l];
    let mut sum_x = vec![vec![0.0; k]; l];
    let mut count = vec![vec![0usize; k]; l];
    for (y, mask) in samples {
        let out = forward_exact_cg(model, y, mask)?;
        for (li, layer) in out.layers.iter().enumerate() {
            for (s, (&kv, &xv)) in layer.kappas.iter().zip(&layer.xis).enumerate() {
                sum_k[li][s] += kv;
                sum_x[li][s] += xv;
                count[li][s] += 1;
            }
        }
    }
    let mean = |sum: &[Vec<f64>]| -> Vec<Vec<f64>> {
        sum.iter()
            .zip(&count)
            .map(|(row, c)| row.iter().zip(c).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect())
            .collect()
    };
    model.set_cg_steps(&mean(&sum_k), &mean(&sum_x));
    Ok(())
}

/// `(1/NM) ‖(1−M)∘(X − X_gt)‖²_F`.
pub fn loss_masked(x: &Mat, x_gt: &Mat, mask: &Mask) -> Result<f64> {
    check_shape("estimate", x.dim(), x_gt.dim())?;
    check_shape("mask", mask.dim(), x_gt.dim())?;
    let diff = (x - x_gt) * &mask.complement();
    Ok(frob_inner(&diff, &diff) / x.len() as f64)
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub y: Mat,
    pub x_gt: Mat,
    pub mask: Mask,
}

fn sample_gradient(model: &UnrolledModel, s: &Sample) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let (leaves, vars) = param_vars(&tape, model);
    let built = build(&tape, model, &vars, &s.y, &s.mask, CgMode::Learned)?;
    check_shape("ground truth", s.x_gt.dim(), s.y.dim())?;
    let gt = tape.leaf(s.x_gt.clone());
    let diff = tape.hadamard_const(tape.sub(built.x, gt), Rc::new(s.mask.complement()));
    let loss = tape.scale(tape.inner(diff, diff), 1.0 / s.y.len() as f64);
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite training loss".into()));
    }
    let grads = tape.backward(loss);
    Ok((value, leaves.iter().map(|&v| grads.scalar(v)).collect()))
}

/// Mean masked loss over `batch` and its gradient with respect to the raw
/// parameters (in [`UnrolledModel::params`] order).
pub fn gradient(model: &UnrolledModel, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    model.validate()?;
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let per: Vec<(f64, Vec<f64>)> = batch.par_iter().map(|s| sample_gradient(model, s)).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; param_count(model)];
    for (l, g) in &per {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let b = batch.len() as f64;
    Ok((loss / b, grad.into_iter().map(|g| g / b).collect()))
}

/// Mean masked loss without gradients.
pub fn mean_loss(model: &UnrolledModel, batch: &[Sample]) -> Result<f64> {
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|s| loss_masked(&forward(model, &s.y, &s.mask)?.x, &s.x_gt, &s.mask))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            params[i] -= c.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
        }
    }
}

/// Loss above which training counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Full-batch Adam on the raw parameters. Returns the trained model and the
/// mean training loss at the start of each epoch. The seed fixes the order in
/// which per-sample gradients are summed.
pub fn train(
    model: &UnrolledModel,
    train_set: &[Sample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(UnrolledModel, Vec<f64>)> {
    if train_set.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    let mut model = model.clone();
    let mut params = model.params();
    let mut adam = Adam::new(AdamConfig::new(lr), params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = crate::rng::rng(seed);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let batch: Vec<Sample> = order.iter().map(|&i| train_set[i].clone()).collect();
        let (loss, grad) = gradient(&model, &batch).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("training diverged at epoch {epoch}: {msg}")),
            other => other,
        })?;
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::Numerical(format!("training diverged at epoch {epoch}: loss {loss}")));
        }
        curve.push(loss);
        adam.step(&mut params, &grad);
        model.set_params(&params);
    }
    Ok((model, curve))
}
