//! Cross-validated comparison of the restoration methods over the cells of a
//! dataset manifest.

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twofold::alt::{alternate, AltConfig};
use twofold::baselines::{baseline_glf, baseline_svd, GLF_ALPHA_GRID, SVD_ITERS, SVD_RANK_GRID};
use twofold::datasets::{
    fold_split, generate_synthetic, ingest_real, observe, Cell, DatasetKind, DatasetManifest, MaskLayout,
};
use twofold::learn::PdhgConfig;
use twofold::metrics::{contiguous_blocks, evaluate, label_blocks, Metrics};
use twofold::rng::derive_seed;
use twofold::signal::Mask;
use twofold::unrolled::{
    calibrate_cg_steps, forward, init_variant, mean_loss, train, Sample, UnrolledModel, Variant, DIVERGENCE_LOSS,
};
use twofold::{Error, Mat, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Glf,
    Svd,
    Iterative,
    UnrolledFull,
    UnrolledFixedModality,
    UnrolledWithoutGl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Glf,
        Method::Svd,
        Method::Iterative,
        Method::UnrolledFull,
        Method::UnrolledFixedModality,
        Method::UnrolledWithoutGl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Glf => "glf",
            Method::Svd => "svd",
            Method::Iterative => "iterative",
            Method::UnrolledFull => "unrolled-full",
            Method::UnrolledFixedModality => "unrolled-fixed-modality",
            Method::UnrolledWithoutGl => "unrolled-without-gl",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::UnrolledFull => Some(Variant::Full),
            Method::UnrolledFixedModality => Some(Variant::FixedModality),
            Method::UnrolledWithoutGl => Some(Variant::WithoutGl),
            _ => None,
        }
    }

    pub fn from_variant(v: Variant) -> Method {
        match v {
            Variant::Full => Method::UnrolledFull,
            Variant::FixedModality => Method::UnrolledFixedModality,
            Variant::WithoutGl => Method::UnrolledWithoutGl,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method {s:?}")))
    }
}

/// Solver and training settings shared by every cell of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Iterative solver settings; also the unrolled initialization.
    pub alt: AltConfig,
    pub layers: usize,
    pub graph_steps: usize,
    pub cg_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub glf_alphas: Vec<f64>,
    pub svd_ranks: Vec<usize>,
    pub svd_iters: usize,
    /// Write checkpoints, parameter tables and per-layer graphs.
    pub dump_artifacts: bool,
}

/// Graph-learning step settings that keep the truncated solver well scaled
/// on the synthetic benchmarks.
pub fn desk_pdhg() -> PdhgConfig {
    PdhgConfig { alpha_fit: 0.02, beta_frob: 0.2, gamma_log: 1.0, tau: 0.15, sigma: 0.05, max_iters: 500, tol: 1e-6 }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alt: AltConfig { mu: 0.1, spatial_cfg: desk_pdhg(), modality_cfg: desk_pdhg(), ..AltConfig::default() },
            layers: 3,
            graph_steps: 5,
            cg_steps: 5,
            epochs: 50,
            lr: 0.01,
            glf_alphas: GLF_ALPHA_GRID.to_vec(),
            svd_ranks: SVD_RANK_GRID.collect(),
            svd_iters: SVD_ITERS,
            dump_artifacts: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.alt.validate()?;
        if self.layers == 0 || self.graph_steps == 0 || self.cg_steps == 0 {
            return Err(Error::Parameter("layers, graph_steps and cg_steps must be positive".into()));
        }
        if !(self.lr >= 0.0) || self.glf_alphas.is_empty() || self.svd_ranks.is_empty() {
            return Err(Error::Parameter("lr must be >= 0 and the baseline grids nonempty".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The solver settings for an `n × m` signal, with each graph's primal
    /// step capped at 0.9 of its stability bound.
    pub fn alt_for(&self, n: usize, m: usize) -> AltConfig {
        let mut alt = self.alt;
        alt.spatial_cfg.tau = alt.spatial_cfg.tau.min(0.9 * alt.spatial_cfg.stable_tau(n));
        alt.modality_cfg.tau = alt.modality_cfg.tau.min(0.9 * alt.modality_cfg.stable_tau(m));
        alt
    }
}

/// Clean matrices of one fold with their global sample indices.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub index: usize,
    pub label: String,
    pub train: Vec<(usize, Mat)>,
    pub test: Vec<(usize, Mat)>,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub n: usize,
    pub m: usize,
    /// Column groups for the per-modality error.
    pub blocks: Vec<Vec<usize>>,
    pub layout: MaskLayout,
    pub folds: Vec<FoldData>,
}

/// Relative `csv_dir` entries resolve against `base`.
pub fn prepare(manifest: &DatasetManifest, base: Option<&Path>) -> Result<PreparedData> {
    manifest.validate()?;
    match manifest.kind {
        DatasetKind::Real => {
            let dir = manifest.csv_dir.clone().expect("validated");
            let dir = match base {
                Some(b) if dir.is_relative() => b.join(dir),
                _ => dir,
            };
            let data = ingest_real(&dir)?;
            let years = data.years();
            if years.len() != manifest.folds {
                return Err(Error::Validation(format!(
                    "manifest asks for {} folds but the data covers {} years (one fold per year)",
                    manifest.folds,
                    years.len()
                )));
            }
            let (n, m) = data.matrices[0].data.dim();
            let index_of = |year: i32, month: u32| {
                data.matrices.iter().position(|x| x.year == year && x.month == month).expect("present")
            };
            let folds = data
                .folds()
                .into_iter()
                .take(manifest.fold_count())
                .enumerate()
                .map(|(i, f)| {
                    let tag = |v: Vec<twofold::datasets::RealMatrix>| {
                        v.into_iter().map(|x| (index_of(x.year, x.month), x.data)).collect()
                    };
                    FoldData {
                        index: i,
                        label: format!("year {}", f.held_out_year),
                        train: tag(f.train),
                        test: tag(f.test),
                    }
                })
                .collect();
            Ok(PreparedData { n, m, blocks: contiguous_blocks(m, 4), layout: manifest.mask_layout(), folds })
        }
        _ => {
            let data = generate_synthetic(manifest)?;
            let count = data.clean.len();
            let folds = (0..manifest.fold_count())
                .map(|f| {
                    let (train, test) = fold_split(count, manifest.folds, f);
                    let pick = |ids: Vec<usize>| ids.into_iter().map(|i| (i, data.clean[i].clone())).collect();
                    FoldData { index: f, label: format!("fold {f}"), train: pick(train), test: pick(test) }
                })
                .collect();
            Ok(PreparedData {
                n: manifest.n,
                m: manifest.m,
                blocks: label_blocks(&data.graph.assignment.labels),
                layout: manifest.mask_layout(),
                folds,
            })
        }
    }
}

/// Noisy masked observations of `(index, clean)` pairs in one cell.
pub fn observe_all(set: &[(usize, Mat)], seed: u64, cell: &Cell, layout: MaskLayout) -> Result<Vec<Sample>> {
    set.iter()
        .map(|(i, x)| {
            let (y, mask) = observe(x, seed, *i, cell, layout)?;
            Ok(Sample { y, x_gt: x.clone(), mask })
        })
        .collect()
}

/// Outcome of one method in one (fold, cell).
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub method: Method,
    pub fold: usize,
    pub cell: Cell,
    pub seed: u64,
    /// Mean over the fold's test samples; `None` if training diverged.
    pub metrics: Option<Metrics>,
    pub runtime_s: f64,
    pub status: String,
}

/// A hyperparameter picked during the run.
#[derive(Debug, Clone)]
pub struct Selection {
    pub method: Method,
    pub fold: usize,
    pub cell: Cell,
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub method: Method,
    pub fold: usize,
    pub cell: Cell,
    pub epoch: usize,
    pub loss: f64,
}

/// Trained model plus its per-layer graphs on the first test sample.
#[derive(Debug, Clone)]
pub struct TrainedArtifact {
    pub method: Method,
    pub fold: usize,
    pub cell: Cell,
    pub model: UnrolledModel,
    /// `(W_s, W̄_m)` per layer.
    pub graphs: Vec<(Mat, Mat)>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResult {
    pub rows: Vec<ReportRow>,
    pub selections: Vec<Selection>,
    pub curves: Vec<CurvePoint>,
    pub artifacts: Vec<TrainedArtifact>,
}

fn mean_metrics(all: &[Metrics]) -> Metrics {
    let k = all.len() as f64;
    let blocks = all[0].per_modality_nmse.len();
    Metrics {
        masked_mse_nm: all.iter().map(|m| m.masked_mse_nm).sum::<f64>() / k,
        masked_mse_missing: all.iter().map(|m| m.masked_mse_missing).sum::<f64>() / k,
        whole_mse: all.iter().map(|m| m.whole_mse).sum::<f64>() / k,
        per_modality_nmse: (0..blocks).map(|b| all.iter().map(|m| m.per_modality_nmse[b]).sum::<f64>() / k).collect(),
    }
}

/// Test-set metrics averaged over samples.
pub fn score(estimates: &[Mat], test: &[Sample], blocks: &[Vec<usize>]) -> Result<Metrics> {
    let all: Vec<Metrics> =
        estimates.iter().zip(test).map(|(x, s)| evaluate(x, &s.x_gt, &s.mask, blocks)).collect::<Result<_>>()?;
    Ok(mean_metrics(&all))
}

fn mean_train_loss(set: &[Sample], f: impl Fn(&Sample) -> Result<Mat>) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        total += evaluate(&f(s)?, &s.x_gt, &s.mask, &[])?.masked_mse_nm;
    }
    Ok(total / set.len() as f64)
}

/// First grid value with the lowest mean training masked MSE.
fn grid_pick<T: Copy>(grid: &[T], set: &[Sample], f: impl Fn(&Sample, T) -> Result<Mat>) -> Result<T> {
    let mut best = (f64::INFINITY, grid[0]);
    for &v in grid {
        let loss = mean_train_loss(set, |s| f(s, v))?;
        if loss < best.0 {
            best = (loss, v);
        }
    }
    Ok(best.1)
}

/// Untrained model for `variant`: plain gradient steps (`κ = 1`, `ξ ≈ 0`),
/// or, when those already blow up on the training set, the mean exact CG
/// coefficients. Returns the model and which initialization was used.
pub fn initial_model(
    cfg: &ExperimentConfig,
    alt: &AltConfig,
    variant: Variant,
    train_set: &[Sample],
) -> Result<(UnrolledModel, &'static str)> {
    let mut model = init_variant(alt, cfg.layers, cfg.graph_steps, cfg.cg_steps, variant);
    match mean_loss(&model, train_set) {
        Ok(loss) if loss <= DIVERGENCE_LOSS => return Ok((model, "plain")),
        Ok(_) | Err(Error::Numerical(_)) => {}
        Err(e) => return Err(e),
    }
    let pairs: Vec<(Mat, Mask)> = train_set.iter().map(|s| (s.y.clone(), s.mask.clone())).collect();
    calibrate_cg_steps(&mut model, &pairs)?;
    Ok((model, "calibrated"))
}

struct Job<'a> {
    fold: &'a FoldData,
    cell: Cell,
    cell_index: usize,
}

fn run_job(
    job: &Job<'_>,
    data: &PreparedData,
    methods: &[Method],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentResult> {
    let alt = cfg.alt_for(data.n, data.m);
    let train_set = observe_all(&job.fold.train, seed, &job.cell, data.layout)?;
    let test_set = observe_all(&job.fold.test, seed, &job.cell, data.layout)?;
    let (fold, cell) = (job.fold.index, job.cell);
    let mut out = ExperimentResult::default();
    let mut select = |method, name: &str, value: String| {
        out.selections.push(Selection { method, fold, cell, name: name.into(), value })
    };
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut artifacts = Vec::new();
    for &method in methods {
        let start = Instant::now();
        let row = |metrics, status: &str, start: Instant| ReportRow {
            method,
            fold,
            cell,
            seed,
            metrics,
            runtime_s: start.elapsed().as_secs_f64(),
            status: status.into(),
        };
        match method {
            Method::Glf => {
                let alpha = grid_pick(&cfg.glf_alphas, &train_set, |s, a| baseline_glf(&s.y, &s.mask, a))?;
                select(method, "alpha", alpha.to_string());
                let est: Vec<Mat> =
                    test_set.iter().map(|s| baseline_glf(&s.y, &s.mask, alpha)).collect::<Result<_>>()?;
                rows.push(row(Some(score(&est, &test_set, &data.blocks)?), "ok", start));
            }
            Method::Svd => {
                let ranks: Vec<usize> =
                    cfg.svd_ranks.iter().copied().filter(|&r| r >= 1 && r <= data.n.min(data.m)).collect();
                if ranks.is_empty() {
                    return Err(Error::Parameter("no SVD rank fits the data".into()));
                }
                let iters = cfg.svd_iters;
                let rank = grid_pick(&ranks, &train_set, |s, r| baseline_svd(&s.y, &s.mask, r, iters))?;
                select(method, "rank", rank.to_string());
                let est: Vec<Mat> =
                    test_set.iter().map(|s| baseline_svd(&s.y, &s.mask, rank, iters)).collect::<Result<_>>()?;
                rows.push(row(Some(score(&est, &test_set, &data.blocks)?), "ok", start));
            }
            Method::Iterative => {
                let est: Vec<Mat> =
                    test_set.iter().map(|s| Ok(alternate(&s.y, &s.mask, &alt)?.x)).collect::<Result<_>>()?;
                rows.push(row(Some(score(&est, &test_set, &data.blocks)?), "ok", start));
            }
            _ => {
                let variant = method.variant().expect("unrolled method");
                let train_seed = derive_seed(seed, &[fold as u64, job.cell_index as u64, method as u64]);
                let trained = initial_model(cfg, &alt, variant, &train_set).and_then(|(model, init)| {
                    select(method, "init", init.to_string());
                    train(&model, &train_set, cfg.epochs, cfg.lr, train_seed)
                });
                let (model, curve) = match trained {
                    Ok(t) => t,
                    Err(Error::Numerical(msg)) => {
                        rows.push(row(None, &format!("diverged: {msg}"), start));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let outputs: Result<Vec<_>> = test_set.iter().map(|s| forward(&model, &s.y, &s.mask)).collect();
                let outputs = match outputs {
                    Ok(o) => o,
                    Err(Error::Numerical(msg)) => {
                        rows.push(row(None, &format!("diverged: {msg}"), start));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let est: Vec<Mat> = outputs.iter().map(|o| o.x.clone()).collect();
                let metrics = score(&est, &test_set, &data.blocks)?;
                let status = if metrics.masked_mse_nm.is_finite() { "ok" } else { "diverged: non-finite estimate" };
                rows.push(row(Some(metrics), status, start));
                curves.extend(curve.iter().enumerate().map(|(epoch, &loss)| CurvePoint {
                    method,
                    fold,
                    cell,
                    epoch,
                    loss,
                }));
                let graphs = outputs[0]
                    .layers
                    .iter()
                    .map(|l| (off_diagonal_weights(&l.spatial), off_diagonal_weights(&l.modality)))
                    .collect();
                artifacts.push(TrainedArtifact { method, fold, cell, model, graphs });
            }
        }
    }
    out.rows = rows;
    out.curves = curves;
    out.artifacts = artifacts;
    Ok(out)
}

/// `W = diag(L) − L` with a zero diagonal: the (signed) adjacency behind a
/// Laplacian.
pub fn off_diagonal_weights(l: &Mat) -> Mat {
    let mut w = -l;
    w.diag_mut().fill(0.0);
    w
}

/// Runs every method on every (fold, cell). Rows come back sorted by
/// [`row_order`].
pub fn run_experiment(
    manifest: &DatasetManifest,
    base: Option<&Path>,
    methods: &[Method],
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Validation("no methods selected".into()));
    }
    let data = prepare(manifest, base)?;
    let cells = manifest.cells();
    let jobs: Vec<Job<'_>> = data
        .folds
        .iter()
        .flat_map(|fold| cells.iter().enumerate().map(move |(cell_index, &cell)| Job { fold, cell, cell_index }))
        .collect();
    let results: Vec<ExperimentResult> =
        jobs.par_iter().map(|job| run_job(job, &data, methods, cfg, manifest.seed)).collect::<Result<_>>()?;
    let mut all = ExperimentResult::default();
    for r in results {
        all.rows.extend(r.rows);
        all.selections.extend(r.selections);
        all.curves.extend(r.curves);
        all.artifacts.extend(r.artifacts);
    }
    all.rows.sort_by(|a, b| row_order((a.method, a.fold, &a.cell), (b.method, b.fold, &b.cell)));
    all.selections.sort_by(|a, b| {
        row_order((a.method, a.fold, &a.cell), (b.method, b.fold, &b.cell)).then_with(|| a.name.cmp(&b.name))
    });
    all.curves.sort_by(|a, b| {
        row_order((a.method, a.fold, &a.cell), (b.method, b.fold, &b.cell)).then(a.epoch.cmp(&b.epoch))
    });
    all.artifacts.sort_by(|a, b| row_order((a.method, a.fold, &a.cell), (b.method, b.fold, &b.cell)));
    Ok(all)
}

/// Report order: method, fold, SNR, rate, pattern.
pub fn row_order(a: (Method, usize, &Cell), b: (Method, usize, &Cell)) -> Ordering {
    a.0.cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.snr_db.total_cmp(&b.2.snr_db))
        .then(a.2.rate.total_cmp(&b.2.rate))
        .then(a.2.pattern.cmp(&b.2.pattern))
}

/// Directory of the manifest file, for resolving relative paths in it.
pub fn manifest_base(path: &Path) -> Option<PathBuf> {
    path.parent().map(Path::to_path_buf)
}
