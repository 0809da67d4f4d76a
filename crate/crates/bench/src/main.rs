use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use twofold::alt::alternate;
use twofold::baselines::{baseline_glf, baseline_svd};
use twofold::datasets::{generate_synthetic, ingest_real, observe, DatasetKind, DatasetManifest};
use twofold::matrix::{load_csv, save_csv};
use twofold::signal::Mask;
use twofold::unrolled::{forward, train, UnrolledModel, Variant};
use twofold::{Error, Mat, Result};
use twofold_bench::experiment::{
    initial_model, manifest_base, observe_all, off_diagonal_weights, prepare, run_experiment, score, ReportRow,
};
use twofold_bench::report::{write_all, write_param_table, write_report};
use twofold_bench::{ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "twofold", version, about = "Multimodal graph-signal restoration and twofold graph learning")]
struct Cli {
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Experiment config JSON; missing fields take the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset of a manifest: graphs, clean samples, observations.
    Generate { manifest: PathBuf },
    /// Restore one observed matrix.
    Restore {
        /// Observations; non-finite entries count as missing when no mask is given.
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "iterative")]
        method: RestoreMethod,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        /// Checkpoint for `--method unrolled`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learn both graphs from one observed matrix with the iterative solver.
    LearnGraph {
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train an unrolled model on the training split of one fold and cell.
    Train {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Index into the manifest's (pattern, rate, snr) cells.
        #[arg(long, default_value_t = 0)]
        cell: usize,
    },
    /// Evaluate a checkpoint on the test split of one fold, all cells.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Full cross-validated comparison.
    Bench {
        manifest: PathBuf,
        /// Comma-separated subset of glf, svd, iterative, unrolled-full,
        /// unrolled-fixed-modality, unrolled-without-gl.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Fill `runtime_s` in report.csv (makes it run-dependent).
        #[arg(long)]
        record_runtime: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RestoreMethod {
    Glf,
    Svd,
    Iterative,
    Unrolled,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    FixedModality,
    WithoutGl,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::FixedModality => Variant::FixedModality,
            VariantArg::WithoutGl => Variant::WithoutGl,
        }
    }
}

fn load_manifest(path: &Path, seed: Option<u64>) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::load(path)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    Ok(m)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Observation and mask from CSV; without a mask file, non-finite entries are
/// the missing ones.
fn load_observation(y: &Path, mask: Option<&Path>) -> Result<(Mat, Mask)> {
    let raw = load_csv(y)?;
    match mask {
        Some(p) => {
            let mask = Mask::new(load_csv(p)?)?;
            if mask.dim() != raw.dim() {
                return Err(Error::Dimension(format!("mask {:?} vs observations {:?}", mask.dim(), raw.dim())));
            }
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("observations contain non-finite values".into()));
            }
            Ok((raw, mask))
        }
        None => {
            let (n, m) = raw.dim();
            let mask = Mask::from_bools(n, m, |i, j| raw[[i, j]].is_finite());
            Ok((raw.mapv(|v| if v.is_finite() { v } else { 0.0 }), mask))
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn generate(cli: &Cli, manifest_path: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path, cli.seed)?;
    let out = &cli.out_dir;
    fs::create_dir_all(out.join("samples"))?;
    let samples: Vec<(String, Mat)> = match manifest.kind {
        DatasetKind::Real => {
            let dir = manifest.csv_dir.clone().expect("validated");
            let dir = match manifest_base(manifest_path) {
                Some(b) if dir.is_relative() => b.join(dir),
                _ => dir,
            };
            let data = ingest_real(dir)?;
            fs::write(out.join("stations.txt"), data.stations.join("\n") + "\n")?;
            data.matrices.into_iter().map(|m| (format!("{}_{:02}", m.year, m.month), m.data)).collect()
        }
        _ => {
            let data = generate_synthetic(&manifest)?;
            let g = &data.graph;
            fs::create_dir_all(out.join("graph"))?;
            save_csv(g.spatial.matrix(), out.join("graph/spatial_laplacian.csv"))?;
            save_csv(g.spatial_adjacency.weights(), out.join("graph/spatial_weights.csv"))?;
            save_csv(g.modality.weights(), out.join("graph/modality_weights.csv"))?;
            save_csv(g.modality_laplacian.matrix(), out.join("graph/modality_laplacian.csv"))?;
            save_csv(&g.positions, out.join("graph/positions.csv"))?;
            write_json(&out.join("graph/communities.json"), &serde_json::to_value(&g.assignment)?)?;
            data.clean.into_iter().enumerate().map(|(i, x)| (format!("{i:03}"), x)).collect()
        }
    };
    for (index, (name, x)) in samples.iter().enumerate() {
        save_csv(x, out.join(format!("samples/sample_{name}.csv")))?;
        let meta = json!({ "index": index, "name": name, "kind": manifest.kind, "rows": x.nrows(), "cols": x.ncols(), "seed": manifest.seed });
        write_json(&out.join(format!("samples/sample_{name}.json")), &meta)?;
    }
    for cell in manifest.cells() {
        let dir = out.join(format!("observations/{}_rate{}_snr{}", cell.pattern.as_str(), cell.rate, cell.snr_db));
        fs::create_dir_all(&dir)?;
        for (index, (name, x)) in samples.iter().enumerate() {
            let (y, mask) = observe(x, manifest.seed, index, &cell, manifest.mask_layout())?;
            save_csv(&y, dir.join(format!("y_{name}.csv")))?;
            save_csv(mask.values(), dir.join(format!("mask_{name}.csv")))?;
        }
    }
    write_json(&out.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn restore(
    cli: &Cli,
    y: &Path,
    mask: Option<&Path>,
    method: RestoreMethod,
    alpha: f64,
    rank: usize,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let (y, mask) = load_observation(y, mask)?;
    let cfg = load_config(cli.config.as_deref())?;
    let x = match method {
        RestoreMethod::Glf => baseline_glf(&y, &mask, alpha)?,
        RestoreMethod::Svd => baseline_svd(&y, &mask, rank, cfg.svd_iters)?,
        RestoreMethod::Iterative => alternate(&y, &mask, &cfg.alt_for(y.nrows(), y.ncols()))?.x,
        RestoreMethod::Unrolled => {
            let path = checkpoint.ok_or_else(|| Error::Validation("--method unrolled needs --checkpoint".into()))?;
            forward(&UnrolledModel::load(path)?, &y, &mask)?.x
        }
    };
    fs::create_dir_all(&cli.out_dir)?;
    let path = cli.out_dir.join("restored.csv");
    save_csv(&x, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn learn_graph(cli: &Cli, y: &Path, mask: Option<&Path>) -> Result<()> {
    let (y, mask) = load_observation(y, mask)?;
    let cfg = load_config(cli.config.as_deref())?;
    let out = alternate(&y, &mask, &cfg.alt_for(y.nrows(), y.ncols()))?;
    let dir = &cli.out_dir;
    fs::create_dir_all(dir)?;
    save_csv(out.spatial.matrix(), dir.join("spatial_laplacian.csv"))?;
    save_csv(&off_diagonal_weights(out.spatial.matrix()), dir.join("spatial_weights.csv"))?;
    save_csv(out.modality.matrix(), dir.join("modality_laplacian.csv"))?;
    save_csv(&off_diagonal_weights(out.modality.matrix()), dir.join("modality_weights.csv"))?;
    save_csv(&out.x, dir.join("restored.csv"))?;
    write_json(&dir.join("trace.json"), &serde_json::to_value(&out.trace)?)?;
    println!("{} cycles; graphs written to {}", out.trace.len(), dir.display());
    Ok(())
}

fn train_cmd(cli: &Cli, manifest_path: &Path, variant: Variant, fold: usize, cell: usize) -> Result<()> {
    let manifest = load_manifest(manifest_path, cli.seed)?;
    let cfg = load_config(cli.config.as_deref())?;
    let data = prepare(&manifest, manifest_base(manifest_path).as_deref())?;
    let fold_data = data
        .folds
        .get(fold)
        .ok_or_else(|| Error::Validation(format!("fold {fold} out of range ({} folds)", data.folds.len())))?;
    let cells = manifest.cells();
    let c = cells
        .get(cell)
        .ok_or_else(|| Error::Validation(format!("cell {cell} out of range ({} cells)", cells.len())))?;
    let set = observe_all(&fold_data.train, manifest.seed, c, data.layout)?;
    let alt = cfg.alt_for(data.n, data.m);
    let (model, init) = initial_model(&cfg, &alt, variant, &set)?;
    let (model, curve) = train(&model, &set, cfg.epochs, cfg.lr, manifest.seed)?;
    let out = &cli.out_dir;
    fs::create_dir_all(out)?;
    model.save(out.join("checkpoint.json"))?;
    write_param_table(&model, &out.join("params.csv"))?;
    let mut w = csv::Writer::from_path(out.join("curve.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in curve.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    println!(
        "{init} init; loss {} -> {} over {} epochs",
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        curve.len()
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, manifest_path: &Path, checkpoint: &Path, fold: usize) -> Result<()> {
    let manifest = load_manifest(manifest_path, cli.seed)?;
    let model = UnrolledModel::load(checkpoint)?;
    let data = prepare(&manifest, manifest_base(manifest_path).as_deref())?;
    let fold_data = data
        .folds
        .get(fold)
        .ok_or_else(|| Error::Validation(format!("fold {fold} out of range ({} folds)", data.folds.len())))?;
    let mut rows = Vec::new();
    for cell in manifest.cells() {
        let start = std::time::Instant::now();
        let set = observe_all(&fold_data.test, manifest.seed, &cell, data.layout)?;
        let est: Vec<Mat> = set.iter().map(|s| Ok(forward(&model, &s.y, &s.mask)?.x)).collect::<Result<_>>()?;
        let metrics = score(&est, &set, &data.blocks)?;
        rows.push(ReportRow {
            method: Method::from_variant(model.variant),
            fold,
            cell,
            seed: manifest.seed,
            metrics: Some(metrics),
            runtime_s: start.elapsed().as_secs_f64(),
            status: "ok".into(),
        });
    }
    fs::create_dir_all(&cli.out_dir)?;
    let path = cli.out_dir.join("metrics.csv");
    write_report(&rows, &path, true)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn bench(cli: &Cli, manifest_path: &Path, methods: Option<&[String]>, record_runtime: bool) -> Result<()> {
    let manifest = load_manifest(manifest_path, cli.seed)?;
    let cfg = load_config(cli.config.as_deref())?;
    let methods: Vec<Method> = match methods {
        Some(list) => list.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?,
        None => Method::ALL.to_vec(),
    };
    let result = run_experiment(&manifest, manifest_base(manifest_path).as_deref(), &methods, &cfg)?;
    write_all(&result, &cli.out_dir, record_runtime, cfg.dump_artifacts)?;
    let run = json!({
        "manifest": manifest,
        "config": cfg,
        "methods": methods,
    });
    write_json(&cli.out_dir.join("run.json"), &run)?;
    let diverged = result.rows.iter().filter(|r| r.status != "ok").count();
    println!("{} rows ({} diverged) written to {}", result.rows.len(), diverged, cli.out_dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Parameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Generate { manifest } => generate(cli, manifest),
        Command::Restore { y, mask, method, alpha, rank, checkpoint } => {
            restore(cli, y, mask.as_deref(), *method, *alpha, *rank, checkpoint.as_deref())
        }
        Command::LearnGraph { y, mask } => learn_graph(cli, y, mask.as_deref()),
        Command::Train { manifest, variant, fold, cell } => train_cmd(cli, manifest, (*variant).into(), *fold, *cell),
        Command::Eval { manifest, checkpoint, fold } => eval_cmd(cli, manifest, checkpoint, *fold),
        Command::Bench { manifest, methods, record_runtime } => {
            bench(cli, manifest, methods.as_deref(), *record_runtime)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(3),
                e if e.is_validation() => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
