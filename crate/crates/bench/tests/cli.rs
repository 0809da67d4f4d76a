use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn twofold(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twofold")).arg("--out-dir").arg(out).args(args).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

const SMALL: &str = r#"{"kind":"piecewise-smooth","N":16,"M":10,"seed":3,"samples":4,"snr_db":[20],
    "pattern":["MCAR"],"rates":[0.2],"folds":2,"max_folds":2}"#;

fn write_manifest(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, text).unwrap();
    path
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn generate_writes_graphs_samples_and_observations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), SMALL);
    let out = dir.path().join("data");
    ok(&twofold(&["generate", manifest.to_str().unwrap()], &out));
    for f in ["graph/communities.json", "graph/spatial_laplacian.csv", "graph/modality_weights.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let samples = fs::read_dir(out.join("samples")).unwrap().count();
    assert_eq!(samples, 8);
    let obs = out.join("observations").join("MCAR_rate0.2_snr20");
    assert_eq!(fs::read_dir(&obs).unwrap().count(), 8);
    let mask = twofold::matrix::load_csv(obs.join("mask_000.csv")).unwrap();
    assert_eq!(mask.dim(), (16, 10));
    assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn invalid_manifest_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &SMALL.replace("[0.2]", "[1.5]"));
    let o = twofold(&["bench", manifest.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let o = twofold(&["bench", manifest.to_str().unwrap(), "--methods", "glf,nope"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overflowing_input_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let y = dir.path().join("y.csv");
    fs::write(&y, "1e308,1e308,1e308\n-1e308,1e308,-1e308\n1e308,-1e308,1e308\n1,2,3\n").unwrap();
    let o = twofold(&["restore", "--y", y.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn glf_only_bench_trains_nothing_and_aggregates_match_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&twofold(&["bench", manifest.to_str().unwrap(), "--methods", "glf"], &out));

    let (header, rows) = read_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[0] == "glf" && r.last().unwrap() == "ok"));
    let (_, curves) = read_rows(&out.join("curves.csv"));
    assert!(curves.is_empty());

    let (agg_header, agg) = read_rows(&out.join("aggregate.csv"));
    assert_eq!(agg.len(), 1);
    assert_eq!(agg[0][4], "2");
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let agg_col = |name: &str| agg_header.iter().position(|h| h == name).unwrap();
    for metric in ["masked_mse_nm", "masked_mse_missing", "whole_mse"] {
        let v: Vec<f64> = rows.iter().map(|r| r[col(metric)].parse().unwrap()).collect();
        let mean = (v[0] + v[1]) / 2.0;
        let std = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2)).sqrt();
        let got_mean: f64 = agg[0][agg_col(&format!("{metric}_mean"))].parse().unwrap();
        let got_std: f64 = agg[0][agg_col(&format!("{metric}_std"))].parse().unwrap();
        assert!((got_mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((got_std - std).abs() <= 1e-12 * std.abs().max(1.0));
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&twofold(&["bench", manifest.to_str().unwrap(), "--methods", "glf"], &a));
    ok(&twofold(&["--seed", "99", "bench", manifest.to_str().unwrap(), "--methods", "glf"], &b));
    let (_, ra) = read_rows(&a.join("report.csv"));
    let (_, rb) = read_rows(&b.join("report.csv"));
    assert_eq!(ra[0][5], "3");
    assert_eq!(rb[0][5], "99");
    assert_ne!(ra[0][6], rb[0][6]);
}

#[test]
fn restore_and_learn_graph_on_generated_observation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), SMALL);
    let data = dir.path().join("data");
    ok(&twofold(&["generate", manifest.to_str().unwrap()], &data));
    let obs = fs::read_dir(data.join("observations")).unwrap().next().unwrap().unwrap().path();
    let y = obs.join("y_000.csv");
    let mask = obs.join("mask_000.csv");
    let (y, mask) = (y.to_str().unwrap(), mask.to_str().unwrap());

    for method in ["glf", "svd", "iterative"] {
        let out = dir.path().join(method);
        ok(&twofold(&["restore", "--y", y, "--mask", mask, "--method", method], &out));
        let x = twofold::matrix::load_csv(out.join("restored.csv")).unwrap();
        assert_eq!(x.dim(), (16, 10));
        assert!(x.iter().all(|v| v.is_finite()));
    }
    let out = dir.path().join("graphs");
    ok(&twofold(&["learn-graph", "--y", y, "--mask", mask], &out));
    assert!(out.join("restored.csv").exists() && out.join("trace.json").exists());
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), SMALL);
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"layers":1,"graph_steps":2,"cg_steps":2,"epochs":3}"#).unwrap();
    let m = manifest.to_str().unwrap();
    let c = config.to_str().unwrap();
    let trained = dir.path().join("trained");
    ok(&twofold(&["--config", c, "train", m, "--variant", "without-gl"], &trained));
    let ckpt = trained.join("checkpoint.json");
    let model = twofold::unrolled::UnrolledModel::load(&ckpt).unwrap();
    assert_eq!(model.layers.len(), 1);
    let (_, curve) = read_rows(&trained.join("curve.csv"));
    assert_eq!(curve.len(), 3);

    let evaluated = dir.path().join("eval");
    ok(&twofold(&["--config", c, "eval", m, "--checkpoint", ckpt.to_str().unwrap()], &evaluated));
    let (_, rows) = read_rows(&evaluated.join("metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "unrolled-without-gl");
}
