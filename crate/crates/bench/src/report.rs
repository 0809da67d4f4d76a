//! CSV and JSON emission for experiment results. Everything except
//! `timings.csv` is a pure function of the manifest, config and seed.

use std::fs;
use std::path::Path;

use twofold::autodiff::softplus;
use twofold::datasets::Cell;
use twofold::matrix::save_csv;
use twofold::unrolled::UnrolledModel;
use twofold::Result;

use crate::experiment::{row_order, ExperimentResult, Method, ReportRow};

pub const REPORT_FILE: &str = "report.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Shortest round-trip formatting, so values re-parse bit-exactly.
fn num(v: f64) -> String {
    v.to_string()
}

fn cell_fields(c: &Cell) -> [String; 3] {
    [c.pattern.as_str().to_string(), num(c.rate), num(c.snr_db)]
}

/// File-name fragment for a (method, fold, cell).
pub fn run_tag(method: Method, fold: usize, c: &Cell) -> String {
    format!("{}_fold{}_{}_rate{}_snr{}", method, fold, c.pattern.as_str(), c.rate, c.snr_db)
}

fn block_count(rows: &[ReportRow]) -> usize {
    rows.iter().filter_map(|r| r.metrics.as_ref()).map(|m| m.per_modality_nmse.len()).max().unwrap_or(0)
}

/// Metric columns in report order.
fn metric_names(blocks: usize) -> Vec<String> {
    let mut names: Vec<String> = ["masked_mse_nm", "masked_mse_missing", "whole_mse"].map(String::from).to_vec();
    names.extend((1..=blocks).map(|b| format!("nmse_mod{b}")));
    names
}

fn metric_values(r: &ReportRow, blocks: usize) -> Vec<f64> {
    match &r.metrics {
        Some(m) => {
            let mut v = vec![m.masked_mse_nm, m.masked_mse_missing, m.whole_mse];
            v.extend((0..blocks).map(|b| m.per_modality_nmse.get(b).copied().unwrap_or(f64::NAN)));
            v
        }
        None => vec![f64::NAN; 3 + blocks],
    }
}

/// One row per (method, fold, cell). `runtime_s` is left empty unless
/// `with_runtime`, which keeps the file reproducible byte for byte.
pub fn write_report(rows: &[ReportRow], path: &Path, with_runtime: bool) -> Result<()> {
    let blocks = block_count(rows);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["method", "fold", "pattern", "rate", "snr_db", "seed"].map(String::from).to_vec();
    header.extend(metric_names(blocks));
    header.extend(["runtime_s", "status"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.to_string(), r.fold.to_string()];
        rec.extend(cell_fields(&r.cell));
        rec.push(r.seed.to_string());
        rec.extend(metric_values(r, blocks).into_iter().map(num));
        rec.push(if with_runtime { num(r.runtime_s) } else { String::new() });
        rec.push(r.status.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean ± std over folds of every metric, per (method, cell), from the rows
/// whose status is `ok`.
pub fn write_aggregate(rows: &[ReportRow], path: &Path) -> Result<()> {
    let blocks = block_count(rows);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["method", "pattern", "rate", "snr_db", "folds"].map(String::from).to_vec();
    for name in metric_names(blocks) {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header)?;
    let mut groups: Vec<(Method, Cell, Vec<&ReportRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(m, c, _)| *m == r.method && c == &r.cell) {
            Some(g) => g.2.push(r),
            None => groups.push((r.method, r.cell, vec![r])),
        }
    }
    groups.sort_by(|a, b| row_order((a.0, 0, &a.1), (b.0, 0, &b.1)));
    for (method, cell, members) in groups {
        let ok: Vec<&ReportRow> = members.into_iter().filter(|r| r.status == "ok").collect();
        let mut rec = vec![method.to_string()];
        rec.extend(cell_fields(&cell));
        rec.push(ok.len().to_string());
        let values: Vec<Vec<f64>> = ok.iter().map(|r| metric_values(r, blocks)).collect();
        for k in 0..3 + blocks {
            let col: Vec<f64> = values.iter().map(|v| v[k]).collect();
            let (mean, std) = mean_std(&col);
            rec.push(num(mean));
            rec.push(num(std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Effective parameters as `layer,module,step,name,value`.
pub fn write_param_table(model: &UnrolledModel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "module", "step", "name", "value"])?;
    for (l, layer) in model.layers.iter().enumerate() {
        for (module, steps) in [("modality", &layer.gl_modality), ("spatial", &layer.gl_spatial)] {
            for (t, s) in steps.iter().enumerate() {
                let e = s.effective();
                for (name, v) in [
                    ("alpha_fit", e.alpha_fit),
                    ("beta_frob", e.beta_frob),
                    ("gamma_log", e.gamma_log),
                    ("tau", e.tau),
                    ("sigma", e.sigma),
                ] {
                    w.write_record([l.to_string(), module.into(), t.to_string(), name.into(), num(v)])?;
                }
            }
        }
        for (k, (kappa, xi)) in layer.sr.kappa.iter().zip(&layer.sr.xi).enumerate() {
            w.write_record([l.to_string(), "signal".into(), k.to_string(), "kappa".into(), num(softplus(*kappa))])?;
            w.write_record([l.to_string(), "signal".into(), k.to_string(), "xi".into(), num(softplus(*xi))])?;
        }
        w.write_record([l.to_string(), "signal".into(), String::new(), "mu".into(), num(softplus(layer.sr.mu))])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every result file under `out_dir`.
pub fn write_all(result: &ExperimentResult, out_dir: &Path, with_runtime: bool, artifacts: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_report(&result.rows, &out_dir.join(REPORT_FILE), with_runtime)?;
    write_aggregate(&result.rows, &out_dir.join(AGGREGATE_FILE))?;

    let mut w = csv::Writer::from_path(out_dir.join("selection.csv"))?;
    w.write_record(["method", "fold", "pattern", "rate", "snr_db", "name", "value"])?;
    for s in &result.selections {
        let mut rec = vec![s.method.to_string(), s.fold.to_string()];
        rec.extend(cell_fields(&s.cell));
        rec.extend([s.name.clone(), s.value.clone()]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("curves.csv"))?;
    w.write_record(["method", "fold", "pattern", "rate", "snr_db", "epoch", "loss"])?;
    for c in &result.curves {
        let mut rec = vec![c.method.to_string(), c.fold.to_string()];
        rec.extend(cell_fields(&c.cell));
        rec.extend([c.epoch.to_string(), num(c.loss)]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("timings.csv"))?;
    w.write_record(["method", "fold", "pattern", "rate", "snr_db", "runtime_s"])?;
    for r in &result.rows {
        let mut rec = vec![r.method.to_string(), r.fold.to_string()];
        rec.extend(cell_fields(&r.cell));
        rec.push(num(r.runtime_s));
        w.write_record(&rec)?;
    }
    w.flush()?;

    if artifacts {
        for dir in ["checkpoints", "params", "graphs"] {
            fs::create_dir_all(out_dir.join(dir))?;
        }
        for a in &result.artifacts {
            let tag = run_tag(a.method, a.fold, &a.cell);
            a.model.save(out_dir.join("checkpoints").join(format!("{tag}.json")))?;
            write_param_table(&a.model, &out_dir.join("params").join(format!("{tag}.csv")))?;
            let gdir = out_dir.join("graphs").join(&tag);
            fs::create_dir_all(&gdir)?;
            for (l, (ws, wm)) in a.graphs.iter().enumerate() {
                save_csv(ws, gdir.join(format!("layer{l}_spatial_weights.csv")))?;
                save_csv(wm, gdir.join(format!("layer{l}_modality_weights.csv")))?;
            }
        }
    }
    Ok(())
}
