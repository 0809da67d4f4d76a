//! Synthetic twofold graphs and signals, observation masks, and ingestion of
//! the station-level meteorological CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    knn_graph, laplacian_from_adjacency, signed_laplacian, AdjacencyMatrix, Laplacian, SignedAdjacency, SignedLaplacian,
};
use crate::matrix::Mat;
use crate::rng::{derive_seed, rng};
use crate::signal::{add_noise_snr, sample_with_factors, sqrt_covariance, Mask};

/// Sub-seed tags.
const TAG_GRAPH: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_MASK: u64 = 4;
const TAG_ATTEMPT: u64 = 5;

pub const COMMUNITIES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    MatrixNormal,
    PiecewiseSmooth,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MissingPattern {
    /// Missing completely at random, entrywise.
    Mcar,
    /// Random station outages: contiguous blackouts on selected rows.
    Mrso,
}

impl MissingPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingPattern::Mcar => "MCAR",
            MissingPattern::Mrso => "MRSO",
        }
    }

    fn tag(self) -> u64 {
        match self {
            MissingPattern::Mcar => 0,
            MissingPattern::Mrso => 1,
        }
    }
}

/// SBM and spatial-graph settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphGenConfig {
    pub knn: usize,
    pub p_intra: f64,
    pub q_inter: f64,
    pub weight_min: f64,
    pub weight_max: f64,
}

impl Default for GraphGenConfig {
    fn default() -> Self {
        GraphGenConfig { knn: 6, p_intra: 0.3, q_inter: 0.5, weight_min: 0.1, weight_max: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    /// Community of each modality, in `1..=6`.
    pub labels: Vec<usize>,
    /// Group sign of each community (index `j − 1`).
    pub polarity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TwofoldGraph {
    pub spatial: Laplacian,
    pub spatial_adjacency: AdjacencyMatrix,
    pub modality: SignedAdjacency,
    pub modality_laplacian: SignedLaplacian,
    pub assignment: CommunityAssignment,
    /// Node coordinates in the unit square.
    pub positions: Mat,
}

pub fn gen_twofold_graph(n: usize, m: usize, seed: u64) -> Result<TwofoldGraph> {
    gen_twofold_graph_with(n, m, seed, &GraphGenConfig::default())
}

/// Spatial kNN graph on uniform points (regenerated until connected) and a
/// signed SBM over the modalities.
pub fn gen_twofold_graph_with(n: usize, m: usize, seed: u64, cfg: &GraphGenConfig) -> Result<TwofoldGraph> {
    if n <= cfg.knn || m < COMMUNITIES {
        return Err(Error::Parameter(format!("need N > {} and M >= {COMMUNITIES}, got N={n}, M={m}", cfg.knn)));
    }
    let mut found = None;
    for attempt in 0..10 {
        let mut r = rng(derive_seed(seed, &[TAG_GRAPH, TAG_ATTEMPT, attempt]));
        let positions = Array2::from_shape_simple_fn((n, 2), || r.random::<f64>());
        let w = knn_graph(&positions, cfg.knn, None)?;
        if w.is_connected() {
            found = Some((positions, w));
            break;
        }
    }
    let Some((positions, spatial_adjacency)) = found else {
        return Err(Error::Numerical("no connected spatial graph after 10 attempts".into()));
    };

    let mut r = rng(derive_seed(seed, &[TAG_GRAPH]));
    let mut labels: Vec<usize> = (0..m).map(|i| i % COMMUNITIES + 1).collect();
    labels.shuffle(&mut r);
    let mut groups: Vec<usize> = (0..COMMUNITIES).collect();
    groups.shuffle(&mut r);
    let mut polarity = vec![1.0; COMMUNITIES];
    for &c in &groups[COMMUNITIES / 2..] {
        polarity[c] = -1.0;
    }
    let mut w = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let (ci, cj) = (labels[i] - 1, labels[j] - 1);
            let p = if ci == cj { cfg.p_intra } else { cfg.q_inter };
            if r.random::<f64>() < p {
                let mag = r.random_range(cfg.weight_min..=cfg.weight_max);
                let v = mag * polarity[ci] * polarity[cj];
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
    }
    let modality = SignedAdjacency::new(w)?;
    Ok(TwofoldGraph {
        spatial: laplacian_from_adjacency(&spatial_adjacency),
        spatial_adjacency,
        modality_laplacian: signed_laplacian(&modality),
        modality,
        assignment: CommunityAssignment { labels, polarity },
        positions,
    })
}

/// `X ~ MN(0, L_s†, L̄_m†)`.
pub fn gen_matrix_normal_sample(graph: &TwofoldGraph, seed: u64) -> Result<Mat> {
    let a = sqrt_covariance(graph.spatial.matrix(), "spatial")?;
    let b = sqrt_covariance(graph.modality_laplacian.matrix(), "modality")?;
    Ok(sample_with_factors(&a, &b, seed))
}

/// Normalized modality index `t_m = m/(M−1)` for 0-based `m`.
pub fn modality_time(m: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        m as f64 / (count - 1) as f64
    }
}

/// Community offset `φ_j(t)`: `¼ sin(πt/2)` for odd `j`, shifted by `π` for even.
pub fn community_offset(j: usize, t: f64) -> f64 {
    let phase = if j % 2 == 1 { 0.0 } else { std::f64::consts::PI };
    0.25 * (std::f64::consts::FRAC_PI_2 * t - phase).sin()
}

/// Column `m` in community `j` is `x_j + φ_j(t_m) 1`, with six base signals
/// `x_j ~ N(0, L_s†)`.
pub fn gen_piecewise_smooth_sample(graph: &TwofoldGraph, seed: u64) -> Result<Mat> {
    let labels = &graph.assignment.labels;
    if labels.iter().any(|&c| c == 0 || c > COMMUNITIES) {
        return Err(Error::Validation("community labels must be in 1..=6".into()));
    }
    let a = sqrt_covariance(graph.spatial.matrix(), "spatial")?;
    let base = sample_with_factors(&a, &Array2::eye(COMMUNITIES), seed);
    let (n, m) = (graph.spatial.size(), labels.len());
    Ok(Array2::from_shape_fn((n, m), |(i, col)| {
        let j = labels[col];
        base[[i, j - 1]] + community_offset(j, modality_time(col, m))
    }))
}

/// Column structure seen by MRSO blackouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskLayout {
    /// No day axis: a blackout is a contiguous block of `⌈rate·M⌉` columns.
    Synthetic,
    /// Modality-major blocks of `days` columns each.
    Days { days: usize, modalities: usize },
}

pub const BLACKOUT_DAYS: usize = 14;

pub fn gen_mask(
    n: usize,
    m: usize,
    pattern: MissingPattern,
    rate: f64,
    seed: u64,
    layout: MaskLayout,
    blackout_days: usize,
) -> Result<Mask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("missing rate must be in [0, 1), got {rate}")));
    }
    let mut r = rng(seed);
    match pattern {
        MissingPattern::Mcar => Ok(Mask::from_bools(n, m, |_, _| r.random::<f64>() >= rate)),
        MissingPattern::Mrso => {
            let stations = (rate * n as f64).ceil() as usize;
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut r);
            let mut values = Array2::ones((n, m));
            for &row in &rows[..stations] {
                let cols: Vec<usize> = match layout {
                    MaskLayout::Synthetic => {
                        let len = ((rate * m as f64).ceil() as usize).max(1);
                        let start = r.random_range(0..=m - len);
                        (start..start + len).collect()
                    }
                    MaskLayout::Days { days, modalities } => {
                        if blackout_days > days || days * modalities != m {
                            return Err(Error::Parameter(format!(
                                "blackout of {blackout_days} days does not fit {modalities} blocks of {days} days in {m} columns"
                            )));
                        }
                        let start = r.random_range(0..=days - blackout_days);
                        (0..modalities)
                            .flat_map(|b| (start..start + blackout_days).map(move |d| b * days + d))
                            .collect()
                    }
                };
                for c in cols {
                    values[[row, c]] = 0.0;
                }
            }
            Mask::new(values)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    /// Number of signal samples (synthetic kinds).
    #[serde(default)]
    pub samples: usize,
    pub snr_db: Vec<f64>,
    pub pattern: Vec<MissingPattern>,
    pub rates: Vec<f64>,
    pub folds: usize,
    /// Only the first `max_folds` folds are run.
    #[serde(default)]
    pub max_folds: Option<usize>,
    /// Directory with the station CSVs (real kind).
    #[serde(default)]
    pub csv_dir: Option<PathBuf>,
    #[serde(default)]
    pub graph: GraphGenConfig,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Validation(format!("manifest: {m}")));
        if self.rates.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return err(format!("missing rates must lie in (0, 1), got {:?}", self.rates));
        }
        if self.folds < 2 {
            return err(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.pattern.is_empty() || self.rates.is_empty() {
            return err("pattern and rates must be nonempty".into());
        }
        if self.snr_db.iter().any(|s| s.is_nan()) {
            return err("snr_db contains NaN".into());
        }
        match self.kind {
            DatasetKind::Real => {
                if self.csv_dir.is_none() {
                    return err("real data needs csv_dir".into());
                }
            }
            _ => {
                if self.snr_db.is_empty() {
                    return err("synthetic data needs at least one snr_db level".into());
                }
                if self.samples < self.folds {
                    return err(format!("{} samples cannot fill {} folds", self.samples, self.folds));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Every (pattern, rate, SNR) combination. Real data with no SNR levels
    /// gets a single noiseless level.
    pub fn cells(&self) -> Vec<Cell> {
        let snrs = if self.snr_db.is_empty() { vec![f64::INFINITY] } else { self.snr_db.clone() };
        let mut out = Vec::new();
        for &pattern in &self.pattern {
            for &rate in &self.rates {
                for &snr_db in &snrs {
                    out.push(Cell { pattern, rate, snr_db });
                }
            }
        }
        out
    }

    pub fn mask_layout(&self) -> MaskLayout {
        match self.kind {
            DatasetKind::Real => MaskLayout::Days { days: DAYS_PER_MONTH, modalities: REAL_MODALITIES.len() },
            _ => MaskLayout::Synthetic,
        }
    }

    pub fn fold_count(&self) -> usize {
        self.max_folds.map_or(self.folds, |k| k.min(self.folds))
    }
}

/// One experiment condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub pattern: MissingPattern,
    pub rate: f64,
    /// `inf` means no added noise.
    pub snr_db: f64,
}

/// Contiguous k-fold split of `0..count`: `(train, test)` for `fold`.
pub fn fold_split(count: usize, folds: usize, fold: usize) -> (Vec<usize>, Vec<usize>) {
    let lo = fold * count / folds;
    let hi = (fold + 1) * count / folds;
    let train = (0..count).filter(|i| *i < lo || *i >= hi).collect();
    (train, (lo..hi).collect())
}

/// One synthetic graph with its clean samples.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub graph: TwofoldGraph,
    pub clean: Vec<Mat>,
}

pub fn generate_synthetic(manifest: &DatasetManifest) -> Result<SyntheticDataset> {
    let graph = gen_twofold_graph_with(manifest.n, manifest.m, manifest.seed, &manifest.graph)?;
    let clean = (0..manifest.samples as u64)
        .map(|i| {
            let s = derive_seed(manifest.seed, &[TAG_SAMPLE, i]);
            match manifest.kind {
                DatasetKind::MatrixNormal => gen_matrix_normal_sample(&graph, s),
                DatasetKind::PiecewiseSmooth => gen_piecewise_smooth_sample(&graph, s),
                DatasetKind::Real => Err(Error::Validation("real data is ingested, not generated".into())),
            }
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticDataset { graph, clean })
}

/// Noisy observation and mask of sample `index` in one experiment cell.
pub fn observe(clean: &Mat, seed: u64, index: usize, cell: &Cell, layout: MaskLayout) -> Result<(Mat, Mask)> {
    let noise_seed = derive_seed(seed, &[TAG_NOISE, index as u64, cell.snr_db.to_bits()]);
    let y = add_noise_snr(clean, cell.snr_db, noise_seed)?;
    let mask_seed = derive_seed(seed, &[TAG_MASK, index as u64, cell.pattern.tag(), cell.rate.to_bits()]);
    let (n, m) = clean.dim();
    let mask = gen_mask(n, m, cell.pattern, cell.rate, mask_seed, layout, BLACKOUT_DAYS)?;
    Ok((y, mask))
}

// -- real data ------------------------------------------------------------------

pub const REAL_MODALITIES: [&str; 4] = ["temperature", "pressure", "humidity", "sunshine"];
pub const DAYS_PER_MONTH: usize = 28;

/// One stacked station × (modality, day) matrix.
#[derive(Debug, Clone)]
pub struct RealMatrix {
    pub year: i32,
    pub month: u32,
    pub data: Mat,
}

#[derive(Debug, Clone)]
pub struct RealDataset {
    pub stations: Vec<String>,
    pub matrices: Vec<RealMatrix>,
}

/// Per-modality standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RealFold {
    pub held_out_year: i32,
    pub train: Vec<RealMatrix>,
    pub test: Vec<RealMatrix>,
    pub stats: BlockStats,
}

fn parse_date(s: &str) -> Option<(i32, u32, u32)> {
    let mut it = s.trim().split('-');
    let y = it.next()?.parse().ok()?;
    let m = it.next()?.parse().ok()?;
    let d = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((y, m, d))
}

/// (year, month, day) -> one value per modality.
type DayTable = BTreeMap<(i32, u32, u32), [f64; 4]>;

/// Reads `<station>_<year>.csv` files with columns
/// `date,temperature,pressure,humidity,sunshine` (dates `YYYY-MM-DD`) and
/// stacks the first 28 days of every month into `stations × 112` matrices,
/// columns modality-major. Any missing station-day is an error.
pub fn ingest_real(csv_dir: impl AsRef<Path>) -> Result<RealDataset> {
    let dir = csv_dir.as_ref();
    let mut table: BTreeMap<String, DayTable> = BTreeMap::new();
    let mut years = BTreeSet::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Validation(format!("no CSV files in {}", dir.display())));
    }
    for path in entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((station, year)) = stem.rsplit_once('_') else {
            return Err(Error::Format(format!("{}: expected <station>_<year>.csv", path.display())));
        };
        let year: i32 =
            year.parse().map_err(|_| Error::Format(format!("{}: bad year in file name", path.display())))?;
        years.insert(year);
        let rows = table.entry(station.to_string()).or_default();
        let mut rdr = csv::Reader::from_path(&path)?;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Format(format!("{}: malformed row {}", path.display(), line + 2));
            if rec.len() != 5 {
                return Err(bad());
            }
            let date = parse_date(&rec[0]).ok_or_else(bad)?;
            let mut vals = [0.0; 4];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = rec[k + 1].trim().parse().map_err(|_| bad())?;
            }
            rows.insert(date, vals);
        }
    }

    let stations: Vec<String> = table.keys().cloned().collect();
    let mut matrices = Vec::new();
    let mut gaps = Vec::new();
    for &year in &years {
        for month in 1..=12u32 {
            let mut data = Array2::zeros((stations.len(), DAYS_PER_MONTH * REAL_MODALITIES.len()));
            for (s, name) in stations.iter().enumerate() {
                for day in 1..=DAYS_PER_MONTH as u32 {
                    match table[name].get(&(year, month, day)) {
                        Some(vals) => {
                            for (k, v) in vals.iter().enumerate() {
                                data[[s, k * DAYS_PER_MONTH + day as usize - 1]] = *v;
                            }
                        }
                        None => gaps.push(format!("{name} {year}-{month:02}-{day:02}")),
                    }
                }
            }
            matrices.push(RealMatrix { year, month, data });
        }
    }
    if !gaps.is_empty() {
        let shown: Vec<_> = gaps.iter().take(20).cloned().collect();
        return Err(Error::Validation(format!("{} missing station-days, e.g. {}", gaps.len(), shown.join(", "))));
    }
    Ok(RealDataset { stations, matrices })
}

/// Mean and population standard deviation of every modality block over `mats`.
pub fn block_stats(mats: &[&Mat], blocks: usize) -> BlockStats {
    let cols = mats[0].ncols();
    let width = cols / blocks;
    let mut mean = Vec::with_capacity(blocks);
    let mut std = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let vals: Vec<f64> = mats
            .iter()
            .flat_map(|m| m.slice(ndarray::s![.., b * width..(b + 1) * width]).iter().copied().collect::<Vec<_>>())
            .collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
        mean.push(mu);
        std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    BlockStats { mean, std }
}

pub fn standardize(x: &Mat, stats: &BlockStats) -> Mat {
    let width = x.ncols() / stats.mean.len();
    let mut out = x.clone();
    for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let b = c / width;
        col.mapv_inplace(|v| (v - stats.mean[b]) / stats.std[b]);
    }
    out
}

impl RealDataset {
    pub fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.matrices.iter().map(|m| m.year).collect();
        set.into_iter().collect()
    }

    /// Leave-one-year-out folds, standardized with training-year statistics.
    pub fn folds(&self) -> Vec<RealFold> {
        self.years()
            .into_iter()
            .map(|held| {
                let (test, train): (Vec<_>, Vec<_>) = self.matrices.iter().cloned().partition(|m| m.year == held);
                let refs: Vec<&Mat> = train.iter().map(|m| &m.data).collect();
                let stats = block_stats(&refs, REAL_MODALITIES.len());
                let norm = |v: Vec<RealMatrix>| {
                    v.into_iter().map(|m| RealMatrix { data: standardize(&m.data, &stats), ..m }).collect()
                };
                RealFold { held_out_year: held, train: norm(train), test: norm(test), stats }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::path_graph;
    use crate::signal::twofold_smoothness;
    use std::io::Write;

    #[test]
    fn modality_graph_signs_follow_groups() {
        for seed in 0..20 {
            let g = gen_twofold_graph(20, 12, seed).unwrap();
            let w = g.modality.weights();
            let a = &g.assignment;
            assert_eq!(crate::matrix::asymmetry(w), 0.0);
            for i in 0..12 {
                assert_eq!(w[[i, i]], 0.0);
                for j in 0..12 {
                    let same = a.polarity[a.labels[i] - 1] == a.polarity[a.labels[j] - 1];
                    if same {
                        assert!(w[[i, j]] >= 0.0);
                    } else {
                        assert!(w[[i, j]] <= 0.0);
                    }
                    let mag = w[[i, j]].abs();
                    assert!(mag == 0.0 || (0.1..=1.0).contains(&mag));
                }
            }
            assert!(g.spatial_adjacency.is_connected());
            assert_eq!(a.polarity.iter().filter(|&&p| p > 0.0).count(), 3);
        }
    }

    #[test]
    fn graph_generation_is_deterministic() {
        let a = gen_twofold_graph(50, 60, 7).unwrap();
        let b = gen_twofold_graph(50, 60, 7).unwrap();
        assert_eq!(a.spatial.matrix(), b.spatial.matrix());
        assert_eq!(a.modality.weights(), b.modality.weights());
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn sbm_densities_match_configuration() {
        let (mut intra, mut intra_n, mut inter, mut inter_n) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for seed in 0..200 {
            let g = gen_twofold_graph(8, 24, seed).unwrap();
            let w = g.modality.weights();
            let l = &g.assignment.labels;
            for i in 0..24 {
                for j in (i + 1)..24 {
                    let e = if w[[i, j]] != 0.0 { 1.0 } else { 0.0 };
                    if l[i] == l[j] {
                        intra += e;
                        intra_n += 1.0;
                    } else {
                        inter += e;
                        inter_n += 1.0;
                    }
                }
            }
        }
        assert!((intra / intra_n - 0.3).abs() <= 0.05, "{}", intra / intra_n);
        assert!((inter / inter_n - 0.5).abs() <= 0.05, "{}", inter / inter_n);
    }

    #[test]
    fn offsets_are_antiphase_and_vanish_at_zero() {
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert!((community_offset(1, t) + community_offset(2, t)).abs() < 1e-15);
            assert!((community_offset(3, t) + community_offset(6, t)).abs() < 1e-15);
        }
        for j in 1..=6 {
            assert!(community_offset(j, 0.0).abs() < 1e-16);
        }
    }

    #[test]
    fn piecewise_columns_share_base_within_community() {
        let g = gen_twofold_graph(15, 18, 3).unwrap();
        let x = gen_piecewise_smooth_sample(&g, 9).unwrap();
        let l = &g.assignment.labels;
        for a in 0..18 {
            for b in 0..18 {
                if l[a] != l[b] {
                    continue;
                }
                let shift = community_offset(l[a], modality_time(a, 18)) - community_offset(l[b], modality_time(b, 18));
                for i in 0..15 {
                    assert!((x[[i, a]] - x[[i, b]] - shift).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn piecewise_truth_is_smoother_than_noisy() {
        let g = gen_twofold_graph(30, 24, 4).unwrap();
        let lp = laplacian_from_adjacency(&path_graph(24)).into_inner();
        for s in 0..10 {
            let x = gen_piecewise_smooth_sample(&g, s).unwrap();
            let noisy = add_noise_snr(&x, 10.0, 100 + s).unwrap();
            let clean = twofold_smoothness(&x, g.spatial.matrix(), &lp).unwrap();
            let dirty = twofold_smoothness(&noisy, g.spatial.matrix(), &lp).unwrap();
            assert!(clean.is_finite() && clean < dirty);
        }
    }

    #[test]
    fn mask_rates() {
        let m = gen_mask(10, 8, MissingPattern::Mcar, 0.0, 1, MaskLayout::Synthetic, 14).unwrap();
        assert_eq!(m.missing_count(), 0);
        let mut total = 0.0;
        for seed in 0..100 {
            let m = gen_mask(141, 112, MissingPattern::Mcar, 0.5, seed, MaskLayout::Synthetic, 14).unwrap();
            total += m.missing_fraction();
        }
        assert!((total / 100.0 - 0.5).abs() <= 0.02);
        assert!(gen_mask(5, 5, MissingPattern::Mcar, 1.0, 1, MaskLayout::Synthetic, 14).is_err());
    }

    #[test]
    fn mrso_blacks_out_ceil_rate_rows() {
        let n = 11;
        let m = gen_mask(n, 20, MissingPattern::Mrso, 0.5, 3, MaskLayout::Synthetic, 14).unwrap();
        let v = m.values();
        let hit: Vec<usize> = (0..n).filter(|&i| v.row(i).iter().any(|&x| x == 0.0)).collect();
        assert_eq!(hit.len(), 6);
        for &i in &hit {
            let zeros: Vec<usize> = (0..20).filter(|&c| v[[i, c]] == 0.0).collect();
            assert_eq!(zeros.len(), 10);
            assert_eq!(zeros[9] - zeros[0], 9);
        }
    }

    #[test]
    fn mrso_day_layout_blacks_out_all_modalities() {
        let layout = MaskLayout::Days { days: 28, modalities: 4 };
        let m = gen_mask(20, 112, MissingPattern::Mrso, 0.3, 5, layout, 14).unwrap();
        let v = m.values();
        for i in 0..20 {
            for d in 0..28 {
                let col: Vec<f64> = (0..4).map(|b| v[[i, b * 28 + d]]).collect();
                assert!(col.iter().all(|&x| x == col[0]));
            }
            let missing = v.row(i).iter().filter(|&&x| x == 0.0).count();
            assert!(missing == 0 || missing == 56);
        }
        assert!(gen_mask(3, 112, MissingPattern::Mrso, 0.3, 5, layout, 29).is_err());
    }

    #[test]
    fn fold_split_partitions() {
        let mut seen = [0; 10];
        for f in 0..5 {
            let (train, test) = fold_split(10, 5, f);
            assert_eq!(train.len() + test.len(), 10);
            for i in test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn manifest_validation() {
        let text = r#"{"kind":"piecewise-smooth","N":20,"M":12,"seed":1,"samples":10,
            "snr_db":[20],"pattern":["MCAR"],"rates":[0.1],"folds":5}"#;
        let m: DatasetManifest = serde_json::from_str(text).unwrap();
        m.validate().unwrap();
        assert!(DatasetManifest { rates: vec![1.0], ..m.clone() }.validate().is_err());
        assert!(DatasetManifest { folds: 1, ..m.clone() }.validate().is_err());
        let data = generate_synthetic(&m).unwrap();
        assert_eq!(data.clean.len(), 10);
        let again = generate_synthetic(&m).unwrap();
        assert_eq!(data.clean, again.clean);
    }

    fn write_station(dir: &Path, station: &str, year: i32, skip: Option<(u32, u32)>) {
        let mut f = std::fs::File::create(dir.join(format!("{station}_{year}.csv"))).unwrap();
        writeln!(f, "date,temperature,pressure,humidity,sunshine").unwrap();
        for month in 1..=12u32 {
            for day in 1..=30u32 {
                if skip == Some((month, day)) {
                    continue;
                }
                let base = (year - 2000) as f64 + month as f64 + day as f64 / 10.0 + station.len() as f64;
                writeln!(f, "{year}-{month:02}-{day:02},{},{},{},{}", base, 1000.0 + base, 50.0 - base, base * 0.5)
                    .unwrap();
            }
        }
    }

    #[test]
    fn real_ingestion_layout_and_folds() {
        let dir = tempfile::tempdir().unwrap();
        for year in 2010..2018 {
            for st in ["a", "bb", "ccc"] {
                write_station(dir.path(), st, year, None);
            }
        }
        let data = ingest_real(dir.path()).unwrap();
        assert_eq!(data.matrices.len(), 96);
        assert_eq!(data.matrices[0].data.dim(), (3, 112));
        // column 0..28 is temperature: day d of January for station "a"
        let m0 = &data.matrices[0];
        assert_eq!(m0.data[[0, 0]], 10.0 + 1.0 + 0.1 + 1.0);
        assert_eq!(m0.data[[0, 28]], 1000.0 + m0.data[[0, 0]]);
        let folds = data.folds();
        assert_eq!(folds.len(), 8);
        for f in &folds {
            assert_eq!(f.test.len(), 12);
            let refs: Vec<&Mat> = f.train.iter().map(|m| &m.data).collect();
            let s = block_stats(&refs, 4);
            for b in 0..4 {
                assert!(s.mean[b].abs() <= 1e-10);
                assert!((s.std[b] - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn real_ingestion_reports_gaps() {
        let dir = tempfile::tempdir().unwrap();
        write_station(dir.path(), "a", 2010, None);
        write_station(dir.path(), "b", 2010, Some((3, 7)));
        match ingest_real(dir.path()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("b 2010-03-07"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
