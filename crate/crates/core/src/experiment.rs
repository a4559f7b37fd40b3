//! Config-driven runs: training, sampling, evaluation, the target × Lp sweep
//! and report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_digest, ModelHeader};
use crate::conditioning::ConditionToken;
use crate::data::{generate_toy_dataset, read_archive, subject_split, write_archive, ArchiveWriter, SliceRecord, ToyConfig};
use crate::diffusion::{cosine_schedule, LpConfig, NoiseSchedule, PredictionTarget};
use crate::error::{Error, Result};
use crate::metrics::{self, FeatureExtractor, MetricRow, MetricSettings, ToyFeatureExtractor};
use crate::sampler::{sample, samples_to_records, NetDenoiser, SamplerConfig};
use crate::stats::{stats_block, Observation, StatsRow, DEFAULT_ALPHA};
use crate::trainer::{load_model, train, TrainConfig, TrainOutcome};
use crate::unet::UNetConfig;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CELL_METRICS: &str = "metrics.csv";
pub const CELL_FAILURE: &str = "FAILED";
pub const REPLICA_CSV: &str = "per_replica.csv";
pub const GRID_CSV: &str = "grid.csv";
pub const STATS_CSV: &str = "stats.csv";
pub const REPORT_TXT: &str = "report.txt";
/// Metrics that enter the grid table and the statistics block.
pub const HEADLINE_METRICS: [&str; 3] = ["kid", "perceptual_proxy", "mmd_mf"];
const BASELINE_PREFIX: &str = "baseline_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Slice archive to train on. Without one, a toy cohort is generated.
    pub archive: Option<PathBuf>,
    pub toy: ToyConfig,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            archive: None,
            toy: ToyConfig::default(),
            val_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub schedule_offset: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            schedule_offset: 0.008,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// Tokens drawn with replacement from the real slices.
    Empirical,
    /// Every token in turn.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub tokens: TokenMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            tokens: TokenMode::Empirical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub targets: Vec<PredictionTarget>,
    pub p: Vec<f64>,
    pub replicas: usize,
    /// Cells run concurrently as separate processes.
    pub workers: usize,
    pub alpha: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            targets: PredictionTarget::ALL.to_vec(),
            p: vec![1.5, 2.0, 2.5],
            replicas: 3,
            workers: 1,
            alpha: DEFAULT_ALPHA,
        }
    }
}

fn desk_model() -> UNetConfig {
    UNetConfig::desk()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default = "desk_model")]
    pub model: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricSettings,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: desk_model(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            metrics: MetricSettings::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Applies `section.key=value` to a TOML table. Values parse as TOML and
/// fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{assignment}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Usage(format!("override '{assignment}' has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{k}' is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate(self.diffusion.timesteps)?;
        if let Some(a) = &self.data.archive {
            if !a.is_dir() {
                return Err(Error::Config(format!("data.archive: {} is not a directory", a.display())));
            }
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::range("data.val_fraction", self.data.val_fraction, "(0, 1)"));
        }
        if self.data.toy.image_size != self.model.image_size && self.data.archive.is_none() {
            return Err(Error::Config(format!(
                "data.toy.image_size {} differs from model.image_size {}",
                self.data.toy.image_size, self.model.image_size
            )));
        }
        if self.data.toy.z_bins != self.model.z_bins && self.data.archive.is_none() {
            return Err(Error::Config("data.toy.z_bins differs from model.z_bins".into()));
        }
        if self.eval.n_samples < 2 {
            return Err(Error::range("eval.n_samples", self.eval.n_samples, ">= 2"));
        }
        if self.metrics.kid_subset_size < 2 || self.metrics.kid_subsets < 1 {
            return Err(Error::Config("metrics.kid_subset_size must be >= 2 and metrics.kid_subsets >= 1".into()));
        }
        if self.sweep.targets.is_empty() || self.sweep.p.is_empty() {
            return Err(Error::Config("sweep.targets and sweep.p must be non-empty".into()));
        }
        let distinct: BTreeSet<_> = self.sweep.targets.iter().collect();
        if distinct.len() != self.sweep.targets.len() {
            return Err(Error::Config("sweep.targets has duplicates".into()));
        }
        for &p in &self.sweep.p {
            LpConfig::new(p).map_err(|_| Error::range("sweep.p", p, "> 0"))?;
        }
        if self.sweep.replicas < 1 || self.sweep.workers < 1 {
            return Err(Error::Config("sweep.replicas and sweep.workers must be >= 1".into()));
        }
        if !(self.sweep.alpha > 0.0 && self.sweep.alpha < 1.0) {
            return Err(Error::range("sweep.alpha", self.sweep.alpha, "(0, 1)"));
        }
        Ok(())
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            unet: self.model.clone(),
            timesteps: self.diffusion.timesteps,
            schedule_offset: self.diffusion.schedule_offset,
            target: self.train.target,
            loss_p: self.train.loss.p,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.diffusion.timesteps, self.diffusion.schedule_offset)
    }
}

pub fn load_records(cfg: &DataConfig) -> Result<Vec<SliceRecord>> {
    match &cfg.archive {
        Some(a) => read_archive(a),
        None => generate_toy_dataset(&cfg.toy),
    }
}

pub fn generate_toy(cfg: &ToyConfig, out: &Path) -> Result<usize> {
    let recs = generate_toy_dataset(cfg)?;
    let prov = serde_json::json!({ "generator": "toy", "config": cfg });
    write_archive(out, &recs, cfg.z_bins, prov)?;
    Ok(recs.len())
}

fn write_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(CONFIG_SNAPSHOT);
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("json")).map_err(|e| Error::io(path, e))
}

/// Trains one model into `run_dir`, after writing the resolved config and
/// the data split it used.
pub fn run_train(cfg: &ExperimentConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let records = load_records(&cfg.data)?;
    let (train_set, val_set) = subject_split(&records, cfg.data.val_fraction, cfg.data.split_seed)?;
    let sched = cfg.schedule()?;
    let header = cfg.header();
    write_snapshot(cfg, run_dir)?;
    let names = |rs: &[SliceRecord]| crate::data::subject_set(rs).into_iter().map(String::from).collect::<Vec<_>>();
    write_json(
        &run_dir.join(PROVENANCE_FILE),
        &serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "model_hash": header.config_hash(),
            "train_seed": cfg.train.seed,
            "split_seed": cfg.data.split_seed,
            "train_subjects": names(&train_set),
            "val_subjects": names(&val_set),
        }),
    )?;
    train(&header, &cfg.train, &sched, &train_set, &val_set, run_dir, resume)
}

/// Seed of the `i`-th sampling request.
pub fn request_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// `n` conditioning tokens: drawn from the real slices, or cycled over
/// every token.
pub fn choose_tokens(real: &[SliceRecord], n: usize, mode: TokenMode, n_z: usize, seed: u64) -> Result<Vec<ConditionToken>> {
    match mode {
        TokenMode::Uniform => {
            let all = ConditionToken::all(n_z);
            Ok((0..n).map(|i| all[i % all.len()]).collect())
        }
        TokenMode::Empirical => {
            if real.is_empty() {
                return Err(Error::Input("empirical tokens need real slices".into()));
            }
            let toks: Vec<ConditionToken> = real.iter().map(|r| r.token(n_z)).collect::<Result<_>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(7);
            Ok((0..n).map(|_| toks[rng.random_range(0..toks.len())]).collect())
        }
    }
}

pub fn make_requests(tokens: &[ConditionToken], seed: u64) -> Vec<(u64, ConditionToken)> {
    tokens.iter().enumerate().map(|(i, &t)| (request_seed(seed, i), t)).collect()
}

/// Samples one trajectory per request from a checkpoint's EMA weights and
/// writes them as an archive at `out` (when given).
pub fn run_sample(checkpoint: &Path, requests: &[(u64, ConditionToken)], cfg: &SamplerConfig, out: Option<&Path>) -> Result<Vec<SliceRecord>> {
    if requests.is_empty() {
        return Err(Error::Usage("sampling requires condition tokens; unconditional sampling is not supported".into()));
    }
    let (header, net, params) = load_model(checkpoint)?;
    for &(_, t) in requests {
        if t.n_z != header.unet.z_bins {
            return Err(Error::Config(format!("token uses {} z bins, model has {}", t.n_z, header.unet.z_bins)));
        }
    }
    let sched = cosine_schedule(header.timesteps, header.schedule_offset)?;
    let model = NetDenoiser { net: &net, params: &params };
    let samples = sample(&model, requests, cfg, &sched, header.target)?;
    let records = samples_to_records(&samples);
    if let Some(out) = out {
        let prov = serde_json::json!({
            "generator": "ddim",
            "checkpoint": checkpoint.display().to_string(),
            "checkpoint_sha256": file_digest(checkpoint)?,
            "model_hash": header.config_hash(),
            "sampler": cfg,
        });
        let size = header.unet.image_size;
        let mut w = ArchiveWriter::create(out, size, size, header.unet.z_bins, prov)?;
        for (r, s) in records.iter().zip(&samples) {
            w.push(r, Some(serde_json::json!({ "seed": s.seed, "token": s.token.token() })))?;
        }
        w.finish()?;
    }
    Ok(records)
}

/// All metrics between generated and real slices, followed by the
/// real-vs-real baseline rows (`baseline_*`).
pub fn run_evaluate(gen: &[SliceRecord], real: &[SliceRecord], settings: &MetricSettings, extractor: &dyn FeatureExtractor) -> Result<Vec<MetricRow>> {
    let mut rows = metrics::evaluate(real, gen, extractor, settings)?;
    for mut r in metrics::real_vs_real_baseline(real, extractor, settings)? {
        if HEADLINE_METRICS.contains(&r.metric.as_str()) {
            r.metric = format!("{BASELINE_PREFIX}{}", r.metric);
            rows.push(r);
        }
    }
    Ok(rows)
}

/// Replaces the KID row with one computed from precomputed feature files.
pub fn kid_from_feature_files(rows: &mut [MetricRow], real: &Path, gen: &Path, settings: &MetricSettings) -> Result<()> {
    let fr = metrics::read_feature_file(real)?;
    let fg = metrics::read_feature_file(gen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let k = metrics::kid(&fr, &fg, settings.kid_subset_size.min(fr.len()).min(fg.len()), settings.kid_subsets, &mut rng)?;
    for r in rows.iter_mut().filter(|r| r.metric == "kid") {
        r.value = k.mean;
        r.std = Some(k.std);
        r.n_real = fr.len();
        r.n_gen = fg.len();
        r.extractor = "external".into();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub target: PredictionTarget,
    pub p: f64,
    pub replica: usize,
}

impl Cell {
    pub fn p_label(&self) -> String {
        format!("{}", self.p)
    }

    pub fn dir_name(&self) -> String {
        format!("{}-p{}-r{}", self.target, self.p_label(), self.replica)
    }
}

pub fn sweep_cells(cfg: &SweepConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &target in &cfg.targets {
        for &p in &cfg.p {
            for replica in 0..cfg.replicas {
                out.push(Cell { target, p, replica });
            }
        }
    }
    out
}

/// The fully resolved config of one sweep cell. Replica `r` offsets every
/// seed by `r`; cells of the same replica share seeds across targets and p.
pub fn cell_config(cfg: &ExperimentConfig, cell: &Cell) -> ExperimentConfig {
    let mut c = cfg.clone();
    let r = cell.replica as u64;
    c.train.target = cell.target;
    c.train.loss = LpConfig { p: cell.p };
    c.train.seed = cfg.train.seed.wrapping_add(r);
    c.sampler.seed = cfg.sampler.seed.wrapping_add(r);
    c.metrics.seed = cfg.metrics.seed.wrapping_add(r);
    c.sweep.targets = vec![cell.target];
    c.sweep.p = vec![cell.p];
    c.sweep.replicas = 1;
    c.sweep.workers = 1;
    c
}

/// Trains, samples and evaluates one cell in `dir`. Writes `metrics.csv`
/// on success or a `FAILED` note on error.
pub fn execute_cell(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<MetricRow>> {
    let failure = dir.join(CELL_FAILURE);
    let _ = fs::remove_file(&failure);
    let result = (|| -> Result<Vec<MetricRow>> {
        let outcome = run_train(cfg, dir, true)?;
        let real = load_records(&cfg.data)?;
        let tokens = choose_tokens(&real, cfg.eval.n_samples, cfg.eval.tokens, cfg.model.z_bins, cfg.sampler.seed)?;
        let requests = make_requests(&tokens, cfg.sampler.seed);
        let gen = run_sample(&outcome.best_checkpoint, &requests, &cfg.sampler, Some(&dir.join("samples")))?;
        let rows = run_evaluate(&gen, &real, &cfg.metrics, &ToyFeatureExtractor::default())?;
        metrics::write_metric_csv(&dir.join(CELL_METRICS), &rows)?;
        Ok(rows)
    })();
    if let Err(e) = &result {
        fs::create_dir_all(dir).map_err(|io| Error::io(dir, io))?;
        fs::write(&failure, e.to_string()).map_err(|io| Error::io(&failure, io))?;
    }
    result
}

/// One value of the per-replica table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub target: String,
    pub p: String,
    pub replica: usize,
    pub metric: String,
    pub value: f64,
}

fn cell_rows(cell: &Cell, metric_rows: &[MetricRow]) -> Vec<ReplicaRow> {
    let mut out = Vec::new();
    let mut push = |metric: String, value: f64| {
        out.push(ReplicaRow {
            target: cell.target.to_string(),
            p: cell.p_label(),
            replica: cell.replica,
            metric,
            value,
        })
    };
    for r in metric_rows {
        push(r.metric.clone(), r.value);
        if r.metric == "kid" {
            if let Some(s) = r.std {
                push("kid_std".into(), s);
            }
        }
    }
    out
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Mean ± std of one metric in one (target, p) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub target: String,
    pub p: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub grid: Vec<GridRow>,
    pub stats: Vec<StatsRow>,
    /// Lowest-mean target per headline metric.
    pub findings: Vec<String>,
    /// Descriptions of missing grid entries.
    pub missing: Vec<String>,
}

fn p_sort_key(p: &str) -> f64 {
    p.parse().unwrap_or(f64::INFINITY)
}

/// Aggregation and statistics from the per-replica table alone. The grid
/// axes are the targets, p values and replicas that occur in `rows`.
pub fn build_report(rows: &[ReplicaRow], alpha: f64) -> Result<Report> {
    let targets: BTreeSet<&str> = rows.iter().map(|r| r.target.as_str()).collect();
    let mut ps: Vec<&str> = rows.iter().map(|r| r.p.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    ps.sort_by(|a, b| p_sort_key(a).total_cmp(&p_sort_key(b)));
    let replicas: BTreeSet<usize> = rows.iter().map(|r| r.replica).collect();
    let mut metric_names: Vec<&str> = HEADLINE_METRICS.to_vec();
    for r in rows {
        if !metric_names.contains(&r.metric.as_str()) {
            metric_names.push(&r.metric);
        }
    }
    let mut cell: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        cell.entry((r.target.as_str(), r.p.as_str(), r.metric.as_str())).or_default().push(r.value);
    }

    let mut grid = Vec::new();
    let mut missing = Vec::new();
    for &m in &metric_names {
        for &t in &targets {
            for &p in &ps {
                let vals = cell.get(&(t, p, m)).cloned().unwrap_or_default();
                let complete = vals.len() == replicas.len();
                if !complete {
                    missing.push(format!("{m}: {t} p={p} has {}/{} replicas", vals.len(), replicas.len()));
                }
                let ms = if vals.is_empty() {
                    metrics::MeanStd { mean: f64::NAN, std: f64::NAN }
                } else {
                    metrics::mean_std(&vals)
                };
                grid.push(GridRow {
                    target: t.into(),
                    p: p.into(),
                    metric: m.into(),
                    mean: ms.mean,
                    std: ms.std,
                    n: vals.len(),
                    complete,
                });
            }
        }
    }

    let mut stats = Vec::new();
    let mut findings = Vec::new();
    for m in HEADLINE_METRICS {
        let obs = observations(rows, m);
        let expected = targets.len() * ps.len() * replicas.len();
        if obs.is_empty() {
            continue;
        }
        if obs.len() != expected {
            findings.push(format!("{m}: statistics skipped, grid incomplete ({}/{expected})", obs.len()));
            continue;
        }
        if targets.len() >= 2 {
            stats.extend(stats_block(m, &obs, alpha)?);
        }
        let mut pooled: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for o in &obs {
            pooled.entry(targets.get(o.group.as_str()).copied().unwrap_or_default()).or_default().push(o.value);
        }
        let best = pooled
            .iter()
            .map(|(t, v)| (*t, metrics::mean_std(v).mean))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((t, v)) = best {
            findings.push(format!("{m}: lowest pooled mean is {t} ({v:.6}); x0 best: {}", if t == "x0" { "yes" } else { "no" }));
        }
    }
    Ok(Report { grid, stats, findings, missing })
}

/// Observations of one metric: group = target, block = p.
pub fn observations(rows: &[ReplicaRow], metric: &str) -> Vec<Observation> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .map(|r| Observation {
            group: r.target.clone(),
            block: r.p.clone(),
            replica: r.replica,
            value: r.value,
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Table-style rendering: headline metrics as `mean ± std` per (target, p),
/// then the statistics block and findings.
pub fn render_report(r: &Report) -> String {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for g in &r.grid {
        if !keys.contains(&(g.target.as_str(), g.p.as_str())) {
            keys.push((&g.target, &g.p));
        }
    }
    let mut table: Vec<Vec<String>> = vec![["target", "p", "n"].iter().map(|s| s.to_string()).chain(HEADLINE_METRICS.iter().map(|s| s.to_string())).collect()];
    for (t, p) in keys {
        let mut line = vec![t.to_string(), p.to_string()];
        let mut n = 0;
        for m in HEADLINE_METRICS {
            let cell = r.grid.iter().find(|g| g.target == t && g.p == p && g.metric == m);
            line.push(match cell {
                Some(g) if g.n > 0 => {
                    n = n.max(g.n);
                    format!("{:.5} ± {:.5}{}", g.mean, g.std, if g.complete { "" } else { " *" })
                }
                _ => "missing".into(),
            });
        }
        line.insert(2, n.to_string());
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len()).map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}", w = w)).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    if !r.missing.is_empty() {
        let _ = writeln!(out, "\n* incomplete cells:");
        r.missing.iter().for_each(|m| {
            let _ = writeln!(out, "  {m}");
        });
    }
    let _ = writeln!(out, "\nstatistics");
    for s in &r.stats {
        let line = format!(
            "  {:<16} {:<14} {:<40} stat={:<10.4} p={:<8} adj={:<8} effect={:<8}{}",
            s.metric,
            s.test,
            s.comparison,
            s.statistic,
            fmt_opt(s.p),
            fmt_opt(s.adjusted_p),
            fmt_opt(s.effect_size),
            if s.gated { " (gated)" } else { "" }
        );
        let _ = writeln!(out, "{}", line.trim_end());
    }
    let _ = writeln!(out, "\nfindings");
    for f in &r.findings {
        let _ = writeln!(out, "  {f}");
    }
    out
}

/// Writes `grid.csv`, `stats.csv` and `report.txt` into `dir`.
pub fn write_report(r: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(GRID_CSV), &r.grid)?;
    write_csv(&dir.join(STATS_CSV), &r.stats)?;
    let p = dir.join(REPORT_TXT);
    fs::write(&p, render_report(r)).map_err(|e| Error::io(&p, e))
}

/// Rebuilds the report from a stored per-replica table.
pub fn regenerate_report(replica_csv: &Path, out_dir: &Path, alpha: f64) -> Result<Report> {
    let rows: Vec<ReplicaRow> = read_csv(replica_csv)?;
    let r = build_report(&rows, alpha)?;
    write_report(&r, out_dir)?;
    Ok(r)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<ReplicaRow>,
    pub failed: Vec<(Cell, String)>,
    pub report: Report,
}

impl SweepOutcome {
    /// No failed cells and no missing grid entries.
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty() && self.report.missing.is_empty()
    }
}

pub fn cell_dir(root: &Path, cell: &Cell) -> PathBuf {
    root.join("cells").join(cell.dir_name())
}

/// Cells without a finished `metrics.csv`.
pub fn pending_cells(cfg: &ExperimentConfig, root: &Path) -> Vec<Cell> {
    sweep_cells(&cfg.sweep).into_iter().filter(|c| !cell_dir(root, c).join(CELL_METRICS).exists()).collect()
}

/// Writes the sweep's config snapshot and every cell's resolved config.
pub fn prepare_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    write_snapshot(cfg, root)?;
    for c in sweep_cells(&cfg.sweep) {
        write_snapshot(&cell_config(cfg, &c), &cell_dir(root, &c))?;
    }
    Ok(())
}

/// Assembles the per-replica table and report from finished cells.
pub fn collect_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<SweepOutcome> {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for c in sweep_cells(&cfg.sweep) {
        let dir = cell_dir(root, &c);
        match metrics::read_metric_csv(&dir.join(CELL_METRICS)) {
            Ok(m) => rows.extend(cell_rows(&c, &m)),
            Err(e) => {
                let why = fs::read_to_string(dir.join(CELL_FAILURE)).unwrap_or_else(|_| e.to_string());
                failed.push((c, why));
            }
        }
    }
    write_csv(&root.join(REPLICA_CSV), &rows)?;
    let report = build_report(&rows, cfg.sweep.alpha)?;
    write_report(&report, root)?;
    Ok(SweepOutcome { rows, failed, report })
}

/// Runs every pending cell in this process, then collects the report.
/// Cell failures are recorded, not propagated.
pub fn run_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<SweepOutcome> {
    prepare_sweep(cfg, root)?;
    for c in pending_cells(cfg, root) {
        log::info!("sweep cell {}", c.dir_name());
        if let Err(e) = execute_cell(&cell_config(cfg, &c), &cell_dir(root, &c)) {
            log::error!("cell {} failed: {e}", c.dir_name());
        }
    }
    collect_sweep(cfg, root)
}
