//! Config-driven runs: generate data, pre-train, adapt, evaluate, and write
//! reports under a run directory named by config hash and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::ClusterConfig;
use crate::error::{Error, Result};
use crate::evaluation::{domain_gap_report, evaluate_retrieval, DomainGapReport, RetrievalResult, DEFAULT_RANKS};
use crate::normalization::{read_json, write_json};
use crate::pipeline::{
    adapt_stage, class_counts, derive_seed, prepare_adaptation, pretrain_stage, AdaptOptions, BackboneSpec, EpochLog, MdifInit, NormKind, ReidModel,
    StageConfig, TrainLog,
};
use crate::synthetic::{generate_benchmark, SyntheticBenchmark, SyntheticSpec};
use crate::DomainId;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DAMIX_OUT";

const INIT_STREAM: u64 = 20;
const PRETRAIN_STREAM: u64 = 21;
const ADAPT_STREAM: u64 = 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub slope: f64,
    pub norm: NormKind,
    pub mdif: bool,
    pub mdif_init: MdifInit,
    pub agent_momentum: f64,
    pub classifier_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![32, 32, 32],
            slope: 0.01,
            norm: NormKind::Rdsbn,
            mdif: true,
            mdif_init: MdifInit::Residual,
            agent_momentum: 0.1,
            classifier_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// L2-normalize features before retrieval and domain statistics.
    pub normalize: bool,
    pub ranks: Vec<usize>,
    /// Evaluate after every adaptation epoch, not only the last.
    pub every_epoch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            normalize: true,
            ranks: DEFAULT_RANKS.to_vec(),
            every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "StageConfig::pretrain_default")]
    pub pretrain: StageConfig,
    #[serde(default = "StageConfig::adapt_default", deserialize_with = "adapt_section")]
    pub adapt: StageConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::pretrain_default(),
            adapt: StageConfig::adapt_default(),
            cluster: ClusterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Missing `[adapt]` keys fall back to the adaptation defaults rather than
/// the pre-training ones.
fn adapt_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    let partial = toml::Table::deserialize(d)?;
    overlay(&StageConfig::adapt_default(), partial).map_err(serde::de::Error::custom)
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, partial: toml::Table) -> std::result::Result<T, String> {
    let mut table = toml::Table::try_from(base).map_err(|e| e.to_string())?;
    table.extend(partial);
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.cluster.validate()?;
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return Err(Error::Config(format!("model widths must be positive, got {:?}", self.model.widths)));
        }
        if !(0.0..=1.0).contains(&self.model.agent_momentum) {
            return Err(Error::Config(format!("agent momentum must lie in [0, 1], got {}", self.model.agent_momentum)));
        }
        if !(self.model.classifier_std > 0.0) {
            return Err(Error::Config("classifier_std must be positive".into()));
        }
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return Err(Error::Config(format!("eval ranks must be positive, got {:?}", self.eval.ranks)));
        }
        if self.data.test_identities == 0 {
            return Err(Error::Config("evaluation needs at least one test identity".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.data.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = seed;
        c
    }

    pub fn variant(&self) -> Variant {
        Variant {
            norm: self.model.norm,
            mdif: self.model.mdif,
        }
    }

    /// SHA-256 of the resolved config with the seed cleared, hex encoded.
    pub fn hash(&self) -> String {
        let text = self.with_seed(0).to_toml();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn run_dir_name(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.seed())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub norm: NormKind,
    pub mdif: bool,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant { norm: NormKind::Bn, mdif: false },
        Variant { norm: NormKind::Bn, mdif: true },
        Variant { norm: NormKind::Dsbn, mdif: false },
        Variant { norm: NormKind::Dsbn, mdif: true },
        Variant { norm: NormKind::Rdsbn, mdif: false },
        Variant { norm: NormKind::Rdsbn, mdif: true },
    ];

    pub fn label(&self) -> String {
        format!("{}{}", self.norm.name(), if self.mdif { "+mdif" } else { "" })
    }
}

/// Default output root: `$DAMIX_OUT`, else `./runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub map: f64,
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    /// `(a, b, distance)` between domain mean features.
    pub domain_distances: Vec<(DomainId, DomainId, f64)>,
    pub interclass: f64,
    pub intraclass: f64,
    pub clusters: Option<usize>,
    pub noise: Option<usize>,
    pub id_loss: Option<f64>,
    pub id_mdif_loss: Option<f64>,
    pub triplet_loss: Option<f64>,
}

impl EpochMetrics {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == k).map(|i| self.cmc[i])
    }

    pub fn distance(&self, a: DomainId, b: DomainId) -> Option<f64> {
        self.domain_distances
            .iter()
            .find(|&&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a))
            .map(|&(_, _, d)| d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalResult,
    pub gap: DomainGapReport,
}

fn inference_features(model: &mut ReidModel, inputs: &crate::numerics::Tensor, ids: &[DomainId], normalize: bool) -> Result<crate::numerics::Tensor> {
    let f = model.extract_tagged(inputs, ids, true)?;
    Ok(if normalize { f.l2_normalize_rows() } else { f })
}

/// Target retrieval on the held-out identities plus domain statistics on
/// every domain's training samples, each through its own branch.
pub fn evaluate_model(model: &mut ReidModel, bench: &SyntheticBenchmark, eval: &EvalConfig) -> Result<EvalReport> {
    let test = &bench.target_test;
    let feats = inference_features(model, &test.inputs, &vec![test.domain; test.len()], eval.normalize)?;
    let q = feats.gather_rows(&bench.query)?;
    let g = feats.gather_rows(&bench.gallery)?;
    let qi: Vec<usize> = bench.query.iter().map(|&i| test.identities[i]).collect();
    let gi: Vec<usize> = bench.gallery.iter().map(|&i| test.identities[i]).collect();
    let retrieval = evaluate_retrieval(&q, &qi, &g, &gi, &eval.ranks)?;

    let mut rows = Vec::new();
    let mut domains = Vec::new();
    let mut identities = Vec::new();
    for ds in bench.sources.iter().chain(std::iter::once(&bench.target)) {
        let f = inference_features(model, &ds.inputs, &vec![ds.domain; ds.len()], eval.normalize)?;
        rows.extend(f.to_rows());
        domains.extend(std::iter::repeat_n(ds.domain, ds.len()));
        identities.extend_from_slice(&ds.identities);
    }
    let all = crate::numerics::Tensor::from_rows(&rows)?;
    let gap = domain_gap_report(&all, &domains, &identities)?;
    Ok(EvalReport { retrieval, gap })
}

fn metrics_row(stage: &str, epoch: usize, report: &EvalReport, log: Option<&EpochLog>) -> EpochMetrics {
    EpochMetrics {
        stage: stage.to_string(),
        epoch,
        map: report.retrieval.map,
        ranks: report.retrieval.ranks.clone(),
        cmc: report.retrieval.cmc.clone(),
        domain_distances: report.gap.distances.pairs(),
        interclass: report.gap.interclass_combined,
        intraclass: report.gap.intraclass_combined,
        clusters: log.and_then(|l| l.clusters),
        noise: log.and_then(|l| l.noise),
        id_loss: log.map(|l| l.id_loss),
        id_mdif_loss: log.and_then(|l| l.id_mdif_loss),
        triplet_loss: log.map(|l| l.triplet_loss),
    }
}

/// Fresh model for `kind`, pre-trained on the benchmark sources.
pub fn pretrain_model(cfg: &ExperimentConfig, bench: &SyntheticBenchmark, kind: NormKind) -> Result<(ReidModel, TrainLog)> {
    let seed = cfg.seed();
    let spec = BackboneSpec {
        in_channels: cfg.data.in_channels,
        widths: cfg.model.widths.clone(),
        slope: cfg.model.slope,
    };
    let classes = class_counts(&bench.sources);
    let mut model = ReidModel::new(&spec, kind, &bench.source_ids(), &classes, cfg.model.classifier_std, derive_seed(seed, INIT_STREAM, 0, 0))?;
    let log = pretrain_stage(&bench.sources, &mut model, &cfg.pretrain, derive_seed(seed, PRETRAIN_STREAM, 0, 0))?;
    Ok((model, log))
}

pub struct AdaptOutcome {
    pub model: ReidModel,
    pub log: TrainLog,
    pub metrics: Vec<EpochMetrics>,
    /// Target pseudo-labels of the last epoch.
    pub pseudo_labels: Vec<i64>,
}

/// Converts `pretrained` for `variant` and runs adaptation with per-epoch
/// evaluation.
pub fn adapt_model(cfg: &ExperimentConfig, bench: &SyntheticBenchmark, pretrained: &ReidModel, variant: Variant) -> Result<AdaptOutcome> {
    let mut model = pretrained.clone();
    if (model.kind == NormKind::Bn) != (variant.norm == NormKind::Bn) {
        return Err(Error::Config(format!("a {} checkpoint cannot start the {} variant", model.kind.name(), variant.label())));
    }
    model.kind = variant.norm;
    let opts = AdaptOptions {
        mdif: variant.mdif,
        mdif_init: cfg.model.mdif_init,
        agent_momentum: cfg.model.agent_momentum,
    };
    prepare_adaptation(&mut model, &bench.sources, &bench.target, &opts)?;
    let mut target = bench.target.clone();
    let mut metrics = Vec::new();
    let last = cfg.adapt.epochs.saturating_sub(1);
    let seed = derive_seed(cfg.seed(), ADAPT_STREAM, 0, 0);
    let log = adapt_stage(&bench.sources, &mut target, &mut model, &cfg.adapt, &cfg.cluster, seed, &mut |entry, m| {
        if cfg.eval.every_epoch || entry.epoch == last {
            let report = evaluate_model(m, bench, &cfg.eval)?;
            metrics.push(metrics_row("adapt", entry.epoch, &report, Some(entry)));
        }
        Ok(())
    })?;
    if cfg.adapt.epochs == 0 {
        let report = evaluate_model(&mut model, bench, &cfg.eval)?;
        metrics.push(metrics_row("adapt", 0, &report, None));
    }
    Ok(AdaptOutcome {
        model,
        log,
        metrics,
        pseudo_labels: target.labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopAfter {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub diagnostic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub run_dir: PathBuf,
    pub config: PathBuf,
    pub stages: Vec<StageRecord>,
    pub metrics_json: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    pub distance_files: Vec<PathBuf>,
    pub failure: Option<Failure>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn metrics(&self) -> Result<Vec<EpochMetrics>> {
        let path = self
            .metrics_json
            .as_ref()
            .ok_or_else(|| Error::Evaluation(format!("run {} has no metrics", self.run_dir.display())))?;
        read_json(path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one configuration end to end and writes its run directory.
///
/// Stage failures are recorded in the returned manifest; only I/O and
/// configuration problems surface as errors.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, stop: StopAfter) -> Result<RunManifest> {
    cfg.validate()?;
    let run_dir = out_root.join(cfg.run_dir_name());
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let config_path = run_dir.join("config.toml");
    write_text(&config_path, &cfg.to_toml())?;
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed(),
        variant: cfg.variant().label(),
        run_dir: run_dir.clone(),
        config: config_path,
        stages: Vec::new(),
        metrics_json: None,
        metrics_csv: None,
        distance_files: Vec::new(),
        failure: None,
    };
    let outcome = run_stages(cfg, &run_dir, stop, &mut manifest);
    if let Err(e) = outcome {
        let stage = match &e {
            Error::Diverged { stage, .. } => stage.to_string(),
            _ => ["data", "pretrain", "adapt"][manifest.stages.len().min(2)].to_string(),
        };
        log::error!("run failed in {stage}: {e}");
        manifest.failure = Some(Failure {
            stage,
            diagnostic: e.to_string(),
        });
    }
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn run_stages(cfg: &ExperimentConfig, run_dir: &Path, stop: StopAfter, manifest: &mut RunManifest) -> Result<()> {
    let bench = generate_benchmark(&cfg.data)?;
    manifest.stages.push(StageRecord {
        name: "data".into(),
        checkpoint: PathBuf::new(),
        log: PathBuf::new(),
        wall_clock_secs: 0.0,
    });
    let start = Instant::now();
    let (pretrained, log) = pretrain_model(cfg, &bench, cfg.model.norm)?;
    let ckpt = run_dir.join("pretrain");
    pretrained.save(&ckpt)?;
    let log_path = run_dir.join("pretrain_log.json");
    write_json(&log_path, &log)?;
    manifest.stages.push(StageRecord {
        name: "pretrain".into(),
        checkpoint: ckpt,
        log: log_path,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    });
    if stop == StopAfter::Pretrain {
        return Ok(());
    }
    let start = Instant::now();
    let outcome = adapt_model(cfg, &bench, &pretrained, cfg.variant())?;
    write_adapt_outputs(run_dir, &outcome, manifest, start)
}

fn write_adapt_outputs(run_dir: &Path, outcome: &AdaptOutcome, manifest: &mut RunManifest, start: Instant) -> Result<()> {
    let ckpt = run_dir.join("adapt");
    outcome.model.save(&ckpt)?;
    let log_path = run_dir.join("adapt_log.json");
    write_json(&log_path, &outcome.log)?;
    let mut labels_csv = String::from("sample_id,label\n");
    for (i, l) in outcome.pseudo_labels.iter().enumerate() {
        let _ = writeln!(labels_csv, "{i},{l}");
    }
    write_text(&run_dir.join("pseudo_labels.csv"), &labels_csv)?;
    let metrics_json = run_dir.join("metrics.json");
    write_json(&metrics_json, &outcome.metrics)?;
    let metrics_csv = run_dir.join("metrics.csv");
    write_text(&metrics_csv, &metrics_csv_text(&outcome.metrics))?;
    let dist_dir = run_dir.join("distances");
    fs::create_dir_all(&dist_dir).map_err(|e| Error::io(&dist_dir, e))?;
    let mut distance_files = Vec::new();
    for m in &outcome.metrics {
        let path = dist_dir.join(format!("{}_epoch{:03}.csv", m.stage, m.epoch));
        let mut text = String::from("domain_a,domain_b,distance\n");
        for (a, b, d) in &m.domain_distances {
            let _ = writeln!(text, "{a},{b},{d}");
        }
        write_text(&path, &text)?;
        distance_files.push(path);
    }
    manifest.stages.push(StageRecord {
        name: "adapt".into(),
        checkpoint: ckpt,
        log: log_path,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    });
    manifest.metrics_json = Some(metrics_json);
    manifest.metrics_csv = Some(metrics_csv);
    manifest.distance_files = distance_files;
    Ok(())
}

fn pair_columns(rows: &[EpochMetrics]) -> Vec<(DomainId, DomainId)> {
    let mut pairs: Vec<(DomainId, DomainId)> = rows.iter().flat_map(|m| m.domain_distances.iter().map(|&(a, b, _)| (a, b))).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per evaluated epoch.
pub fn metrics_csv_text(rows: &[EpochMetrics]) -> String {
    let ranks: Vec<usize> = rows.first().map(|m| m.ranks.clone()).unwrap_or_default();
    let pairs = pair_columns(rows);
    let mut out = String::from("stage,epoch,map");
    for k in &ranks {
        let _ = write!(out, ",rank{k}");
    }
    for (a, b) in &pairs {
        let _ = write!(out, ",dist_{a}_{b}");
    }
    out.push_str(",interclass,intraclass,clusters,noise,id_loss,id_mdif_loss,triplet_loss\n");
    for m in rows {
        let _ = write!(out, "{},{},{}", m.stage, m.epoch, m.map);
        for k in &ranks {
            let _ = write!(out, ",{}", fmt_opt(m.rank(*k)));
        }
        for (a, b) in &pairs {
            let _ = write!(out, ",{}", fmt_opt(m.distance(*a, *b)));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{}",
            m.interclass,
            m.intraclass,
            fmt_opt(m.clusters),
            fmt_opt(m.noise),
            fmt_opt(m.id_loss),
            fmt_opt(m.id_mdif_loss),
            fmt_opt(m.triplet_loss)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub variant: String,
    pub seed: u64,
    pub final_metrics: EpochMetrics,
    /// Metric deltas against the first run.
    pub delta_map: f64,
    pub delta_cmc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifests: Vec<PathBuf>,
    pub epochs: Option<Vec<EpochMetrics>>,
    pub comparison: Option<Vec<ComparisonRow>>,
}

/// Loads manifests and their metrics. Every problem is collected and
/// reported together.
pub fn build_report(manifest_paths: &[PathBuf]) -> Result<Report> {
    if manifest_paths.is_empty() {
        return Err(Error::Evaluation("no manifests given".into()));
    }
    let mut loaded = Vec::new();
    let mut gaps = Vec::new();
    for p in manifest_paths {
        match RunManifest::load(p) {
            Ok(m) => match m.metrics() {
                Ok(rows) if !rows.is_empty() => loaded.push((m, rows)),
                Ok(_) => gaps.push(format!("{}: no evaluated epochs", p.display())),
                Err(e) => gaps.push(format!("{}: {e}", p.display())),
            },
            Err(e) => gaps.push(format!("{}: {e}", p.display())),
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Evaluation(format!("report inputs incomplete:\n  {}", gaps.join("\n  "))));
    }
    if loaded.len() == 1 {
        let (_, rows) = loaded.pop().expect("one entry");
        return Ok(Report {
            manifests: manifest_paths.to_vec(),
            epochs: Some(rows),
            comparison: None,
        });
    }
    let base = loaded[0].1.last().expect("non-empty").clone();
    let comparison = loaded
        .iter()
        .map(|(m, rows)| {
            let last = rows.last().expect("non-empty").clone();
            ComparisonRow {
                run: m.run_dir.display().to_string(),
                variant: m.variant.clone(),
                seed: m.seed,
                delta_map: last.map - base.map,
                delta_cmc: last.cmc.iter().zip(&base.cmc).map(|(a, b)| a - b).collect(),
                final_metrics: last,
            }
        })
        .collect();
    Ok(Report {
        manifests: manifest_paths.to_vec(),
        epochs: None,
        comparison: Some(comparison),
    })
}

pub fn render_report(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Csv => match (&report.epochs, &report.comparison) {
            (Some(rows), _) => metrics_csv_text(rows),
            (_, Some(rows)) => comparison_csv(rows),
            _ => String::new(),
        },
    }
}

fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let ranks: Vec<usize> = rows.first().map(|r| r.final_metrics.ranks.clone()).unwrap_or_default();
    let finals: Vec<EpochMetrics> = rows.iter().map(|r| r.final_metrics.clone()).collect();
    let pairs = pair_columns(&finals);
    let mut out = String::from("run,variant,seed,map,delta_map");
    for k in &ranks {
        let _ = write!(out, ",rank{k},delta_rank{k}");
    }
    for (a, b) in &pairs {
        let _ = write!(out, ",dist_{a}_{b}");
    }
    out.push('\n');
    for r in rows {
        let m = &r.final_metrics;
        let _ = write!(out, "{},{},{},{},{}", r.run, r.variant, r.seed, m.map, r.delta_map);
        for (i, k) in ranks.iter().enumerate() {
            let _ = write!(out, ",{},{}", fmt_opt(m.rank(*k)), fmt_opt(r.delta_cmc.get(i)));
        }
        for (a, b) in &pairs {
            let _ = write!(out, ",{}", fmt_opt(m.distance(*a, *b)));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub seed: u64,
    pub variant: Variant,
    pub manifest: PathBuf,
    pub final_metrics: EpochMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn get(&self, seed: u64, variant: Variant) -> Option<&EpochMetrics> {
        self.entries.iter().find(|e| e.seed == seed && e.variant == variant).map(|e| &e.final_metrics)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.entries.iter().map(|e| e.seed).collect();
        s.dedup();
        s
    }

    /// Rows: variant; columns: final rank-1 and mAP per seed.
    pub fn table(&self) -> String {
        let seeds = self.seeds();
        let mut out = format!("{:<12}", "variant");
        for s in &seeds {
            let _ = write!(out, " | s{s} rank1  mAP  ");
        }
        out.push('\n');
        let mut variants: Vec<Variant> = Vec::new();
        for e in &self.entries {
            if !variants.contains(&e.variant) {
                variants.push(e.variant);
            }
        }
        for v in variants {
            let _ = write!(out, "{:<12}", v.label());
            for &s in &seeds {
                match self.get(s, v) {
                    Some(m) => {
                        let _ = write!(out, " | {:>8.4} {:>6.4}", m.rank(1).unwrap_or(f64::NAN), m.map);
                    }
                    None => out.push_str(" |        -      -"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every variant for every seed. Pre-training is shared between
/// variants that start from the same checkpoint kind.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64], variants: &[Variant], out_root: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for &seed in seeds {
        let base = cfg.with_seed(seed);
        let bench = generate_benchmark(&base.data)?;
        let mut pretrained: BTreeMap<bool, (ReidModel, TrainLog, f64)> = BTreeMap::new();
        for &variant in variants {
            let shared = variant.norm == NormKind::Bn;
            if let std::collections::btree_map::Entry::Vacant(e) = pretrained.entry(shared) {
                let start = Instant::now();
                let kind = if shared { NormKind::Bn } else { NormKind::Dsbn };
                let (m, log) = pretrain_model(&base, &bench, kind)?;
                e.insert((m, log, start.elapsed().as_secs_f64()));
            }
            let (model, plog, secs) = &pretrained[&shared];
            let mut vcfg = base.clone();
            vcfg.model.norm = variant.norm;
            vcfg.model.mdif = variant.mdif;
            let run_dir = out_root.join(vcfg.run_dir_name());
            fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            let config_path = run_dir.join("config.toml");
            write_text(&config_path, &vcfg.to_toml())?;
            let ckpt = run_dir.join("pretrain");
            model.save(&ckpt)?;
            let log_path = run_dir.join("pretrain_log.json");
            write_json(&log_path, plog)?;
            let mut manifest = RunManifest {
                config_hash: vcfg.hash(),
                seed,
                variant: variant.label(),
                run_dir: run_dir.clone(),
                config: config_path,
                stages: vec![StageRecord {
                    name: "pretrain".into(),
                    checkpoint: ckpt,
                    log: log_path,
                    wall_clock_secs: *secs,
                }],
                metrics_json: None,
                metrics_csv: None,
                distance_files: Vec::new(),
                failure: None,
            };
            let start = Instant::now();
            let outcome = adapt_model(&vcfg, &bench, model, variant)?;
            write_adapt_outputs(&run_dir, &outcome, &mut manifest, start)?;
            let manifest_path = run_dir.join("manifest.json");
            write_json(&manifest_path, &manifest)?;
            let final_metrics = outcome.metrics.last().cloned().ok_or_else(|| Error::Evaluation("no evaluated epoch".into()))?;
            log::info!("seed {seed} {}: rank1 {:.3} mAP {:.3}", variant.label(), final_metrics.rank(1).unwrap_or(f64::NAN), final_metrics.map);
            entries.push(AblationEntry {
                seed,
                variant,
                manifest: manifest_path,
                final_metrics,
            });
        }
    }
    let report = AblationReport { entries };
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    write_json(&out_root.join("ablation.json"), &report)?;
    write_text(&out_root.join("ablation.txt"), &report.table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_paper_schedule() {
        let c = ExperimentConfig::default();
        assert_eq!(c.pretrain.epochs, 80);
        assert_eq!(c.pretrain.milestones, vec![40, 70]);
        assert_eq!(c.adapt.epochs, 40);
        assert_eq!(c.adapt.lr, 3.5e-4);
        assert_eq!(c.adapt.weight_decay, 5e-4);
        assert_eq!(c.adapt.identities_per_domain, 8);
        assert_eq!(c.adapt.samples_per_identity, 4);
    }

    #[test]
    fn partial_sections_keep_their_own_defaults() {
        let c = ExperimentConfig::from_toml("[adapt]\nepochs = 3\n[pretrain]\nlr = 0.01\n").unwrap();
        assert_eq!(c.adapt.epochs, 3);
        assert!(c.adapt.milestones.is_empty());
        assert_eq!(c.pretrain.lr, 0.01);
        assert_eq!(c.pretrain.epochs, 80);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(ExperimentConfig::from_toml("[data]\nidentities = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nnorm = \"ln\"\n").is_err());
        assert!(ExperimentConfig::from_toml("not toml = [").is_err());
    }

    #[test]
    fn hash_ignores_seed() {
        let c = ExperimentConfig::default();
        assert_eq!(c.hash(), c.with_seed(5).hash());
        assert_ne!(c.run_dir_name(), c.with_seed(5).run_dir_name());
        let mut d = c.clone();
        d.adapt.epochs = 1;
        assert_ne!(c.hash(), d.hash());
    }
}
