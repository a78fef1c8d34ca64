//! Config-driven pipeline: scan, split, extract, train, evaluate, compare
//! and report, writing every artifact into one output directory.

mod config;
pub mod plots;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbones::{
    extract_all, BackboneError, BackboneId, BackboneLoader, BackboneName, CheckpointLoader, ExtractError, ExtractStats,
    FeatureCache, FeatureTable, StubLoader,
};
use crate::dataset::{
    scan_dataset_with, speaker_disjoint_split, stratified_split, write_manifest, write_split_csv, Dataset,
    DatasetError, ManifestRow, SplitAssignment,
};
use crate::heads::{HeadError, HeadKind};
use crate::metrics::MetricsReport;
use crate::trainer::{
    evaluate, train, EpochRecord, Evaluation, ExperimentConfig, NoopObserver, TrainError, TrainedModel, TrainingHistory,
};

pub use config::{
    cache_namespace, BackboneSection, CacheSection, CompareSection, DatasetSection, ExtractSection, OutputSection,
    RunConfig, CACHE_DIR_ENV,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Process exit status: 2 config, 3 data, 4 training, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) => 3,
            ExperimentError::Training(_) => 4,
            _ => 1,
        }
    }
}

impl From<DatasetError> for ExperimentError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidRatios(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => ExperimentError::Config(e.to_string()),
            TrainError::UnknownRecord(_) | TrainError::MissingFeatures(_) => ExperimentError::Data(e.to_string()),
            _ => ExperimentError::Training(e.to_string()),
        }
    }
}

impl From<ExtractError> for ExperimentError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Data { .. } => ExperimentError::Data(e.to_string()),
            ExtractError::Backbone { .. } => ExperimentError::Training(e.to_string()),
        }
    }
}

impl From<BackboneError> for ExperimentError {
    fn from(e: BackboneError) -> Self {
        ExperimentError::Training(e.to_string())
    }
}

impl From<HeadError> for ExperimentError {
    fn from(e: HeadError) -> Self {
        ExperimentError::Training(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Other(e.to_string())
    }
}

/// How backbones are resolved for a run.
pub struct RunOptions {
    pub stub_backbone: bool,
    pub loader: Box<dyn BackboneLoader>,
}

impl RunOptions {
    pub fn stub() -> Self {
        RunOptions { stub_backbone: true, loader: Box::new(StubLoader) }
    }

    pub fn checkpoints() -> Self {
        RunOptions { stub_backbone: false, loader: Box::new(CheckpointLoader::from_env()) }
    }
}

pub const MANIFEST_CSV: &str = "manifest.csv";
pub const SPLIT_CSV: &str = "split.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const HEAD_JSON: &str = "head.json";
pub const RUN_MANIFEST_JSON: &str = "run_manifest.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_ALL_CSV: &str = "comparison_all.csv";
pub const COMPARISON_MD: &str = "comparison.md";
pub const CURVES_CSV: &str = "curves.csv";

/// Identity of the corpus a run consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFingerprint {
    pub records: usize,
    pub class_counts: [usize; 3],
    pub speakers: usize,
    pub total_duration_s: f64,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub mode: String,
    pub stub_backbone: bool,
    pub config: RunConfig,
    pub experiments: Vec<ExperimentConfig>,
    pub corpus: CorpusFingerprint,
    /// Wall-clock seconds per stage.
    pub timings_s: BTreeMap<String, f64>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub backbone: BackboneId,
    pub head: HeadKind,
    pub final_epoch: usize,
    pub val_loss: f64,
    pub report: MetricsReport,
}

fn stage<T>(timings: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *timings.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
    out
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset, ExperimentError> {
    Ok(scan_dataset_with(&config.dataset.root, &config.dataset.schema)?)
}

pub fn make_split(config: &RunConfig, dataset: &Dataset) -> Result<SplitAssignment, ExperimentError> {
    let s = &config.split;
    Ok(if s.speaker_disjoint {
        speaker_disjoint_split(dataset, s.ratios(), s.seed)?
    } else {
        stratified_split(dataset, s.ratios(), s.seed)?
    })
}

/// Writes `manifest.csv` and returns its rows and fingerprint.
pub fn write_corpus_manifest(
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<(Vec<ManifestRow>, CorpusFingerprint), ExperimentError> {
    let mut buf = Vec::new();
    let rows = write_manifest(dataset, &mut buf)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(MANIFEST_CSV), &buf)?;
    let summary = dataset.summary();
    let fingerprint = CorpusFingerprint {
        records: summary.records,
        class_counts: summary.class_counts,
        speakers: summary.speakers,
        total_duration_s: rows.iter().map(|r| r.duration_s).sum(),
        manifest_sha256: hex::encode(Sha256::digest(&buf)),
    };
    Ok((rows, fingerprint))
}

pub fn write_split(split: &SplitAssignment, out_dir: &Path) -> Result<(), ExperimentError> {
    let mut buf = Vec::new();
    write_split_csv(split, &mut buf)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(SPLIT_CSV), buf)?;
    Ok(())
}

/// Features for `dataset` from backbone `name`, through the cache when enabled.
pub fn extract_features(
    config: &RunConfig,
    options: &RunOptions,
    dataset: &Dataset,
    name: BackboneName,
) -> Result<(FeatureTable, ExtractStats), ExperimentError> {
    let id = config.backbone_id(name);
    let backbone = options.loader.load(&id, config.backbone.layer)?;
    let cache = config.cache.enabled.then(|| {
        FeatureCache::new(cache_namespace(&config.cache_root(), &id, config.backbone.layer, options.stub_backbone))
    });
    let records: Vec<_> = dataset.records().iter().collect();
    let (table, stats) = extract_all(backbone.as_ref(), &records, dataset.root(), cache.as_ref(), config.workers())?;
    log::info!(
        "{}: {} records ({} cache hits, {} extracted, {} corrupt entries rebuilt)",
        name,
        table.len(),
        stats.hits,
        stats.misses,
        stats.recomputed_corrupt
    );
    Ok((table, stats))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Other(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_predictions(path: &Path, evaluation: &Evaluation) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record_id", "true_level", "predicted_level", "loss"])?;
    for p in &evaluation.predictions {
        w.write_record([p.record_id.clone(), p.truth.to_string(), p.predicted.to_string(), p.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything one trained head produced.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub experiment: ExperimentConfig,
    pub model: TrainedModel,
    pub history: TrainingHistory,
    pub evaluation: Evaluation,
    pub dir: PathBuf,
}

impl ModelRun {
    pub fn metrics_file(&self) -> MetricsFile {
        MetricsFile {
            backbone: self.experiment.backbone.clone(),
            head: self.experiment.head.kind,
            final_epoch: self.model.final_epoch,
            val_loss: self.evaluation.mean_loss,
            report: self.evaluation.report.clone(),
        }
    }
}

/// Trains one head and writes history, metrics, predictions, head artifact
/// and plots into `dir`.
fn train_and_write(
    experiment: ExperimentConfig,
    dataset: &Dataset,
    split: &SplitAssignment,
    features: &FeatureTable,
    dir: &Path,
    plots: bool,
    timings: &mut BTreeMap<String, f64>,
) -> Result<ModelRun, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let label = format!("{}/{}", experiment.backbone.name, experiment.head.kind.as_str());
    log::info!("training {label}");
    let (model, history) = stage(timings, "train", || train(&experiment, dataset, split, features, &mut NoopObserver))?;
    let evaluation =
        stage(timings, "evaluate", || evaluate(&model, dataset, split.val_ids.iter().map(String::as_str), features))?;
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    std::fs::write(dir.join(HISTORY_CSV), buf)?;
    std::fs::write(dir.join(HISTORY_JSON), history.to_json() + "\n")?;
    let mut buf = Vec::new();
    evaluation.report.confusion.write_csv(&mut buf)?;
    std::fs::write(dir.join(CONFUSION_CSV), buf)?;
    write_predictions(&dir.join(PREDICTIONS_CSV), &evaluation)?;
    model.save(&dir.join(HEAD_JSON))?;
    let run = ModelRun { experiment, model, history, evaluation, dir: dir.to_path_buf() };
    write_json(&dir.join(METRICS_JSON), &run.metrics_file())?;
    if plots {
        stage(timings, "plots", || plots::emit_plots(&run.history, &run.evaluation.report, dir, &label))?;
    }
    Ok(run)
}

pub struct RunOutcome {
    pub run: ModelRun,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Full single-model pipeline for the configured backbone and head.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunOutcome, ExperimentError> {
    config.validate()?;
    let out = config.output.dir.clone();
    let mut timings = BTreeMap::new();
    let dataset = stage(&mut timings, "scan", || load_dataset(config))?;
    let (_, corpus) = stage(&mut timings, "manifest", || write_corpus_manifest(&dataset, &out))?;
    let split = stage(&mut timings, "split", || make_split(config, &dataset))?;
    write_split(&split, &out)?;
    let (features, _) =
        stage(&mut timings, "extract", || extract_features(config, options, &dataset, config.backbone.name))?;
    let experiment = config.experiment(config.backbone.name, config.head.kind);
    let run = train_and_write(experiment.clone(), &dataset, &split, &features, &out, true, &mut timings)?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        mode: "train".into(),
        stub_backbone: options.stub_backbone,
        config: config.clone(),
        experiments: vec![experiment],
        corpus,
        timings_s: timings,
    };
    write_json(&out.join(RUN_MANIFEST_JSON), &manifest)?;
    Ok(RunOutcome { run, manifest, out_dir: out })
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: BackboneName,
    pub length_min: f64,
    pub records: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub head: HeadKind,
    /// Relative to the comparison directory.
    pub metrics_file: String,
}

pub struct CompareOutcome {
    /// Best head per backbone, in configured backbone order.
    pub rows: Vec<ComparisonRow>,
    /// Every backbone x head combination.
    pub all_rows: Vec<ComparisonRow>,
    pub runs: Vec<ModelRun>,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

/// Trains every configured backbone x head on one shared split.
pub fn compare(config: &RunConfig, options: &RunOptions) -> Result<CompareOutcome, ExperimentError> {
    config.validate()?;
    let out = config.output.dir.clone();
    let mut timings = BTreeMap::new();
    let dataset = stage(&mut timings, "scan", || load_dataset(config))?;
    let (_, corpus) = stage(&mut timings, "manifest", || write_corpus_manifest(&dataset, &out))?;
    let split = stage(&mut timings, "split", || make_split(config, &dataset))?;
    write_split(&split, &out)?;
    let length_min = round_to(corpus.total_duration_s / 60.0, 2);

    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut all_rows = Vec::new();
    let mut experiments = Vec::new();
    for &name in &config.compare.backbones {
        let (features, _) = stage(&mut timings, "extract", || extract_features(config, options, &dataset, name))?;
        let mut best: Option<ComparisonRow> = None;
        for &kind in &config.compare.heads {
            let experiment = config.experiment(name, kind);
            experiments.push(experiment.clone());
            let rel = format!("{}/{}", name.as_str(), kind.as_str());
            let run = train_and_write(experiment, &dataset, &split, &features, &out.join(&rel), true, &mut timings)?;
            let report = &run.evaluation.report;
            let row = ComparisonRow {
                model: name,
                length_min,
                records: corpus.records,
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
                head: kind,
                metrics_file: format!("{rel}/{METRICS_JSON}"),
            };
            let better = best.as_ref().is_none_or(|b| (row.accuracy, row.macro_f1) > (b.accuracy, b.macro_f1));
            if better {
                best = Some(row.clone());
            }
            all_rows.push(row);
            runs.push(run);
        }
        rows.push(best.expect("at least one head"));
    }

    write_comparison(&out, &rows, &all_rows)?;
    write_curves(&out, &runs)?;
    let best_histories: Vec<(String, &TrainingHistory)> = rows
        .iter()
        .map(|row| {
            let run = runs
                .iter()
                .find(|r| r.experiment.backbone.name == row.model && r.experiment.head.kind == row.head)
                .expect("row has a run");
            (format!("{} ({})", row.model, row.head.as_str()), &run.history)
        })
        .collect();
    let labeled: Vec<(&str, &TrainingHistory)> = best_histories.iter().map(|(l, h)| (l.as_str(), *h)).collect();
    stage(&mut timings, "plots", || plots::emit_curve_plots(&labeled, &out))?;

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        mode: "compare".into(),
        stub_backbone: options.stub_backbone,
        config: config.clone(),
        experiments,
        corpus,
        timings_s: timings,
    };
    write_json(&out.join(RUN_MANIFEST_JSON), &manifest)?;
    Ok(CompareOutcome { rows, all_rows, runs, manifest, out_dir: out })
}

fn write_rows(path: &Path, rows: &[ComparisonRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let mut md = String::from("| model | length (min) | no. records | accuracy (%) | macro-F1 (%) | head |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        md.push_str(&format!(
            "| {} | {:.2} | {} | {:.2} | {:.2} | {} |\n",
            r.model,
            r.length_min,
            r.records,
            100.0 * r.accuracy,
            100.0 * r.macro_f1,
            r.head.as_str()
        ));
    }
    md
}

fn write_comparison(out: &Path, rows: &[ComparisonRow], all_rows: &[ComparisonRow]) -> Result<(), ExperimentError> {
    write_rows(&out.join(COMPARISON_CSV), rows)?;
    write_rows(&out.join(COMPARISON_ALL_CSV), all_rows)?;
    std::fs::write(out.join(COMPARISON_MD), comparison_markdown(rows))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    model: BackboneName,
    head: HeadKind,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_macro_f1: f64,
    val_accuracy: f64,
}

fn write_curves(out: &Path, runs: &[ModelRun]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(out.join(CURVES_CSV))?;
    for run in runs {
        for r in &run.history.epochs {
            w.serialize(CurveRow {
                model: run.experiment.backbone.name,
                head: run.experiment.head.kind,
                epoch: r.epoch,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                val_macro_f1: r.val_macro_f1,
                val_accuracy: r.val_accuracy,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Which records to score in [`evaluate_artifact`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSubset {
    Train,
    Val,
    All,
}

/// Scores a saved head on the configured corpus and split.
pub fn evaluate_artifact(
    config: &RunConfig,
    options: &RunOptions,
    head_path: &Path,
    split_csv: Option<&Path>,
    subset: EvalSubset,
) -> Result<Evaluation, ExperimentError> {
    let model = TrainedModel::load(head_path)?;
    let dataset = load_dataset(config)?;
    let split = match split_csv {
        Some(path) => {
            crate::dataset::read_split_csv(std::fs::File::open(path)?, config.split.seed, config.split.ratios())?
        }
        None => make_split(config, &dataset)?,
    };
    let ids: Vec<&str> = match subset {
        EvalSubset::Train => split.train(),
        EvalSubset::Val => split.val(),
        EvalSubset::All => dataset.ids().collect(),
    };
    let sub = dataset.subset(ids.iter().copied())?;
    let mut cfg = config.clone();
    if model.backbone.name == cfg.backbone.name {
        cfg.backbone.checkpoint_ref = Some(model.backbone.checkpoint_ref.clone());
    }
    let (features, _) = extract_features(&cfg, options, &sub, model.backbone.name)?;
    Ok(evaluate(&model, &dataset, ids, &features)?)
}

/// Reads `history.csv` back.
pub fn read_history(path: &Path) -> Result<TrainingHistory, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let epochs = r.deserialize::<EpochRecord>().collect::<Result<Vec<_>, _>>()?;
    Ok(TrainingHistory { epochs })
}

/// Regenerates plots and the comparison table from an artifact directory.
/// Returns a printable summary.
pub fn report(dir: &Path) -> Result<String, ExperimentError> {
    let comparison = dir.join(COMPARISON_CSV);
    if comparison.is_file() {
        let rows: Vec<ComparisonRow> = csv::Reader::from_path(&comparison)?.deserialize().collect::<Result<_, _>>()?;
        let mut histories = Vec::new();
        for row in &rows {
            let h = read_history(&dir.join(row.model.as_str()).join(row.head.as_str()).join(HISTORY_CSV))?;
            histories.push((format!("{} ({})", row.model, row.head.as_str()), h));
        }
        let labeled: Vec<(&str, &TrainingHistory)> = histories.iter().map(|(l, h)| (l.as_str(), h)).collect();
        plots::emit_curve_plots(&labeled, dir)?;
        let md = comparison_markdown(&rows);
        std::fs::write(dir.join(COMPARISON_MD), &md)?;
        return Ok(md);
    }
    let history = read_history(&dir.join(HISTORY_CSV))?;
    let metrics: MetricsFile = serde_json::from_str(&std::fs::read_to_string(dir.join(METRICS_JSON))?)
        .map_err(|e| ExperimentError::Other(format!("{}: {e}", dir.join(METRICS_JSON).display())))?;
    let label = format!("{}/{}", metrics.backbone.name, metrics.head.as_str());
    plots::emit_plots(&history, &metrics.report, dir, &label)?;
    Ok(format_report(&label, &history, &metrics.report))
}

pub fn format_report(label: &str, history: &TrainingHistory, report: &MetricsReport) -> String {
    let mut s = format!("{label}\nepoch  train_loss  val_loss  val_acc  val_macro_f1\n");
    for r in &history.epochs {
        s.push_str(&format!(
            "{:>5}  {:>10.4}  {:>8.4}  {:>7.4}  {:>12.4}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.val_macro_f1
        ));
    }
    s.push_str(&format!(
        "accuracy {:.4}  macro-F1 {:.4}  weighted-F1 {:.4}\n",
        report.accuracy, report.macro_f1, report.weighted_f1
    ));
    for c in &report.per_class {
        s.push_str(&format!(
            "  {:<8} support {:>4}  precision {:.4}  recall {:.4}  f1 {:.4}{}\n",
            c.label.label(),
            c.support,
            c.precision,
            c.recall,
            c.f1,
            if c.undefined { "  (0/0 treated as 0)" } else { "" }
        ));
    }
    s
}
