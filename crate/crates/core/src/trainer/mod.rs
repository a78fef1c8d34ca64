//! Mini-batch training of a head over frozen features, with per-epoch
//! validation and evaluation of trained models.

mod adam;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{BackboneId, FeatureSequence, FeatureTable, LayerSelect};
use crate::dataset::{Dataset, SplitAssignment};
use crate::heads::{cross_entropy, EmotionLogits, HeadArtifact, HeadConfig, HeadError, HeadModel, PaddedBatch};
use crate::metrics::{evaluate_labels, MetricsError, MetricsReport};

pub use adam::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("record {0} is not in the dataset")]
    UnknownRecord(String),
    #[error("no features for record {0}")]
    MissingFeatures(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Return the parameters of the epoch with the lowest validation loss
    /// instead of the final ones.
    pub keep_best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 32, learning_rate: 1e-3, seed: 42, keep_best_val: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
    pub speaker_disjoint: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, val: 0.2, seed: 42, speaker_disjoint: false }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> (f64, f64) {
        (self.train, self.val)
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbone: BackboneId,
    pub layer: LayerSelect,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

impl ExperimentConfig {
    pub fn new(backbone: BackboneId, head: HeadConfig) -> Self {
        ExperimentConfig {
            backbone,
            layer: LayerSelect::Last,
            head,
            train: TrainConfig::default(),
            split: SplitConfig::default(),
        }
    }

    /// Checks user-facing invariants (a strictly positive learning rate).
    pub fn validate(&self) -> Result<(), TrainError> {
        self.validate_trainable()?;
        if self.train.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.train.learning_rate
            )));
        }
        Ok(())
    }

    /// The weaker check [`train`] applies; a zero learning rate is allowed.
    fn validate_trainable(&self) -> Result<(), TrainError> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if t.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !t.learning_rate.is_finite() || t.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(format!("learning_rate {} is invalid", t.learning_rate)));
        }
        self.head.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-example training loss over the epoch, dropout active.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "val_macro_f1", "val_accuracy"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_macro_f1.to_string(),
                r.val_accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

/// A trained head plus what is needed to reproduce and reload it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub head: HeadModel,
    pub backbone: BackboneId,
    pub head_config: HeadConfig,
    pub seed: u64,
    pub final_epoch: usize,
}

impl TrainedModel {
    pub fn to_artifact(&self) -> HeadArtifact {
        HeadArtifact::from_model(
            &self.head,
            self.backbone.clone(),
            self.head_config.clone(),
            self.seed,
            self.final_epoch,
        )
    }

    pub fn from_artifact(artifact: &HeadArtifact) -> Result<Self, HeadError> {
        Ok(TrainedModel {
            head: artifact.to_model()?,
            backbone: artifact.backbone.clone(),
            head_config: artifact.config.clone(),
            seed: artifact.seed,
            final_epoch: artifact.final_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        self.to_artifact().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        Self::from_artifact(&HeadArtifact::load(path)?)
    }
}

/// Anything that scores a feature sequence.
pub trait Classifier {
    fn classify(&self, features: &FeatureSequence) -> Result<EmotionLogits, TrainError>;
}

impl Classifier for HeadModel {
    fn classify(&self, features: &FeatureSequence) -> Result<EmotionLogits, TrainError> {
        Ok(self.logits(features.frames().view())?)
    }
}

impl Classifier for TrainedModel {
    fn classify(&self, features: &FeatureSequence) -> Result<EmotionLogits, TrainError> {
        self.head.classify(features)
    }
}

/// Instrumentation hooks called by [`train`].
pub trait TrainObserver {
    /// `ids` are exactly the records whose loss contributed to this step's gradient.
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _ids: &[&str], _mean_loss: f64) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

#[derive(Debug, Default)]
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub record_id: String,
    pub truth: usize,
    pub predicted: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean cross-entropy over the evaluated records.
    pub mean_loss: f64,
    pub predictions: Vec<Prediction>,
}

fn lookup<'a>(
    dataset: &Dataset,
    features: &'a FeatureTable,
    id: &str,
) -> Result<(usize, &'a FeatureSequence), TrainError> {
    let record = dataset.get(id).ok_or_else(|| TrainError::UnknownRecord(id.to_string()))?;
    let f = features.get(id).ok_or_else(|| TrainError::MissingFeatures(id.to_string()))?;
    Ok((record.emotion_level.index(), f))
}

/// Argmax predictions over `ids`, summarized by the metrics module.
pub fn evaluate<'a>(
    model: &dyn Classifier,
    dataset: &Dataset,
    ids: impl IntoIterator<Item = &'a str>,
    features: &FeatureTable,
) -> Result<Evaluation, TrainError> {
    let mut predictions = Vec::new();
    for id in ids {
        let (truth, f) = lookup(dataset, features, id)?;
        let logits = model.classify(f)?;
        let (loss, _) = cross_entropy(&logits.scores, truth);
        predictions.push(Prediction { record_id: id.to_string(), truth, predicted: logits.argmax(), loss });
    }
    if predictions.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let truth: Vec<usize> = predictions.iter().map(|p| p.truth).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let mean_loss = predictions.iter().map(|p| p.loss).sum::<f64>() / predictions.len() as f64;
    Ok(Evaluation { report: evaluate_labels(&truth, &predicted)?, mean_loss, predictions })
}

/// Trains a fresh head on `split.train_ids` and validates on `split.val_ids`
/// after every epoch.
pub fn train(
    config: &ExperimentConfig,
    dataset: &Dataset,
    split: &SplitAssignment,
    features: &FeatureTable,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainedModel, TrainingHistory), TrainError> {
    config.validate_trainable()?;
    let train_ids: Vec<&str> = split.train_ids.iter().map(String::as_str).collect();
    if train_ids.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if split.val_ids.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let width = config.backbone.width();
    for id in train_ids.iter().copied().chain(split.val_ids.iter().map(String::as_str)) {
        let (_, f) = lookup(dataset, features, id)?;
        if f.width() != width {
            return Err(HeadError::DimensionMismatch { expected: width, got: f.width() }.into());
        }
    }

    let tc = &config.train;
    let mut model = HeadModel::new(&config.head, width, tc.seed)?;
    let sizes: Vec<usize> = model.named_tensors().iter().map(|t| t.2.len()).collect();
    let mut optimizer = Adam::new(tc.learning_rate, &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    dropout_rng.set_stream(1);

    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, HeadModel, usize)> = None;
    for epoch in 1..=tc.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch_ids) in order.chunks(tc.batch_size).enumerate() {
            let seqs = batch_ids.iter().map(|id| lookup(dataset, features, id)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&FeatureSequence> = seqs.iter().map(|(_, f)| *f).collect();
            let padded = PaddedBatch::from_sequences(&refs)?;
            let scale = 1.0 / batch_ids.len() as f64;
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for (i, (label, _)) in seqs.iter().enumerate() {
                batch_loss +=
                    model.accumulate_gradient(padded.item(i), *label, Some(&mut dropout_rng), &mut grads, scale)?;
            }
            let grads_finite = grads.named_tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()));
            if !batch_loss.is_finite() || !grads_finite {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            log::debug!("epoch {epoch} batch {} loss {:.6}", b + 1, batch_loss * scale);
            observer.on_batch(epoch, b + 1, batch_ids, batch_loss * scale);
            let grad_slices: Vec<&[f64]> = grads.named_tensors().into_iter().map(|t| t.2).collect();
            optimizer.update(model.tensors_mut(), &grad_slices);
            loss_sum += batch_loss;
        }
        let val = evaluate(&model, dataset, split.val_ids.iter().map(String::as_str), features)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_ids.len() as f64,
            val_loss: val.mean_loss,
            val_macro_f1: val.report.macro_f1,
            val_accuracy: val.report.accuracy,
        };
        log::info!(
            "epoch {epoch}: TL {:.4} VL {:.4} acc {:.4} macro-F1 {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_macro_f1
        );
        observer.on_epoch(&record);
        history.epochs.push(record);
        if tc.keep_best_val && best.as_ref().is_none_or(|(vl, _, _)| record.val_loss < *vl) {
            best = Some((record.val_loss, model.clone(), epoch));
        }
    }

    let (head, final_epoch) = match best {
        Some((_, head, epoch)) => (head, epoch),
        None => (model, tc.epochs),
    };
    let trained = TrainedModel {
        head,
        backbone: config.backbone.clone(),
        head_config: config.head.clone(),
        seed: tc.seed,
        final_epoch,
    };
    Ok((trained, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneName, StubBackbone};
    use crate::dataset::{stratified_split, EmotionLevel, Gender, RecordMeta};
    use ndarray::Array2;
    use rand::Rng;
    use std::collections::BTreeSet;

    /// Dataset with features whose mean encodes the label.
    fn toy(n_per_class: usize, t: usize) -> (Dataset, FeatureTable, BackboneId) {
        let id = BackboneId::new(BackboneName::HubertBase);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut records = Vec::new();
        let mut table = FeatureTable::new();
        for level in 0..3u8 {
            for k in 0..n_per_class {
                let rid = format!("{level}/{}-{k}-0-30-{level}-0.wav", k % 7);
                records.push(RecordMeta {
                    record_id: rid.clone(),
                    word: (k % 7) as u8,
                    speaker_id: k as u32,
                    gender: Gender::Male,
                    age: 30,
                    emotion_level: EmotionLevel::new(level).unwrap(),
                });
                let frames = Array2::from_shape_fn((t + k % 3, id.width()), |(_, d)| {
                    let signal = if d % 3 == level as usize { 1.0 } else { 0.0 };
                    signal + rng.random_range(-0.3..0.3)
                });
                table.insert(rid.clone(), FeatureSequence::new(frames, id.clone(), &rid, id.width()).unwrap());
            }
        }
        (Dataset::new("/toy", records).unwrap(), table, id)
    }

    #[derive(Default)]
    struct Recorder {
        steps: Vec<(usize, usize)>,
        seen: BTreeSet<String>,
    }

    impl TrainObserver for Recorder {
        fn on_batch(&mut self, epoch: usize, batch: usize, ids: &[&str], _loss: f64) {
            self.steps.push((epoch, batch));
            self.seen.extend(ids.iter().map(|s| s.to_string()));
        }
    }

    #[test]
    fn history_length_step_count_and_no_leak() {
        let (ds, table, id) = toy(10, 3);
        let split = stratified_split(&ds, (0.8, 0.2), 1).unwrap();
        let mut config = ExperimentConfig::new(id, HeadConfig { hidden_sizes: vec![16], ..Default::default() });
        config.train.batch_size = 7;
        let mut rec = Recorder::default();
        let (model, history) = train(&config, &ds, &split, &table, &mut rec).unwrap();
        assert_eq!(history.len(), 5);
        assert_eq!(model.final_epoch, 5);
        let per_epoch = split.train_ids.len().div_ceil(7);
        assert_eq!(rec.steps.len(), 5 * per_epoch);
        assert!(rec.seen.is_disjoint(&split.val_ids));
        assert_eq!(rec.seen, split.train_ids);
        for r in &history.epochs {
            assert!(r.train_loss >= 0.0 && r.val_loss >= 0.0 && r.train_loss.is_finite());
        }
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (ds, table, id) = toy(6, 2);
        let split = stratified_split(&ds, (0.5, 0.5), 3).unwrap();
        for head in [
            HeadConfig { dropout: 0.0, ..Default::default() },
            HeadConfig { dropout: 0.0, lstm_hidden: 4, ..HeadConfig::bilstm() },
        ] {
            let mut config = ExperimentConfig::new(id.clone(), head.clone());
            config.train.learning_rate = 0.0;
            config.train.batch_size = 4;
            assert!(config.validate().is_err());
            let (model, history) = train(&config, &ds, &split, &table, &mut NoopObserver).unwrap();
            let first = history.epochs[0].train_loss;
            assert!(history.epochs.iter().all(|r| (r.train_loss - first).abs() < 1e-6));
            assert_eq!(model.head, HeadModel::new(&head, id.width(), config.train.seed).unwrap());
        }
    }

    #[test]
    fn identical_config_gives_identical_history() {
        let (ds, table, id) = toy(8, 3);
        let split = stratified_split(&ds, (0.75, 0.25), 9).unwrap();
        let config = ExperimentConfig::new(id, HeadConfig { lstm_hidden: 6, ..HeadConfig::bilstm() });
        let a = train(&config, &ds, &split, &table, &mut NoopObserver).unwrap();
        let b = train(&config, &ds, &split, &table, &mut NoopObserver).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keep_best_val_reports_the_chosen_epoch() {
        let (ds, table, id) = toy(8, 3);
        let split = stratified_split(&ds, (0.75, 0.25), 9).unwrap();
        let mut config = ExperimentConfig::new(id, HeadConfig { hidden_sizes: vec![8], ..Default::default() });
        config.train.keep_best_val = true;
        config.train.epochs = 6;
        let (model, history) = train(&config, &ds, &split, &table, &mut NoopObserver).unwrap();
        let best = history.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
        assert_eq!(model.final_epoch, best.epoch);
    }

    #[test]
    fn config_invariants() {
        let id = BackboneId::new(BackboneName::HubertBase);
        let mut c = ExperimentConfig::new(id, HeadConfig::default());
        assert!(c.validate().is_ok());
        c.train.epochs = 0;
        assert!(c.validate().is_err());
        c.train.epochs = 1;
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_aborts_with_coordinates() {
        let (ds, table, id) = toy(4, 2);
        let split = stratified_split(&ds, (0.5, 0.5), 2).unwrap();
        let mut config =
            ExperimentConfig::new(id, HeadConfig { hidden_sizes: vec![], dropout: 0.0, ..Default::default() });
        config.train.batch_size = 2;
        config.train.learning_rate = f64::MAX;
        let err = train(&config, &ds, &split, &table, &mut NoopObserver).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 1, batch: 2 }), "{err}");
    }

    struct Oracle<'a>(&'a Dataset);
    impl Classifier for Oracle<'_> {
        fn classify(&self, f: &FeatureSequence) -> Result<EmotionLogits, TrainError> {
            let mut scores = [0.0; 3];
            scores[self.0.get(&f.record_id).unwrap().emotion_level.index()] = 1.0;
            Ok(EmotionLogits { scores })
        }
    }

    struct Constant(usize);
    impl Classifier for Constant {
        fn classify(&self, _: &FeatureSequence) -> Result<EmotionLogits, TrainError> {
            let mut scores = [0.0; 3];
            scores[self.0] = 1.0;
            Ok(EmotionLogits { scores })
        }
    }

    #[test]
    fn evaluate_oracle_and_constant_predictors() {
        let (ds, table, _) = toy(5, 2);
        let ids: Vec<&str> = ds.ids().collect();
        let perfect = evaluate(&Oracle(&ds), &ds, ids.iter().copied(), &table).unwrap();
        assert_eq!(perfect.report.accuracy, 1.0);
        assert_eq!(perfect.report.macro_f1, 1.0);
        assert!(perfect.report.confusion.is_diagonal());

        // drop two class-0 records so supports are unequal
        let subset: Vec<&str> = ids.iter().copied().skip(2).collect();
        let constant = evaluate(&Constant(1), &ds, subset.iter().copied(), &table).unwrap();
        let support1 = 5.0;
        let n = subset.len() as f64;
        assert_eq!(constant.report.accuracy, support1 / n);
        let (p, r) = (support1 / n, 1.0);
        assert!((constant.report.macro_f1 - 2.0 * p * r / (p + r) / 3.0).abs() < 1e-15);
        assert_eq!(constant, evaluate(&Constant(1), &ds, subset.iter().copied(), &table).unwrap());
        assert!(matches!(evaluate(&Constant(0), &ds, [], &table), Err(TrainError::EmptyEvalSet)));
    }

    #[test]
    fn stub_features_train_end_to_end() {
        let corpus = tempfile::tempdir().unwrap();
        crate::dataset::synthetic::write_corpus(corpus.path(), &Default::default()).unwrap();
        let ds = crate::dataset::scan_dataset(corpus.path()).unwrap();
        let id = BackboneId::new(BackboneName::HubertBase);
        let stub = StubBackbone::new(id.clone());
        let records: Vec<_> = ds.records().iter().collect();
        let (table, _) = crate::backbones::extract_all(&stub, &records, ds.root(), None, 2).unwrap();
        let split = stratified_split(&ds, (0.8, 0.2), 42).unwrap();
        let config = ExperimentConfig::new(id, HeadConfig::default());
        let (model, history) = train(&config, &ds, &split, &table, &mut NoopObserver).unwrap();
        assert_eq!(history.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        model.save(&dir.path().join("head.json")).unwrap();
        assert_eq!(TrainedModel::load(&dir.path().join("head.json")).unwrap(), model);
    }
}
