//! Trainable classifier heads over frozen frame embeddings.
//!
//! Two heads map a `[T x D]` feature sequence to three emotion-level
//! logits: an MLP over temporally pooled features and a single-layer
//! bidirectional LSTM read out from its final states. Both carry
//! hand-written gradients of the softmax cross-entropy loss.

mod artifact;
mod bilstm;
mod mlp;

use ndarray::{s, Array1, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::FeatureSequence;
use crate::metrics::NUM_CLASSES;

pub use artifact::{HeadArtifact, NamedTensor, ARTIFACT_FORMAT, ARTIFACT_VERSION};
pub use bilstm::{BiLstm, LstmDirection};
pub use mlp::{Dense, Mlp};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("dimension mismatch: head expects {expected}, input has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("empty feature sequence")]
    EmptySequence,
    #[error("artifact {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mlp,
    Bilstm,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::Bilstm => "bilstm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// MLP hidden layer widths.
    pub hidden_sizes: Vec<usize>,
    /// Bi-LSTM units per direction.
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub pooling: Pooling,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Mlp,
            hidden_sizes: vec![256, 64],
            lstm_hidden: 50,
            dropout: 0.1,
            activation: Activation::Relu,
            pooling: Pooling::Mean,
        }
    }
}

impl HeadConfig {
    pub fn bilstm() -> Self {
        HeadConfig { kind: HeadKind::Bilstm, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.hidden_sizes.contains(&0) {
            return Err(HeadError::InvalidConfig("hidden sizes must be >= 1".into()));
        }
        if self.lstm_hidden == 0 {
            return Err(HeadError::InvalidConfig("lstm_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HeadError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A `[D]` summary of a feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub vector: Array1<f64>,
}

/// `vector[d] = (1/T) sum_t frames[t][d]`.
pub fn pool_mean(features: &FeatureSequence) -> PooledFeature {
    PooledFeature { vector: mean_over_time(features.frames().view()) }
}

pub fn pool_max(features: &FeatureSequence) -> PooledFeature {
    PooledFeature { vector: max_over_time(features.frames().view()) }
}

pub(crate) fn mean_over_time(frames: ArrayView2<f32>) -> Array1<f64> {
    let t = frames.nrows() as f64;
    let mut acc = Array1::<f64>::zeros(frames.ncols());
    for row in frames.rows() {
        acc.zip_mut_with(&row, |a, &v| *a += v as f64);
    }
    acc / t
}

pub(crate) fn max_over_time(frames: ArrayView2<f32>) -> Array1<f64> {
    let mut acc = Array1::<f64>::from_elem(frames.ncols(), f64::NEG_INFINITY);
    for row in frames.rows() {
        acc.zip_mut_with(&row, |a, &v| *a = a.max(v as f64));
    }
    acc
}

/// Scores for the three emotion levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionLogits {
    pub scores: [f64; NUM_CLASSES],
}

impl EmotionLogits {
    pub fn from_array(a: ArrayView1<f64>) -> Self {
        EmotionLogits { scores: [a[0], a[1], a[2]] }
    }

    pub fn softmax(&self) -> [f64; NUM_CLASSES] {
        softmax(&self.scores)
    }

    /// First maximal index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.scores[c] > self.scores[best] {
                best = c;
            }
        }
        best
    }
}

pub fn softmax(scores: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.map(|s| (s - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

/// Loss `-log softmax(scores)[target]` and its gradient w.r.t. the scores.
pub fn cross_entropy(scores: &[f64; NUM_CLASSES], target: usize) -> (f64, [f64; NUM_CLASSES]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    let probs = softmax(scores);
    let mut grad = probs;
    grad[target] -= 1.0;
    (log_sum - scores[target], grad)
}

/// Sequences zero-padded to the longest one, with true lengths.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// `[B x T_max x D]`
    pub frames: Array3<f32>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sequences(seqs: &[&FeatureSequence]) -> Result<Self, HeadError> {
        let width = seqs.first().map(|s| s.width()).unwrap_or(0);
        let t_max = seqs.iter().map(|s| s.num_frames()).max().unwrap_or(0);
        let mut frames = Array3::<f32>::zeros((seqs.len(), t_max, width));
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, seq) in seqs.iter().enumerate() {
            if seq.width() != width {
                return Err(HeadError::DimensionMismatch { expected: width, got: seq.width() });
            }
            frames.slice_mut(s![b, ..seq.num_frames(), ..]).assign(seq.frames());
            lengths.push(seq.num_frames());
        }
        Ok(PaddedBatch { frames, lengths })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The unpadded `[len x D]` view of item `b`.
    pub fn item(&self, b: usize) -> ArrayView2<'_, f32> {
        self.frames.slice(s![b, ..self.lengths[b], ..])
    }
}

/// Dropout mask source for training-mode passes.
pub(crate) fn dropout_mask(rng: Option<&mut ChaCha8Rng>, p: f64, n: usize) -> Option<Array1<f64>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array1::from_shape_fn(n, |_| if rng.random::<f64>() < p { 0.0 } else { keep }))
}

/// A head with its parameters.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum HeadModel {
    Mlp { net: Mlp, pooling: Pooling },
    BiLstm(BiLstm),
}

impl HeadModel {
    /// Seeded uniform fan-in initialization.
    pub fn new(config: &HeadConfig, input_dim: usize, seed: u64) -> Result<Self, HeadError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(HeadError::InvalidConfig("input dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match config.kind {
            HeadKind::Mlp => HeadModel::Mlp {
                net: Mlp::new(input_dim, &config.hidden_sizes, config.activation, config.dropout, &mut rng),
                pooling: config.pooling,
            },
            HeadKind::Bilstm => HeadModel::BiLstm(BiLstm::new(input_dim, config.lstm_hidden, config.dropout, &mut rng)),
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            HeadModel::Mlp { net, .. } => net.input_dim(),
            HeadModel::BiLstm(net) => net.input_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            HeadModel::Mlp { net, pooling } => HeadModel::Mlp { net: net.zeros_like(), pooling: *pooling },
            HeadModel::BiLstm(net) => HeadModel::BiLstm(net.zeros_like()),
        }
    }

    fn check(&self, frames: &ArrayView2<f32>) -> Result<(), HeadError> {
        if frames.nrows() == 0 {
            return Err(HeadError::EmptySequence);
        }
        if frames.ncols() != self.input_dim() {
            return Err(HeadError::DimensionMismatch { expected: self.input_dim(), got: frames.ncols() });
        }
        Ok(())
    }

    fn pool(pooling: Pooling, frames: ArrayView2<f32>) -> Array1<f64> {
        match pooling {
            Pooling::Mean => mean_over_time(frames),
            Pooling::Max => max_over_time(frames),
        }
    }

    /// Evaluation-mode logits (no dropout).
    pub fn logits(&self, frames: ArrayView2<f32>) -> Result<EmotionLogits, HeadError> {
        self.check(&frames)?;
        Ok(match self {
            HeadModel::Mlp { net, pooling } => net.forward(Self::pool(*pooling, frames).view())?,
            HeadModel::BiLstm(net) => net.forward(frames)?,
        })
    }

    pub fn batch_logits(&self, batch: &PaddedBatch) -> Result<Vec<EmotionLogits>, HeadError> {
        (0..batch.len()).map(|b| self.logits(batch.item(b))).collect()
    }

    /// Cross-entropy loss of one example; adds `scale * dLoss/dParam` into
    /// `grads`. Passing an rng enables dropout (training mode).
    pub fn accumulate_gradient(
        &self,
        frames: ArrayView2<f32>,
        target: usize,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut HeadModel,
        scale: f64,
    ) -> Result<f64, HeadError> {
        self.check(&frames)?;
        match (self, grads) {
            (HeadModel::Mlp { net, pooling }, HeadModel::Mlp { net: g, .. }) => {
                net.accumulate_gradient(Self::pool(*pooling, frames).view(), target, rng, g, scale)
            }
            (HeadModel::BiLstm(net), HeadModel::BiLstm(g)) => net.accumulate_gradient(frames, target, rng, g, scale),
            _ => Err(HeadError::InvalidConfig("gradient buffer has a different head kind".into())),
        }
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        match self {
            HeadModel::Mlp { net, .. } => net.named_tensors(),
            HeadModel::BiLstm(net) => net.named_tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            HeadModel::Mlp { net, .. } => net.tensors_mut(),
            HeadModel::BiLstm(net) => net.tensors_mut(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Rebuilds a head from named tensors, checking every name and shape.
    pub fn from_tensors(config: &HeadConfig, input_dim: usize, tensors: &[NamedTensor]) -> Result<Self, HeadError> {
        let mut model = HeadModel::new(config, input_dim, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(HeadError::Artifact(format!(
                "expected {} tensors, artifact has {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(tensors) {
            if &t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(HeadError::Artifact(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        for (dst, t) in model.tensors_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&t.data);
        }
        Ok(model)
    }
}
