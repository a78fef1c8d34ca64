//! Frozen self-supervised speech backbones and the on-disk feature cache.
//!
//! A backbone maps a 16 kHz [`Waveform`] to a `[T x D]` matrix of
//! contextualized frame embeddings. Real checkpoints are loaded through
//! [`CheckpointLoader`]; [`StubBackbone`] stands in for them in tests.

mod cache;
mod extract;
mod ssl;
mod stub;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::Waveform;

pub use cache::{FeatureCache, CACHE_HEADER_LEN, CACHE_MAGIC, CACHE_VERSION};
pub use extract::{extract_all, features_for, ExtractError, ExtractStats, FeatureTable};
pub use ssl::{SslBackbone, SslConfig};
pub use stub::StubBackbone;

/// Conv feature encoder geometry shared by every supported backbone.
pub const CONV_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
pub const CONV_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

pub const CHECKPOINT_DIR_ENV: &str = "BAVED_SER_CHECKPOINTS";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("checkpoint {checkpoint_ref} unavailable: {reason}")]
    CheckpointUnavailable { checkpoint_ref: String, reason: String },
    #[error("backbone failure: {0}")]
    BackboneFailure(String),
    #[error("corrupt cache entry {path}: {reason}")]
    CorruptCacheEntry { path: PathBuf, reason: String },
    #[error("waveform too short for the feature encoder ({0} samples)")]
    TooShort(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<candle_core::Error> for BackboneError {
    fn from(err: candle_core::Error) -> Self {
        BackboneError::BackboneFailure(err.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneName {
    Wav2vec2Arabic,
    HubertBase,
    HubertLarge,
}

impl BackboneName {
    pub const ALL: [BackboneName; 3] =
        [BackboneName::Wav2vec2Arabic, BackboneName::HubertBase, BackboneName::HubertLarge];

    /// Embedding width D of the published checkpoint.
    pub fn width(self) -> usize {
        match self {
            BackboneName::Wav2vec2Arabic | BackboneName::HubertLarge => 1024,
            BackboneName::HubertBase => 768,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Wav2vec2Arabic => "wav2vec2_arabic",
            BackboneName::HubertBase => "hubert_base",
            BackboneName::HubertLarge => "hubert_large",
        }
    }

    pub fn default_checkpoint(self) -> &'static str {
        match self {
            BackboneName::Wav2vec2Arabic => "elgeish/wav2vec2-large-xlsr-53-arabic",
            BackboneName::HubertBase => "facebook/hubert-base-ls960",
            BackboneName::HubertLarge => "facebook/hubert-large-ll60k",
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackboneName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown backbone {s:?} (expected wav2vec2_arabic, hubert_base or hubert_large)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneId {
    pub name: BackboneName,
    pub checkpoint_ref: String,
}

impl BackboneId {
    pub fn new(name: BackboneName) -> Self {
        BackboneId { name, checkpoint_ref: name.default_checkpoint().to_string() }
    }

    pub fn width(&self) -> usize {
        self.name.width()
    }
}

/// Which transformer output to export. Index 0 is the encoder input
/// (after positional convolution); `Last` is the final hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerSelect {
    #[default]
    Last,
    Index(usize),
}

impl Serialize for LayerSelect {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LayerSelect::Last => s.serialize_str("last"),
            LayerSelect::Index(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelect {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Index(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) if t == "last" => Ok(LayerSelect::Last),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("layer must be \"last\" or an integer, got {t:?}"))),
            Raw::Index(i) => Ok(LayerSelect::Index(i as usize)),
        }
    }
}

/// Frame embeddings of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f32>,
    pub backbone: BackboneId,
    pub record_id: String,
}

impl FeatureSequence {
    /// Checks `T >= 1`, finiteness and that D matches `expected_width`.
    pub fn new(
        frames: Array2<f32>,
        backbone: BackboneId,
        record_id: impl Into<String>,
        expected_width: usize,
    ) -> Result<Self, BackboneError> {
        let (t, d) = frames.dim();
        if t == 0 {
            return Err(BackboneError::BackboneFailure("backbone produced zero frames".into()));
        }
        if d != expected_width {
            return Err(BackboneError::BackboneFailure(format!(
                "{} produced width {d}, expected {expected_width}",
                backbone.name
            )));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(BackboneError::BackboneFailure(format!(
                "non-finite value at frame {} dim {}",
                pos / d,
                pos % d
            )));
        }
        Ok(FeatureSequence { frames, backbone, record_id: record_id.into() })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }

    pub fn into_frames(self) -> Array2<f32> {
        self.frames
    }
}

/// Number of frames the conv feature encoder emits for `samples` inputs
/// (25 ms receptive field, 20 ms stride). `None` when shorter than one window.
pub fn frame_count(samples: usize) -> Option<usize> {
    CONV_KERNELS.iter().zip(CONV_STRIDES).try_fold(samples, |len, (&k, s)| (len >= k).then(|| (len - k) / s + 1))
}

/// A frozen feature extractor. Implementations must be deterministic.
pub trait Backbone {
    fn id(&self) -> &BackboneId;

    fn width(&self) -> usize;

    fn extract(&self, waveform: &Waveform, record_id: &str) -> Result<FeatureSequence, BackboneError>;

    /// Whether `extract` may be called from several threads at once.
    fn reentrant(&self) -> bool {
        false
    }
}

/// Resolves a backbone id into a ready extractor.
pub trait BackboneLoader {
    fn load(&self, id: &BackboneId, layer: LayerSelect) -> Result<Box<dyn Backbone + Send + Sync>, BackboneError>;
}

/// Produces [`StubBackbone`]s; never touches the network or disk.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubLoader;

impl BackboneLoader for StubLoader {
    fn load(&self, id: &BackboneId, _layer: LayerSelect) -> Result<Box<dyn Backbone + Send + Sync>, BackboneError> {
        Ok(Box::new(StubBackbone::new(id.clone())))
    }
}

/// Loads published checkpoints from a local directory tree laid out as
/// `<root>/<checkpoint_ref>/{config.json, model.safetensors | pytorch_model.bin}`.
#[derive(Debug, Clone)]
pub struct CheckpointLoader {
    pub root: PathBuf,
}

impl CheckpointLoader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointLoader { root: root.into() }
    }

    /// `$BAVED_SER_CHECKPOINTS`, else `~/.cache/baved-ser/checkpoints`.
    pub fn from_env() -> Self {
        let root = std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| {
            let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
            home.join(".cache").join("baved-ser").join("checkpoints")
        });
        CheckpointLoader { root }
    }

    pub fn checkpoint_dir(&self, checkpoint_ref: &str) -> PathBuf {
        let direct = PathBuf::from(checkpoint_ref);
        if direct.is_absolute() && direct.is_dir() {
            return direct;
        }
        checkpoint_ref.split('/').fold(self.root.clone(), |p, part| p.join(part))
    }
}

impl BackboneLoader for CheckpointLoader {
    fn load(&self, id: &BackboneId, layer: LayerSelect) -> Result<Box<dyn Backbone + Send + Sync>, BackboneError> {
        let dir = self.checkpoint_dir(&id.checkpoint_ref);
        let backbone = SslBackbone::from_dir(&dir, id.clone(), layer)?;
        if backbone.width() != id.width() {
            return Err(BackboneError::CheckpointUnavailable {
                checkpoint_ref: id.checkpoint_ref.clone(),
                reason: format!("hidden size {} does not match {} width {}", backbone.width(), id.name, id.width()),
            });
        }
        Ok(Box::new(backbone))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_names() {
        assert_eq!(BackboneName::Wav2vec2Arabic.width(), 1024);
        assert_eq!(BackboneName::HubertBase.width(), 768);
        assert_eq!(BackboneName::HubertLarge.width(), 1024);
        for name in BackboneName::ALL {
            assert_eq!(name.as_str().parse::<BackboneName>().unwrap(), name);
        }
        assert!("hubert".parse::<BackboneName>().is_err());
    }

    #[test]
    fn frame_arithmetic() {
        assert_eq!(frame_count(399), None);
        assert_eq!(frame_count(400), Some(1));
        assert_eq!(frame_count(16_000), Some(49));
        assert_eq!(frame_count(8_000), Some(24));
        let mut prev = 0;
        for n in (400..20_000).step_by(37) {
            let t = frame_count(n).unwrap();
            assert!(t >= prev);
            assert!((t as f64 - (n as f64 / 16_000.0) * 49.95).abs() <= 2.0);
            prev = t;
        }
    }

    #[test]
    fn feature_sequence_invariants() {
        let id = BackboneId::new(BackboneName::HubertBase);
        assert!(FeatureSequence::new(Array2::zeros((0, 768)), id.clone(), "r", 768).is_err());
        assert!(FeatureSequence::new(Array2::zeros((2, 4)), id.clone(), "r", 768).is_err());
        let mut bad = Array2::zeros((2, 768));
        bad[[1, 5]] = f32::NAN;
        assert!(matches!(FeatureSequence::new(bad, id.clone(), "r", 768), Err(BackboneError::BackboneFailure(_))));
        assert!(FeatureSequence::new(Array2::zeros((2, 768)), id, "r", 768).is_ok());
    }

    #[test]
    fn layer_select_serde() {
        #[derive(Deserialize)]
        struct W {
            layer: LayerSelect,
        }
        assert_eq!(toml::from_str::<W>("layer = \"last\"").unwrap().layer, LayerSelect::Last);
        assert_eq!(toml::from_str::<W>("layer = 6").unwrap().layer, LayerSelect::Index(6));
        assert!(toml::from_str::<W>("layer = \"first\"").is_err());
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let loader = CheckpointLoader::new(dir.path());
        let err = loader.load(&BackboneId::new(BackboneName::HubertBase), LayerSelect::Last).err().unwrap();
        assert!(matches!(err, BackboneError::CheckpointUnavailable { .. }));
    }
}
