//! Speech emotion-level recognition on the BAVED corpus.
//!
//! Frozen self-supervised speech backbones turn each recording into frame
//! embeddings; a small MLP or Bi-LSTM head is trained on top to predict one
//! of three emotion levels. The crate covers corpus ingestion, feature
//! extraction and caching, head training, evaluation and reporting.

pub mod backbones;
pub mod dataset;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod trainer;
