//! BAVED corpus discovery, metadata parsing, audio loading and splitting.
//!
//! Every recording is one of seven words spoken at one of three emotion
//! levels. The label lives in the file name and, in the public layout, in
//! the level directory (`0/`, `1/`, `2/`) the file sits in.

mod audio;
mod manifest;
mod naming;
mod split;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audio::{load_audio, load_wav, wav_duration, Waveform, MIN_SAMPLES, TARGET_SAMPLE_RATE};
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use naming::{parse_record_name, NameField, NameSchema};
pub use split::{read_split_csv, speaker_disjoint_split, stratified_split, write_split_csv, SplitAssignment};

pub const NUM_WORDS: u8 = 7;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed record name {name:?}: {reason}")]
    MalformedName { name: String, reason: String },
    #[error("no parseable .wav recordings under {0}")]
    EmptyCorpus(PathBuf),
    #[error("{record_id}: file name says emotion level {from_name} but it sits in level directory {from_dir}")]
    InconsistentLabel { record_id: String, from_name: u8, from_dir: u8 },
    #[error("duplicate record id {0}")]
    DuplicateRecord(String),
    #[error("emotion level {0} has no recordings")]
    MissingClass(EmotionLevel),
    #[error("emotion level {level} has {count} record(s), too few to appear on both sides of the split")]
    DegenerateClass { level: EmotionLevel, count: usize },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("cannot decode {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("{path} is too short: {samples} samples at 16 kHz, need at least {MIN_SAMPLES}")]
    TooShort { path: PathBuf, samples: usize },
    #[error("unknown record id {0}")]
    UnknownRecord(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DatasetError {
    fn from(err: csv::Error) -> Self {
        DatasetError::Csv(err.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The 3-class target: 0 low (tired), 1 neutral, 2 high (strong emotion).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct EmotionLevel(u8);

impl EmotionLevel {
    pub const LOW: EmotionLevel = EmotionLevel(0);
    pub const NEUTRAL: EmotionLevel = EmotionLevel(1);
    pub const HIGH: EmotionLevel = EmotionLevel(2);
    pub const ALL: [EmotionLevel; 3] = [Self::LOW, Self::NEUTRAL, Self::HIGH];

    pub fn new(level: u8) -> Option<Self> {
        (level < 3).then_some(EmotionLevel(level))
    }

    pub fn from_index(index: usize) -> Option<Self> {
        u8::try_from(index).ok().and_then(Self::new)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn label(self) -> String {
        match self.0 {
            0 => "low",
            1 => "neutral",
            _ => "high",
        }
        .to_string()
    }
}

impl TryFrom<u8> for EmotionLevel {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        EmotionLevel::new(value).ok_or_else(|| format!("emotion level {value} outside 0..=2"))
    }
}

impl From<EmotionLevel> for u8 {
    fn from(level: EmotionLevel) -> u8 {
        level.0
    }
}

impl fmt::Display for EmotionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parsed identity of one recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    /// Path relative to the corpus root, `/`-separated.
    pub record_id: String,
    pub word: u8,
    pub speaker_id: u32,
    pub gender: Gender,
    pub age: u32,
    pub emotion_level: EmotionLevel,
}

impl RecordMeta {
    pub fn file_name(&self) -> &str {
        self.record_id.rsplit('/').next().unwrap_or(&self.record_id)
    }

    pub fn path(&self, root: &Path) -> PathBuf {
        self.record_id.split('/').fold(root.to_path_buf(), |p, part| p.join(part))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<RecordMeta>,
}

impl Dataset {
    /// Sorts by record id and checks the corpus invariants.
    pub fn new(root: impl Into<PathBuf>, mut records: Vec<RecordMeta>) -> Result<Self, DatasetError> {
        let root = root.into();
        if records.is_empty() {
            return Err(DatasetError::EmptyCorpus(root));
        }
        records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        if let Some(w) = records.windows(2).find(|w| w[0].record_id == w[1].record_id) {
            return Err(DatasetError::DuplicateRecord(w[0].record_id.clone()));
        }
        let dataset = Dataset { root, records };
        let counts = dataset.class_counts();
        if let Some(level) = EmotionLevel::ALL.into_iter().find(|l| counts[l.index()] == 0) {
            return Err(DatasetError::MissingClass(level));
        }
        Ok(dataset)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[RecordMeta] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: &str) -> Option<&RecordMeta> {
        self.records.binary_search_by(|r| r.record_id.as_str().cmp(record_id)).ok().map(|i| &self.records[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.record_id.as_str())
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for r in &self.records {
            counts[r.emotion_level.index()] += 1;
        }
        counts
    }

    /// Restricts to the given ids, keeping canonical order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Dataset, DatasetError> {
        let mut records = Vec::new();
        for id in ids {
            records.push(self.get(id).cloned().ok_or_else(|| DatasetError::UnknownRecord(id.to_string()))?);
        }
        Dataset::new(self.root.clone(), records)
    }

    pub fn summary(&self) -> CorpusSummary {
        let mut speakers_by_gender: BTreeMap<Gender, BTreeSet<u32>> = BTreeMap::new();
        let mut records_by_gender: BTreeMap<Gender, usize> = BTreeMap::new();
        let mut speakers = BTreeSet::new();
        for r in &self.records {
            speakers.insert(r.speaker_id);
            speakers_by_gender.entry(r.gender).or_default().insert(r.speaker_id);
            *records_by_gender.entry(r.gender).or_default() += 1;
        }
        CorpusSummary {
            records: self.records.len(),
            class_counts: self.class_counts(),
            speakers: speakers.len(),
            speakers_by_gender: speakers_by_gender.into_iter().map(|(g, s)| (g, s.len())).collect(),
            records_by_gender,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub records: usize,
    pub class_counts: [usize; 3],
    pub speakers: usize,
    pub speakers_by_gender: BTreeMap<Gender, usize>,
    pub records_by_gender: BTreeMap<Gender, usize>,
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.records)?;
        for level in EmotionLevel::ALL {
            writeln!(f, "  level {} ({}): {}", level, level.label(), self.class_counts[level.index()])?;
        }
        writeln!(f, "speakers: {}", self.speakers)?;
        for (gender, n) in &self.speakers_by_gender {
            let recs = self.records_by_gender.get(gender).copied().unwrap_or(0);
            writeln!(f, "  {gender}: {n} speakers, {recs} records")?;
        }
        Ok(())
    }
}

pub fn scan_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    scan_dataset_with(root, &NameSchema::default())
}

/// Walks `root` for `.wav` files. Unparseable names are skipped with a
/// warning; a level-directory disagreement is a hard error.
pub fn scan_dataset_with(root: &Path, schema: &NameSchema) -> Result<Dataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("corpus root {} is not a directory", root.display()),
        )));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| DatasetError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir yields paths under root");
        let record_id =
            rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/");
        let name = entry.file_name().to_string_lossy();
        if !name.to_ascii_lowercase().ends_with(".wav") {
            continue;
        }
        let mut meta = match schema.parse(&name) {
            Ok(meta) => meta,
            Err(err) => {
                log::warn!("skipping {record_id}: {err}");
                continue;
            }
        };
        if schema.check_level_dir {
            let parent = record_id.rsplit('/').nth(1);
            if let Some(from_dir) = parent.and_then(|p| p.parse::<u8>().ok()).filter(|&d| d < 3) {
                if from_dir != meta.emotion_level.value() {
                    return Err(DatasetError::InconsistentLabel {
                        record_id,
                        from_name: meta.emotion_level.value(),
                        from_dir,
                    });
                }
            }
        }
        if !seen.insert(record_id.clone()) {
            return Err(DatasetError::DuplicateRecord(record_id));
        }
        meta.record_id = record_id;
        records.push(meta);
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyCorpus(root.to_path_buf()));
    }
    let dataset = Dataset::new(root, records)?;
    let summary = dataset.summary();
    log::info!(
        "scanned {}: {} records, levels {:?}, {} speakers, speakers by gender {:?}",
        root.display(),
        summary.records,
        summary.class_counts,
        summary.speakers,
        summary.speakers_by_gender
    );
    Ok(dataset)
}
