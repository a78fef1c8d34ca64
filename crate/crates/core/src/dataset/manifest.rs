use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{wav_duration, Dataset, DatasetError, EmotionLevel, Gender};

/// One row of the corpus manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub record_id: String,
    pub word: u8,
    pub speaker_id: u32,
    pub gender: Gender,
    pub age: u32,
    pub emotion_level: EmotionLevel,
    pub duration_s: f64,
}

/// Writes `record_id,word,speaker_id,gender,age,emotion_level,duration_s`,
/// sorted by record id. Durations come from the wav headers.
pub fn write_manifest<W: Write>(dataset: &Dataset, out: W) -> Result<Vec<ManifestRow>, DatasetError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut rows = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        let row = ManifestRow {
            record_id: r.record_id.clone(),
            word: r.word,
            speaker_id: r.speaker_id,
            gender: r.gender,
            age: r.age,
            emotion_level: r.emotion_level,
            duration_s: wav_duration(&r.path(dataset.root()))?,
        };
        writer.serialize(&row)?;
        rows.push(row);
    }
    writer.flush()?;
    Ok(rows)
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ManifestRow>, DatasetError> {
    let mut reader = csv::Reader::from_reader(input);
    Ok(reader.deserialize().collect::<Result<_, _>>()?)
}
