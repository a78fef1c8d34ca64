use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetError, EmotionLevel, Gender, RecordMeta, NUM_WORDS};

/// Meaning of one dash-separated token in a recording's file name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameField {
    Word,
    SpeakerId,
    Gender,
    Age,
    EmotionLevel,
    /// Per-speaker take counter; validated as numeric, otherwise unused.
    Counter,
}

/// Token layout of corpus file names, e.g. `6-21-0-49-0-29.wav` is
/// word-speaker-gender-age-level-counter under the default schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NameSchema {
    pub fields: Vec<NameField>,
    pub gender_tokens: BTreeMap<String, Gender>,
    /// Cross-check the emotion token against an enclosing `0/`, `1/` or `2/` directory.
    pub check_level_dir: bool,
}

impl Default for NameSchema {
    fn default() -> Self {
        NameSchema {
            fields: vec![
                NameField::Word,
                NameField::SpeakerId,
                NameField::Gender,
                NameField::Age,
                NameField::EmotionLevel,
                NameField::Counter,
            ],
            gender_tokens: BTreeMap::from([("0".to_string(), Gender::Male), ("1".to_string(), Gender::Female)]),
            check_level_dir: true,
        }
    }
}

/// Parses a basename under the default schema. The returned `record_id` is
/// the basename itself.
pub fn parse_record_name(filename: &str) -> Result<RecordMeta, DatasetError> {
    NameSchema::default().parse(filename)
}

impl NameSchema {
    pub fn validate(&self) -> Result<(), String> {
        let required =
            [NameField::Word, NameField::SpeakerId, NameField::Gender, NameField::Age, NameField::EmotionLevel];
        for field in required {
            let n = self.fields.iter().filter(|&&f| f == field).count();
            if n != 1 {
                return Err(format!("name schema must contain {field:?} exactly once (found {n})"));
            }
        }
        if self.gender_tokens.is_empty() {
            return Err("name schema has no gender tokens".into());
        }
        Ok(())
    }

    pub fn parse(&self, filename: &str) -> Result<RecordMeta, DatasetError> {
        let malformed = |reason: String| DatasetError::MalformedName { name: filename.to_string(), reason };
        let stem = filename
            .strip_suffix(".wav")
            .or_else(|| filename.strip_suffix(".WAV"))
            .ok_or_else(|| malformed("not a .wav file".into()))?;
        if stem.contains('/') || stem.contains('\\') {
            return Err(malformed("expected a basename".into()));
        }
        let tokens: Vec<&str> = stem.split('-').collect();
        if tokens.len() != self.fields.len() {
            return Err(malformed(format!(
                "expected {} dash-separated tokens, found {}",
                self.fields.len(),
                tokens.len()
            )));
        }

        let number = |token: &str, what: &str| -> Result<u32, DatasetError> {
            if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed(format!("{what} token {token:?} is not a non-negative integer")));
            }
            token.parse::<u32>().map_err(|e| malformed(format!("{what} token {token:?}: {e}")))
        };

        let (mut word, mut speaker_id, mut gender, mut age, mut level) = (None, None, None, None, None);
        for (&field, &token) in self.fields.iter().zip(&tokens) {
            match field {
                NameField::Word => {
                    let w = number(token, "word")?;
                    if w >= u32::from(NUM_WORDS) {
                        return Err(malformed(format!("word {w} outside 0..{NUM_WORDS}")));
                    }
                    word = Some(w as u8);
                }
                NameField::SpeakerId => speaker_id = Some(number(token, "speaker")?),
                NameField::Gender => {
                    let g = self
                        .gender_tokens
                        .get(token)
                        .copied()
                        .ok_or_else(|| malformed(format!("unknown gender token {token:?}")))?;
                    gender = Some(g);
                }
                NameField::Age => age = Some(number(token, "age")?),
                NameField::EmotionLevel => {
                    let l = number(token, "emotion level")?;
                    let l = u8::try_from(l)
                        .ok()
                        .and_then(EmotionLevel::new)
                        .ok_or_else(|| malformed(format!("emotion level {l} outside 0..=2")))?;
                    level = Some(l);
                }
                NameField::Counter => {
                    number(token, "counter")?;
                }
            }
        }
        let missing = |what: &str| malformed(format!("schema has no {what} field"));
        Ok(RecordMeta {
            record_id: filename.to_string(),
            word: word.ok_or_else(|| missing("word"))?,
            speaker_id: speaker_id.ok_or_else(|| missing("speaker"))?,
            gender: gender.ok_or_else(|| missing("gender"))?,
            age: age.ok_or_else(|| missing("age"))?,
            emotion_level: level.ok_or_else(|| missing("emotion level"))?,
        })
    }
}
