use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, EmotionLevel};

/// Train/validation partition of record ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub seed: u64,
    pub ratios: (f64, f64),
    pub speaker_disjoint: bool,
}

impl SplitAssignment {
    pub fn train(&self) -> Vec<&str> {
        self.train_ids.iter().map(String::as_str).collect()
    }

    pub fn val(&self) -> Vec<&str> {
        self.val_ids.iter().map(String::as_str).collect()
    }
}

fn check_ratios((train, val): (f64, f64)) -> Result<(), DatasetError> {
    if !(train.is_finite() && val.is_finite()) || train <= 0.0 || val < 0.0 {
        return Err(DatasetError::InvalidRatios(format!(
            "({train}, {val}): train fraction must be positive and validation fraction non-negative"
        )));
    }
    if ((train + val) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(format!("({train}, {val}) does not sum to 1")));
    }
    Ok(())
}

/// Per emotion level: sort ids, shuffle with a seeded generator, then put
/// the first `round(val_fraction * n)` on the validation side.
pub fn stratified_split(dataset: &Dataset, ratios: (f64, f64), seed: u64) -> Result<SplitAssignment, DatasetError> {
    check_ratios(ratios)?;
    let mut by_level: BTreeMap<EmotionLevel, Vec<&str>> = BTreeMap::new();
    for r in dataset.records() {
        by_level.entry(r.emotion_level).or_default().push(&r.record_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split =
        SplitAssignment { train_ids: BTreeSet::new(), val_ids: BTreeSet::new(), seed, ratios, speaker_disjoint: false };
    for (level, mut ids) in by_level {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_val = if ratios.1 == 0.0 {
            0
        } else {
            if n < 2 {
                return Err(DatasetError::DegenerateClass { level, count: n });
            }
            ((ratios.1 * n as f64).round() as usize).clamp(1, n - 1)
        };
        split.val_ids.extend(ids[..n_val].iter().map(|s| s.to_string()));
        split.train_ids.extend(ids[n_val..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

/// Whole speakers go to one side. Speakers are shuffled with the seed and
/// moved to validation until it holds at least `val_fraction` of records.
/// Stricter than record-level splitting; per-class balance is not enforced.
pub fn speaker_disjoint_split(
    dataset: &Dataset,
    ratios: (f64, f64),
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    check_ratios(ratios)?;
    let mut by_speaker: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for r in dataset.records() {
        by_speaker.entry(r.speaker_id).or_default().push(&r.record_id);
    }
    let mut speakers: Vec<u32> = by_speaker.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let target = (ratios.1 * dataset.len() as f64).round() as usize;
    if ratios.1 > 0.0 && speakers.len() < 2 {
        return Err(DatasetError::InvalidRatios("speaker-disjoint split needs at least two speakers".into()));
    }
    let mut split =
        SplitAssignment { train_ids: BTreeSet::new(), val_ids: BTreeSet::new(), seed, ratios, speaker_disjoint: true };
    let mut val_speakers = 0;
    for speaker in speakers.iter() {
        let ids = &by_speaker[speaker];
        let take_val = ratios.1 > 0.0 && split.val_ids.len() < target && val_speakers + 1 < speakers.len();
        let side = if take_val {
            val_speakers += 1;
            &mut split.val_ids
        } else {
            &mut split.train_ids
        };
        side.extend(ids.iter().map(|s| s.to_string()));
    }
    Ok(split)
}

pub fn write_split_csv<W: Write>(split: &SplitAssignment, out: W) -> Result<(), DatasetError> {
    let mut rows: Vec<(&str, &str)> = split
        .train_ids
        .iter()
        .map(|id| (id.as_str(), "train"))
        .chain(split.val_ids.iter().map(|id| (id.as_str(), "val")))
        .collect();
    rows.sort_unstable();
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["record_id", "split"])?;
    for (id, side) in rows {
        writer.write_record([id, side])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads back `record_id,split` rows. Seed and ratios are not stored in the
/// CSV; the caller supplies them.
pub fn read_split_csv<R: Read>(input: R, seed: u64, ratios: (f64, f64)) -> Result<SplitAssignment, DatasetError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut split =
        SplitAssignment { train_ids: BTreeSet::new(), val_ids: BTreeSet::new(), seed, ratios, speaker_disjoint: false };
    for row in reader.records() {
        let row = row?;
        let (id, side) = (row.get(0).unwrap_or_default(), row.get(1).unwrap_or_default());
        match side {
            "train" => split.train_ids.insert(id.to_string()),
            "val" => split.val_ids.insert(id.to_string()),
            other => return Err(DatasetError::Csv(format!("unknown split {other:?} for {id}"))),
        };
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Gender, RecordMeta};
    use proptest::prelude::*;

    fn corpus(per_class: [usize; 3], speakers: u32) -> Dataset {
        let mut records = Vec::new();
        for (level, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                let speaker = (k as u32) % speakers;
                records.push(RecordMeta {
                    record_id: format!("{level}/{}-{speaker}-0-30-{level}-{k}.wav", k % 7),
                    word: (k % 7) as u8,
                    speaker_id: speaker,
                    gender: Gender::Male,
                    age: 30,
                    emotion_level: EmotionLevel::new(level as u8).unwrap(),
                });
            }
        }
        Dataset::new("/corpus", records).unwrap()
    }

    #[test]
    fn degenerate_ratio_keeps_everything_in_train() {
        let ds = corpus([3, 4, 5], 3);
        let s = stratified_split(&ds, (1.0, 0.0), 9).unwrap();
        assert!(s.val_ids.is_empty());
        assert_eq!(s.train_ids.len(), ds.len());
    }

    #[test]
    fn rejects_bad_ratios_and_tiny_classes() {
        let ds = corpus([3, 4, 5], 3);
        assert!(matches!(stratified_split(&ds, (0.7, 0.2), 1), Err(DatasetError::InvalidRatios(_))));
        assert!(matches!(stratified_split(&ds, (0.0, 1.0), 1), Err(DatasetError::InvalidRatios(_))));
        let tiny = corpus([1, 4, 5], 3);
        assert!(matches!(
            stratified_split(&tiny, (0.8, 0.2), 1),
            Err(DatasetError::DegenerateClass { level: EmotionLevel::LOW, count: 1 })
        ));
    }

    #[test]
    fn small_classes_still_land_on_both_sides() {
        let ds = corpus([2, 2, 2], 2);
        let s = stratified_split(&ds, (0.8, 0.2), 5).unwrap();
        assert_eq!(s.val_ids.len(), 3);
        assert_eq!(s.train_ids.len(), 3);
    }

    #[test]
    fn csv_round_trip_is_sorted() {
        let ds = corpus([5, 6, 7], 3);
        let s = stratified_split(&ds, (0.8, 0.2), 42).unwrap();
        let mut buf = Vec::new();
        write_split_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
        let back = read_split_csv(&buf[..], 42, (0.8, 0.2)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn speaker_disjoint_has_no_shared_speakers() {
        let ds = corpus([20, 20, 20], 10);
        let s = speaker_disjoint_split(&ds, (0.8, 0.2), 3).unwrap();
        let speakers_of =
            |ids: &BTreeSet<String>| -> BTreeSet<u32> { ids.iter().map(|id| ds.get(id).unwrap().speaker_id).collect() };
        assert!(speakers_of(&s.train_ids).is_disjoint(&speakers_of(&s.val_ids)));
        assert_eq!(s.train_ids.len() + s.val_ids.len(), ds.len());
        assert!(!s.val_ids.is_empty());
    }

    proptest! {
        #[test]
        fn partition_stratification_determinism(
            a in 2usize..40, b in 2usize..40, c in 2usize..40,
            val_pct in 1u32..99, seed in any::<u64>()
        ) {
            let ds = corpus([a, b, c], 5);
            let val = val_pct as f64 / 100.0;
            let ratios = (1.0 - val, val);
            let s = stratified_split(&ds, ratios, seed).unwrap();
            prop_assert!(s.train_ids.is_disjoint(&s.val_ids));
            prop_assert_eq!(s.train_ids.len() + s.val_ids.len(), ds.len());
            for (level, &n) in [a, b, c].iter().enumerate() {
                let in_val = s.val_ids.iter().filter(|id| ds.get(id).unwrap().emotion_level.index() == level).count();
                prop_assert!((in_val as f64 - val * n as f64).abs() <= 1.0);
            }
            prop_assert_eq!(&s, &stratified_split(&ds, ratios, seed).unwrap());
        }
    }
}
