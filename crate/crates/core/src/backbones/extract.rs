use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use thiserror::Error;

use super::{Backbone, BackboneError, FeatureCache, FeatureSequence};
use crate::dataset::{load_audio, DatasetError, RecordMeta};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("{record_id}: {source}")]
    Data { record_id: String, source: DatasetError },
    #[error("{record_id}: {source}")]
    Backbone { record_id: String, source: BackboneError },
}

/// Frame embeddings keyed by record id.
pub type FeatureTable = BTreeMap<String, FeatureSequence>;

/// Counts of cache traffic during one [`extract_all`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractStats {
    pub hits: usize,
    pub misses: usize,
    pub recomputed_corrupt: usize,
}

/// Cache-get-or-extract for one record. Corrupt entries are deleted and
/// recomputed.
pub fn features_for(
    backbone: &dyn Backbone,
    record: &RecordMeta,
    root: &Path,
    cache: Option<&FeatureCache>,
    stats: &mut ExtractStats,
) -> Result<FeatureSequence, ExtractError> {
    let id = &record.record_id;
    let wrap = |source| ExtractError::Backbone { record_id: id.clone(), source };
    if let Some(cache) = cache {
        match cache.get(id, backbone.id()) {
            Ok(Some(f)) => {
                stats.hits += 1;
                return Ok(f);
            }
            Ok(None) => stats.misses += 1,
            Err(BackboneError::CorruptCacheEntry { path, reason }) => {
                log::warn!("discarding corrupt cache entry {}: {reason}", path.display());
                cache.remove(id, backbone.id()).map_err(wrap)?;
                stats.recomputed_corrupt += 1;
            }
            Err(e) => return Err(wrap(e)),
        }
    }
    let waveform = load_audio(record, root).map_err(|source| ExtractError::Data { record_id: id.clone(), source })?;
    let features = backbone.extract(&waveform, id).map_err(wrap)?;
    if let Some(cache) = cache {
        cache.put(&features).map_err(wrap)?;
    }
    Ok(features)
}

/// Features for every record, in parallel over `workers` threads when the
/// backbone is reentrant.
pub fn extract_all(
    backbone: &(dyn Backbone + Sync),
    records: &[&RecordMeta],
    root: &Path,
    cache: Option<&FeatureCache>,
    workers: usize,
) -> Result<(FeatureTable, ExtractStats), ExtractError> {
    let workers = if backbone.reentrant() { workers.max(1).min(records.len().max(1)) } else { 1 };
    let mut table = FeatureTable::new();
    let mut stats = ExtractStats::default();
    if workers == 1 {
        for record in records {
            let f = features_for(backbone, record, root, cache, &mut stats)?;
            table.insert(record.record_id.clone(), f);
        }
        return Ok((table, stats));
    }
    let shared = Mutex::new((table, stats));
    let chunk = records.len().div_ceil(workers);
    std::thread::scope(|scope| -> Result<(), ExtractError> {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                let shared = &shared;
                scope.spawn(move || -> Result<(), ExtractError> {
                    let mut local = ExtractStats::default();
                    let mut out = Vec::with_capacity(part.len());
                    for record in part {
                        out.push(features_for(backbone, record, root, cache, &mut local)?);
                    }
                    let mut guard = shared.lock().expect("extraction lock");
                    for f in out {
                        guard.0.insert(f.record_id.clone(), f);
                    }
                    guard.1.hits += local.hits;
                    guard.1.misses += local.misses;
                    guard.1.recomputed_corrupt += local.recomputed_corrupt;
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("extraction worker panicked")?;
        }
        Ok(())
    })?;
    Ok(shared.into_inner().expect("extraction lock"))
}
