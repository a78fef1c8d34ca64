//! One file per (record, backbone) at `<root>/<backbone_name>/<record_id>.feat`.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `BVFT`               |
//! | 4      | 2    | format version (1)         |
//! | 6      | 2    | element type (0 = f32)     |
//! | 8      | 8    | T (frames)                 |
//! | 16     | 8    | D (width)                  |
//! | 24     | 4·T·D| row-major f32 payload      |
//!
//! Writes go to a temporary file in the target directory and are renamed
//! into place, so readers never observe a partial entry.

use std::io::Write;
use std::path::{Component, Path, PathBuf};

use ndarray::Array2;

use super::{BackboneError, BackboneId, FeatureSequence};

pub const CACHE_MAGIC: [u8; 4] = *b"BVFT";
pub const CACHE_VERSION: u16 = 1;
pub const CACHE_HEADER_LEN: usize = 24;
const ELEM_F32: u16 = 0;

#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, record_id: &str, backbone: &BackboneId) -> Result<PathBuf, BackboneError> {
        let rel = Path::new(record_id);
        if record_id.is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(BackboneError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("record id {record_id:?} is not a relative path"),
            )));
        }
        let mut path = self.root.join(backbone.name.as_str()).join(rel);
        let mut file_name = path.file_name().expect("normal component").to_os_string();
        file_name.push(".feat");
        path.set_file_name(file_name);
        Ok(path)
    }

    pub fn put(&self, features: &FeatureSequence) -> Result<(), BackboneError> {
        let path = self.entry_path(&features.record_id, &features.backbone)?;
        let dir = path.parent().expect("entry has a parent directory");
        std::fs::create_dir_all(dir)?;
        let (t, d) = features.frames().dim();
        let mut bytes = Vec::with_capacity(CACHE_HEADER_LEN + 4 * t * d);
        bytes.extend_from_slice(&CACHE_MAGIC);
        bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&ELEM_F32.to_le_bytes());
        bytes.extend_from_slice(&(t as u64).to_le_bytes());
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
        for v in features.frames().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| BackboneError::Io(e.error))?;
        Ok(())
    }

    /// `Ok(None)` on a miss. A present but unreadable entry is
    /// [`BackboneError::CorruptCacheEntry`]; delete and recompute it.
    pub fn get(&self, record_id: &str, backbone: &BackboneId) -> Result<Option<FeatureSequence>, BackboneError> {
        let path = self.entry_path(record_id, backbone)?;
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: String| BackboneError::CorruptCacheEntry { path: path.clone(), reason };
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != CACHE_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (version, elem) = (u16_at(4), u16_at(6));
        if version != CACHE_VERSION || elem != ELEM_F32 {
            return Err(corrupt(format!("unsupported version {version} / element type {elem}")));
        }
        let (t, d) = (u64_at(8) as usize, u64_at(16) as usize);
        let expected = t.checked_mul(d).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(CACHE_HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(corrupt(format!("header says {t}x{d} but file holds {} bytes", bytes.len())));
        }
        if d != backbone.width() {
            return Err(corrupt(format!("width {d} does not match {} ({})", backbone.name, backbone.width())));
        }
        let data: Vec<f32> =
            bytes[CACHE_HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let frames = Array2::from_shape_vec((t, d), data).map_err(|e| corrupt(e.to_string()))?;
        FeatureSequence::new(frames, backbone.clone(), record_id, d).map(Some).map_err(|e| corrupt(e.to_string()))
    }

    pub fn remove(&self, record_id: &str, backbone: &BackboneId) -> Result<(), BackboneError> {
        match std::fs::remove_file(self.entry_path(record_id, backbone)?) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::BackboneName;
    use rand::{Rng, SeedableRng};

    fn features(id: &BackboneId, record: &str, t: usize) -> FeatureSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(t as u64);
        let frames = Array2::from_shape_fn((t, id.width()), |_| rng.random::<f32>() * 2.0 - 1.0);
        FeatureSequence::new(frames, id.clone(), record, id.width()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let id = BackboneId::new(BackboneName::HubertBase);
        let f = features(&id, "2/0-1-1-25-2-0.wav", 7);
        cache.put(&f).unwrap();
        let back = cache.get(&f.record_id, &id).unwrap().unwrap();
        assert_eq!(back, f);
        assert!(back.frames().iter().zip(f.frames()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let path = cache.entry_path(&f.record_id, &id).unwrap();
        assert_eq!(path, dir.path().join("hubert_base/2/0-1-1-25-2-0.wav.feat"));
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, CACHE_HEADER_LEN + 4 * 7 * 768);
    }

    #[test]
    fn miss_on_empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        assert!(cache.get("a.wav", &BackboneId::new(BackboneName::HubertLarge)).unwrap().is_none());
    }

    #[test]
    fn damaged_entries_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let id = BackboneId::new(BackboneName::HubertBase);
        let f = features(&id, "a.wav", 3);
        cache.put(&f).unwrap();
        let path = cache.entry_path("a.wav", &id).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        for (label, damaged) in [
            ("truncated payload", bytes[..bytes.len() - 5].to_vec()),
            ("truncated header", bytes[..10].to_vec()),
            ("bad magic", [b"XXXX".as_slice(), &bytes[4..]].concat()),
            ("nan payload", {
                let mut b = bytes.clone();
                b[CACHE_HEADER_LEN..CACHE_HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
                b
            }),
        ] {
            std::fs::write(&path, &damaged).unwrap();
            assert!(matches!(cache.get("a.wav", &id), Err(BackboneError::CorruptCacheEntry { .. })), "{label}");
        }
        cache.remove("a.wav", &id).unwrap();
        assert!(cache.get("a.wav", &id).unwrap().is_none());
    }

    #[test]
    fn rejects_escaping_record_ids() {
        let cache = FeatureCache::new("/tmp/x");
        let id = BackboneId::new(BackboneName::HubertBase);
        assert!(cache.entry_path("../evil.wav", &id).is_err());
        assert!(cache.entry_path("/abs.wav", &id).is_err());
    }
}
