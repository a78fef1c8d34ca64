//! C ABI over the baved-ser toolkit.
//!
//! Handles are opaque and owned by the caller; every `*_new`, `*_open`,
//! `*_load` or `*_scan` has a matching `*_free`. Fallible functions return
//! [`BsStatus`] and leave a message in [`bs_last_error_message`].

use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;

use baved_ser::backbones::{BackboneId, BackboneName, FeatureCache, FeatureSequence};
use baved_ser::dataset::{parse_record_name, scan_dataset, Dataset, Gender, RecordMeta};
use baved_ser::heads::pool_mean;
use baved_ser::metrics::{evaluate_labels, f1_from_pr, MetricsReport, NUM_CLASSES};
use baved_ser::trainer::{Classifier, TrainedModel};
use ndarray::Array2;

mod error;

pub use error::{bs_last_error_message, bs_status_name, BsStatus};
use error::{c_str, guard, Failure};

pub const BS_NUM_CLASSES: usize = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsGender {
    Male = 0,
    Female = 1,
}

/// Identity fields parsed from a recording name.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BsRecord {
    pub word: u8,
    pub speaker_id: u32,
    pub gender: BsGender,
    pub age: u32,
    /// 0 low, 1 neutral, 2 high.
    pub emotion_level: u8,
}

impl From<&RecordMeta> for BsRecord {
    fn from(r: &RecordMeta) -> Self {
        BsRecord {
            word: r.word,
            speaker_id: r.speaker_id,
            gender: match r.gender {
                Gender::Male => BsGender::Male,
                Gender::Female => BsGender::Female,
            },
            age: r.age,
            emotion_level: r.emotion_level.value(),
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsClassMetrics {
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Precision or recall had a zero denominator and was defined as 0.
    pub undefined: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsMetricsReport {
    /// Row-major counts; rows are true levels, columns predictions.
    pub confusion: [u64; 9],
    pub per_class: [BsClassMetrics; 3],
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

impl From<&MetricsReport> for BsMetricsReport {
    fn from(r: &MetricsReport) -> Self {
        let mut confusion = [0; 9];
        for (i, row) in r.confusion.counts.iter().enumerate() {
            confusion[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].copy_from_slice(row);
        }
        BsMetricsReport {
            confusion,
            per_class: r.per_class.map(|c| BsClassMetrics {
                support: c.support,
                predicted: c.predicted,
                precision: c.precision,
                recall: c.recall,
                f1: c.f1,
                undefined: c.undefined,
            }),
            macro_f1: r.macro_f1,
            weighted_f1: r.weighted_f1,
            accuracy: r.accuracy,
            total: r.total,
        }
    }
}

/// A scanned corpus.
pub struct BsDataset {
    inner: Dataset,
    ids: Vec<CString>,
}

/// A `[frames x width]` feature matrix tagged with its backbone and record id.
pub struct BsFeatures {
    inner: FeatureSequence,
}

impl BsFeatures {
    fn wrap(f: FeatureSequence) -> Result<Self, Failure> {
        if f.frames().is_standard_layout() {
            return Ok(BsFeatures { inner: f });
        }
        let frames = f.frames().as_standard_layout().into_owned();
        let width = f.width();
        Ok(BsFeatures { inner: FeatureSequence::new(frames, f.backbone.clone(), f.record_id.clone(), width)? })
    }
}

/// An on-disk feature cache.
pub struct BsCache {
    inner: FeatureCache,
}

/// A trained classification head loaded from its artifact.
pub struct BsHead {
    inner: TrainedModel,
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    unsafe { out.write(value) };
    Ok(())
}

fn backbone_name(s: &str) -> Result<BackboneName, Failure> {
    s.parse().map_err(Failure::invalid)
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn free<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a recording file name such as `3-7-1-22-1-4.wav` into `out`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_parse_record_name(name: *const c_char, out: *mut BsRecord) -> BsStatus {
    guard(|| {
        let name = c_str(name, "name")?;
        let meta = parse_record_name(name)?;
        write_out(out, BsRecord::from(&meta), "out")
    })
}

/// Harmonic mean of precision and recall; 0 when both are 0.
#[no_mangle]
pub extern "C" fn bs_f1_from_pr(precision: f64, recall: f64) -> f64 {
    f1_from_pr(precision, recall)
}

/// Scores `n` predicted labels against `n` true labels (each in 0..3).
///
/// # Safety
/// `truth` and `predicted` must point to `n` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_metrics_report(
    truth: *const u8,
    predicted: *const u8,
    n: usize,
    out: *mut BsMetricsReport,
) -> BsStatus {
    guard(|| {
        if truth.is_null() || predicted.is_null() {
            return Err(Failure::null("labels"));
        }
        let t: Vec<usize> = std::slice::from_raw_parts(truth, n).iter().map(|&v| v as usize).collect();
        let p: Vec<usize> = std::slice::from_raw_parts(predicted, n).iter().map(|&v| v as usize).collect();
        let report = evaluate_labels(&t, &p)?;
        write_out(out, BsMetricsReport::from(&report), "out")
    })
}

/// Indexes every recording under `root`.
///
/// # Safety
/// `root` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_dataset_scan(root: *const c_char, out: *mut *mut BsDataset) -> BsStatus {
    guard(|| {
        let root = c_str(root, "root")?;
        let inner = scan_dataset(Path::new(root))?;
        let ids = inner
            .records()
            .iter()
            .map(|r| CString::new(r.record_id.as_str()).map_err(|_| Failure::invalid("record id contains NUL")))
            .collect::<Result<_, _>>()?;
        write_out(out, Box::into_raw(Box::new(BsDataset { inner, ids })), "out")
    })
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_dataset_len(dataset: *const BsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Per-class record counts, indexed by emotion level.
///
/// # Safety
/// `dataset` must be a live handle; `counts` must have room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn bs_dataset_class_counts(dataset: *const BsDataset, counts: *mut u64) -> BsStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        if counts.is_null() {
            return Err(Failure::null("counts"));
        }
        for (i, c) in d.inner.class_counts().into_iter().enumerate() {
            counts.add(i).write(c as u64);
        }
        Ok(())
    })
}

/// Record `index` in record-id order.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_dataset_record(dataset: *const BsDataset, index: usize, out: *mut BsRecord) -> BsStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let r = d.inner.records().get(index).ok_or_else(|| Failure::invalid(format!("index {index} out of range")))?;
        write_out(out, BsRecord::from(r), "out")
    })
}

/// Record id (path relative to the corpus root) of record `index`, or null
/// when out of range. Owned by the dataset handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_dataset_record_id(dataset: *const BsDataset, index: usize) -> *const c_char {
    dataset.as_ref().and_then(|d| d.ids.get(index)).map_or(ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `dataset` must be null or a handle from `bs_dataset_scan`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_dataset_free(dataset: *mut BsDataset) {
    free(dataset)
}

/// Copies a row-major `frames x width` matrix into a feature handle. `width`
/// must match the backbone's hidden size.
///
/// # Safety
/// String arguments must be NUL-terminated; `data` must hold `frames * width`
/// floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_features_new(
    backbone: *const c_char,
    record_id: *const c_char,
    data: *const f32,
    frames: usize,
    width: usize,
    out: *mut *mut BsFeatures,
) -> BsStatus {
    guard(|| {
        let id = BackboneId::new(backbone_name(c_str(backbone, "backbone")?)?);
        let record_id = c_str(record_id, "record_id")?;
        if data.is_null() {
            return Err(Failure::null("data"));
        }
        let len = frames.checked_mul(width).ok_or_else(|| Failure::invalid("frames * width overflows"))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let matrix = Array2::from_shape_vec((frames, width), values).map_err(|e| Failure::invalid(e.to_string()))?;
        let expected = id.width();
        let features = FeatureSequence::new(matrix, id, record_id, expected)?;
        write_out(out, Box::into_raw(Box::new(BsFeatures::wrap(features)?)), "out")
    })
}

/// # Safety
/// `features` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_features_frames(features: *const BsFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.inner.num_frames())
}

/// # Safety
/// `features` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_features_width(features: *const BsFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.inner.width())
}

/// Row-major frame data, owned by the handle.
///
/// # Safety
/// `features` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_features_data(features: *const BsFeatures) -> *const f32 {
    features.as_ref().map_or(ptr::null(), |f| f.inner.frames().as_ptr())
}

/// # Safety
/// `features` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_features_free(features: *mut BsFeatures) {
    free(features)
}

/// Mean over frames, written to `out[0..len]`; `len` must equal the width.
///
/// # Safety
/// `features` must be a live handle; `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bs_pool_mean(features: *const BsFeatures, out: *mut f64, len: usize) -> BsStatus {
    guard(|| {
        let f = handle(features, "features")?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        if len != f.inner.width() {
            return Err(Failure::invalid(format!("buffer holds {len} values, width is {}", f.inner.width())));
        }
        let pooled = pool_mean(&f.inner);
        std::slice::from_raw_parts_mut(out, len).iter_mut().zip(pooled.vector.iter()).for_each(|(o, v)| *o = *v);
        Ok(())
    })
}

/// Opens (without creating) a feature cache rooted at `root`.
///
/// # Safety
/// `root` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_cache_open(root: *const c_char, out: *mut *mut BsCache) -> BsStatus {
    guard(|| {
        let root = c_str(root, "root")?;
        write_out(out, Box::into_raw(Box::new(BsCache { inner: FeatureCache::new(root) })), "out")
    })
}

/// Stores `features` under its record id and backbone.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn bs_cache_put(cache: *const BsCache, features: *const BsFeatures) -> BsStatus {
    guard(|| {
        let c = handle(cache, "cache")?;
        let f = handle(features, "features")?;
        Ok(c.inner.put(&f.inner)?)
    })
}

/// Looks up an entry. On a miss returns `BS_STATUS_OK` and stores null in `out`.
///
/// # Safety
/// `cache` must be live; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bs_cache_get(
    cache: *const BsCache,
    record_id: *const c_char,
    backbone: *const c_char,
    out: *mut *mut BsFeatures,
) -> BsStatus {
    guard(|| {
        let c = handle(cache, "cache")?;
        let record_id = c_str(record_id, "record_id")?;
        let id = BackboneId::new(backbone_name(c_str(backbone, "backbone")?)?);
        let found = match c.inner.get(record_id, &id)? {
            Some(f) => Box::into_raw(Box::new(BsFeatures::wrap(f)?)),
            None => ptr::null_mut(),
        };
        write_out(out, found, "out")
    })
}

/// # Safety
/// `cache` must be null or a handle from `bs_cache_open`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_cache_free(cache: *mut BsCache) {
    free(cache)
}

/// Loads a head artifact (`head.json`).
///
/// # Safety
/// `path` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_head_load(path: *const c_char, out: *mut *mut BsHead) -> BsStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let inner = TrainedModel::load(Path::new(path))?;
        write_out(out, Box::into_raw(Box::new(BsHead { inner })), "out")
    })
}

/// Feature width the head expects; 0 for a null handle.
///
/// # Safety
/// `head` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_head_input_dim(head: *const BsHead) -> usize {
    head.as_ref().map_or(0, |h| h.inner.head.input_dim())
}

/// Classifies one feature sequence. `probabilities` (3 doubles) and `label`
/// may each be null when not wanted.
///
/// # Safety
/// Handles must be live; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_head_predict(
    head: *const BsHead,
    features: *const BsFeatures,
    probabilities: *mut f64,
    label: *mut u8,
) -> BsStatus {
    guard(|| {
        let h = handle(head, "head")?;
        let f = handle(features, "features")?;
        let logits = h.inner.classify(&f.inner)?;
        if !probabilities.is_null() {
            for (i, p) in logits.softmax().into_iter().enumerate() {
                probabilities.add(i).write(p);
            }
        }
        if !label.is_null() {
            label.write(logits.argmax() as u8);
        }
        Ok(())
    })
}

/// # Safety
/// `head` must be null or a handle from `bs_head_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_head_free(head: *mut BsHead) {
    free(head)
}
