#ifndef BAVED_SER_H
#define BAVED_SER_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define BS_NUM_CLASSES 3

// Result code returned by every fallible `bs_` function.
typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_ARGUMENT = 1,
  BS_STATUS_INVALID_UTF8 = 2,
  BS_STATUS_INVALID_ARGUMENT = 3,
  BS_STATUS_DATA_ERROR = 4,
  BS_STATUS_BACKBONE_ERROR = 5,
  BS_STATUS_CORRUPT_CACHE_ENTRY = 6,
  BS_STATUS_HEAD_ERROR = 7,
  BS_STATUS_METRICS_ERROR = 8,
  BS_STATUS_PANIC = 9,
} BsStatus;

typedef enum BsGender {
  BS_GENDER_MALE = 0,
  BS_GENDER_FEMALE = 1,
} BsGender;

// An on-disk feature cache.
typedef struct BsCache BsCache;

// A scanned corpus.
typedef struct BsDataset BsDataset;

// A `[frames x width]` feature matrix tagged with its backbone and record id.
typedef struct BsFeatures BsFeatures;

// A trained classification head loaded from its artifact.
typedef struct BsHead BsHead;

// Identity fields parsed from a recording name.
typedef struct BsRecord {
  uint8_t word;
  uint32_t speaker_id;
  enum BsGender gender;
  uint32_t age;
  // 0 low, 1 neutral, 2 high.
  uint8_t emotion_level;
} BsRecord;

typedef struct BsClassMetrics {
  uint64_t support;
  uint64_t predicted;
  double precision;
  double recall;
  double f1;
  // Precision or recall had a zero denominator and was defined as 0.
  bool undefined;
} BsClassMetrics;

typedef struct BsMetricsReport {
  // Row-major counts; rows are true levels, columns predictions.
  uint64_t confusion[9];
  struct BsClassMetrics per_class[3];
  double macro_f1;
  double weighted_f1;
  double accuracy;
  uint64_t total;
} BsMetricsReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bs_version(void);

// Parses a recording file name such as `3-7-1-22-1-4.wav` into `out`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum BsStatus bs_parse_record_name(const char *name, struct BsRecord *out);

// Harmonic mean of precision and recall; 0 when both are 0.
double bs_f1_from_pr(double precision, double recall);

// Scores `n` predicted labels against `n` true labels (each in 0..3).
//
// # Safety
// `truth` and `predicted` must point to `n` readable bytes; `out` must be writable.
enum BsStatus bs_metrics_report(const uint8_t *truth,
                                const uint8_t *predicted,
                                size_t n,
                                struct BsMetricsReport *out);

// Indexes every recording under `root`.
//
// # Safety
// `root` must be a NUL-terminated path; `out` must be writable.
enum BsStatus bs_dataset_scan(const char *root, struct BsDataset **out);

// Number of records; 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t bs_dataset_len(const struct BsDataset *dataset);

// Per-class record counts, indexed by emotion level.
//
// # Safety
// `dataset` must be a live handle; `counts` must have room for 3 values.
enum BsStatus bs_dataset_class_counts(const struct BsDataset *dataset, uint64_t *counts);

// Record `index` in record-id order.
//
// # Safety
// `dataset` must be a live handle; `out` must be writable.
enum BsStatus bs_dataset_record(const struct BsDataset *dataset,
                                size_t index,
                                struct BsRecord *out);

// Record id (path relative to the corpus root) of record `index`, or null
// when out of range. Owned by the dataset handle.
//
// # Safety
// `dataset` must be null or a live handle.
const char *bs_dataset_record_id(const struct BsDataset *dataset, size_t index);

// # Safety
// `dataset` must be null or a handle from `bs_dataset_scan`, not yet freed.
void bs_dataset_free(struct BsDataset *dataset);

// Copies a row-major `frames x width` matrix into a feature handle. `width`
// must match the backbone's hidden size.
//
// # Safety
// String arguments must be NUL-terminated; `data` must hold `frames * width`
// floats; `out` must be writable.
enum BsStatus bs_features_new(const char *backbone,
                              const char *record_id,
                              const float *data,
                              size_t frames,
                              size_t width,
                              struct BsFeatures **out);

// # Safety
// `features` must be null or a live handle.
size_t bs_features_frames(const struct BsFeatures *features);

// # Safety
// `features` must be null or a live handle.
size_t bs_features_width(const struct BsFeatures *features);

// Row-major frame data, owned by the handle.
//
// # Safety
// `features` must be null or a live handle.
const float *bs_features_data(const struct BsFeatures *features);

// # Safety
// `features` must be null or a handle from this library, not yet freed.
void bs_features_free(struct BsFeatures *features);

// Mean over frames, written to `out[0..len]`; `len` must equal the width.
//
// # Safety
// `features` must be a live handle; `out` must have room for `len` doubles.
enum BsStatus bs_pool_mean(const struct BsFeatures *features, double *out, size_t len);

// Opens (without creating) a feature cache rooted at `root`.
//
// # Safety
// `root` must be a NUL-terminated path; `out` must be writable.
enum BsStatus bs_cache_open(const char *root, struct BsCache **out);

// Stores `features` under its record id and backbone.
//
// # Safety
// Both handles must be live.
enum BsStatus bs_cache_put(const struct BsCache *cache, const struct BsFeatures *features);

// Looks up an entry. On a miss returns `BS_STATUS_OK` and stores null in `out`.
//
// # Safety
// `cache` must be live; strings NUL-terminated; `out` writable.
enum BsStatus bs_cache_get(const struct BsCache *cache,
                           const char *record_id,
                           const char *backbone,
                           struct BsFeatures **out);

// # Safety
// `cache` must be null or a handle from `bs_cache_open`, not yet freed.
void bs_cache_free(struct BsCache *cache);

// Loads a head artifact (`head.json`).
//
// # Safety
// `path` must be a NUL-terminated path; `out` must be writable.
enum BsStatus bs_head_load(const char *path, struct BsHead **out);

// Feature width the head expects; 0 for a null handle.
//
// # Safety
// `head` must be null or a live handle.
size_t bs_head_input_dim(const struct BsHead *head);

// Classifies one feature sequence. `probabilities` (3 doubles) and `label`
// may each be null when not wanted.
//
// # Safety
// Handles must be live; non-null outputs must be writable.
enum BsStatus bs_head_predict(const struct BsHead *head,
                              const struct BsFeatures *features,
                              double *probabilities,
                              uint8_t *label);

// # Safety
// `head` must be null or a handle from `bs_head_load`, not yet freed.
void bs_head_free(struct BsHead *head);

// Message for the most recent failure on this thread, or null after a success.
// The pointer stays valid until the next `bs_` call on the same thread.
const char *bs_last_error_message(void);

// Static, human-readable name of a status code.
const char *bs_status_name(enum BsStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAVED_SER_H */
