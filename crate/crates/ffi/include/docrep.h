#ifndef DOCREP_H
#define DOCREP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum DocrepStatus {
  DOCREP_STATUS_OK = 0,
  /**
   * Null pointer, bad size, or an argument the library rejected.
   */
  DOCREP_STATUS_INVALID_ARGUMENT = 1,
  DOCREP_STATUS_IO = 2,
  /**
   * Corrupt or unsupported file contents.
   */
  DOCREP_STATUS_FORMAT = 3,
  /**
   * Image decoding failed.
   */
  DOCREP_STATUS_IMAGE = 4,
  /**
   * Models or features that do not fit together.
   */
  DOCREP_STATUS_INCOMPATIBLE = 5,
  DOCREP_STATUS_NUMERICAL = 6,
  DOCREP_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  DOCREP_STATUS_INTERNAL = 8,
} DocrepStatus;

/**
 * Which partition agreement score [`docrep_partition_score`] computes.
 */
typedef enum DocrepPartitionMetric {
  DOCREP_PARTITION_METRIC_AMI = 0,
  DOCREP_PARTITION_METRIC_ARI = 1,
  DOCREP_PARTITION_METRIC_V_MEASURE = 2,
} DocrepPartitionMetric;

/**
 * Descriptor pipeline bound to its models.
 */
typedef struct DocrepEncoder DocrepEncoder;

/**
 * Loaded feature set.
 */
typedef struct DocrepFeatureSet DocrepFeatureSet;

/**
 * Loaded model of any kind.
 */
typedef struct DocrepModel DocrepModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on the same thread.
 */
const char *docrep_last_error(void);

/**
 * Length of the default run-length descriptor.
 */
size_t docrep_rl_len(void);

/**
 * Default run-length descriptor of a grayscale page with row-major
 * luminance in [0, 1]. `out_len` must be at least [`docrep_rl_len`].
 *
 * # Safety
 * `pixels` must hold `width * height` floats and `out` must hold `out_len`.
 */
enum DocrepStatus docrep_rl_descriptor(const float *pixels,
                                       size_t width,
                                       size_t height,
                                       double *out,
                                       size_t out_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DocrepStatus docrep_featureset_load(const char *path_, struct DocrepFeatureSet **out_);

/**
 * # Safety
 * `fs` must come from [`docrep_featureset_load`] and `path` be NUL-terminated.
 */
enum DocrepStatus docrep_featureset_save(const struct DocrepFeatureSet *fs, const char *path_);

/**
 * Number of rows, 0 for a null handle.
 *
 * # Safety
 * `fs` must be null or a live handle.
 */
size_t docrep_featureset_rows(const struct DocrepFeatureSet *fs);

/**
 * Row width, 0 for a null handle.
 *
 * # Safety
 * `fs` must be null or a live handle.
 */
size_t docrep_featureset_dim(const struct DocrepFeatureSet *fs);

/**
 * Copies row `index` into `out`, which must hold at least `dim` floats.
 *
 * # Safety
 * `fs` must be a live handle and `out` must hold `out_len` floats.
 */
enum DocrepStatus docrep_featureset_row(const struct DocrepFeatureSet *fs,
                                        size_t index,
                                        float *out,
                                        size_t out_len);

/**
 * Copies the id of row `index` as a NUL-terminated string.
 *
 * # Safety
 * `fs` must be a live handle, `buf` must hold `cap` bytes and `needed` be valid.
 */
enum DocrepStatus docrep_featureset_id(const struct DocrepFeatureSet *fs,
                                       size_t index,
                                       char *buf,
                                       size_t cap,
                                       size_t *needed);

/**
 * # Safety
 * `fs` must be null or a handle not yet freed.
 */
void docrep_featureset_free(struct DocrepFeatureSet *fs);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DocrepStatus docrep_model_load(const char *path_, struct DocrepModel **out_);

/**
 * Copies the model kind ("pca", "gmm", "svm", "ncm" or "mlp").
 *
 * # Safety
 * `model` must be a live handle, `buf` must hold `cap` bytes and `needed` be valid.
 */
enum DocrepStatus docrep_model_kind(const struct DocrepModel *model,
                                    char *buf,
                                    size_t cap,
                                    size_t *needed);

/**
 * Classifies one feature vector with an SVM, NCM or MLP model and writes the
 * index of the predicted class, usable with [`docrep_model_class_name`].
 *
 * # Safety
 * `model` must be a live handle, `x` must hold `dim` doubles and `class_index` be valid.
 */
enum DocrepStatus docrep_model_predict(const struct DocrepModel *model,
                                       const double *x,
                                       size_t dim,
                                       size_t *class_index);

/**
 * Copies the name of class `index` of a classifier.
 *
 * # Safety
 * `model` must be a live handle, `buf` must hold `cap` bytes and `needed` be valid.
 */
enum DocrepStatus docrep_model_class_name(const struct DocrepModel *model,
                                          size_t index,
                                          char *buf,
                                          size_t cap,
                                          size_t *needed);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void docrep_model_free(struct DocrepModel *model);

/**
 * Builds an encoder with default settings. `descriptor` is one of rl, fv4,
 * fv16, fv256, fv256pca, hybrid-act; model handles the descriptor does not
 * need may be null. The encoder keeps its own reference to each model, so
 * the handles can be freed afterwards.
 *
 * # Safety
 * `descriptor` must be NUL-terminated, model handles null or live, `out` valid.
 */
enum DocrepStatus docrep_encoder_new(const char *descriptor,
                                     const struct DocrepModel *local_pca,
                                     const struct DocrepModel *gmm,
                                     const struct DocrepModel *fv_pca,
                                     const struct DocrepModel *mlp,
                                     struct DocrepEncoder **out_);

/**
 * Output length of an encoder, 0 for a null handle.
 *
 * # Safety
 * `enc` must be null or a live handle.
 */
size_t docrep_encoder_dim(const struct DocrepEncoder *enc);

/**
 * Encodes a grayscale page (row-major luminance in [0, 1]).
 *
 * # Safety
 * `enc` must be live, `pixels` must hold `width * height` floats and `out` `out_len` doubles.
 */
enum DocrepStatus docrep_encoder_encode(const struct DocrepEncoder *enc,
                                        const float *pixels,
                                        size_t width,
                                        size_t height,
                                        double *out,
                                        size_t out_len);

/**
 * # Safety
 * `enc` must be null or a handle not yet freed.
 */
void docrep_encoder_free(struct DocrepEncoder *enc);

/**
 * Agreement between two labelings of the same `n` items.
 *
 * # Safety
 * `a` and `b` must hold `n` labels and `score` must be valid.
 */
enum DocrepStatus docrep_partition_score(enum DocrepPartitionMetric metric,
                                         const size_t *a,
                                         const size_t *b,
                                         size_t n,
                                         double *score);

/**
 * Average precision of a ranked list of relevance flags (nonzero means
 * relevant). A list with no relevant item yields `DOCREP_STATUS_INVALID_ARGUMENT`.
 *
 * # Safety
 * `relevant` must hold `n` bytes and `ap` must be valid.
 */
enum DocrepStatus docrep_average_precision(const uint8_t *relevant, size_t n, double *ap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCREP_H */
