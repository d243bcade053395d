#ifndef ADVSEG_H
#define ADVSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvsegStatus {
  ADVSEG_STATUS_OK = 0,
  // Null pointer, bad size or out-of-range parameter.
  ADVSEG_STATUS_INVALID_ARGUMENT = 1,
  ADVSEG_STATUS_IO = 2,
  ADVSEG_STATUS_FORMAT = 3,
  ADVSEG_STATUS_DATA = 4,
  ADVSEG_STATUS_CONFIG = 5,
  ADVSEG_STATUS_PREREQUISITE = 6,
  // Output buffer too small; the required size is still written.
  ADVSEG_STATUS_BUFFER_TOO_SMALL = 7,
  // A Rust panic was caught at the boundary.
  ADVSEG_STATUS_INTERNAL = 8,
} AdvsegStatus;

// Opaque trained model.
typedef struct AdvsegModel AdvsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call
// that fails on the same thread.
const char *advseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *advseg_version(void);

// Loads a checkpoint. On success `*out` owns a model to release with
// [`advseg_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AdvsegStatus advseg_model_load(const char *path, struct AdvsegModel **out);

// # Safety
// `model` must come from [`advseg_model_load`] and not be used afterwards. Null is
// ignored.
void advseg_model_free(struct AdvsegModel *model);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t advseg_model_num_classes(const struct AdvsegModel *model);

// Writes `n` labels (argmax, ties to the lower id) for an `n`-point scan.
//
// # Safety
// `points` must hold `4 * n` doubles and `out_labels` room for `n` values.
enum AdvsegStatus advseg_model_predict(const struct AdvsegModel *model,
                                       const double *points,
                                       size_t n,
                                       uint32_t *out_labels);

// Polar mix: the sector `[start, start + theta)` of scan `a` replaces the same
// sector of scan `b`. `*out_n` receives the mixed size; if it exceeds `capacity`
// nothing else is written and `ADVSEG_STATUS_BUFFER_TOO_SMALL` is returned.
// `na + nb` points always suffice.
//
// # Safety
// Point buffers hold `4 * n` doubles, label buffers `n` values, outputs
// `capacity` rows.
enum AdvsegStatus advseg_polar_mix(const double *a_points,
                                   const uint32_t *a_labels,
                                   size_t na,
                                   const double *b_points,
                                   const uint32_t *b_labels,
                                   size_t nb,
                                   double theta,
                                   double start,
                                   double *out_points,
                                   uint32_t *out_labels,
                                   size_t capacity,
                                   size_t *out_n);

// Mean IoU of `preds` against `truth` over `num_classes` classes. Classes absent
// from both are skipped; `*out_defined` is 0 when no class is present.
//
// # Safety
// `preds` and `truth` hold `n` values; outputs are valid pointers.
enum AdvsegStatus advseg_miou(const uint32_t *preds,
                              const uint32_t *truth,
                              size_t n,
                              size_t num_classes,
                              double *out_miou,
                              int32_t *out_defined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVSEG_H */
