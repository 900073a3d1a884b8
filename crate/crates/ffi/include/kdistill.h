#ifndef KDISTILL_H
#define KDISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  KD_STATUS_INVALID_ARGUMENT = 1,
  KD_STATUS_NOT_FOUND = 2,
  KD_STATUS_UNAVAILABLE = 3,
  KD_STATUS_IO = 4,
  KD_STATUS_PARSE = 5,
  KD_STATUS_VERSION_MISMATCH = 6,
  KD_STATUS_CONFIG = 7,
  KD_STATUS_DIVERGED = 8,
  KD_STATUS_NULL_POINTER = 9,
  KD_STATUS_INTERNAL = 10,
  KD_STATUS_PANIC = 11,
} KdStatus;

/*
 A loaded classifier.
 */
typedef struct KdModel KdModel;

/*
 Shape a model expects and produces.
 */
typedef struct KdModelInfo {
  size_t classes;
  size_t channels;
  size_t height;
  size_t width;
} KdModelInfo;

/*
 Headline metrics of a score matrix.
 */
typedef struct KdMetrics {
  double acc;
  double bacc;
  double auc_macro;
  double map_macro;
} KdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *kd_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *kd_version(void);

/*
 Format version stored in a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum KdStatus kd_checkpoint_version(const char *path, uint32_t *out);

/*
 Load the model stored in a checkpoint. Release it with [`kd_model_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum KdStatus kd_model_load(const char *path, struct KdModel **out);

/*
 # Safety
 `model` must come from [`kd_model_load`] and not be used afterwards. Null is ignored.
 */
void kd_model_free(struct KdModel *model);

/*
 # Safety
 `model` must be a live handle and `out` writable.
 */
enum KdStatus kd_model_info(const struct KdModel *model, struct KdModelInfo *out);

/*
 Class probabilities for `count` images stored contiguously in
 channel-major order (`count×channels×height×width`). Images are resized
 to the model input. `out` receives `count×classes` values.

 # Safety
 `pixels` must hold `count*channels*height*width` floats and `out` `out_len`.
 */
enum KdStatus kd_model_predict(const struct KdModel *model,
                               const float *pixels,
                               size_t count,
                               size_t channels,
                               size_t height,
                               size_t width,
                               float *out,
                               size_t out_len);

/*
 Grad-CAM heat map of `class_index` for one image, at the image's size
 (`height×width` values in `[0, 1]`).

 # Safety
 `pixels` must hold `channels*height*width` floats and `out` `out_len`.
 */
enum KdStatus kd_model_grad_cam(const struct KdModel *model,
                                const float *pixels,
                                size_t channels,
                                size_t height,
                                size_t width,
                                size_t class_index,
                                float *out,
                                size_t out_len);

/*
 Accuracy, balanced accuracy, macro AUC and macro mAP of a
 `count×classes` score matrix against integer labels.

 # Safety
 `scores` must hold `count*classes` doubles, `labels` `count` entries.
 */
enum KdStatus kd_metrics_evaluate(const double *scores,
                                  const size_t *labels,
                                  size_t count,
                                  size_t classes,
                                  struct KdMetrics *out);

/*
 Full metrics report as JSON. Release the string with [`kd_string_free`].

 # Safety
 As [`kd_metrics_evaluate`]; `out` must be writable.
 */
enum KdStatus kd_metrics_report_json(const double *scores,
                                     const size_t *labels,
                                     size_t count,
                                     size_t classes,
                                     char **out);

/*
 # Safety
 `s` must come from this library and not be used afterwards. Null is ignored.
 */
void kd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDISTILL_H */
