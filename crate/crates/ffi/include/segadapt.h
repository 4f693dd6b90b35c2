#ifndef SEGADAPT_H
#define SEGADAPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum SegadaptStatus {
  SEGADAPT_STATUS_OK = 0,
  SEGADAPT_STATUS_NULL_POINTER = 1,
  SEGADAPT_STATUS_INVALID_ARGUMENT = 2,
  SEGADAPT_STATUS_IO = 3,
  SEGADAPT_STATUS_DATA = 4,
  SEGADAPT_STATUS_CHECKPOINT = 5,
  SEGADAPT_STATUS_RUNTIME = 6,
  SEGADAPT_STATUS_PANIC = 7,
  // The queried quantity is undefined (e.g. IoU of an absent class).
  SEGADAPT_STATUS_UNDEFINED = 8,
} SegadaptStatus;

// Running confusion matrix.
typedef struct SegadaptConfusion SegadaptConfusion;

// A loaded checkpoint ready for inference.
typedef struct SegadaptModel SegadaptModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the last failure on this thread, or null after a success.
// The string stays valid until the next call on the same thread.
const char *segadapt_last_error(void);

// Library version as a static NUL-terminated string.
const char *segadapt_version(void);

// Number of full `patch x patch` windows on a `height x width` tile.
enum SegadaptStatus segadapt_tile_count(size_t height,
                                        size_t width,
                                        size_t patch,
                                        size_t stride,
                                        size_t *out_count);

// Row-major window offsets. Writes at most `capacity` entries into `rows`
// and `cols` and stores the full count in `out_count`; a short buffer
// yields `InvalidArgument` with `out_count` still set.
enum SegadaptStatus segadapt_tile_grid(size_t height,
                                       size_t width,
                                       size_t patch,
                                       size_t stride,
                                       size_t *rows,
                                       size_t *cols,
                                       size_t capacity,
                                       size_t *out_count);

// Load a checkpoint file. On success `*out_model` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out_model` writable.
enum SegadaptStatus segadapt_model_load(const char *path, struct SegadaptModel **out_model);

// Release a model handle. Null is accepted.
//
// # Safety
// `model` must come from [`segadapt_model_load`] and not be freed twice.
void segadapt_model_free(struct SegadaptModel *model);

// Number of classes the model predicts.
//
// # Safety
// `model` must be a live handle.
enum SegadaptStatus segadapt_model_num_classes(const struct SegadaptModel *model,
                                               size_t *out_classes);

// Image sides passed to [`segadapt_model_predict`] must be multiples of this.
//
// # Safety
// `model` must be a live handle.
enum SegadaptStatus segadapt_model_size_multiple(const struct SegadaptModel *model,
                                                 size_t *out_multiple);

// Segment one channel-first RGB image (`3 * height * width` bytes) into
// `height * width` class ids.
//
// # Safety
// `pixels` must hold `3 * height * width` bytes and `out_labels` room for
// `height * width` values.
enum SegadaptStatus segadapt_model_predict(const struct SegadaptModel *model,
                                           const uint8_t *pixels,
                                           size_t height,
                                           size_t width,
                                           uint32_t *out_labels);

// New empty matrix for `num_classes` classes.
//
// # Safety
// `out_confusion` must be writable.
enum SegadaptStatus segadapt_confusion_new(size_t num_classes,
                                           struct SegadaptConfusion **out_confusion);

// Release a confusion handle. Null is accepted.
//
// # Safety
// `cm` must come from [`segadapt_confusion_new`] and not be freed twice.
void segadapt_confusion_free(struct SegadaptConfusion *cm);

// Add `len` prediction/label pairs; labels equal to `ignore_index` are
// skipped. Nothing is added if any id is out of range.
//
// # Safety
// `prediction` and `label` must each hold `len` values.
enum SegadaptStatus segadapt_confusion_accumulate(struct SegadaptConfusion *cm,
                                                  const uint32_t *prediction,
                                                  const uint32_t *label,
                                                  size_t len,
                                                  uint32_t ignore_index);

// IoU of one class; `Undefined` when the class never occurs.
//
// # Safety
// `cm` must be a live handle and `out_value` writable.
enum SegadaptStatus segadapt_confusion_iou(const struct SegadaptConfusion *cm,
                                           size_t class_,
                                           double *out_value);

// F1 of one class; `Undefined` when the class never occurs.
//
// # Safety
// `cm` must be a live handle and `out_value` writable.
enum SegadaptStatus segadapt_confusion_f1(const struct SegadaptConfusion *cm,
                                          size_t class_,
                                          double *out_value);

// Mean IoU over the classes that have a defined score.
//
// # Safety
// `cm` must be a live handle and `out_value` writable.
enum SegadaptStatus segadapt_confusion_miou(const struct SegadaptConfusion *cm, double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGADAPT_H */
