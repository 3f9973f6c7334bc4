#ifndef SNET_H
#define SNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SNET_STATUS_OK = 0,
  SNET_STATUS_CONFIG = 1,
  SNET_STATUS_DATA = 2,
  SNET_STATUS_FORMAT = 3,
  SNET_STATUS_NUMERIC = 4,
  SNET_STATUS_IO = 5,
  SNET_STATUS_SHAPE = 6,
  SNET_STATUS_NULL_POINTER = 7,
  SNET_STATUS_INVALID_STRING = 8,
  SNET_STATUS_BUFFER_TOO_SMALL = 9,
  SNET_STATUS_PANIC = 10,
} SnetStatus;

/**
 * A labelled dataset with features scaled to [0, 1].
 */
typedef struct SnetDataset SnetDataset;

/**
 * A loaded checkpoint, either a single network or a SuperNet.
 */
typedef struct SnetModel SnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *snet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *snet_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
SnetStatus snet_model_load(const char *path, SnetModel **out);

/**
 * # Safety
 * `model` must come from `snet_model_load`; `path` must be NUL-terminated.
 */
SnetStatus snet_model_save(const SnetModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or come from `snet_model_load`, and is not used afterwards.
 */
void snet_model_free(SnetModel *model);

/**
 * Input width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t snet_model_input_dim(const SnetModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t snet_model_num_classes(const SnetModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t snet_model_param_count(const SnetModel *model);

/**
 * 1 for a SuperNet checkpoint, 0 for a single network or a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t snet_model_is_supernet(const SnetModel *model);

/**
 * Class probabilities for a row-major `rows x cols` batch, written row-major
 * into `out` which must hold `rows * num_classes` doubles.
 *
 * # Safety
 * `x` must hold `rows * cols` doubles and `out` must hold `out_len` doubles.
 */
SnetStatus snet_model_predict_proba(const SnetModel *model,
                                    const double *x,
                                    size_t rows,
                                    size_t cols,
                                    double *out,
                                    size_t out_len);

/**
 * Predicted class per row, written into `out` which must hold `rows` entries.
 *
 * # Safety
 * `x` must hold `rows * cols` doubles and `out` must hold `rows` entries.
 */
SnetStatus snet_model_predict(const SnetModel *model,
                              const double *x,
                              size_t rows,
                              size_t cols,
                              size_t *out);

/**
 * Mean cross-entropy and accuracy of `model` on `dataset`.
 *
 * # Safety
 * Handles must be live; `loss` and `accuracy` must be writable.
 */
SnetStatus snet_model_evaluate(const SnetModel *model,
                               const SnetDataset *dataset,
                               double *loss,
                               double *accuracy);

/**
 * Loads an IDX image/label pair.
 *
 * # Safety
 * Paths must be NUL-terminated and `out` writable.
 */
SnetStatus snet_dataset_load_idx(const char *images, const char *labels, SnetDataset **out);

/**
 * Builds a dataset from row-major features and labels. Labels must be
 * below `num_classes`.
 *
 * # Safety
 * `features` must hold `rows * cols` doubles, `labels` `rows` entries.
 */
SnetStatus snet_dataset_from_arrays(const double *features,
                                    const size_t *labels,
                                    size_t rows,
                                    size_t cols,
                                    size_t num_classes,
                                    SnetDataset **out);

/**
 * # Safety
 * `dataset` must be null or a live handle, and is not used afterwards.
 */
void snet_dataset_free(SnetDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t snet_dataset_len(const SnetDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t snet_dataset_dim(const SnetDataset *dataset);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SNET_H */
