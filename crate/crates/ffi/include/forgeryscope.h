#ifndef FORGERYSCOPE_H
#define FORGERYSCOPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum FsStatus {
  FS_OK = 0,
  // A required pointer was null.
  FS_NULL_POINTER = 1,
  // An argument was out of range or inconsistent with another.
  FS_INVALID_ARGUMENT = 2,
  // A file could not be read.
  FS_IO = 3,
  // Checkpoint bytes were corrupt or incompatible.
  FS_CHECKPOINT = 4,
  // The library failed for a reason not caused by the arguments.
  FS_INTERNAL = 5,
  FS_PANIC = 6,
} FsStatus;

// A loaded model.
typedef struct FsModel FsModel;

// Image-level prediction.
typedef struct FsVerdict {
  // Probability that the image is manipulated.
  double p_fake;
  // Index of the most likely manipulation type; see `fs_forgery_type_name`.
  uint32_t forgery_type;
  double p_type;
  bool is_fake;
} FsVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failed call on this thread, or null after a
// success. The pointer stays valid until the next call on the same thread.
const char *fs_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fs_version(void);

// Number of manipulation types, index 0 being authentic.
uint32_t fs_forgery_type_count(void);

// Static name of manipulation type `index`, or null when out of range.
const char *fs_forgery_type_name(uint32_t index);

// Loads a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for one write.
enum FsStatus fs_model_load(const char *path, struct FsModel **out);

// Decodes checkpoint bytes into a new handle stored in `*out`.
//
// # Safety
// `data` must be valid for `len` bytes and `out` valid for one write.
enum FsStatus fs_model_from_bytes(const uint8_t *data, size_t len, struct FsModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void fs_model_free(struct FsModel *model);

// Side length of the square input the model works on, or 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t fs_model_input_size(const struct FsModel *model);

// Classifies an interleaved 8-bit RGB image of any size.
//
// The image is resized to the model input. When `mask` is non-null it
// receives `width * height` manipulation probabilities in row-major order,
// and `mask_len` must equal that count.
//
// # Safety
// `pixels` must hold `3 * width * height` bytes, `verdict` must be valid for
// one write and a non-null `mask` valid for `mask_len` writes.
enum FsStatus fs_analyze_rgb(const struct FsModel *model,
                             const uint8_t *pixels,
                             size_t width,
                             size_t height,
                             struct FsVerdict *verdict,
                             double *mask,
                             size_t mask_len);

// Unnormalized 2-D DCT-II of one row-major 8x8 block; a constant block of
// ones has DC coefficient 64.
//
// # Safety
// `block` must hold 64 readable and `out` 64 writable doubles.
enum FsStatus fs_block_dct_8x8(const double *block, double *out);

// Area under the ROC curve of `scores` against 0/1 `labels`, ties counting half.
//
// # Safety
// `scores` and `labels` must hold `n` elements and `out` be valid for one write.
enum FsStatus fs_auc_roc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORGERYSCOPE_H */
