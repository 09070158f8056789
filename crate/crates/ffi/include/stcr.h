#ifndef STCR_H
#define STCR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StcrStatus {
  STCR_STATUS_OK = 0,
  STCR_STATUS_NULL_POINTER = 1,
  STCR_STATUS_INVALID_ARGUMENT = 2,
  STCR_STATUS_DIMENSION = 3,
  STCR_STATUS_FORMAT = 4,
  STCR_STATUS_IO = 5,
  STCR_STATUS_NUMERIC = 6,
  STCR_STATUS_CONFIG = 7,
  STCR_STATUS_DEGENERATE_INPUT = 8,
  STCR_STATUS_PANIC = 9,
} StcrStatus;

/**
 * A C×T×H×W video clip of doubles.
 */
typedef struct StcrClip StcrClip;

/**
 * Backbone and channel-head parameters.
 */
typedef struct StcrModel StcrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len` bytes) and returns the full message length excluding
 * the terminator; 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t stcr_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *stcr_version(void);

/**
 * Fresh Xavier-initialized parameters, identical to a run seeded with `seed`. `config_json` is a backbone config
 * document, or null for the default backbone.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be writable.
 */
enum StcrStatus stcr_model_new(const char *config_json,
                               uint64_t seed,
                               struct StcrModel **out);

/**
 * Loads a checkpoint written for the given backbone config (null: default).
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum StcrStatus stcr_model_load(const char *path, const char *config_json, struct StcrModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum StcrStatus stcr_model_save(const struct StcrModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void stcr_model_free(struct StcrModel *model);

/**
 * Total scalar parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t stcr_model_num_params(const struct StcrModel *model);

/**
 * Writes C′, T′, H′, W′ into `dims[0..4]`.
 *
 * # Safety
 * `dims` must point to 4 writable `size_t`.
 */
enum StcrStatus stcr_model_feature_shape(const struct StcrModel *model, size_t *dims);

/**
 * The C′×T′ spatial max-pool descriptor of `clip`, row-major into `out`.
 * Clips larger than the backbone input are center-cropped. `len` must equal C′·T′.
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum StcrStatus stcr_model_descriptor(const struct StcrModel *model,
                                      const struct StcrClip *clip,
                                      double *out,
                                      size_t len);

/**
 * Copies `dims[0]·dims[1]·dims[2]·dims[3]` doubles from `data` into a new clip.
 *
 * # Safety
 * `dims` must point to 4 values and `data` to their product of doubles.
 */
enum StcrStatus stcr_clip_new(const size_t *dims, const double *data, struct StcrClip **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum StcrStatus stcr_clip_read(const char *path, struct StcrClip **out);

/**
 * # Safety
 * `clip` must be a live handle and `path` NUL-terminated.
 */
enum StcrStatus stcr_clip_write(const struct StcrClip *clip, const char *path);

/**
 * Writes C, T, H, W into `dims[0..4]`.
 *
 * # Safety
 * `dims` must point to 4 writable `size_t`.
 */
enum StcrStatus stcr_clip_dims(const struct StcrClip *clip, size_t *dims);

/**
 * Borrowed pointer to the clip's row-major values, valid until the clip is
 * freed; null for a null handle.
 *
 * # Safety
 * `clip` must be null or a live handle.
 */
const double *stcr_clip_data(const struct StcrClip *clip);

/**
 * # Safety
 * `clip` must be null or a handle not yet freed.
 */
void stcr_clip_free(struct StcrClip *clip);

/**
 * Applies the transform `(flip, rotation)` to every frame; `flip` is 0 none,
 * 1 left-right, 2 temporal, 3 both; `rotation` counts counter-clockwise
 * quarter turns.
 *
 * # Safety
 * `clip` must be a live handle; `out` must be writable.
 */
enum StcrStatus stcr_transform_apply(const struct StcrClip *clip,
                                     uint8_t flip,
                                     uint8_t rotation,
                                     struct StcrClip **out);

/**
 * Index (0..16) of the element acting like `a` followed by `b`.
 *
 * # Safety
 * `out` must be writable.
 */
enum StcrStatus stcr_transform_compose(uint8_t a, uint8_t b, uint8_t *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum StcrStatus stcr_transform_inverse(uint8_t t, uint8_t *out);

/**
 * Blends every frame with frame `k`: `(1 - lambda) x_t + lambda x_k`.
 *
 * # Safety
 * `clip` must be a live handle; `out` must be writable.
 */
enum StcrStatus stcr_intra_mixup(const struct StcrClip *clip,
                                 double lambda,
                                 size_t k,
                                 struct StcrClip **out);

/**
 * Finite-difference check of the full loss on the default backbone; writes
 * the largest relative error.
 *
 * # Safety
 * `out_error` must be writable.
 */
enum StcrStatus stcr_gradcheck(uint64_t seed, double eps, double *out_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STCR_H */
