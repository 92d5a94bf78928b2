#ifndef MASKANYNET_H
#define MASKANYNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MakStatus {
  MAK_STATUS_OK = 0,
  MAK_STATUS_NULL_POINTER = 1,
  MAK_STATUS_INVALID_ARGUMENT = 2,
  MAK_STATUS_DIMENSION = 3,
  MAK_STATUS_UNSUPPORTED_RATIO = 4,
  MAK_STATUS_CONFIG = 5,
  MAK_STATUS_CONSISTENCY = 6,
  MAK_STATUS_IO = 7,
  MAK_STATUS_RUNTIME = 8,
  MAK_STATUS_BUFFER_TOO_SMALL = 9,
  MAK_STATUS_PANIC = 10,
} MakStatus;

typedef struct MakImage MakImage;

typedef struct MakMask MakMask;

typedef struct MakModel MakModel;

typedef struct MakReuse MakReuse;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mak_last_error(void);

/**
 * Static name of a status code.
 */
const char *mak_status_name(enum MakStatus status);

/**
 * Library version string.
 */
const char *mak_version(void);

/**
 * Copies `channels * height * width` floats into a new image.
 *
 * # Safety
 * `data` must point to that many readable floats; `out` must be writable.
 */
enum MakStatus mak_image_new(size_t channels,
                             size_t height,
                             size_t width,
                             const float *data,
                             struct MakImage **out);

/**
 * Decodes an image file (PNG) into `[0, 1]` RGB planes.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum MakStatus mak_image_load(const char *path, struct MakImage **out);

/**
 * # Safety
 * `image` must be null or a handle from this library, not yet freed.
 */
void mak_image_free(struct MakImage *image);

/**
 * # Safety
 * `image` must be a live handle; the out pointers must be writable.
 */
enum MakStatus mak_image_dims(const struct MakImage *image,
                              size_t *channels,
                              size_t *height,
                              size_t *width);

/**
 * Copies the pixels into `dst`, which holds `capacity` floats.
 *
 * # Safety
 * `image` must be a live handle; `dst` must hold `capacity` writable floats.
 */
enum MakStatus mak_image_read(const struct MakImage *image, float *dst, size_t capacity);

/**
 * Writes the image as an 8-bit PNG.
 *
 * # Safety
 * `image` must be a live handle; `path` a nul-terminated string.
 */
enum MakStatus mak_image_save_png(const struct MakImage *image, const char *path);

/**
 * Generates a mask for a `height x width` image. `strategy` is one of
 * `patch`, `grid`, `random`, `combined`, `patch+grid+random`;
 * `block_size == 0` selects the default for the image size.
 *
 * # Safety
 * `strategy` must be a nul-terminated string; `out` must be writable.
 */
enum MakStatus mak_mask_generate(const char *strategy,
                                 double ratio,
                                 size_t block_size,
                                 size_t height,
                                 size_t width,
                                 uint64_t seed,
                                 struct MakMask **out);

/**
 * # Safety
 * `mask` must be null or a handle from this library, not yet freed.
 */
void mak_mask_free(struct MakMask *mask);

/**
 * Masked and total cell counts and the masked pixel fraction.
 *
 * # Safety
 * `mask` must be a live handle; the out pointers must be writable.
 */
enum MakStatus mak_mask_stats(const struct MakMask *mask,
                              size_t *masked_cells,
                              size_t *cells,
                              double *coverage);

/**
 * Copy of `image` with masked pixels set to `fill`.
 *
 * # Safety
 * `image` and `mask` must be live handles; `out` must be writable.
 */
enum MakStatus mak_apply_mask(const struct MakImage *image,
                              const struct MakMask *mask,
                              float fill,
                              struct MakImage **out);

/**
 * Stitches the masked regions of `image` into a reuse image.
 *
 * # Safety
 * `image` and `mask` must be live handles; `out` must be writable.
 */
enum MakStatus mak_reuse_build(const struct MakImage *image,
                               const struct MakMask *mask,
                               struct MakReuse **out);

/**
 * # Safety
 * `reuse` must be null or a handle from this library, not yet freed.
 */
void mak_reuse_free(struct MakReuse *reuse);

/**
 * The stitched canvas as a new image.
 *
 * # Safety
 * `reuse` must be a live handle; `out` must be writable.
 */
enum MakStatus mak_reuse_pixels(const struct MakReuse *reuse, struct MakImage **out);

/**
 * Writes the reuse patches back into a copy of `canvas` at their source
 * positions.
 *
 * # Safety
 * All handles must be live; `out` must be writable.
 */
enum MakStatus mak_reuse_scatter_back(const struct MakReuse *reuse,
                                      const struct MakMask *mask,
                                      const struct MakImage *canvas,
                                      struct MakImage **out);

/**
 * Shannon entropy in bits of the image's 8-bit intensity histogram.
 *
 * # Safety
 * `image` must be a live handle; `out` must be writable.
 */
enum MakStatus mak_shannon_entropy(const struct MakImage *image, double *out);

/**
 * Cosine similarity of two feature vectors of length `len`.
 *
 * # Safety
 * `a` and `b` must each hold `len` readable floats; `out` must be writable.
 */
enum MakStatus mak_cosine_similarity(const float *a, const float *b, size_t len, double *out);

/**
 * Anchored similarity score `exp(-|s_ds - s_a|)`.
 */
double mak_similarity_score(double s_ds, double s_a);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out` must be writable.
 */
enum MakStatus mak_model_load(const char *dir, struct MakModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void mak_model_free(struct MakModel *model);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MakStatus mak_model_num_classes(const struct MakModel *model, size_t *out);

/**
 * Eval-mode logits of one image, written to `logits` (`capacity` floats).
 *
 * # Safety
 * `model` and `image` must be live handles; `logits` must hold `capacity`
 * writable floats.
 */
enum MakStatus mak_model_predict(const struct MakModel *model,
                                 const struct MakImage *image,
                                 float *logits,
                                 size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKANYNET_H */
