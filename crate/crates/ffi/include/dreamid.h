#ifndef DREAMID_H
#define DREAMID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DreamidStatus {
  DREAMID_STATUS_OK = 0,
  DREAMID_STATUS_NULL_POINTER = 1,
  DREAMID_STATUS_INVALID_ARGUMENT = 2,
  DREAMID_STATUS_IO = 3,
  DREAMID_STATUS_CHECKPOINT = 4,
  DREAMID_STATUS_NO_FACE = 5,
  DREAMID_STATUS_BUFFER_TOO_SMALL = 6,
  DREAMID_STATUS_INTERNAL = 7,
} DreamidStatus;

/**
 * Opaque encoder handle.
 */
typedef struct DreamidEncoder DreamidEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dreamid_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dreamid_last_error(void);

/**
 * Loads an encoder checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DreamidStatus dreamid_encoder_load(const char *path, struct DreamidEncoder **out);

/**
 * Releases an encoder. NULL is ignored.
 *
 * # Safety
 * `encoder` must come from [`dreamid_encoder_load`] and not be freed twice.
 */
void dreamid_encoder_free(struct DreamidEncoder *encoder);

/**
 * Number of pseudo words per face, or 0 for NULL.
 *
 * # Safety
 * `encoder` must be a live handle or NULL.
 */
size_t dreamid_encoder_num_words(const struct DreamidEncoder *encoder);

/**
 * Width of each pseudo word, or 0 for NULL.
 *
 * # Safety
 * `encoder` must be a live handle or NULL.
 */
size_t dreamid_encoder_word_dim(const struct DreamidEncoder *encoder);

/**
 * Side of the aligned face the encoder expects, or 0 for NULL.
 *
 * # Safety
 * `encoder` must be a live handle or NULL.
 */
size_t dreamid_encoder_resolution(const struct DreamidEncoder *encoder);

/**
 * Encodes an aligned square face into `num_words * word_dim` values,
 * written row by row.
 *
 * `pixels` holds `side * side * 3` interleaved RGB samples in `[-1, 1]`
 * and `side` must equal [`dreamid_encoder_resolution`].
 *
 * # Safety
 * `pixels` must hold `side * side * 3` values and `out` `out_len` values.
 */
enum DreamidStatus dreamid_encode_aligned(const struct DreamidEncoder *encoder,
                                          const double *pixels,
                                          size_t side,
                                          double *out,
                                          size_t out_len);

/**
 * Detects, aligns and encodes the face in an 8-bit RGB photo.
 * Returns `NO_FACE` when no usable face is found.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes and `out` `out_len` values.
 */
enum DreamidStatus dreamid_encode_photo(const struct DreamidEncoder *encoder,
                                        const uint8_t *rgb,
                                        size_t width,
                                        size_t height,
                                        double *out,
                                        size_t out_len);

/**
 * Regulariser `Σ_i ‖s_i‖` over `k` words of width `dim`, stored row by row.
 *
 * # Safety
 * `words` must hold `k * dim` values and `out` must be valid.
 */
enum DreamidStatus dreamid_reg_loss(const double *words, size_t k, size_t dim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DREAMID_H */
