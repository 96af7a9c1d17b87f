#ifndef NHSG_H
#define NHSG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NhsgStatus {
  NHSG_STATUS_OK = 0,
  NHSG_STATUS_NULL_POINTER = 1,
  NHSG_STATUS_INVALID_ARGUMENT = 2,
  NHSG_STATUS_IO = 3,
  NHSG_STATUS_FORMAT = 4,
  NHSG_STATUS_UNSUPPORTED = 5,
  NHSG_STATUS_CONFIG = 6,
  NHSG_STATUS_TOO_SHORT = 7,
  NHSG_STATUS_SHAPE = 8,
  NHSG_STATUS_NUMERICS = 9,
  NHSG_STATUS_STRUCTURE = 10,
  NHSG_STATUS_VOCAB = 11,
  NHSG_STATUS_INVALID_SEGMENT = 12,
  NHSG_STATUS_INVALID_EMBEDDING = 13,
  NHSG_STATUS_DATA = 14,
  NHSG_STATUS_PANIC = 15,
} NhsgStatus;

/**
 * Opaque k-means codebook.
 */
typedef struct NhsgCodebook NhsgCodebook;

/**
 * Opaque vocoder: configuration, generator and weights.
 */
typedef struct NhsgVocoder NhsgVocoder;

/**
 * Library-owned `f32` array.
 */
typedef struct NhsgF32Buffer {
  float *data;
  size_t len;
} NhsgF32Buffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; empty when none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *nhsg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nhsg_version(void);

/**
 * Length of timbre embeddings.
 */
size_t nhsg_embedding_dim(void);

/**
 * Releases a buffer returned by the library. Null buffers are ignored.
 *
 * # Safety
 * `buf` must come from this library and not have been freed.
 */
void nhsg_buffer_free(struct NhsgF32Buffer buf);

/**
 * F0 in Hz per 20 ms frame (0 = unvoiced), default pitch settings.
 *
 * # Safety
 * `samples` must point to `n` floats; `out` must be writable.
 */
enum NhsgStatus nhsg_estimate_f0(const float *samples,
                                 size_t n,
                                 uint32_t sample_rate,
                                 struct NhsgF32Buffer *out);

/**
 * Builtin timbre embedding; `out` must hold `nhsg_embedding_dim()` floats.
 *
 * # Safety
 * `samples` must point to `n` floats and `out` to `out_len` floats.
 */
enum NhsgStatus nhsg_embed_timbre(const float *samples,
                                  size_t n,
                                  uint32_t sample_rate,
                                  float *out,
                                  size_t out_len);

/**
 * Cosine similarity of two `dim`-length vectors.
 *
 * # Safety
 * `a` and `b` must point to `dim` floats.
 */
enum NhsgStatus nhsg_cosine(const float *a, const float *b, size_t dim, double *out);

/**
 * Log-F0 RMSE over co-voiced frames of two Hz contours (trimmed to the
 * shorter); NaN when no frame is voiced in both.
 *
 * # Safety
 * `reference` and `hyp` must point to `n_ref` and `n_hyp` floats.
 */
enum NhsgStatus nhsg_lf0_rmse(const float *reference,
                              size_t n_ref,
                              const float *hyp,
                              size_t n_hyp,
                              double *out);

/**
 * Percentage of frames whose voicing differs.
 *
 * # Safety
 * `reference` and `hyp` must point to `n_ref` and `n_hyp` floats.
 */
enum NhsgStatus nhsg_vuv_error(const float *reference,
                               size_t n_ref,
                               const float *hyp,
                               size_t n_hyp,
                               double *out);

/**
 * Mel cepstral distortion in dB with default settings.
 *
 * # Safety
 * `reference` and `hyp` must point to `n_ref` and `n_hyp` floats.
 */
enum NhsgStatus nhsg_mcd(const float *reference,
                         size_t n_ref,
                         const float *hyp,
                         size_t n_hyp,
                         uint32_t sample_rate,
                         double *out);

/**
 * Loads an `NHCB` codebook file.
 *
 * # Safety
 * `file` must be a NUL-terminated path; `out` must be writable.
 */
enum NhsgStatus nhsg_codebook_load(const char *file, struct NhsgCodebook **out);

/**
 * # Safety
 * `cb` must come from [`nhsg_codebook_load`] and not have been freed.
 */
void nhsg_codebook_free(struct NhsgCodebook *cb);

/**
 * Number of layers; 0 for a null handle.
 *
 * # Safety
 * `cb` must be null or a live handle.
 */
size_t nhsg_codebook_num_layers(const struct NhsgCodebook *cb);

/**
 * Layer id, centroid count and dimension of layer `index`.
 *
 * # Safety
 * `cb` must be a live handle; outputs must be writable.
 */
enum NhsgStatus nhsg_codebook_layer_info(const struct NhsgCodebook *cb,
                                         size_t index,
                                         uint32_t *layer_id,
                                         size_t *k,
                                         size_t *dim);

/**
 * Nearest centroid of `x` in layer `index` (ties to the lowest index).
 *
 * # Safety
 * `cb` must be a live handle and `x` must point to `dim` floats.
 */
enum NhsgStatus nhsg_codebook_nearest(const struct NhsgCodebook *cb,
                                      size_t index,
                                      const float *x,
                                      size_t dim,
                                      uint32_t *out);

/**
 * Loads a vocoder checkpoint with an optional TOML config (null for
 * defaults).
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated path, `config` null or one;
 * `out` must be writable.
 */
enum NhsgStatus nhsg_vocoder_load(const char *checkpoint,
                                  const char *config,
                                  struct NhsgVocoder **out);

/**
 * # Safety
 * `v` must come from [`nhsg_vocoder_load`] and not have been freed.
 */
void nhsg_vocoder_free(struct NhsgVocoder *v);

/**
 * Output samples per frame; 0 for a null handle.
 *
 * # Safety
 * `v` must be null or a live handle.
 */
size_t nhsg_vocoder_hop(const struct NhsgVocoder *v);

/**
 * Sample rate the vocoder was trained at; 0 for a null handle.
 *
 * # Safety
 * `v` must be null or a live handle.
 */
uint32_t nhsg_vocoder_sample_rate(const struct NhsgVocoder *v);

/**
 * Converts `source` to the timbre `timbre[dim]` using the codebook stored
 * in the checkpoint. The result has `frames * hop` samples.
 *
 * # Safety
 * `v` must be a live handle, `source` must point to `n` floats and
 * `timbre` to `dim` floats; `out` must be writable.
 */
enum NhsgStatus nhsg_vocoder_convert(const struct NhsgVocoder *v,
                                     const float *source,
                                     size_t n,
                                     uint32_t sample_rate,
                                     const float *timbre,
                                     size_t dim,
                                     struct NhsgF32Buffer *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NHSG_H */
