#ifndef GDIG_H
#define GDIG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  GDIG_STATUS_OK = 0,
  GDIG_STATUS_NULL_POINTER = 1,
  GDIG_STATUS_UTF8 = 2,
  GDIG_STATUS_SHAPE = 3,
  GDIG_STATUS_SINGULAR = 4,
  GDIG_STATUS_INPUT = 5,
  GDIG_STATUS_DEGENERATE = 6,
  GDIG_STATUS_DIVERGENCE = 7,
  GDIG_STATUS_SIZE = 8,
  GDIG_STATUS_PRECONDITION = 9,
  GDIG_STATUS_FORMAT = 10,
  GDIG_STATUS_CACHE = 11,
  GDIG_STATUS_CONFIG = 12,
  GDIG_STATUS_IO = 13,
  GDIG_STATUS_PANIC = 14,
} GdigStatus;

/**
 * Gradient feature cache.
 */
typedef struct GdigGradCache GdigGradCache;

/**
 * Damped inverse curvature.
 */
typedef struct GdigInverse GdigInverse;

/**
 * Loaded model parameters.
 */
typedef struct GdigModel GdigModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next gdig call on this thread.
 */
const char *gdig_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gdig_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
GdigStatus gdig_model_load(const char *path, GdigModel **out);

/**
 * # Safety
 * `model` must come from [`gdig_model_load`] and not be used afterwards.
 */
void gdig_model_free(GdigModel *model);

/**
 * # Safety
 * `model` must be a live handle or null (which yields 0).
 */
size_t gdig_model_param_count(const GdigModel *model);

/**
 * Response-only negative log-likelihood of one example.
 *
 * # Safety
 * Token arrays must hold the given number of elements; `out` must be valid.
 */
GdigStatus gdig_model_loss(const GdigModel *model,
                           const uint32_t *prompt,
                           size_t prompt_len,
                           const uint32_t *response,
                           size_t response_len,
                           double *out);

/**
 * Renders the translation instruction. The result is released with [`gdig_string_free`].
 *
 * # Safety
 * Both inputs must be NUL-terminated strings; `out` must be valid.
 */
GdigStatus gdig_render_prompt(const char *src_text, const char *trg_lang, char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void gdig_string_free(char *s);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
GdigStatus gdig_cache_open(const char *path, GdigGradCache **out);

/**
 * # Safety
 * `cache` must come from [`gdig_cache_open`] and not be used afterwards.
 */
void gdig_cache_free(GdigGradCache *cache);

/**
 * # Safety
 * `cache` must be a live handle or null (which yields 0).
 */
size_t gdig_cache_count(const GdigGradCache *cache);

/**
 * # Safety
 * `cache` must be a live handle or null (which yields 0).
 */
size_t gdig_cache_dim(const GdigGradCache *cache);

/**
 * Copies row `index` into `buf`, which must hold exactly `gdig_cache_dim` floats.
 *
 * # Safety
 * `buf` must point to `len` writable floats.
 */
GdigStatus gdig_cache_row(const GdigGradCache *cache, size_t index, float *buf, size_t len);

/**
 * Reads a KFAC factor file and prepares `(A⊗G + λI)⁻¹`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
GdigStatus gdig_inverse_from_factors(const char *path, double lambda, GdigInverse **out);

/**
 * # Safety
 * `inv` must come from [`gdig_inverse_from_factors`] and not be used afterwards.
 */
void gdig_inverse_free(GdigInverse *inv);

/**
 * # Safety
 * `inv` must be a live handle or null (which yields 0).
 */
size_t gdig_inverse_dim(const GdigInverse *inv);

/**
 * Influence of a candidate feature on a test feature, `−g_tᵀ (H + λI)⁻¹ g_m`.
 *
 * # Safety
 * Both feature arrays must hold `dim` floats; `out` must be valid.
 */
GdigStatus gdig_influence_pair(const GdigInverse *inv,
                               const float *g_test,
                               const float *g_candidate,
                               size_t dim,
                               double *out);

/**
 * Corpus BLEU-4 of `n` hypothesis/reference pairs.
 *
 * # Safety
 * Both arrays must hold `n` NUL-terminated strings; `out` must be valid.
 */
GdigStatus gdig_bleu(const char *const *hypotheses,
                     const char *const *references,
                     size_t n,
                     double *out);

/**
 * Paired two-sided t-test of `a − b`.
 *
 * # Safety
 * `a` and `b` must hold `n` doubles; `t` and `p` must be valid.
 */
GdigStatus gdig_paired_t_test(const double *a, const double *b, size_t n, double *t, double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GDIG_H */
