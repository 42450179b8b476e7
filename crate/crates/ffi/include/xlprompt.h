#ifndef XLPROMPT_H
#define XLPROMPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum XlpStatus {
  XLP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  XLP_STATUS_NULL_ARGUMENT = 1,
  XLP_STATUS_INVALID_ARGUMENT = 2,
  XLP_STATUS_IO = 3,
  XLP_STATUS_CONFIG = 4,
  XLP_STATUS_DIMENSION_MISMATCH = 5,
  XLP_STATUS_OUT_OF_RANGE = 6,
  /**
   * The experiment or prompt cannot be planned (missing aligner,
   * verbalizer, index or other dependency).
   */
  XLP_STATUS_PLAN = 7,
  /**
   * The test input alone exceeds the token budget.
   */
  XLP_STATUS_UNREPRESENTABLE = 8,
  XLP_STATUS_TRANSPORT = 9,
  XLP_STATUS_PROTOCOL = 10,
  XLP_STATUS_CACHE_MISS = 11,
  /**
   * The library panicked; the handle involved should be freed.
   */
  XLP_STATUS_PANIC = 12,
  XLP_STATUS_INTERNAL = 13,
} XlpStatus;

/**
 * An experiment config with its dataset, scorer and other resources
 * loaded.
 */
typedef struct XlpEngine XlpEngine;

/**
 * Exact cosine index over unit vectors.
 */
typedef struct XlpIndex XlpIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next call on the same thread.
 */
const char *xlp_last_error(void);

/**
 * Library version as a static string.
 */
const char *xlp_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void xlp_string_free(char *s);

/**
 * Cosine similarity of two `dim`-long vectors.
 *
 * # Safety
 * `a` and `b` must point to `dim` floats; `out` must be writable.
 */
enum XlpStatus xlp_cosine_similarity(const float *a, const float *b, size_t dim, double *out_value);

/**
 * Writes the `dim`-dimensional character-trigram hashing embedding of
 * `text` to `out_vector`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_vector` must have room for
 * `dim` floats.
 */
enum XlpStatus xlp_hashing_embed(const char *text_in, size_t dim, float *out_vector);

/**
 * Macro-F1 of `n` predictions against `n` gold labels over the label set
 * `labels`.
 *
 * # Safety
 * The arrays must hold `n`, `n` and `n_labels` NUL-terminated strings.
 */
enum XlpStatus xlp_macro_f1(const char *const *predictions,
                            const char *const *golds,
                            size_t n,
                            const char *const *labels,
                            size_t n_labels,
                            double *out_value);

/**
 * Builds an index from `n` row-major vectors of `dim` floats, one id each.
 *
 * # Safety
 * `ids` must hold `n` values and `data` `n * dim` floats; `out_index` must
 * be writable.
 */
enum XlpStatus xlp_index_from_vectors(const char *fingerprint,
                                      const uint64_t *ids,
                                      const float *data,
                                      size_t n,
                                      size_t dim,
                                      struct XlpIndex **out_index);

/**
 * Loads an index file written by `xlprompt index` or [`xlp_index_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_index` must be writable.
 */
enum XlpStatus xlp_index_load(const char *path, struct XlpIndex **out_index);

/**
 * # Safety
 * `index` must be a live handle; `path` a NUL-terminated string.
 */
enum XlpStatus xlp_index_save(const struct XlpIndex *index, const char *path);

/**
 * Number of entries, or 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t xlp_index_len(const struct XlpIndex *index);

/**
 * Vector dimension, or 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t xlp_index_dim(const struct XlpIndex *index);

/**
 * The `k` most similar entries, by descending score then ascending id.
 *
 * # Safety
 * `query` must hold `dim` floats; `out_ids` and `out_scores` room for `k`
 * values each.
 */
enum XlpStatus xlp_index_top_k(const struct XlpIndex *index,
                               const float *query,
                               size_t dim,
                               size_t k,
                               uint64_t *out_ids,
                               double *out_scores);

/**
 * The `k` least similar entries, by ascending score then ascending id.
 *
 * # Safety
 * As for [`xlp_index_top_k`].
 */
enum XlpStatus xlp_index_bottom_k(const struct XlpIndex *index,
                                  const float *query,
                                  size_t dim,
                                  size_t k,
                                  uint64_t *out_ids,
                                  double *out_scores);

/**
 * # Safety
 * `index` must be null or a handle not yet freed.
 */
void xlp_index_free(struct XlpIndex *index);

/**
 * Loads the experiment config at `config_path`, applying `n_overrides`
 * `key=value` overrides in order.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string, `overrides` an array of
 * `n_overrides` such strings (or null when zero), `out_engine` writable.
 */
enum XlpStatus xlp_engine_open(const char *config_path,
                               const char *const *overrides,
                               size_t n_overrides,
                               struct XlpEngine **out_engine);

/**
 * Builds the prompt `strategy` produces for test example `test_id` and
 * returns the plan as JSON. `source` may be null for the config's first
 * source language.
 *
 * # Safety
 * `engine` must be a live handle, strings NUL-terminated, `out_json`
 * writable. Release the result with [`xlp_string_free`].
 */
enum XlpStatus xlp_engine_show_prompt(const struct XlpEngine *engine,
                                      const char *strategy,
                                      size_t test_id,
                                      const char *source,
                                      uint64_t seed,
                                      char **out_json);

/**
 * Runs the configured grid and returns the report as JSON. When `out_dir`
 * is not null, reports and audit trails are written there too. Failed
 * cells are part of the report, not an error.
 *
 * # Safety
 * `engine` must be a live handle, `out_dir` null or NUL-terminated,
 * `out_json` writable. Release the result with [`xlp_string_free`].
 */
enum XlpStatus xlp_engine_run(const struct XlpEngine *engine, const char *out_dir, char **out_json);

/**
 * # Safety
 * `engine` must be null or a handle not yet freed.
 */
void xlp_engine_free(struct XlpEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XLPROMPT_H */
