#ifndef DEP_FFI_H
#define DEP_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DepStatus {
  DEP_STATUS_OK = 0,
  DEP_STATUS_NULL_POINTER = 1,
  DEP_STATUS_INVALID_UTF8 = 2,
  DEP_STATUS_BUFFER_TOO_SMALL = 3,
  DEP_STATUS_CONFIG = 4,
  DEP_STATUS_DATA = 5,
  DEP_STATUS_NUMERICAL = 6,
  DEP_STATUS_IO = 7,
  DEP_STATUS_PANIC = 8,
} DepStatus;

/**
 * A validated review corpus.
 */
typedef struct DepCorpus DepCorpus;

/**
 * Frozen embedder configuration.
 */
typedef struct DepEmbedder DepEmbedder;

typedef struct DepRouge1 {
  double precision;
  double recall;
  double f1;
} DepRouge1;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *dep_last_error(void);

/**
 * Human-readable name of a status code (static storage).
 */
const char *dep_status_name(enum DepStatus status);

/**
 * Embedder with the default configuration (1024 dimensions).
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum DepStatus dep_embedder_new_default(struct DepEmbedder **out);

/**
 * Embedder with explicit settings; rejected settings return `Config`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum DepStatus dep_embedder_new(size_t dim,
                                size_t ngram_min,
                                size_t ngram_max,
                                uint32_t num_buckets,
                                uint64_t seed,
                                struct DepEmbedder **out);

/**
 * # Safety
 * `h` must be null or a handle from `dep_embedder_new*` not yet freed.
 */
void dep_embedder_free(struct DepEmbedder *h);

/**
 * Output dimension, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live embedder handle.
 */
size_t dep_embedder_dim(const struct DepEmbedder *h);

/**
 * Embeds NUL-terminated UTF-8 `text` into `out[0..dim]`.
 *
 * # Safety
 * `h` must be a live handle, `text` a NUL-terminated string and `out` valid
 * for `out_len` doubles.
 */
enum DepStatus dep_embedder_embed(const struct DepEmbedder *h,
                                  const char *text_ptr,
                                  double *out,
                                  size_t out_len);

/**
 * Parses a corpus from main and meta line-delimited JSON. Malformed lines are
 * skipped and counted; a corpus with no valid review is a `Data` error.
 *
 * # Safety
 * `main` and `meta` must be NUL-terminated strings, `out` valid for one handle.
 */
enum DepStatus dep_corpus_parse(const char *main, const char *meta, struct DepCorpus **out);

/**
 * Seeded synthetic corpus.
 *
 * # Safety
 * `out` must be valid for one handle.
 */
enum DepStatus dep_corpus_synthetic(size_t users,
                                    size_t items,
                                    size_t reviews_per_user,
                                    uint64_t seed,
                                    struct DepCorpus **out);

/**
 * # Safety
 * `h` must be null or a live corpus handle.
 */
void dep_corpus_free(struct DepCorpus *h);

/**
 * # Safety
 * `h` must be null or a live corpus handle.
 */
size_t dep_corpus_num_reviews(const struct DepCorpus *h);

/**
 * # Safety
 * `h` must be null or a live corpus handle.
 */
size_t dep_corpus_num_users(const struct DepCorpus *h);

/**
 * # Safety
 * `h` must be null or a live corpus handle.
 */
size_t dep_corpus_num_rejected(const struct DepCorpus *h);

/**
 * `out = mean over rows p of (e_his − p)` for `peers` stored row-major as
 * `m × d`; zeros when `m = 0`.
 *
 * # Safety
 * `e_his` and `out` must be valid for `d` doubles, `peers` for `m * d`.
 */
enum DepStatus dep_difference(const double *e_his,
                              size_t d,
                              const double *peers,
                              size_t m,
                              double *out);

/**
 * `l_gen + lambda * (l_recon + gamma * l_sparse)`.
 *
 * # Safety
 * `out` must be valid for one double.
 */
enum DepStatus dep_total_loss(double l_gen,
                              double l_recon,
                              double l_sparse,
                              double lambda,
                              double gamma,
                              double *out);

/**
 * # Safety
 * Both strings must be NUL-terminated; `out` valid for one struct.
 */
enum DepStatus dep_rouge1(const char *candidate, const char *reference, struct DepRouge1 *out);

/**
 * # Safety
 * Both strings must be NUL-terminated; `out` valid for one double.
 */
enum DepStatus dep_meteor(const char *candidate, const char *reference, double *out);

/**
 * Corpus BLEU-4 (0 to 100) over `n` candidate/reference pairs.
 *
 * # Safety
 * `candidates` and `references` must each point to `n` NUL-terminated strings.
 */
enum DepStatus dep_bleu(const char *const *candidates,
                        const char *const *references,
                        size_t n,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEP_FFI_H */
