#ifndef LGAT_H
#define LGAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LgatStatus {
  LGAT_STATUS_OK = 0,
  LGAT_STATUS_NULL_POINTER = 1,
  LGAT_STATUS_INVALID_ARGUMENT = 2,
  LGAT_STATUS_CONFIG = 3,
  LGAT_STATUS_IO = 4,
  LGAT_STATUS_CHECKPOINT = 5,
  LGAT_STATUS_SHAPE = 6,
  LGAT_STATUS_TOKEN_OUT_OF_RANGE = 7,
  LGAT_STATUS_OVERFLOW = 8,
  LGAT_STATUS_PANIC = 9,
} LgatStatus;

/**
 * Loaded model weights.
 */
typedef struct LgatModel LgatModel;

/**
 * Incremental decoding state bound to one model.
 */
typedef struct LgatSession LgatSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a
 * success. Owned by the library and valid until the next call.
 */
const char *lgat_last_error(void);

/**
 * Builds a model from `key=value` configuration text, initialised from
 * its `seed` key.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out` a valid pointer.
 */
enum LgatStatus lgat_model_from_config(const char *config_text, struct LgatModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum LgatStatus lgat_model_load(const char *path, struct LgatModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum LgatStatus lgat_model_save(const struct LgatModel *model, const char *path);

/**
 * Releases a model. Sessions created from it stay valid. Null is a no-op.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void lgat_model_free(struct LgatModel *model);

/**
 * Vocabulary size, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t lgat_model_vocab_size(const struct LgatModel *model);

/**
 * Longest sequence the model accepts, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t lgat_model_max_seq_len(const struct LgatModel *model);

/**
 * Total parameter count, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uint64_t lgat_model_param_count(const struct LgatModel *model);

/**
 * Full-sequence forward pass. Writes `n_tokens × vocab` logits row-major
 * into `logits`, whose length `logits_len` must match exactly.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum LgatStatus lgat_forward_logits(const struct LgatModel *model,
                                    const uint32_t *tokens,
                                    size_t n_tokens,
                                    double *logits,
                                    size_t logits_len);

/**
 * Greedy generation of `n_new` tokens after `prompt`; writes the new
 * tokens to `out_tokens` (length `n_new`).
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum LgatStatus lgat_greedy_decode(const struct LgatModel *model,
                                   const uint32_t *prompt,
                                   size_t n_prompt,
                                   size_t n_new,
                                   uint32_t *out_tokens);

/**
 * Starts an empty decoding session on `model`.
 *
 * # Safety
 * `model` must come from this library; `out` a valid pointer.
 */
enum LgatStatus lgat_session_new(const struct LgatModel *model, struct LgatSession **out);

/**
 * Appends one token and writes the next-token logits (length `vocab`).
 *
 * # Safety
 * `session` must come from this library; `logits` valid for `logits_len`.
 */
enum LgatStatus lgat_session_step(struct LgatSession *session,
                                  uint32_t token,
                                  double *logits,
                                  size_t logits_len);

/**
 * Tokens consumed so far, or 0 for a null session.
 *
 * # Safety
 * `session` must be null or come from this library.
 */
size_t lgat_session_len(const struct LgatSession *session);

/**
 * # Safety
 * `session` must come from this library and not be used afterwards.
 */
void lgat_session_free(struct LgatSession *session);

/**
 * KV-cache audit of every model in `config_text`, as CSV. The string is
 * owned by the caller and must be released with [`lgat_string_free`].
 *
 * # Safety
 * `config_text` must be NUL-terminated; `out_csv` a valid pointer.
 */
enum LgatStatus lgat_cache_audit_csv(const char *config_text, char **out_csv);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void lgat_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LGAT_H */
