#ifndef DMC_H
#define DMC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum DmcStatus {
  DMC_STATUS_OK = 0,
  // A required pointer argument was null.
  DMC_STATUS_NULL_POINTER = 1,
  DMC_STATUS_INVALID_ARGUMENT = 2,
  // The file could not be read.
  DMC_STATUS_IO = 3,
  // The file is not a valid checkpoint.
  DMC_STATUS_CHECKPOINT = 4,
  // The session reached the model's maximum sequence length.
  DMC_STATUS_CAPACITY = 5,
  // An output buffer is smaller than required.
  DMC_STATUS_BUFFER_TOO_SMALL = 6,
  // An internal error; the message has details.
  DMC_STATUS_INTERNAL = 7,
} DmcStatus;

// Cache used by a decoding session.
typedef enum DmcCacheKind {
  // The checkpoint's compressed cache; uncompressed checkpoints fall back
  // to the full cache.
  DMC_CACHE_KIND_DEFAULT = 0,
  // Full cache regardless of the checkpoint.
  DMC_CACHE_KIND_FULL = 1,
} DmcCacheKind;

// Compressed cache for a single attention head.
typedef struct DmcHeadState DmcHeadState;

// A loaded checkpoint.
typedef struct DmcModel DmcModel;

// One decoding sequence with its own cache. Holds a reference to its
// model, which may be freed first.
typedef struct DmcSession DmcSession;

// Model dimensions reported by [`dmc_model_info`].
typedef struct DmcModelInfo {
  size_t n_layers;
  size_t n_heads;
  size_t n_kv_heads;
  size_t head_dim;
  size_t vocab_size;
  size_t max_seq;
  // Nonzero when the checkpoint decodes with a compressed cache.
  int32_t compressed;
} DmcModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
// message length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t dmc_last_error_message(char *buf, size_t len);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DmcStatus dmc_model_load(const char *path, struct DmcModel **out);

// Releases a model. Sessions created from it stay valid.
//
// # Safety
// `model` must be null or a handle from [`dmc_model_load`] not yet freed.
void dmc_model_free(struct DmcModel *model);

// Fills `info` with the model's dimensions.
//
// # Safety
// Both pointers must be valid.
enum DmcStatus dmc_model_info(const struct DmcModel *model, struct DmcModelInfo *info);

// Starts a decoding session.
//
// # Safety
// `model` and `out` must be valid pointers.
enum DmcStatus dmc_session_new(const struct DmcModel *model,
                               enum DmcCacheKind kind,
                               struct DmcSession **out);

// Releases a session.
//
// # Safety
// `session` must be null or a live handle from [`dmc_session_new`].
void dmc_session_free(struct DmcSession *session);

// Feeds one token and writes the next-token logits (`vocab_size` values)
// into `logits`.
//
// # Safety
// `session` must be valid and `logits` must point to `logits_len`
// writable doubles.
enum DmcStatus dmc_session_step(struct DmcSession *session,
                                uint32_t token,
                                double *logits,
                                size_t logits_len);

// Tokens consumed by the session and slots currently cached over all
// layers and heads.
//
// # Safety
// All pointers must be valid.
enum DmcStatus dmc_session_cache_stats(const struct DmcSession *session,
                                       size_t *tokens,
                                       size_t *slots);

// Creates a compressed cache for one head of width `head_dim` (at least 2).
// Merge decisions are `sigmoid(k[0] - decision_offset) >= 0.5`.
//
// # Safety
// `out` must be a valid pointer.
enum DmcStatus dmc_head_new(size_t head_dim, double decision_offset, struct DmcHeadState **out);

// Releases a head cache.
//
// # Safety
// `head` must be null or a live handle from [`dmc_head_new`].
void dmc_head_free(struct DmcHeadState *head);

// Reads the decision from `k[0]` and the importance from `q[0]`, zeroes
// both in place and appends or merges `k`, `v` into the cache. `merged`
// (optional) receives 1 when the token was merged into the last slot.
//
// # Safety
// `q`, `k` and `v` must each point to `head_dim` doubles; `merged` may be
// null.
enum DmcStatus dmc_head_update(struct DmcHeadState *head,
                               double *q,
                               double *k,
                               const double *v,
                               size_t head_dim,
                               int32_t *merged);

// Number of slots held and tokens consumed by a head cache.
//
// # Safety
// All pointers must be valid.
enum DmcStatus dmc_head_len(const struct DmcHeadState *head, size_t *slots, size_t *tokens);

// Copies slot `index`'s key and value (each `head_dim` doubles) out of a
// head cache.
//
// # Safety
// `key` and `value` must each point to `head_dim` writable doubles.
enum DmcStatus dmc_head_slot(const struct DmcHeadState *head,
                             size_t index,
                             double *key,
                             double *value,
                             size_t head_dim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMC_H */
