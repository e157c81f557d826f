#ifndef SEFT_H
#define SEFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeftStatus {
  SEFT_STATUS_OK = 0,
  SEFT_STATUS_NULL_POINTER = 1,
  SEFT_STATUS_INVALID_ARGUMENT = 2,
  SEFT_STATUS_IO = 3,
  SEFT_STATUS_FORMAT = 4,
  SEFT_STATUS_INVARIANT = 5,
  SEFT_STATUS_NUMERIC = 6,
  SEFT_STATUS_PANIC = 7,
} SeftStatus;

// Opaque checkpoint handle.
typedef struct SeftCheckpoint SeftCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file into a new handle stored at `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeftStatus seft_checkpoint_load(const char *path, struct SeftCheckpoint **out);

// Writes `ck` to `path` atomically.
//
// # Safety
// `ck` must come from this library and `path` be a NUL-terminated string.
enum SeftStatus seft_checkpoint_save(const struct SeftCheckpoint *ck, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `ck` must come from this library and not be used afterwards.
void seft_checkpoint_free(struct SeftCheckpoint *ck);

// Folds mask, delta and adapters into a new dense checkpoint.
//
// # Safety
// `ck` must come from this library and `out` be a valid pointer.
enum SeftStatus seft_checkpoint_merge(const struct SeftCheckpoint *ck, struct SeftCheckpoint **out);

// Number of prunable weight matrices.
//
// # Safety
// `ck` must come from this library and `out` be a valid pointer.
enum SeftStatus seft_checkpoint_tensor_count(const struct SeftCheckpoint *ck, size_t *out);

// Fraction of zero coordinates over the merged prunable weights.
//
// # Safety
// `ck` must come from this library and `out` be a valid pointer.
enum SeftStatus seft_checkpoint_sparsity(const struct SeftCheckpoint *ck, double *out);

// Number of delta entries across all tensors.
//
// # Safety
// `ck` must come from this library and `out` be a valid pointer.
enum SeftStatus seft_checkpoint_delta_entries(const struct SeftCheckpoint *ck, size_t *out);

// Counts aligned groups of `m` merged weights holding more than `n`
// nonzeros. Reports the count through `violations`; the status stays OK.
//
// # Safety
// `ck` must come from this library and `violations` be a valid pointer.
enum SeftStatus seft_checkpoint_check_nm(const struct SeftCheckpoint *ck,
                                         uint32_t n,
                                         uint32_t m,
                                         size_t *violations);

// Perplexity of the merged model on `len` bytes of text, cut into
// non-overlapping windows of the model's context length.
//
// # Safety
// `ck` must come from this library, `text` point to `len` readable bytes
// and `out` be a valid pointer.
enum SeftStatus seft_evaluate_ppl(const struct SeftCheckpoint *ck,
                                  const uint8_t *text,
                                  size_t len,
                                  double *out);

// Entries swapped at step `t` under the cosine drop schedule.
//
// # Safety
// `out` must be a valid pointer.
enum SeftStatus seft_tau(double drop_rate,
                         size_t t,
                         size_t total_steps,
                         size_t budget,
                         size_t *out);

// Message of the last failed call on this thread, or an empty string.
// Valid until the next call into this library on the same thread.
const char *seft_last_error(void);

// Library version as a static NUL-terminated string.
const char *seft_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEFT_H */
