#ifndef AVMATCH_H
#define AVMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Audio or video, matching the CMF1 modality byte.
 */
typedef enum AvmModality {
  AVM_MODALITY_AUDIO = 0,
  AVM_MODALITY_VIDEO = 1,
} AvmModality;

/**
 * Result of every fallible call. `AVM_STATUS_OK` is zero.
 */
typedef enum AvmStatus {
  AVM_STATUS_OK = 0,
  AVM_STATUS_NULL_POINTER = 1,
  AVM_STATUS_INVALID_UTF8 = 2,
  AVM_STATUS_DIMENSION = 3,
  AVM_STATUS_SHAPE = 4,
  AVM_STATUS_PARAMETER = 5,
  AVM_STATUS_DEGENERATE = 6,
  AVM_STATUS_CONFIG = 7,
  AVM_STATUS_FORMAT = 8,
  AVM_STATUS_CORRUPTION = 9,
  AVM_STATUS_TRAINING = 10,
  AVM_STATUS_DIVERGENCE = 11,
  AVM_STATUS_MANIFEST = 12,
  AVM_STATUS_IO = 13,
  AVM_STATUS_PANIC = 14,
} AvmStatus;

/**
 * One clip's per-frame features for one modality.
 */
typedef struct AvmFeatures AvmFeatures;

/**
 * A trained or freshly initialized dual-branch model.
 */
typedef struct AvmModel AvmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *avm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *avm_version(void);

/**
 * Fresh model of a named preset (`"tivm"`, `"ivm-ms"`, ...) with weights
 * drawn from `seed`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AvmStatus avm_model_new(const char *preset, uint64_t seed, struct AvmModel **out);

/**
 * Load a CMCK checkpoint. `*out` is only written on success.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AvmStatus avm_model_load(const char *path, struct AvmModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum AvmStatus avm_model_save(const struct AvmModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void avm_model_free(struct AvmModel *model);

/**
 * Width of the shared embedding space, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t avm_model_embed_dim(const struct AvmModel *model);

/**
 * Number of trainable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t avm_model_param_count(const struct AvmModel *model);

/**
 * Feature width the model expects for a modality, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t avm_model_feature_dim(const struct AvmModel *model, enum AvmModality modality);

/**
 * Copy `frames * dim` row-major values into a new feature handle.
 *
 * # Safety
 * `clip_id` must be a NUL-terminated string, `values` must point to
 * `frames * dim` floats and `out` must be a valid pointer.
 */
enum AvmStatus avm_features_new(const char *clip_id,
                                enum AvmModality modality,
                                const float *values,
                                size_t frames,
                                size_t dim,
                                struct AvmFeatures **out);

/**
 * Read a CMF1 file; the clip id is the file stem.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AvmStatus avm_features_read(const char *path, struct AvmFeatures **out);

/**
 * # Safety
 * `features` must be a live handle and `path` a NUL-terminated string.
 */
enum AvmStatus avm_features_write(const struct AvmFeatures *features, const char *path);

/**
 * Frame count and feature width of a sequence.
 *
 * # Safety
 * `features` must be a live handle; `frames` and `dim` valid pointers.
 */
enum AvmStatus avm_features_shape(const struct AvmFeatures *features, size_t *frames, size_t *dim);

/**
 * # Safety
 * `features` must be null or a handle not yet freed.
 */
void avm_features_free(struct AvmFeatures *features);

/**
 * Eval-mode embedding of one sequence into `out[0..len]`; `len` must equal
 * [`avm_model_embed_dim`].
 *
 * # Safety
 * `model` and `features` must be live handles and `out` must point to
 * `len` writable floats.
 */
enum AvmStatus avm_model_embed(const struct AvmModel *model,
                               const struct AvmFeatures *features,
                               float *out,
                               size_t len);

/**
 * Rank `n` audio candidates for a video query. The best `top_k`
 * candidate positions go to `out_indices` and their cosine similarities
 * to `out_scores`, best first; equal scores keep candidate order.
 *
 * # Safety
 * `model` and `query` must be live handles, `candidates` must point to
 * `n` live handles, and both outputs must hold `top_k` elements.
 */
enum AvmStatus avm_recommend(const struct AvmModel *model,
                             const struct AvmFeatures *query,
                             const struct AvmFeatures *const *candidates,
                             size_t n,
                             size_t top_k,
                             size_t *out_indices,
                             double *out_scores);

/**
 * `k / n`, the recall@k of uniformly random ranking.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AvmStatus avm_random_baseline(size_t k, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVMATCH_H */
