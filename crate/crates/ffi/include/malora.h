#ifndef MALORA_H
#define MALORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum MalkStatus {
  MALK_STATUS_OK = 0,
  MALK_STATUS_NULL_POINTER = 1,
  MALK_STATUS_INVALID_UTF8 = 2,
  MALK_STATUS_INVALID_INPUT = 3,
  MALK_STATUS_SHAPE = 4,
  MALK_STATUS_RANK_DEFICIENT = 5,
  MALK_STATUS_CONFIG = 6,
  MALK_STATUS_DIVERGED = 7,
  MALK_STATUS_FORMAT = 8,
  MALK_STATUS_SCHEMA = 9,
  MALK_STATUS_UNSUPPORTED_METHOD = 10,
  MALK_STATUS_IO = 11,
  MALK_STATUS_BUFFER_TOO_SMALL = 12,
  MALK_STATUS_PANIC = 13,
} MalkStatus;

/**
 * Opaque adapter layer together with the config that built it.
 */
typedef struct MalkLayer MalkLayer;

/**
 * One adapted linear site, `out_dim × in_dim`.
 */
typedef struct MalkSite {
  uint64_t out_dim;
  uint64_t in_dim;
} MalkSite;

typedef struct MalkBudget {
  /**
   * Trainable adapter scalars, router included.
   */
  uint64_t trainable;
  /**
   * Frozen adapter scalars (e.g. the fixed down-projection of AsyLoRA).
   */
  uint64_t frozen;
  /**
   * Router scalars, a subset of `trainable`.
   */
  uint64_t router;
} MalkBudget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL.
 *
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *malk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *malk_version(void);

/**
 * Shared and expanded ranks for base rank `rank`, `n_experts` experts and split `lambda`.
 *
 * # Safety
 * `shared_rank` and `expanded_rank` must be valid for writes.
 */
enum MalkStatus malk_derive_geometry(size_t rank,
                                     size_t n_experts,
                                     double lambda,
                                     size_t *shared_rank,
                                     size_t *expanded_rank);

/**
 * Generalization-bound ratio `sqrt(expanded_rank / rank)`.
 *
 * # Safety
 * `ratio` must be valid for writes.
 */
enum MalkStatus malk_bound_ratio(size_t expanded_rank, size_t rank, double *ratio);

/**
 * Parameter counts of the adapter in `config_json` over `n_sites` sites.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `sites` must point to
 * `n_sites` readable entries (it may be NULL when `n_sites` is 0) and `out`
 * must be valid for writes.
 */
enum MalkStatus malk_param_budget(const char *config_json,
                                  const struct MalkSite *sites,
                                  size_t n_sites,
                                  struct MalkBudget *out);

/**
 * Forward multiply-adds of the adapter path for a batch of `batch` rows.
 *
 * # Safety
 * Same pointer rules as [`malk_param_budget`]; `per_row` and `total` must be valid for writes.
 */
enum MalkStatus malk_flop_budget(const char *config_json,
                                 const struct MalkSite *sites,
                                 size_t n_sites,
                                 uint64_t batch,
                                 uint64_t *per_row,
                                 uint64_t *total);

/**
 * Builds a freshly initialized layer over the frozen `out_dim × in_dim` weight `base_w`.
 *
 * `seed` replaces the config's run seed and drives initialization.
 *
 * # Safety
 * `config_json` must be NUL-terminated, `base_w` must point to
 * `out_dim * in_dim` readable doubles and `out` must be valid for writes.
 * On success `*out` owns a handle that must be released with [`malk_layer_free`].
 */
enum MalkStatus malk_layer_new(const char *config_json,
                               const double *base_w,
                               size_t out_dim,
                               size_t in_dim,
                               uint64_t seed,
                               struct MalkLayer **out);

/**
 * Loads a layer from a `malk` checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid for writes. On success `*out`
 * must be released with [`malk_layer_free`].
 */
enum MalkStatus malk_layer_load(const char *path, struct MalkLayer **out);

/**
 * Writes `layer` to `path` in the checkpoint format, atomically.
 *
 * # Safety
 * `layer` must be a live handle and `path` NUL-terminated.
 */
enum MalkStatus malk_layer_save(const struct MalkLayer *layer, const char *path);

/**
 * Output dim, input dim and expert count of `layer` (1 for single-adapter methods).
 *
 * # Safety
 * `layer` must be a live handle; the out-pointers must be valid for writes.
 */
enum MalkStatus malk_layer_dims(const struct MalkLayer *layer,
                                size_t *out_dim,
                                size_t *in_dim,
                                size_t *n_experts);

/**
 * Number of trainable scalars, router included.
 *
 * # Safety
 * `layer` must be a live handle and `count` valid for writes.
 */
enum MalkStatus malk_layer_trainable_count(const struct MalkLayer *layer, uint64_t *count);

/**
 * Inference forward pass: `y = x·(W + ΔW)ᵀ` with routing, no dropout.
 *
 * `x` holds `rows × in_dim` doubles; `y` receives `rows × out_dim` and has
 * room for `y_len` doubles.
 *
 * # Safety
 * `layer` must be a live handle, `x` must point to `rows * in_dim` readable
 * doubles and `y` to `y_len` writable doubles.
 */
enum MalkStatus malk_layer_forward(const struct MalkLayer *layer,
                                   const double *x,
                                   size_t rows,
                                   double *y,
                                   size_t y_len);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `layer` must be NULL or a handle not yet freed.
 */
void malk_layer_free(struct MalkLayer *layer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MALORA_H */
