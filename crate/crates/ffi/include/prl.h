#ifndef PRL_H
#define PRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Discount convention of [`prl_cumulative_rewards`].
 */
typedef enum PrlDiscount {
  /**
   * Discount indexed by absolute step.
   */
  PRL_DISCOUNT_ABSOLUTE = 0,
  /**
   * Discount relative to the current step.
   */
  PRL_DISCOUNT_RELATIVE = 1,
} PrlDiscount;

/**
 * Result code of every fallible call.
 */
typedef enum PrlStatus {
  PRL_STATUS_OK = 0,
  PRL_STATUS_NULL_POINTER = 1,
  PRL_STATUS_INVALID_ARGUMENT = 2,
  PRL_STATUS_IO = 3,
  PRL_STATUS_FORMAT = 4,
  PRL_STATUS_NUMERICAL = 5,
  PRL_STATUS_PANIC = 6,
} PrlStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct PrlModel PrlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *prl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *prl_version(void);

/**
 * Loads a checkpoint file into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum PrlStatus prl_model_load(const char *path, struct PrlModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`prl_model_load`] and not be used afterwards.
 */
void prl_model_free(struct PrlModel *model);

/**
 * Number of candidate items; valid item indices are `1..=n`. Returns 0 for
 * a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t prl_model_num_items(const struct PrlModel *model);

/**
 * Average cumulative reward of training prompts at `step`, scaled by `mu`:
 * the default inference reward.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum PrlStatus prl_model_inference_reward(const struct PrlModel *model,
                                          size_t step,
                                          double mu,
                                          double *out);

/**
 * Next-item logits for a history `items[0..len]` (oldest first) at `step`
 * under prompt reward `reward`. `logits[i]` scores item `i + 1`;
 * `logits_len` must equal [`prl_model_num_items`].
 *
 * # Safety
 * `items` valid for `len` reads, `logits` for `logits_len` writes.
 */
enum PrlStatus prl_model_score(const struct PrlModel *model,
                               const uint32_t *items,
                               size_t len,
                               size_t step,
                               double reward,
                               double *logits,
                               size_t logits_len);

/**
 * Writes the `k` highest-scoring items, best first, ties broken by the
 * smaller index. `k` may not exceed [`prl_model_num_items`].
 *
 * # Safety
 * `items` valid for `len` reads, `out` for `k` writes.
 */
enum PrlStatus prl_model_recommend(const struct PrlModel *model,
                                   const uint32_t *items,
                                   size_t len,
                                   size_t step,
                                   double reward,
                                   uint32_t *out,
                                   size_t k);

/**
 * Cumulative rewards `R_1..R_n` of immediate rewards `rewards[0..n]` with
 * discount `lambda` in `[0, 1]`. `mode` is a [`PrlDiscount`] value.
 *
 * # Safety
 * `rewards` valid for `n` reads, `out` for `n` writes.
 */
enum PrlStatus prl_cumulative_rewards(const double *rewards,
                                      size_t n,
                                      double lambda,
                                      uint32_t mode,
                                      double *out);

/**
 * Hit and NDCG at cutoff `k` of item `target` (1-based) under `logits[0..n]`.
 *
 * # Safety
 * `logits` valid for `n` reads; `hit` and `ndcg` valid for one write each.
 */
enum PrlStatus prl_hr_ndcg(const double *logits,
                           size_t n,
                           uint32_t target,
                           size_t k,
                           double *hit,
                           double *ndcg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRL_H */
