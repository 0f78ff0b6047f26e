/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef SNRF_H
#define SNRF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum SnrfStatus {
  SNRF_STATUS_OK = 0,
  SNRF_STATUS_NULL_POINTER = 1,
  SNRF_STATUS_INVALID_UTF8 = 2,
  SNRF_STATUS_PARAM = 3,
  SNRF_STATUS_IO = 4,
  SNRF_STATUS_CHECKPOINT = 5,
  SNRF_STATUS_FORMAT = 6,
  SNRF_STATUS_CORRESPONDENCE = 7,
  SNRF_STATUS_NUMERICAL = 8,
  SNRF_STATUS_PANIC = 9,
} SnrfStatus;

/**
 * Neuron kind codes, in layer-module order.
 */
typedef enum SnrfNeuronKind {
  SNRF_NEURON_KIND_ATTN_Q = 0,
  SNRF_NEURON_KIND_ATTN_K = 1,
  SNRF_NEURON_KIND_ATTN_V = 2,
  SNRF_NEURON_KIND_FWD_UP = 3,
  SNRF_NEURON_KIND_FWD_DOWN = 4,
} SnrfNeuronKind;

typedef enum SnrfImpactMode {
  SNRF_IMPACT_MODE_LAYER_LOCAL = 0,
  SNRF_IMPACT_MODE_FULL_MODEL = 1,
} SnrfImpactMode;

typedef enum SnrfMergeMethod {
  SNRF_MERGE_METHOD_SNRF = 0,
  SNRF_MERGE_METHOD_LINEAR = 1,
  SNRF_MERGE_METHOD_DARE = 2,
} SnrfMergeMethod;

typedef enum SnrfSvdOrder {
  SNRF_SVD_ORDER_FULL_THEN_MASK = 0,
  SNRF_SVD_ORDER_MASK_THEN_SVD = 1,
} SnrfSvdOrder;

/**
 * Opaque model handle.
 */
typedef struct SnrfModel SnrfModel;

/**
 * Opaque neuron set handle.
 */
typedef struct SnrfNeuronSet SnrfNeuronSet;

typedef struct SnrfModelConfig {
  size_t n_layers;
  size_t d_model;
  size_t d_inter;
  size_t vocab;
} SnrfModelConfig;

/**
 * Merge parameters for [`snrf_merge`].
 */
typedef struct SnrfMergeParams {
  /**
   * A `SnrfMergeMethod` value.
   */
  uint32_t method;
  size_t rank;
  double beta;
  double drop_prob;
  uint64_t seed;
  /**
   * A `SnrfSvdOrder` value.
   */
  uint32_t svd_order;
  bool allow_beta_override;
} SnrfMergeParams;

typedef struct SnrfNeuron {
  size_t layer;
  /**
   * A `SnrfNeuronKind` value.
   */
  uint32_t kind;
  size_t index;
} SnrfNeuron;

typedef struct SnrfOverlap {
  size_t shared;
  size_t only_a;
  size_t only_b;
  size_t union_size;
  double shared_pct;
  double only_a_pct;
  double only_b_pct;
} SnrfOverlap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *snrf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *snrf_version(void);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SnrfStatus snrf_model_load(const char *path, struct SnrfModel **out);

/**
 * Creates a seeded random model.
 *
 * # Safety
 * `config` and `out` must be valid pointers.
 */
enum SnrfStatus snrf_model_random(const struct SnrfModelConfig *config,
                                  uint64_t seed,
                                  struct SnrfModel **out);

/**
 * Writes the model to `path` atomically.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum SnrfStatus snrf_model_save(const struct SnrfModel *model, const char *path);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum SnrfStatus snrf_model_config(const struct SnrfModel *model, struct SnrfModelConfig *out);

/**
 * Frees a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library and not be used again.
 */
void snrf_model_free(struct SnrfModel *model);

/**
 * Merges `src` into `tgt` into a new model in `*out`. `shared` is only read
 * by the SNRF method and may be null otherwise.
 *
 * # Safety
 * Handles must come from this library; `shared` may be null unless the
 * method is SNRF.
 */
enum SnrfStatus snrf_merge(const struct SnrfModel *src,
                           const struct SnrfModel *tgt,
                           const struct SnrfNeuronSet *shared,
                           const struct SnrfMergeParams *params,
                           struct SnrfModel **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum SnrfStatus snrf_set_new(struct SnrfNeuronSet **out);

/**
 * Reads a neuron set TSV.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum SnrfStatus snrf_set_load(const char *path, struct SnrfNeuronSet **out);

/**
 * # Safety
 * `set` must come from this library and `path` be NUL-terminated.
 */
enum SnrfStatus snrf_set_save(const struct SnrfNeuronSet *set, const char *path);

/**
 * Number of neurons in the set; 0 for null.
 *
 * # Safety
 * `set` must be null or come from this library.
 */
size_t snrf_set_len(const struct SnrfNeuronSet *set);

/**
 * The `i`-th neuron in sorted order.
 *
 * # Safety
 * `set` must come from this library and `out` be valid.
 */
enum SnrfStatus snrf_set_get(const struct SnrfNeuronSet *set, size_t i, struct SnrfNeuron *out);

/**
 * Adds a neuron; already-present neurons are ignored.
 *
 * # Safety
 * `set` must come from this library.
 */
enum SnrfStatus snrf_set_insert(struct SnrfNeuronSet *set, struct SnrfNeuron neuron);

/**
 * # Safety
 * `a`, `b` must come from this library and `out` be valid.
 */
enum SnrfStatus snrf_set_intersect(const struct SnrfNeuronSet *a,
                                   const struct SnrfNeuronSet *b,
                                   struct SnrfNeuronSet **out);

/**
 * # Safety
 * `a`, `b` must come from this library and `out` be valid.
 */
enum SnrfStatus snrf_overlap_stats(const struct SnrfNeuronSet *a,
                                   const struct SnrfNeuronSet *b,
                                   struct SnrfOverlap *out);

/**
 * Frees a set. Null is ignored.
 *
 * # Safety
 * `set` must be null or come from this library and not be used again.
 */
void snrf_set_free(struct SnrfNeuronSet *set);

/**
 * Profiles every context in the corpus file and returns the neurons
 * selected in all of them. `selector` is `top:P` or `abs:T`; `mode` is a
 * `SnrfImpactMode` value.
 *
 * # Safety
 * `model` must come from this library, strings be NUL-terminated and `out`
 * valid.
 */
enum SnrfStatus snrf_context_neurons(const struct SnrfModel *model,
                                     const char *corpus_path,
                                     const char *selector,
                                     uint32_t mode,
                                     struct SnrfNeuronSet **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SNRF_H */
