#ifndef MMDFLOW_H
#define MMDFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MMDFLOW_SCHEDULE_FIRST_ORDER 0

#define MMDFLOW_SCHEDULE_SECOND_ORDER 1

/**
 * Result code of every fallible call.
 */
typedef enum MmdflowStatus {
  MMDFLOW_STATUS_OK = 0,
  MMDFLOW_STATUS_NULL_POINTER = 1,
  MMDFLOW_STATUS_INVALID_ARGUMENT = 2,
  MMDFLOW_STATUS_DIMENSION_MISMATCH = 3,
  MMDFLOW_STATUS_CONFIG = 4,
  MMDFLOW_STATUS_CERTIFICATION = 5,
  MMDFLOW_STATUS_SCHEDULE = 6,
  MMDFLOW_STATUS_LIPSCHITZ = 7,
  MMDFLOW_STATUS_INVERSION = 8,
  MMDFLOW_STATUS_NUMERIC = 9,
  MMDFLOW_STATUS_IO = 10,
  MMDFLOW_STATUS_JSON = 11,
  MMDFLOW_STATUS_PANIC = 12,
} MmdflowStatus;

/**
 * Opaque particle cloud handle.
 */
typedef struct MmdflowCloud MmdflowCloud;

/**
 * Opaque residual flow handle.
 */
typedef struct MmdflowFlow MmdflowFlow;

/**
 * Opaque feature map handle.
 */
typedef struct MmdflowMap MmdflowMap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mmdflow_last_error(void);

/**
 * Builds a feature map from its JSON description (`{"kind": "affine", ...}`).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MmdflowStatus mmdflow_map_from_json(const char *json, struct MmdflowMap **out);

/**
 * Writes the input and output dimensions `d` and `d_phi`.
 *
 * # Safety
 * `map` must be a live handle; `dim_in` and `dim_out` must be writable.
 */
enum MmdflowStatus mmdflow_map_dims(const struct MmdflowMap *map, size_t *dim_in, size_t *dim_out);

/**
 * Evaluates `phi(z)`; `z_len` must equal `d` and `out_len` must equal `d_phi`.
 *
 * # Safety
 * `z` must point to `z_len` doubles and `out` to `out_len` writable doubles.
 */
enum MmdflowStatus mmdflow_map_eval(const struct MmdflowMap *map,
                                    const double *z,
                                    size_t z_len,
                                    double *out,
                                    size_t out_len);

/**
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void mmdflow_map_free(struct MmdflowMap *map);

/**
 * Copies `n * dim` row-major coordinates into a new cloud.
 *
 * # Safety
 * `points` must point to `n * dim` doubles; `out` must be writable.
 */
enum MmdflowStatus mmdflow_cloud_new(const double *points,
                                     size_t n,
                                     size_t dim,
                                     struct MmdflowCloud **out);

/**
 * Writes the particle count and dimension.
 *
 * # Safety
 * `cloud` must be a live handle; `n` and `dim` must be writable.
 */
enum MmdflowStatus mmdflow_cloud_shape(const struct MmdflowCloud *cloud, size_t *n, size_t *dim);

/**
 * Copies the row-major coordinates; `out_len` must equal `n * dim`.
 *
 * # Safety
 * `out` must point to `out_len` writable doubles.
 */
enum MmdflowStatus mmdflow_cloud_points(const struct MmdflowCloud *cloud,
                                        double *out,
                                        size_t out_len);

/**
 * # Safety
 * `cloud` must be null or a handle not yet freed.
 */
void mmdflow_cloud_free(struct MmdflowCloud *cloud);

/**
 * Squared MMD between two clouds under `map`.
 *
 * # Safety
 * All handles must be live; `out` must be writable.
 */
enum MmdflowStatus mmdflow_mmd_squared(const struct MmdflowCloud *q,
                                       const struct MmdflowCloud *p,
                                       const struct MmdflowMap *map,
                                       double *out);

/**
 * Greedily builds a flow from `q` toward `p` until the squared MMD ratio
 * reaches `delta`. `schedule` is `MMDFLOW_SCHEDULE_FIRST_ORDER` (which
 * doubles `safety_c` up to 1024 times its value until the target is met)
 * or `MMDFLOW_SCHEDULE_SECOND_ORDER` (which ignores `safety_c`). On success
 * `out_flow` receives the flow; `out_ratio`, if not null, receives the
 * achieved ratio.
 *
 * # Safety
 * All handles must be live; `out_flow` must be writable; `out_ratio` must be
 * null or writable.
 */
enum MmdflowStatus mmdflow_flow_build(const struct MmdflowCloud *q,
                                      const struct MmdflowCloud *p,
                                      const struct MmdflowMap *map,
                                      uint32_t schedule,
                                      double delta,
                                      double safety_c,
                                      double stop_tol,
                                      struct MmdflowFlow **out_flow,
                                      double *out_ratio);

/**
 * Number of blocks in the flow.
 *
 * # Safety
 * `flow` must be a live handle; `out` must be writable.
 */
enum MmdflowStatus mmdflow_flow_len(const struct MmdflowFlow *flow, size_t *out);

/**
 * Pushes a cloud through every block.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MmdflowStatus mmdflow_flow_push(const struct MmdflowFlow *flow,
                                     const struct MmdflowCloud *cloud,
                                     struct MmdflowCloud **out);

/**
 * Inverts the flow block by block with fixed-point iteration to residual
 * `tol` per block, at most `max_iter` iterations each.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MmdflowStatus mmdflow_flow_invert(const struct MmdflowFlow *flow,
                                       const struct MmdflowCloud *cloud,
                                       double tol,
                                       size_t max_iter,
                                       struct MmdflowCloud **out);

/**
 * Serializes the flow; free the string with [`mmdflow_string_free`].
 *
 * # Safety
 * `flow` must be a live handle; `out` must be writable.
 */
enum MmdflowStatus mmdflow_flow_to_json(const struct MmdflowFlow *flow, char **out);

/**
 * Loads a flow written by [`mmdflow_flow_to_json`], re-checking every block.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MmdflowStatus mmdflow_flow_from_json(const char *json, struct MmdflowFlow **out);

/**
 * # Safety
 * `flow` must be null or a handle not yet freed.
 */
void mmdflow_flow_free(struct MmdflowFlow *flow);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void mmdflow_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMDFLOW_H */
