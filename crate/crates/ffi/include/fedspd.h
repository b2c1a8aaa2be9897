#ifndef FEDSPD_H
#define FEDSPD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedspdStatus {
  FEDSPD_STATUS_OK = 0,
  FEDSPD_STATUS_NULL_POINTER = 1,
  FEDSPD_STATUS_INVALID_ARGUMENT = 2,
  FEDSPD_STATUS_PARSE = 3,
  FEDSPD_STATUS_IO = 4,
  FEDSPD_STATUS_DIMENSION_MISMATCH = 5,
  FEDSPD_STATUS_UNDEFINED = 6,
  FEDSPD_STATUS_INTERNAL = 7,
} FedspdStatus;

typedef enum FedspdStreamState {
  FEDSPD_STREAM_STATE_UNDECIDED = 0,
  FEDSPD_STREAM_STATE_WARNED = 1,
  FEDSPD_STREAM_STATE_NEGATIVE = 2,
} FedspdStreamState;

/**
 * Opaque logistic-regression model.
 */
typedef struct FedspdModel FedspdModel;

/**
 * Opaque streaming warning monitor.
 */
typedef struct FedspdMonitor FedspdMonitor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fedspd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedspd_version(void);

/**
 * Parse a model from checkpoint text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FedspdStatus fedspd_model_from_checkpoint(const char *text, struct FedspdModel **out);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FedspdStatus fedspd_model_load(const char *path, struct FedspdModel **out);

/**
 * Feature dimension of the model; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fedspd_model_dimension(const struct FedspdModel *model);

/**
 * Positive-class probability of one feature vector.
 *
 * # Safety
 * `features` must point to `len` doubles; `model` and `out` must be valid.
 */
enum FedspdStatus fedspd_model_predict_proba(const struct FedspdModel *model,
                                             const double *features,
                                             size_t len,
                                             double *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fedspd_model_free(struct FedspdModel *model);

/**
 * Create a warning monitor.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FedspdStatus fedspd_monitor_new(size_t window_len,
                                     size_t history_len,
                                     size_t skepticism,
                                     double proba_threshold,
                                     struct FedspdMonitor **out);

/**
 * Feed one window probability. `latency` (may be null) receives the
 * warning latency once warned, 0 otherwise.
 *
 * # Safety
 * `monitor` and `state` must be valid; `latency` valid or null.
 */
enum FedspdStatus fedspd_monitor_push(struct FedspdMonitor *monitor,
                                      double proba,
                                      size_t last_message,
                                      enum FedspdStreamState *state,
                                      size_t *latency);

/**
 * Mark the conversation complete.
 *
 * # Safety
 * As for [`fedspd_monitor_push`].
 */
enum FedspdStatus fedspd_monitor_finish(struct FedspdMonitor *monitor,
                                        enum FedspdStreamState *state,
                                        size_t *latency);

/**
 * # Safety
 * `monitor` must be null or a handle not yet freed.
 */
void fedspd_monitor_free(struct FedspdMonitor *monitor);

/**
 * # Safety
 * `out` must be valid.
 */
enum FedspdStatus fedspd_penalty(size_t latency, double p, double *out);

/**
 * # Safety
 * `out` must be valid.
 */
enum FedspdStatus fedspd_derive_p(size_t median_messages, double *out);

/**
 * Speed over `n` latencies; `FEDSPD_STATUS_UNDEFINED` when `n == 0`.
 *
 * # Safety
 * `latencies` must point to `n` values (may be null when `n == 0`).
 */
enum FedspdStatus fedspd_speed(const size_t *latencies, size_t n, double p, double *out);

/**
 * `f1 * speed`, or 0 when `has_speed` is false.
 */
double fedspd_f_latency(double f1, double speed, bool has_speed);

/**
 * Epsilon of `steps` compositions of the sampled Gaussian mechanism at
 * rate `q` and noise multiplier `z`, over the default RDP orders. `order`
 * (may be null) receives the minimising order.
 *
 * # Safety
 * `epsilon` must be valid; `order` valid or null.
 */
enum FedspdStatus fedspd_dp_epsilon(double q,
                                    double z,
                                    uint64_t steps,
                                    double delta,
                                    double *epsilon,
                                    double *order);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSPD_H */
