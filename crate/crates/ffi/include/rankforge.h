#ifndef RANKFORGE_H
#define RANKFORGE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success; everything else is an error.
 */
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INVALID_ARGUMENT = 2,
  RF_STATUS_SHAPE = 3,
  RF_STATUS_NUMERIC = 4,
  RF_STATUS_COST_RESOLUTION = 5,
  /**
   * Call order violated, e.g. backward before forward.
   */
  RF_STATUS_STATE = 6,
  RF_STATUS_PARSE = 7,
  RF_STATUS_DATA = 8,
  RF_STATUS_IO = 9,
  /**
   * Output buffer too small; the needed size was still written.
   */
  RF_STATUS_BUFFER_TOO_SMALL = 10,
  RF_STATUS_PANIC = 11,
} RfStatus;

/**
 * Opaque network handle. Holds the last forward pass and gradients.
 */
typedef struct RfNetwork RfNetwork;

/**
 * Opaque search handle.
 */
typedef struct RfSearch RfSearch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rf_version(void);

/**
 * Copies the calling thread's last error message into `buf`. Writes an
 * empty string when the last call succeeded.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `needed` may be null.
 */
enum RfStatus rf_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Freshly initialized built-in network: `"desk"` or `"resnet18"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` a valid pointer.
 */
enum RfStatus rf_network_builtin(const char *name,
                                 size_t classes,
                                 uint64_t seed,
                                 struct RfNetwork **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum RfStatus rf_network_load(const char *path, struct RfNetwork **out);

/**
 * # Safety
 * `net` must come from this library; `path` a NUL-terminated string.
 */
enum RfStatus rf_network_save(const struct RfNetwork *net, const char *path);

/**
 * # Safety
 * `net` must come from this library or be null. Double frees are undefined.
 */
void rf_network_free(struct RfNetwork *net);

/**
 * Input shape `(C, H, W)` and number of classes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum RfStatus rf_network_shape(const struct RfNetwork *net,
                               size_t *channels,
                               size_t *height,
                               size_t *width,
                               size_t *classes);

/**
 * # Safety
 * `net` and `out` must be valid.
 */
enum RfStatus rf_network_num_params(const struct RfNetwork *net, uint64_t *out);

/**
 * Forward pass over `batch` NCHW samples. Writes `batch * classes` logits.
 * Searched layers use their probability-weighted mixture.
 *
 * # Safety
 * `input` must hold `batch * C * H * W` values; `logits` `cap` values.
 */
enum RfStatus rf_network_forward(struct RfNetwork *net,
                                 const double *input,
                                 size_t batch,
                                 double *logits,
                                 size_t cap);

/**
 * Backpropagates `grad_logits` (same layout as the last forward's logits).
 * Fails with `State` when no forward pass is pending.
 *
 * # Safety
 * `grad_logits` must hold `len` values.
 */
enum RfStatus rf_network_backward(struct RfNetwork *net, const double *grad_logits, size_t len);

/**
 * Plain gradient step `p -= lr * g` with the gradients of the last
 * backward. Fails with `State` when there are none.
 *
 * # Safety
 * `net` must be valid.
 */
enum RfStatus rf_network_apply_gradients(struct RfNetwork *net, double lr);

/**
 * Tucker-2 compresses every searched layer at the ranks in `ranks_csv`
 * (`layer_id,r1,r2` lines). The source network is left untouched.
 *
 * # Safety
 * `net`, `ranks_csv` and `out` must be valid.
 */
enum RfStatus rf_network_compress(const struct RfNetwork *net,
                                  const char *ranks_csv,
                                  size_t refine_iters,
                                  struct RfNetwork **out);

/**
 * Candidate rank pairs of one conv layer at compression ratio `alpha`.
 * `len` receives the count even when the buffers are too small.
 *
 * # Safety
 * `r1` and `r2` must hold `cap` values each; `len` must be valid.
 */
enum RfStatus rf_rank_candidates(size_t out_channels,
                                 size_t in_channels,
                                 size_t kernel_h,
                                 size_t kernel_w,
                                 double alpha,
                                 size_t *r1,
                                 size_t *r2,
                                 size_t cap,
                                 size_t *len);

/**
 * Starts a rank search from a dense network.
 *
 * `labels_path` is only for IDX data. A null `table_path` prices ranks by
 * FLOPs. `config_json` (nullable) overrides fields of the default search
 * configuration, e.g. `{"budget": 0.6, "epochs": 10}`.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed.
 */
enum RfStatus rf_search_new(const struct RfNetwork *dense,
                            const char *data_path,
                            const char *labels_path,
                            const char *table_path,
                            double alpha,
                            const char *config_json,
                            struct RfSearch **out);

/**
 * Runs one search epoch and reports the expected cost after it.
 *
 * # Safety
 * `search` must be valid; `expected_cost` may be null.
 */
enum RfStatus rf_search_run_epoch(struct RfSearch *search, double *expected_cost);

/**
 * Current rank selection as JSON.
 *
 * # Safety
 * `buf` must hold `cap` bytes; `needed` may be null.
 */
enum RfStatus rf_search_selection_json(const struct RfSearch *search,
                                       char *buf,
                                       size_t cap,
                                       size_t *needed);

/**
 * Writes a resumable search checkpoint.
 *
 * # Safety
 * `search` and `path` must be valid.
 */
enum RfStatus rf_search_save(const struct RfSearch *search, const char *path);

/**
 * # Safety
 * `search` must come from this library or be null.
 */
void rf_search_free(struct RfSearch *search);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANKFORGE_H */
