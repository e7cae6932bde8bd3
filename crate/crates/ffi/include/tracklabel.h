#ifndef TRACKLABEL_H
#define TRACKLABEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TlStatus {
  TL_STATUS_OK = 0,
  TL_STATUS_NULL_POINTER = 1,
  TL_STATUS_INVALID_UTF8 = 2,
  TL_STATUS_IO = 3,
  TL_STATUS_FORMAT = 4,
  TL_STATUS_DIMENSION = 5,
  TL_STATUS_INVALID_PARAMETER = 6,
  TL_STATUS_NUMERIC = 7,
  TL_STATUS_OUT_OF_RANGE = 8,
  TL_STATUS_BUFFER_TOO_SMALL = 9,
  TL_STATUS_PANIC = 10,
} TlStatus;

/**
 * Consensus output over a dataset.
 */
typedef struct TlConsensus TlConsensus;

/**
 * A loaded dataset.
 */
typedef struct TlDataset TlDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tl_version(void);

/**
 * Copies the calling thread's last error message into `buf`. Returns the
 * message length without the terminator; the copy is truncated to fit.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t tl_last_error(char *buf, size_t cap);

/**
 * Loads a dataset manifest.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TlStatus tl_dataset_load(const char *path, struct TlDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must come from [`tl_dataset_load`] and not be used afterwards.
 */
void tl_dataset_free(struct TlDataset *ds);

/**
 * Number of detections; 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t tl_dataset_detection_count(const struct TlDataset *ds);

/**
 * Number of views; 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t tl_dataset_view_count(const struct TlDataset *ds);

/**
 * Runs association and consensus. Track ids are imported when every
 * detection carries one; otherwise detections are associated greedily with
 * default parameters.
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum TlStatus tl_consensus_run(const struct TlDataset *ds,
                               double tau_sem,
                               struct TlConsensus **out);

/**
 * Releases consensus output. Null is ignored.
 *
 * # Safety
 * `c` must come from [`tl_consensus_run`] and not be used afterwards.
 */
void tl_consensus_free(struct TlConsensus *c);

/**
 * Number of trajectories; 0 for null.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t tl_consensus_track_count(const struct TlConsensus *c);

/**
 * Number of synonym clusters; 0 for null.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t tl_consensus_cluster_count(const struct TlConsensus *c);

/**
 * Track id and canonical label of the `index`-th trajectory.
 *
 * # Safety
 * `c` must be a live handle, `track` writable, `buf` null or `cap` writable
 * bytes, `needed` null or writable.
 */
enum TlStatus tl_consensus_track(const struct TlConsensus *c,
                                 size_t index,
                                 uint64_t *track,
                                 char *buf,
                                 size_t cap,
                                 size_t *needed);

/**
 * Resolved label of detection `index`.
 *
 * # Safety
 * As for [`tl_consensus_track`].
 */
enum TlStatus tl_consensus_resolved_label(const struct TlConsensus *c,
                                          size_t index,
                                          char *buf,
                                          size_t cap,
                                          size_t *needed);

/**
 * IoU of two run-length masks of the same size.
 *
 * # Safety
 * `a` and `b` must point to `a_len` and `b_len` run lengths; `out` writable.
 */
enum TlStatus tl_mask_iou(uint32_t h,
                          uint32_t w,
                          const uint32_t *a,
                          size_t a_len,
                          const uint32_t *b,
                          size_t b_len,
                          double *out);

/**
 * Visibility score `A * exp(-(sqrt(A) - sqrt(A_med))^2 / (2 sigma^2))`.
 *
 * # Safety
 * `out` must be writable.
 */
enum TlStatus tl_visibility_score(double area, double median_area, double sigma, double *out);

/**
 * Multi-positive contrastive loss. `pool` is `pool_len` row-major vectors of
 * length `dim`; `positives` indexes into it. `grad` may be null, otherwise it
 * receives `dim` values.
 *
 * # Safety
 * All pointers must cover the stated lengths; `loss` must be writable.
 */
enum TlStatus tl_contrastive_loss(const double *f_g,
                                  size_t dim,
                                  const double *pool,
                                  size_t pool_len,
                                  const size_t *positives,
                                  size_t n_positives,
                                  double tau,
                                  double *loss,
                                  double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRACKLABEL_H */
