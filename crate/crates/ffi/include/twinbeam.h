#ifndef TWINBEAM_H
#define TWINBEAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible call.
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_ARGUMENT = 2,
  TB_STATUS_DATA_ERROR = 3,
  TB_STATUS_NUMERIC_ERROR = 4,
  TB_STATUS_BUFFER_TOO_SMALL = 5,
  TB_STATUS_PANIC = 6,
} TbStatus;

// Joint photon-number or photocount distribution.
typedef struct TbJointDist TbJointDist;

// Click stream of detection windows.
typedef struct TbStream TbStream;

// Beam parameters: mode counts and per-mode means of pairs, signal noise, idler noise.
typedef struct TbTwbParams {
  double m_p;
  double m_s;
  double m_i;
  double b_p;
  double b_s;
  double b_i;
} TbTwbParams;

typedef struct TbDetector {
  double eta;
  double dark;
  size_t pixels;
} TbDetector;

typedef struct TbStats {
  double mean_s;
  double mean_i;
  double fano_s;
  double fano_i;
  double nrp;
  double correlation;
} TbStats;

typedef struct TbPrecision {
  double s_cs;
  double s_ci;
  double reference_s;
  double reference_i;
  double conditioned_s;
  double conditioned_i;
  size_t n_blocks;
  bool partial_coverage;
} TbPrecision;

typedef struct TbEmReport {
  size_t iterations;
  bool converged;
  double max_change;
  double loglik;
} TbEmReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a NUL-terminated
// string and returns the length without the terminator. Nothing is written
// when `buf` is null or `len` is too small; the return value is then the size needed.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t tb_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *tb_version(void);

// Preset constituting beam and detectors of the reference experiment.
//
// # Safety
// Each pointer must be null or valid for writing.
void tb_presets(struct TbTwbParams *params, struct TbDetector *signal, struct TbDetector *idler);

// Joint photon-number distribution of a twin beam. Zero limits pick the support automatically.
//
// # Safety
// `p` must point to valid parameters and `result` must be valid for writing.
enum TbStatus tb_joint_twb(const struct TbTwbParams *p,
                           size_t n_s_max,
                           size_t n_i_max,
                           struct TbJointDist **result);

// Photocount distribution of `photons` seen by two detectors.
//
// # Safety
// All pointers must be valid; `photons` must be a live handle.
enum TbStatus tb_forward_photocounts(const struct TbJointDist *photons,
                                     const struct TbDetector *signal,
                                     const struct TbDetector *idler,
                                     struct TbJointDist **result);

// Photocount distribution of `n` grouped windows of single-pixel detectors.
//
// # Safety
// All pointers must be valid.
enum TbStatus tb_compound_photocounts(const struct TbTwbParams *p,
                                      const struct TbDetector *signal,
                                      const struct TbDetector *idler,
                                      size_t n,
                                      struct TbJointDist **result);

// # Safety
// `d` must be a live handle; `rows` and `cols` must be valid for writing.
enum TbStatus tb_dist_shape(const struct TbJointDist *d, size_t *rows, size_t *cols);

// Probability of (n_s, n_i); zero outside the stored support.
//
// # Safety
// `d` must be a live handle; `value` must be valid for writing.
enum TbStatus tb_dist_get(const struct TbJointDist *d, size_t n_s, size_t n_i, double *value);

// Copies the row-major table into `buf` of `len` doubles.
//
// # Safety
// `d` must be a live handle; `buf` must be valid for `len` doubles.
enum TbStatus tb_dist_copy(const struct TbJointDist *d, double *buf, size_t len);

// Fano factors, noise-reduction parameter and correlation of a distribution.
//
// # Safety
// `d` must be a live handle; `stats` must be valid for writing.
enum TbStatus tb_dist_stats(const struct TbJointDist *d, struct TbStats *stats);

// Non-classicality depth of identifier `id` (for example "E001", "M1001").
//
// # Safety
// `d` must be a live handle, `id` a NUL-terminated string, `tau` valid for writing.
enum TbStatus tb_ncd(const struct TbJointDist *d, const char *id, double *tau);

// # Safety
// `d` must be null or a handle not freed before.
void tb_dist_free(struct TbJointDist *d);

// Simulated click stream. `k` and `block_len` set the pump correlation (0 and 1 for none).
//
// # Safety
// All pointers must be valid.
enum TbStatus tb_simulate(const struct TbTwbParams *p,
                          const struct TbDetector *signal,
                          const struct TbDetector *idler,
                          double k,
                          size_t block_len,
                          size_t n_windows,
                          uint64_t seed,
                          struct TbStream **result);

// Reads a click stream file.
//
// # Safety
// `path` must be a NUL-terminated string; `result` must be valid for writing.
enum TbStatus tb_stream_read(const char *path, struct TbStream **result);

// Writes a click stream file atomically.
//
// # Safety
// `s` must be a live handle and `path` a NUL-terminated string.
enum TbStatus tb_stream_write(const struct TbStream *s, const char *path);

// # Safety
// `s` must be a live handle; `len` must be valid for writing.
enum TbStatus tb_stream_len(const struct TbStream *s, size_t *len);

// Normalized photocount distribution of disjoint (or sliding) groups of `n` windows.
//
// # Safety
// `s` must be a live handle; `result` must be valid for writing.
enum TbStatus tb_stream_histogram(const struct TbStream *s,
                                  size_t n,
                                  bool sliding,
                                  struct TbJointDist **result);

// Sub-shot-noise precision ratios for groups of `n` windows and blocks of `n_m` groups.
//
// # Safety
// `s` must be a live handle; `report` must be valid for writing.
enum TbStatus tb_precision(const struct TbStream *s,
                           size_t n,
                           size_t n_m,
                           struct TbPrecision *report);

// # Safety
// `s` must be null or a handle not freed before.
void tb_stream_free(struct TbStream *s);

// EM photon-number reconstruction of a photocount distribution. `n_max` 0 picks
// the default truncation; `max_iters` 0 and `tol` <= 0 pick the defaults.
//
// # Safety
// All pointers must be valid; `report` may be null.
enum TbStatus tb_reconstruct(const struct TbJointDist *counts,
                             const struct TbDetector *signal,
                             const struct TbDetector *idler,
                             size_t n_max,
                             size_t max_iters,
                             double tol,
                             struct TbJointDist **result,
                             struct TbEmReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TWINBEAM_H */
