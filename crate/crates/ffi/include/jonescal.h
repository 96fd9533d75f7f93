#ifndef JONESCAL_H
#define JONESCAL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Calibration method.
 */
typedef enum JcMethod {
  JC_METHOD_ROBUST = 0,
  JC_METHOD_GAUSSIAN_LS = 1,
  /*
   Student's-t reweighting starting at `ν = 3` with `ν` re-estimated.
   */
  JC_METHOD_STUDENT_T = 2,
} JcMethod;

/*
 Result code of every fallible call.
 */
typedef enum JcStatus {
  JC_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  JC_STATUS_NULL_POINTER = 1,
  /*
   Bad configuration, file content or argument value.
   */
  JC_STATUS_INVALID_ARGUMENT = 2,
  /*
   The computation failed (singular system, non-finite values, ...).
   */
  JC_STATUS_NUMERICAL = 3,
  /*
   Reading or writing a file failed.
   */
  JC_STATUS_IO = 4,
  /*
   An output buffer has the wrong length.
   */
  JC_STATUS_BUFFER_SIZE = 5,
  /*
   A panic was caught at the boundary.
   */
  JC_STATUS_PANIC = 6,
} JcStatus;

/*
 Output of one calibration.
 */
typedef struct JcCalibration JcCalibration;

/*
 Sky, array and true Jones matrices.
 */
typedef struct JcScene JcScene;

/*
 Stacked baseline visibilities.
 */
typedef struct JcVisibilities JcVisibilities;

/*
 Iteration caps per loop level and the stopping tolerance on `ε^h`.
 */
typedef struct JcBudget {
  uint32_t outer;
  uint32_t em;
  uint32_t bcd;
  double tolerance;
} JcBudget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` as a
 NUL-terminated string, truncated to `len` bytes. Returns the byte length
 of the full message including the terminator; 1 when no call failed.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
size_t jc_last_error_message(char *buf, size_t len);

/*
 Defaults: 20 outer, 5 EM and 3 BCD iterations, tolerance `1e-8`.
 */
struct JcBudget jc_budget_default(void);

/*
 Parses a scene from JSON text.

 # Safety
 `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum JcStatus jc_scene_from_json(const char *json, struct JcScene **out);

/*
 Loads a scene file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum JcStatus jc_scene_load(const char *path, struct JcScene **out);

/*
 Random unstructured scene: `d` sources, `m` antennas in a disc of the
 given radius, Jones entries spread around identity.

 # Safety
 `out` must be valid for writes.
 */
enum JcStatus jc_scene_random_unstructured(size_t d,
                                           size_t m,
                                           double radius,
                                           double spread,
                                           uint64_t seed,
                                           struct JcScene **out);

/*
 Random scene with 3DC structured truth and known beams of the given
 spread (0 for identity beams).

 # Safety
 `out` must be valid for writes.
 */
enum JcStatus jc_scene_random_station(size_t d,
                                      size_t m,
                                      double radius,
                                      double beam_spread,
                                      uint64_t seed,
                                      struct JcScene **out);

/*
 # Safety
 `scene` must be null or a handle from this library, not yet freed.
 */
void jc_scene_free(struct JcScene *scene);

/*
 Source and antenna counts.

 # Safety
 Pointers must be valid.
 */
enum JcStatus jc_scene_shape(const struct JcScene *scene, size_t *n_sources, size_t *n_antennas);

/*
 Copies the `8·D·M` real parameters of the true Jones matrices.

 # Safety
 `out` must be valid for `len` doubles.
 */
enum JcStatus jc_scene_truth(const struct JcScene *scene, double *out, size_t len);

/*
 Visibilities of the true Jones matrices plus white-speckle noise scaled to
 `snr_db`. The texture is inverse-gamma with `texture_nu` degrees of
 freedom, or constant (Gaussian noise) when `texture_nu` is infinite. An
 infinite `snr_db` gives noiseless data.

 # Safety
 `scene` must be a live handle; `out` must be valid for writes.
 */
enum JcStatus jc_simulate(const struct JcScene *scene,
                          double snr_db,
                          double texture_nu,
                          uint64_t seed,
                          struct JcVisibilities **out);

/*
 Wraps caller data of `n_antennas` antennas; `len` must be `8·M(M−1)/2`.

 # Safety
 `data` must be valid for `len` doubles; `out` must be valid for writes.
 */
enum JcStatus jc_visibilities_from_raw(size_t n_antennas,
                                       const double *data,
                                       size_t len,
                                       struct JcVisibilities **out);

/*
 Number of doubles in the visibility buffer.

 # Safety
 `vis` must be null or a live handle.
 */
size_t jc_visibilities_len(const struct JcVisibilities *vis);

/*
 # Safety
 `out` must be valid for `len` doubles.
 */
enum JcStatus jc_visibilities_copy(const struct JcVisibilities *vis, double *out, size_t len);

/*
 # Safety
 `vis` must be null or a handle from this library, not yet freed.
 */
void jc_visibilities_free(struct JcVisibilities *vis);

/*
 Calibrates `vis` against the sources of `scene`. `init` holds `8·D·M`
 real parameters, or is null to start from identity Jones matrices.
 `budget` may be null for the defaults.

 # Safety
 Handles must be live; `init` must be null or valid for `init_len`
 doubles; `out` must be valid for writes.
 */
enum JcStatus jc_calibrate(const struct JcScene *scene,
                           const struct JcVisibilities *vis,
                           enum JcMethod method,
                           const double *init,
                           size_t init_len,
                           const struct JcBudget *budget,
                           struct JcCalibration **out);

/*
 Copies the `8·D·M` real parameters of the estimate.

 # Safety
 `out` must be valid for `len` doubles.
 */
enum JcStatus jc_calibration_jones(const struct JcCalibration *cal, double *out, size_t len);

/*
 Outer iterations run and whether the tolerance was met.

 # Safety
 Pointers must be valid.
 */
enum JcStatus jc_calibration_iterations(const struct JcCalibration *cal,
                                        size_t *iterations,
                                        bool *converged);

/*
 Largest entry-wise error against the scene truth after removing the
 model's ambiguity.

 # Safety
 Pointers must be valid.
 */
enum JcStatus jc_calibration_aligned_error(const struct JcCalibration *cal,
                                           const struct JcScene *scene,
                                           double *out);

/*
 # Safety
 `cal` must be null or a handle from this library, not yet freed.
 */
void jc_calibration_free(struct JcCalibration *cal);

/*
 Per-parameter Cramér-Rao bound at the scene truth for white speckle of
 scale `sigma2` and inverse-gamma texture with `nu` degrees of freedom
 (infinite for Gaussian noise). `null_dimension` may be null.

 # Safety
 `out` must be valid for `len` doubles.
 */
enum JcStatus jc_crb(const struct JcScene *scene,
                     double sigma2,
                     double nu,
                     double *out,
                     size_t len,
                     size_t *null_dimension);

/*
 Runs a Monte-Carlo experiment described by JSON text and writes its
 outputs (`mse.csv`, `mse.json`, `results.json`, `structured.csv`) into
 `out_dir`. Relative scene paths resolve against the working directory.
 `threads = 0` uses every core.

 # Safety
 Both strings must be NUL-terminated.
 */
enum JcStatus jc_experiment_run(const char *config_json, const char *out_dir, size_t threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JONESCAL_H */
