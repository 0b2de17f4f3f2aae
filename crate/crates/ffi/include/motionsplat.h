#ifndef MOTIONSPLAT_H
#define MOTIONSPLAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * What to render from a model.
 */
typedef enum MsRenderMode {
  /**
   * The calibrated camera pose.
   */
  MS_RENDER_MODE_SHARP = 0,
  /**
   * The predicted blurry observation.
   */
  MS_RENDER_MODE_BLUR = 1,
} MsRenderMode;

/**
 * Result of every call.
 */
typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_CONFIG = 2,
  MS_STATUS_DATA = 3,
  MS_STATUS_NUMERIC = 4,
  MS_STATUS_INVALID_ARGUMENT = 5,
  MS_STATUS_BUFFER_TOO_SMALL = 6,
  MS_STATUS_PANIC = 7,
} MsStatus;

/**
 * A loaded dataset directory.
 */
typedef struct MsDataset MsDataset;

/**
 * A trained model loaded from a checkpoint directory.
 */
typedef struct MsModel MsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *ms_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ms_version(void);

/**
 * Write a synthetic blurred dataset to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated path.
 */
enum MsStatus ms_synth(uint64_t seed,
                       uintptr_t gaussians,
                       uintptr_t cameras,
                       double theta_max,
                       uintptr_t width,
                       uintptr_t height,
                       const char *out_dir);

/**
 * Load a dataset directory into `*out`. Free with [`ms_dataset_free`].
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum MsStatus ms_dataset_load(const char *dir, struct MsDataset **out);

/**
 * # Safety
 * `d` is null or came from [`ms_dataset_load`] and was not freed.
 */
void ms_dataset_free(struct MsDataset *d);

/**
 * Number of cameras in the dataset.
 *
 * # Safety
 * `d` came from [`ms_dataset_load`]; `out` is valid.
 */
enum MsStatus ms_dataset_len(const struct MsDataset *d, uintptr_t *out);

/**
 * Train on `d`, writing logs and checkpoints under `out_dir`. `config` holds
 * `key = value` lines and may be null for the defaults.
 *
 * # Safety
 * `d` came from [`ms_dataset_load`]; strings are NUL-terminated or null
 * where allowed.
 */
enum MsStatus ms_train(const struct MsDataset *d,
                       const char *config,
                       const char *out_dir,
                       bool resume);

/**
 * Load a checkpoint directory into `*out`. Free with [`ms_model_free`].
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum MsStatus ms_model_load(const char *dir, struct MsModel **out);

/**
 * # Safety
 * `m` is null or came from [`ms_model_load`] and was not freed.
 */
void ms_model_free(struct MsModel *m);

/**
 * Camera count, image size and poses per trajectory of a model.
 *
 * # Safety
 * `m` came from [`ms_model_load`]; every out pointer is valid.
 */
enum MsStatus ms_model_info(const struct MsModel *m,
                            uintptr_t *cameras,
                            uintptr_t *width,
                            uintptr_t *height,
                            uintptr_t *n_poses);

/**
 * Render camera `camera` into `buf`, row-major `height × width × 3` doubles.
 *
 * # Safety
 * `m` came from [`ms_model_load`]; `buf` holds `len` writable doubles.
 */
enum MsStatus ms_model_render(const struct MsModel *m,
                              uintptr_t camera,
                              enum MsRenderMode mode,
                              double *buf,
                              uintptr_t len);

/**
 * Predicted camera-to-world poses of image `camera`: for each of the
 * `n_poses` samples a row-major 3×4 `[R | t]`, 12 doubles.
 *
 * # Safety
 * `m` came from [`ms_model_load`]; `buf` holds `len` writable doubles.
 */
enum MsStatus ms_model_trajectory(const struct MsModel *m,
                                  uintptr_t camera,
                                  double *buf,
                                  uintptr_t len);

/**
 * `exp` of the screw `(axis, v)` scaled by `theta`, as a row-major 4×4
 * matrix. `axis` must be a unit vector.
 *
 * # Safety
 * `axis` and `v` point to 3 doubles, `out` to 16 writable doubles.
 */
enum MsStatus ms_se3_exp(const double *axis, const double *v, double theta, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTIONSPLAT_H */
