#ifndef VLFA_H
#define VLFA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Floats in a pose: 6D rotations, shape, translation.
 */
#define VLFA_POSE_LEN 157

/*
 Floats in a joint set.
 */
#define VLFA_JOINTS_LEN 72

/*
 Floats in a set of projected keypoints.
 */
#define VLFA_KEYPOINTS_LEN 48

typedef enum VlfaStatus {
  VLFA_STATUS_OK = 0,
  VLFA_STATUS_NULL_POINTER = 1,
  VLFA_STATUS_INVALID_ARGUMENT = 2,
  VLFA_STATUS_SHAPE = 3,
  VLFA_STATUS_BEHIND_CAMERA = 4,
  VLFA_STATUS_DEGENERATE = 5,
  VLFA_STATUS_NON_FINITE = 6,
  VLFA_STATUS_IO = 7,
  VLFA_STATUS_FORMAT = 8,
  VLFA_STATUS_INTEGRITY = 9,
  VLFA_STATUS_MISSING_ARTIFACTS = 10,
  VLFA_STATUS_MIXED_HASH = 11,
  VLFA_STATUS_CONFIG = 12,
  VLFA_STATUS_PANIC = 13,
} VlfaStatus;

/*
 Body template.
 */
typedef struct VlfaBody VlfaBody;

/*
 Trained regressor, codebook, text encoder and denoiser.
 */
typedef struct VlfaModels VlfaModels;

/*
 Pinhole camera, pixels.
 */
typedef struct VlfaCamera {
  float focal;
  float cx;
  float cy;
  uint32_t width;
  uint32_t height;
} VlfaCamera;

/*
 Refinement outcome flags for one scene.
 */
typedef struct VlfaRefineFlags {
  bool diverged;
  uint32_t behind_camera;
  uint32_t degenerate;
  uint32_t text_degenerate;
} VlfaRefineFlags;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message, NUL-terminated and
 truncated to `len` bytes, into `buf`. Returns the full message length
 in bytes, excluding the terminator; call with `buf = NULL` to size it.

 # Safety
 `buf` must be NULL or point to `len` writable bytes.
 */
size_t vlfa_last_error(char *buf, size_t len);

/*
 The library's default camera.
 */
struct VlfaCamera vlfa_camera_default(void);

/*
 The canonical body template.

 # Safety
 `out` must point to writable storage for one handle.
 */
enum VlfaStatus vlfa_body_new(struct VlfaBody **out);

/*
 # Safety
 `body` must be NULL or a handle from [`vlfa_body_new`] not yet freed.
 */
void vlfa_body_free(struct VlfaBody *body);

/*
 Joint positions of a pose: `pose` holds `VLFA_POSE_LEN` floats,
 `joints_out` receives `VLFA_JOINTS_LEN`.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum VlfaStatus vlfa_forward_kinematics(const struct VlfaBody *body,
                                        const float *pose,
                                        float *joints_out);

/*
 Pixel coordinates of camera-frame joints: `joints` holds
 `VLFA_JOINTS_LEN` floats, `uv_out` receives `VLFA_KEYPOINTS_LEN`.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum VlfaStatus vlfa_project(const struct VlfaCamera *camera, const float *joints, float *uv_out);

/*
 Mean per-joint position error in millimeters between two joint sets of
 `VLFA_JOINTS_LEN` floats.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum VlfaStatus vlfa_mpjpe(const float *pred, const float *gt, double *mm_out);

/*
 MPJPE after rigid (`with_scale = false`) or similarity alignment.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum VlfaStatus vlfa_pa_mpjpe(const float *pred, const float *gt, bool with_scale, double *mm_out);

/*
 Loads the four checkpoints written by `vlfa run-all` from `dir`.

 # Safety
 `dir` must be a NUL-terminated string; `out` must point to writable
 storage for one handle.
 */
enum VlfaStatus vlfa_models_load(const char *dir, bool allow_mixed, struct VlfaModels **out);

/*
 # Safety
 `models` must be NULL or a handle from [`vlfa_models_load`] not yet freed.
 */
void vlfa_models_free(struct VlfaModels *models);

/*
 Refines one scene. `scene_json` is one corpus line; `mask` is a condition
 mask name such as `"all"` or `"no-text"`. Writes `VLFA_POSE_LEN` floats to
 `pose_out` and, when `flags_out` is non-NULL, the refinement flags.

 # Safety
 Strings must be NUL-terminated; pointers must be valid for the stated
 lengths.
 */
enum VlfaStatus vlfa_refine(const struct VlfaModels *models,
                            const char *scene_json,
                            const char *mask,
                            uint64_t seed,
                            float *pose_out,
                            struct VlfaRefineFlags *flags_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VLFA_H */
