#ifndef IDF_SLAM_H
#define IDF_SLAM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Keyframe outcome of a processed frame.
 */
typedef enum IdfKeyframe {
  IDF_KEYFRAME_NONE = 0,
  IDF_KEYFRAME_INSERTED = 1,
  IDF_KEYFRAME_CULLED = 2,
} IdfKeyframe;

/**
 * Result of every fallible call.
 */
typedef enum IdfStatus {
  IDF_STATUS_OK = 0,
  IDF_STATUS_NULL_POINTER = 1,
  IDF_STATUS_INVALID_ARGUMENT = 2,
  IDF_STATUS_CONFIG = 3,
  IDF_STATUS_INITIALIZATION = 4,
  IDF_STATUS_LOAD = 5,
  IDF_STATUS_IO = 6,
  IDF_STATUS_METRIC = 7,
  IDF_STATUS_CHECKPOINT = 8,
  IDF_STATUS_TRACKER_LOST = 9,
  IDF_STATUS_GENERATION = 10,
  IDF_STATUS_CONTRACT = 11,
  IDF_STATUS_PANIC = 12,
} IdfStatus;

/**
 * Opaque tracking and mapping session.
 */
typedef struct IdfSlam IdfSlam;

/**
 * Pinhole camera, pixels.
 */
typedef struct IdfIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} IdfIntrinsics;

/**
 * One RGB-D frame borrowed for the duration of a call.
 *
 * `rgb` holds `width * height * 3` bytes, row-major; `depth` holds
 * `width * height` metres with 0 marking an invalid pixel.
 */
typedef struct IdfFrame {
  double timestamp;
  struct IdfIntrinsics intrinsics;
  const uint8_t *rgb;
  const float *depth;
} IdfFrame;

typedef struct IdfFrameResult {
  /**
   * Camera-to-world pose, row-major 4x4.
   */
  double pose[16];
  double residual;
  bool lost;
  enum IdfKeyframe keyframe;
} IdfFrameResult;

typedef struct IdfAte {
  double rmse;
  double mean;
  double median;
  double max;
  uint64_t pairs;
} IdfAte;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *idf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *idf_version(void);

/**
 * Default configuration as TOML. Free with [`idf_string_free`].
 */
char *idf_config_default_toml(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void idf_string_free(char *s);

/**
 * Starts a session from its first frame, which becomes the world origin.
 * `config_toml` may be NULL for the defaults; missing keys take defaults.
 *
 * # Safety
 * `first` must point to a valid frame whose buffers match its size; `out`
 * must be writable. `config_toml`, when not NULL, must be NUL-terminated.
 */
enum IdfStatus idf_slam_new(const char *config_toml,
                            const struct IdfFrame *first,
                            struct IdfSlam **out);

/**
 * # Safety
 * `slam` must come from [`idf_slam_new`] and not have been freed, or be NULL.
 */
void idf_slam_free(struct IdfSlam *slam);

/**
 * Tracks one frame and, when it becomes a keyframe, updates the map.
 *
 * # Safety
 * Pointers as for [`idf_slam_new`]; `result` may be NULL.
 */
enum IdfStatus idf_slam_process_frame(struct IdfSlam *slam,
                                      const struct IdfFrame *frame,
                                      struct IdfFrameResult *result);

/**
 * Number of poses estimated so far, the first frame included.
 *
 * # Safety
 * `slam` must be a live handle or NULL (which yields 0).
 */
size_t idf_slam_trajectory_len(const struct IdfSlam *slam);

/**
 * Timestamp and row-major camera-to-world pose of estimate `index`.
 *
 * # Safety
 * `slam` must be a live handle; `timestamp` and `pose` writable (16 doubles).
 */
enum IdfStatus idf_slam_pose(const struct IdfSlam *slam,
                             size_t index,
                             double *timestamp,
                             double *pose);

/**
 * Stored keyframes.
 *
 * # Safety
 * `slam` must be a live handle or NULL (which yields 0).
 */
size_t idf_slam_keyframe_count(const struct IdfSlam *slam);

/**
 * Signed distance of `n` points (`xyz` packed) in the world frame.
 *
 * # Safety
 * `points` must hold `3 * n` doubles and `out` room for `n`.
 */
enum IdfStatus idf_slam_query_sdf(const struct IdfSlam *slam,
                                  const double *points,
                                  size_t n,
                                  double *out);

/**
 * Writes the trajectory as TUM text.
 *
 * # Safety
 * `slam` must be a live handle and `path` NUL-terminated.
 */
enum IdfStatus idf_slam_write_trajectory(const struct IdfSlam *slam, const char *path);

/**
 * Extracts the map's zero level set over the configured bounds at grid
 * spacing `resolution` (metres) and writes it as ASCII PLY.
 *
 * # Safety
 * `slam` must be a live handle and `path` NUL-terminated.
 */
enum IdfStatus idf_slam_write_mesh(const struct IdfSlam *slam, const char *path, double resolution);

/**
 * Absolute trajectory error between two TUM files.
 *
 * # Safety
 * Both paths must be NUL-terminated and `out` writable.
 */
enum IdfStatus idf_ate_files(const char *estimate, const char *groundtruth, struct IdfAte *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDF_SLAM_H */
