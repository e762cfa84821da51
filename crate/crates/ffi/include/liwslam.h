#ifndef LIWSLAM_H
#define LIWSLAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * `liw_run` flag: skip loop closure.
 */
#define LIW_RUN_NO_LOOP 1

/**
 * `liw_run` flag: leave the wheel factor out.
 */
#define LIW_RUN_NO_WHEEL 2

/**
 * `liw_run` flag: leave the ground factor out.
 */
#define LIW_RUN_NO_GROUND 4

typedef enum LiwStatus {
  LIW_STATUS_OK = 0,
  LIW_STATUS_NULL_POINTER = 1,
  LIW_STATUS_INVALID_ARGUMENT = 2,
  LIW_STATUS_NOT_FOUND = 3,
  LIW_STATUS_FORMAT = 4,
  LIW_STATUS_DATA_GAP = 5,
  LIW_STATUS_PROTOCOL = 6,
  LIW_STATUS_NUMERIC = 7,
  LIW_STATUS_NO_MATCH = 8,
  LIW_STATUS_NOT_READY = 9,
  LIW_STATUS_IO = 10,
  LIW_STATUS_PANIC = 11,
} LiwStatus;

/**
 * Keyframe database for global localization.
 */
typedef struct LiwDatabase LiwDatabase;

/**
 * Streaming front-end (odometry only, no loop closure).
 */
typedef struct LiwTracker LiwTracker;

/**
 * Planar pose: position in meters, heading in radians.
 */
typedef struct LiwPose2 {
  double x;
  double y;
  double yaw;
} LiwPose2;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *liw_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * NUL-terminated when `len > 0`). Returns the buffer size the full message
 * needs, terminator included.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t liw_last_error(char *buf, size_t len);

/**
 * Randomized anchor trials needed to hit a shared corner with probability
 * `p` when `c` of `m` corners are shared.
 *
 * # Safety
 * `trials` must be a valid pointer.
 */
enum LiwStatus liw_num_trials(double p, size_t m, double c, size_t *trials);

/**
 * Writes a synthetic scenario dataset into `out_dir`.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings.
 */
enum LiwStatus liw_simulate(const char *scenario, uint64_t seed, const char *out_dir);

/**
 * Replays a dataset directory and writes all run artifacts into
 * `output_dir`. `flags` combines the `LIW_RUN_*` constants.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings.
 */
enum LiwStatus liw_run(const char *dataset_dir, const char *output_dir, uint32_t flags);

/**
 * Creates a tracker. `calib_path` may be null for the default calibration.
 *
 * # Safety
 * `calib_path` must be null or a valid string; `out_handle` must be valid.
 */
enum LiwStatus liw_tracker_new(const char *calib_path, struct LiwTracker **out_handle);

/**
 * # Safety
 * `handle` must come from `liw_tracker_new` and not be used afterwards.
 */
void liw_tracker_free(struct LiwTracker *handle);

/**
 * # Safety
 * `handle` must be live; `accel` and `gyro` must point to 3 doubles each.
 */
enum LiwStatus liw_tracker_push_imu(struct LiwTracker *handle,
                                    double stamp,
                                    const double *accel,
                                    const double *gyro);

/**
 * Planar wheel-odometry pose of the chassis.
 *
 * # Safety
 * `handle` must be live.
 */
enum LiwStatus liw_tracker_push_wheel(struct LiwTracker *handle,
                                      double stamp,
                                      struct LiwPose2 pose);

/**
 * One scan of `n` beams starting at `angle_min`; non-finite ranges mean no
 * return.
 *
 * # Safety
 * `handle` must be live; `ranges` must point to `n` doubles.
 */
enum LiwStatus liw_tracker_push_scan(struct LiwTracker *handle,
                                     double stamp,
                                     double angle_min,
                                     double angle_increment,
                                     double range_min,
                                     double range_max,
                                     const double *ranges,
                                     size_t n);

/**
 * Tracks every scan whose IMU and wheel data are complete. `processed`
 * (nullable) receives the number of frames produced.
 *
 * # Safety
 * `handle` must be live; `processed` must be null or valid.
 */
enum LiwStatus liw_tracker_step(struct LiwTracker *handle, size_t *processed);

/**
 * Tracks all remaining buffered scans at end of stream.
 *
 * # Safety
 * `handle` must be live; `processed` must be null or valid.
 */
enum LiwStatus liw_tracker_finish(struct LiwTracker *handle, size_t *processed);

/**
 * Latest tracked chassis pose. `LIW_STATUS_NOT_READY` before the first
 * tracked frame.
 *
 * # Safety
 * `handle` must be live; `pose` must be valid.
 */
enum LiwStatus liw_tracker_pose(const struct LiwTracker *handle, struct LiwPose2 *pose);

/**
 * Number of frames tracked so far (0 for a null handle).
 *
 * # Safety
 * `handle` must be null or live.
 */
size_t liw_tracker_frames(const struct LiwTracker *handle);

/**
 * Loads a keyframe database written by a run (`keyframes.txt`).
 *
 * # Safety
 * `path` must be a valid string; `out_handle` must be valid.
 */
enum LiwStatus liw_database_load(const char *path, struct LiwDatabase **out_handle);

/**
 * # Safety
 * `handle` must come from `liw_database_load` and not be used afterwards.
 */
void liw_database_free(struct LiwDatabase *handle);

/**
 * # Safety
 * `handle` must be null or live.
 */
size_t liw_database_len(const struct LiwDatabase *handle);

/**
 * Localizes a query (keyframe file or scan CSV). On success writes the
 * query's LiDAR pose in the map and the matched keyframe id; `millis`
 * (nullable) receives the search time. `LIW_STATUS_NO_MATCH` when no
 * candidate passes verification.
 *
 * # Safety
 * `handle` must be live, `query_path` a valid string, `pose` and
 * `keyframe_id` valid pointers, `millis` null or valid.
 */
enum LiwStatus liw_database_localize(const struct LiwDatabase *handle,
                                     const char *query_path,
                                     struct LiwPose2 *pose,
                                     uint64_t *keyframe_id,
                                     double *millis);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIWSLAM_H */
