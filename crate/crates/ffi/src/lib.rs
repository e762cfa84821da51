//! C ABI over `liwslam`.
//!
//! Every call returns a [`LiwStatus`]; on failure the message is kept per
//! thread and read back with [`liw_last_error`]. Handles are opaque and must
//! be released with their `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use liwslam::cli::{self, PipelineConfig, RunConfig};
use liwslam::dataio::{Calibration, ImuSample, LaserScan, WheelOdomSample};
use liwslam::frontend::{FrontendConfig, Tracker};
use liwslam::geometry::Pose2;
use liwslam::loopdetect::{self, num_trials, LoopDatabase};
use liwslam::Error;
use nalgebra::Vector3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Format = 4,
    DataGap = 5,
    Protocol = 6,
    Numeric = 7,
    NoMatch = 8,
    NotReady = 9,
    Io = 10,
    Panic = 11,
}

/// Planar pose: position in meters, heading in radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LiwPose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<Pose2> for LiwPose2 {
    fn from(p: Pose2) -> Self {
        LiwPose2 {
            x: p.xy.x,
            y: p.xy.y,
            yaw: p.yaw,
        }
    }
}

/// `liw_run` flag: skip loop closure.
pub const LIW_RUN_NO_LOOP: u32 = 1;
/// `liw_run` flag: leave the wheel factor out.
pub const LIW_RUN_NO_WHEEL: u32 = 2;
/// `liw_run` flag: leave the ground factor out.
pub const LIW_RUN_NO_GROUND: u32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> LiwStatus {
    match err {
        Error::InvalidArgument(_) | Error::OutOfRange(_) => LiwStatus::InvalidArgument,
        Error::NotFound(_) => LiwStatus::NotFound,
        Error::Format { .. } => LiwStatus::Format,
        Error::DataGap { .. } => LiwStatus::DataGap,
        Error::Protocol(_) => LiwStatus::Protocol,
        Error::Io(_) => LiwStatus::Io,
        Error::NoOverlap(_) | Error::EmptyAssociation(_) => LiwStatus::NoMatch,
        Error::DegenerateGeometry(_)
        | Error::SingularSystem { .. }
        | Error::Infeasible(_)
        | Error::RankDeficient(_)
        | Error::Diverged { .. } => LiwStatus::Numeric,
    }
}

struct Fail(LiwStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> LiwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LiwStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LiwStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LiwStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LiwStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn liw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated when `len > 0`). Returns the buffer size the full message
/// needs, terminator included.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn liw_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Randomized anchor trials needed to hit a shared corner with probability
/// `p` when `c` of `m` corners are shared.
///
/// # Safety
/// `trials` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn liw_num_trials(p: f64, m: usize, c: f64, trials: *mut usize) -> LiwStatus {
    guard(|| {
        let t = out(trials, "trials")?;
        *t = num_trials(p, m, c)?;
        Ok(())
    })
}

/// Writes a synthetic scenario dataset into `out_dir`.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn liw_simulate(scenario: *const c_char, seed: u64, out_dir: *const c_char) -> LiwStatus {
    guard(|| {
        let name = path_arg(scenario, "scenario")?;
        let dir = path_arg(out_dir, "out_dir")?;
        cli::cmd_simulate(&name.to_string_lossy(), seed, &dir, &mut io::sink())?;
        Ok(())
    })
}

/// Replays a dataset directory and writes all run artifacts into
/// `output_dir`. `flags` combines the `LIW_RUN_*` constants.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn liw_run(dataset_dir: *const c_char, output_dir: *const c_char, flags: u32) -> LiwStatus {
    guard(|| {
        let cfg = RunConfig {
            loop_closure: flags & LIW_RUN_NO_LOOP == 0,
            wheel_factor: flags & LIW_RUN_NO_WHEEL == 0,
            ground_factor: flags & LIW_RUN_NO_GROUND == 0,
            ..RunConfig::new(path_arg(dataset_dir, "dataset_dir")?, path_arg(output_dir, "output_dir")?)
        };
        match cli::cmd_run(&cfg, &mut io::sink())? {
            cli::EXIT_OK => Ok(()),
            _ => Err(Fail(LiwStatus::NotReady, "initialization never succeeded".into())),
        }
    })
}

/// Streaming front-end (odometry only, no loop closure).
pub struct LiwTracker {
    tracker: Tracker,
    last: Option<Pose2>,
    frames: usize,
}

/// Creates a tracker. `calib_path` may be null for the default calibration.
///
/// # Safety
/// `calib_path` must be null or a valid string; `out_handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_new(calib_path: *const c_char, out_handle: *mut *mut LiwTracker) -> LiwStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        *slot = ptr::null_mut();
        let calib = if calib_path.is_null() {
            Calibration::default()
        } else {
            Calibration::load(&path_arg(calib_path, "calib_path")?)?
        };
        let tracker = Tracker::new(FrontendConfig::default(), calib)?;
        *slot = Box::into_raw(Box::new(LiwTracker {
            tracker,
            last: None,
            frames: 0,
        }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `liw_tracker_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_free(handle: *mut LiwTracker) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be live; `accel` and `gyro` must point to 3 doubles each.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_push_imu(
    handle: *mut LiwTracker,
    stamp: f64,
    accel: *const f64,
    gyro: *const f64,
) -> LiwStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        if accel.is_null() || gyro.is_null() {
            return Err(null("accel or gyro"));
        }
        let a = std::slice::from_raw_parts(accel, 3);
        let g = std::slice::from_raw_parts(gyro, 3);
        h.tracker.push_imu(ImuSample {
            stamp,
            accel: Vector3::new(a[0], a[1], a[2]),
            gyro: Vector3::new(g[0], g[1], g[2]),
        })?;
        Ok(())
    })
}

/// Planar wheel-odometry pose of the chassis.
///
/// # Safety
/// `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_push_wheel(handle: *mut LiwTracker, stamp: f64, pose: LiwPose2) -> LiwStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        h.tracker.push_wheel(WheelOdomSample {
            stamp,
            pose: Pose2::new(pose.yaw, pose.x, pose.y).to_pose3(),
        })?;
        Ok(())
    })
}

/// One scan of `n` beams starting at `angle_min`; non-finite ranges mean no
/// return.
///
/// # Safety
/// `handle` must be live; `ranges` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_push_scan(
    handle: *mut LiwTracker,
    stamp: f64,
    angle_min: f64,
    angle_increment: f64,
    range_min: f64,
    range_max: f64,
    ranges: *const f64,
    n: usize,
) -> LiwStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        if ranges.is_null() {
            return Err(null("ranges"));
        }
        if n < 2 || !(angle_increment > 0.0) || !(range_max > range_min) {
            return Err(Fail(LiwStatus::InvalidArgument, "bad scan geometry".into()));
        }
        h.tracker.push_scan(LaserScan {
            stamp,
            angle_min,
            angle_max: angle_min + (n - 1) as f64 * angle_increment,
            angle_increment,
            range_min,
            range_max,
            ranges: std::slice::from_raw_parts(ranges, n).to_vec(),
        })?;
        Ok(())
    })
}

fn absorb(h: &mut LiwTracker, results: Vec<liwslam::frontend::FrameResult>, processed: *mut usize) {
    let n = results.len();
    if let Some(r) = results.last() {
        h.last = Some(r.chassis.to_pose2());
    }
    h.frames += n;
    if let Some(p) = unsafe { processed.as_mut() } {
        *p = n;
    }
}

/// Tracks every scan whose IMU and wheel data are complete. `processed`
/// (nullable) receives the number of frames produced.
///
/// # Safety
/// `handle` must be live; `processed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_step(handle: *mut LiwTracker, processed: *mut usize) -> LiwStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        let results = h.tracker.step()?;
        absorb(h, results, processed);
        Ok(())
    })
}

/// Tracks all remaining buffered scans at end of stream.
///
/// # Safety
/// `handle` must be live; `processed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_finish(handle: *mut LiwTracker, processed: *mut usize) -> LiwStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        let results = h.tracker.finish()?;
        absorb(h, results, processed);
        Ok(())
    })
}

/// Latest tracked chassis pose. `LIW_STATUS_NOT_READY` before the first
/// tracked frame.
///
/// # Safety
/// `handle` must be live; `pose` must be valid.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_pose(handle: *const LiwTracker, pose: *mut LiwPose2) -> LiwStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let p = out(pose, "pose")?;
        let last = h.last.ok_or_else(|| Fail(LiwStatus::NotReady, "no frame tracked yet".into()))?;
        *p = last.into();
        Ok(())
    })
}

/// Number of frames tracked so far (0 for a null handle).
///
/// # Safety
/// `handle` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn liw_tracker_frames(handle: *const LiwTracker) -> usize {
    handle.as_ref().map_or(0, |h| h.frames)
}

/// Keyframe database for global localization.
pub struct LiwDatabase {
    db: LoopDatabase,
    cfg: PipelineConfig,
}

/// Loads a keyframe database written by a run (`keyframes.txt`).
///
/// # Safety
/// `path` must be a valid string; `out_handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn liw_database_load(path: *const c_char, out_handle: *mut *mut LiwDatabase) -> LiwStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        *slot = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let records = loopdetect::load_keyframes(&path)?;
        if records.is_empty() {
            return Err(Fail(LiwStatus::InvalidArgument, "database holds no keyframes".into()));
        }
        let cfg = PipelineConfig::default();
        let mut db = LoopDatabase::new(cfg.loops);
        for r in records {
            db.insert(r);
        }
        *slot = Box::into_raw(Box::new(LiwDatabase { db, cfg }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `liw_database_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn liw_database_free(handle: *mut LiwDatabase) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn liw_database_len(handle: *const LiwDatabase) -> usize {
    handle.as_ref().map_or(0, |h| h.db.len())
}

/// Localizes a query (keyframe file or scan CSV). On success writes the
/// query's LiDAR pose in the map and the matched keyframe id; `millis`
/// (nullable) receives the search time. `LIW_STATUS_NO_MATCH` when no
/// candidate passes verification.
///
/// # Safety
/// `handle` must be live, `query_path` a valid string, `pose` and
/// `keyframe_id` valid pointers, `millis` null or valid.
#[no_mangle]
pub unsafe extern "C" fn liw_database_localize(
    handle: *const LiwDatabase,
    query_path: *const c_char,
    pose: *mut LiwPose2,
    keyframe_id: *mut u64,
    millis: *mut f64,
) -> LiwStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let pose = out(pose, "pose")?;
        let id = out(keyframe_id, "keyframe_id")?;
        let query = cli::load_query(&path_arg(query_path, "query_path")?, &h.cfg.frontend)?;
        let (loc, _, elapsed) = cli::localize(&h.db, &query, h.cfg.loops.seed);
        if let Some(m) = millis.as_mut() {
            *m = elapsed.as_secs_f64() * 1e3;
        }
        let loc = loc.ok_or_else(|| Fail(LiwStatus::NoMatch, "no match".into()))?;
        *pose = loc.pose.into();
        *id = loc.constraint.from_id;
        Ok(())
    })
}
