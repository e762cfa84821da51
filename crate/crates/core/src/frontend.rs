//! Front-end odometry: initialization gate, sliding-window joint
//! optimization over IMU body states, dual reference frames and keyframe
//! selection.
//!
//! The tracker estimates in its own odometry frame (gravity aligned, first
//! chassis pose at the origin). Loop-closure corrections are kept as a planar
//! odometry-to-map offset that is applied to emitted keyframes.

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::dataio::{imu_window, scan_to_points, Calibration, Dataset, ImuSample, LaserScan, WheelOdomSample};
use crate::error::{Error, Result};
use crate::factors::{match_lines, wheel_delta, GroundFactor, LineFactor, MatchConfig, State, VectorPrior, WheelDelta, WheelFactor};
use crate::features::{extract_features, Corner, FeatureConfig, LineIndex, LineSegment, LINE_BUCKETS};
use crate::geometry::{so3_log, Pose2, Pose3, RotVec};
use crate::loopdetect::KeyframeRecord;
use crate::mapping::{GridMap, MapConfig};
use crate::preintegration::{integrate, GravityVector, ImuBias, ImuFactor, Preintegration};
use crate::solver::{self, Loss, Manifold, Problem, ResidualBlock, SolveSummary, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    /// Sliding window size w; the window holds w + 1 states.
    pub window: usize,
    /// Non-stationary frames needed before the initialization check (k).
    pub init_frames: usize,
    /// Line matches every initialization frame needs against frame 0.
    pub init_min_matches: usize,
    /// Frames absorbed by a reference frame before it is replaced (N_ref).
    pub ref_capacity: usize,
    /// Wheel distance below which a frame counts as stationary (m).
    pub stationary_d: f64,
    /// Frames with less wheel travel than this feed the gravity estimate (m).
    pub still_d: f64,
    /// Longest stationary prefix kept while waiting to initialize.
    pub max_prefix: usize,
    /// Below this many matches the newest frame is weakly constrained.
    pub min_matches: usize,
    /// Lines are split into pieces no longer than this (m).
    pub chunk_len: f64,
    pub cell_rho: f64,
    pub cell_along: f64,
    pub kf_dist: f64,
    pub kf_angle: f64,
    pub kf_interval: f64,
    /// Huber threshold on the whitened line residual.
    pub line_huber: f64,
    /// Match-then-solve passes per frame.
    pub match_rounds: usize,
    pub max_iters: usize,
    pub prior_sigma_v: f64,
    pub prior_sigma_ba: f64,
    pub prior_sigma_bg: f64,
    /// Wheel samples further apart than this are a gap (s).
    pub wheel_max_gap: f64,
    /// Min spacing of the scan points kept in keyframes (m).
    pub point_spacing: f64,
    /// Corners seen within this many seconds join a keyframe's set.
    pub corner_horizon: f64,
    /// Corners closer than this are one corner (m).
    pub corner_merge: f64,
    /// Sightings a corner needs before it is used.
    pub corner_min_hits: u32,
    pub use_wheel: bool,
    pub use_ground: bool,
    pub matching: MatchConfig,
    pub features: FeatureConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            window: 5,
            init_frames: 10,
            init_min_matches: 15,
            ref_capacity: 20,
            stationary_d: 0.005,
            still_d: 1e-4,
            max_prefix: 50,
            min_matches: 3,
            chunk_len: 1.0,
            cell_rho: 0.2,
            cell_along: 1.0,
            kf_dist: 0.2,
            kf_angle: 10f64.to_radians(),
            kf_interval: 2.0,
            line_huber: 3.0,
            match_rounds: 2,
            max_iters: 10,
            prior_sigma_v: 0.1,
            prior_sigma_ba: 0.05,
            prior_sigma_bg: 0.005,
            wheel_max_gap: 0.2,
            point_spacing: 0.05,
            corner_horizon: 6.0,
            corner_merge: 0.15,
            corner_min_hits: 2,
            use_wheel: true,
            use_ground: true,
            matching: MatchConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

/// Splits `l` into equal pieces no longer than `max_len`, keeping the line.
pub fn chunk_line(l: &LineSegment, max_len: f64) -> Vec<LineSegment> {
    let n = (l.length() / max_len).ceil().max(1.0) as usize;
    if n == 1 {
        return vec![*l];
    }
    let step = (l.p_end - l.p_start) / n as f64;
    (0..n)
        .map(|k| LineSegment {
            p_start: l.p_start + step * k as f64,
            p_end: l.p_start + step * (k + 1) as f64,
            support: (l.support / n).max(1),
            ..*l
        })
        .collect()
}

pub type CellKey = (i64, i64, i64);

/// Direction bin, offset bin and along-line bin of a segment's midpoint.
pub fn cell_key(l: &LineSegment, rho_res: f64, along_res: f64) -> CellKey {
    let a = l.undirected_angle().rem_euclid(PI);
    let bin = ((a / PI * LINE_BUCKETS as f64) as i64).min(LINE_BUCKETS as i64 - 1);
    let d = Vector2::new(a.cos(), a.sin());
    let n = Vector2::new(-d.y, d.x);
    let m = l.midpoint();
    (bin, (n.dot(&m) / rho_res).floor() as i64, (d.dot(&m) / along_res).floor() as i64)
}

/// Line set expressed in the LiDAR frame of its first frame (`anchor`).
#[derive(Debug, Clone)]
pub struct ReferenceFrame {
    /// World pose of the LiDAR frame the lines live in.
    pub anchor: Pose3,
    pub lines: Vec<LineSegment>,
    /// Frames absorbed so far.
    pub count: usize,
    pub capacity: usize,
    cells: HashMap<CellKey, usize>,
    index: LineIndex,
}

impl ReferenceFrame {
    pub fn new(anchor: Pose3, capacity: usize) -> Self {
        ReferenceFrame {
            anchor,
            lines: Vec::new(),
            count: 0,
            capacity,
            cells: HashMap::new(),
            index: LineIndex::build(&[]),
        }
    }

    /// Adds the lines of a frame whose LiDAR pose is `lidar`. Cells that
    /// already held a line before this frame keep it. Returns lines added.
    pub fn absorb(&mut self, lines: &[LineSegment], lidar: &Pose3, rho_res: f64, along_res: f64) -> usize {
        let (rot, t) = crate::factors::planar(&self.anchor.between(lidar));
        let occupied: HashSet<CellKey> = self.cells.keys().copied().collect();
        let mut added = 0;
        for l in lines {
            let mapped = l.transformed(&rot, &t);
            let key = cell_key(&mapped, rho_res, along_res);
            if occupied.contains(&key) {
                continue;
            }
            self.cells.entry(key).or_insert(self.lines.len());
            self.lines.push(mapped);
            added += 1;
        }
        self.count += 1;
        if added > 0 {
            self.index = LineIndex::build(&self.lines);
        }
        added
    }

    pub fn index(&self) -> &LineIndex {
        &self.index
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Current and backup reference frames.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub current: Option<ReferenceFrame>,
    pub backup: Option<ReferenceFrame>,
    capacity: usize,
    rho_res: f64,
    along_res: f64,
}

impl ReferenceSet {
    pub fn new(capacity: usize, rho_res: f64, along_res: f64) -> Self {
        ReferenceSet {
            current: None,
            backup: None,
            capacity: capacity.max(1),
            rho_res,
            along_res,
        }
    }

    pub fn update(&mut self, lines: &[LineSegment], lidar: &Pose3) {
        let (cap, rho, along) = (self.capacity, self.rho_res, self.along_res);
        let cur = self.current.get_or_insert_with(|| ReferenceFrame::new(*lidar, cap));
        cur.absorb(lines, lidar, rho, along);
        if cur.count >= cap {
            self.current = self.backup.take();
        } else if cur.count * 2 >= cap {
            self.backup
                .get_or_insert_with(|| ReferenceFrame::new(*lidar, cap))
                .absorb(lines, lidar, rho, along);
        }
    }
}

/// Emits a keyframe on enough translation, rotation or elapsed time.
#[derive(Debug, Clone, Copy)]
pub struct KeyframePolicy {
    pub dist: f64,
    pub angle: f64,
    pub interval: f64,
    last: Option<(f64, Pose3)>,
}

impl KeyframePolicy {
    pub fn new(dist: f64, angle: f64, interval: f64) -> Self {
        KeyframePolicy {
            dist,
            angle,
            interval,
            last: None,
        }
    }

    pub fn check(&mut self, stamp: f64, pose: &Pose3) -> bool {
        let take = match &self.last {
            None => true,
            Some((t, p)) => {
                let rel = p.between(pose);
                rel.translation.norm() >= self.dist
                    || so3_log(&rel.rotation).norm() >= self.angle
                    || stamp - t >= self.interval - 1e-9
            }
        };
        if take {
            self.last = Some((stamp, *pose));
        }
        take
    }
}

/// Everything the tracker needs about one scan.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub stamp: f64,
    /// Chunked line features in the LiDAR frame.
    pub lines: Vec<LineSegment>,
    /// Lines before chunking.
    pub raw_lines: usize,
    pub corners: Vec<Corner>,
    /// Decimated scan points in the LiDAR frame.
    pub points: Vec<Vector2<f64>>,
    /// IMU samples over `[previous stamp, stamp]`.
    pub imu: Option<Vec<ImuSample>>,
    pub wheel_pose: Option<Pose3>,
    /// Chassis motion since the previous frame, from wheel odometry.
    pub wheel_increment: Option<Pose3>,
    pub wheel: Option<WheelDelta>,
}

/// Tracking outcome of one frame, in the odometry frame.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub stamp: f64,
    pub state: State,
    pub chassis: Pose3,
    pub lidar: Pose3,
    pub lines: usize,
    pub matches: usize,
    /// Few line matches and no wheel data: IMU-only propagation.
    pub degraded: bool,
    /// Keyframe sent to the back-end, with its pose in the map frame.
    pub keyframe: Option<KeyframeRecord>,
    /// Seconds spent on this frame.
    pub time: f64,
}

#[derive(Debug, Clone)]
struct WindowFrame {
    bundle: FrameBundle,
    state: State,
    pre: Option<Preintegration>,
    matches: usize,
}

struct RefView<'a> {
    lines: &'a [LineSegment],
    index: &'a LineIndex,
    anchor: Pose3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedCorner {
    pub position: Vector2<f64>,
    pub hits: u32,
    pub last_seen: f64,
}

/// Corners of recent frames merged in the odometry frame, so a keyframe's
/// descriptor set is not limited to what one scan sees.
#[derive(Debug, Clone, Default)]
pub struct CornerTrack {
    pub entries: Vec<TrackedCorner>,
}

impl CornerTrack {
    /// `corners` are odometry-frame positions.
    pub fn add(&mut self, corners: &[Vector2<f64>], stamp: f64, merge: f64) {
        for c in corners {
            let nearest = self
                .entries
                .iter_mut()
                .map(|e| ((e.position - c).norm(), e))
                .filter(|(d, _)| *d < merge)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match nearest {
                Some((_, e)) => {
                    e.hits += 1;
                    e.position += (c - e.position) / e.hits as f64;
                    e.last_seen = stamp;
                }
                None => self.entries.push(TrackedCorner {
                    position: *c,
                    hits: 1,
                    last_seen: stamp,
                }),
            }
        }
    }

    pub fn prune(&mut self, before: f64) {
        self.entries.retain(|e| e.last_seen >= before);
    }

    /// Corners with enough sightings, in the frame whose odometry pose is `frame`.
    pub fn snapshot(&self, frame: &Pose2, min_hits: u32) -> Vec<Vector2<f64>> {
        let inv = frame.inverse();
        self.entries
            .iter()
            .filter(|e| e.hits >= min_hits)
            .map(|e| inv.transform_point(&e.position))
            .collect()
    }
}

/// Decimates points so consecutive kept points are at least `spacing` apart.
pub fn decimate_points(points: &[Vector2<f64>], spacing: f64) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = Vec::new();
    for p in points {
        if out.last().is_none_or(|q| (p - q).norm() >= spacing) {
            out.push(*p);
        }
    }
    out
}

/// Estimated attitude that makes the averaged specific force point up and
/// gives the chassis zero yaw.
pub fn level_attitude(mean_accel: &Vector3<f64>, calib: &Calibration) -> Rotation3<f64> {
    let tilt = Rotation3::rotation_between(mean_accel, &Vector3::z()).unwrap_or_else(Rotation3::identity);
    let chassis = tilt.matrix() * calib.T_imu_base.rotation;
    let yaw = chassis[(1, 0)].atan2(chassis[(0, 0)]);
    Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw) * tilt
}

pub struct Tracker {
    pub cfg: FrontendConfig,
    pub calib: Calibration,
    gravity: GravityVector,
    imu: Vec<ImuSample>,
    wheel: Vec<WheelOdomSample>,
    pending: VecDeque<LaserScan>,
    prev: Option<(f64, Option<Pose3>)>,
    init_buffer: Vec<FrameBundle>,
    nonstationary: usize,
    window: VecDeque<WindowFrame>,
    refs: ReferenceSet,
    policy: KeyframePolicy,
    corners: CornerTrack,
    next_kf: u64,
    offset: Pose2,
    init_attempts: usize,
    initial_state: Option<State>,
}

impl Tracker {
    pub fn new(cfg: FrontendConfig, calib: Calibration) -> Result<Self> {
        calib.validate()?;
        if cfg.window == 0 || cfg.init_frames == 0 {
            return Err(Error::InvalidArgument("window and init_frames must be positive".into()));
        }
        Ok(Tracker {
            gravity: GravityVector::down(calib.gravity_magnitude),
            imu: Vec::new(),
            wheel: Vec::new(),
            pending: VecDeque::new(),
            prev: None,
            init_buffer: Vec::new(),
            nonstationary: 0,
            window: VecDeque::new(),
            refs: ReferenceSet::new(cfg.ref_capacity, cfg.cell_rho, cfg.cell_along),
            policy: KeyframePolicy::new(cfg.kf_dist, cfg.kf_angle, cfg.kf_interval),
            corners: CornerTrack::default(),
            next_kf: 0,
            offset: Pose2::identity(),
            init_attempts: 0,
            initial_state: None,
            cfg,
            calib,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initial_state.is_some()
    }

    /// State of the first frame after initialization.
    pub fn initial_state(&self) -> Option<State> {
        self.initial_state
    }

    pub fn init_attempts(&self) -> usize {
        self.init_attempts
    }

    pub fn references(&self) -> &ReferenceSet {
        &self.refs
    }

    pub fn odom_to_map(&self) -> Pose2 {
        self.offset
    }

    /// Left-composes a map-frame correction onto the odometry-to-map offset.
    pub fn apply_correction(&mut self, correction: &Pose2) {
        self.offset = correction.compose(&self.offset);
    }

    pub fn push_imu(&mut self, s: ImuSample) -> Result<()> {
        if self.imu.last().is_some_and(|l| s.stamp <= l.stamp) {
            return Err(Error::Protocol(format!("IMU stamp {} is not increasing", s.stamp)));
        }
        self.imu.push(s);
        Ok(())
    }

    pub fn push_wheel(&mut self, s: WheelOdomSample) -> Result<()> {
        if self.wheel.last().is_some_and(|l| s.stamp <= l.stamp) {
            return Err(Error::Protocol(format!("wheel stamp {} is not increasing", s.stamp)));
        }
        self.wheel.push(s);
        Ok(())
    }

    pub fn push_scan(&mut self, scan: LaserScan) -> Result<()> {
        let last = self.pending.back().map(|s| s.stamp).or(self.prev.map(|p| p.0));
        if last.is_some_and(|t| scan.stamp <= t) {
            return Err(Error::Protocol(format!("scan stamp {} is not increasing", scan.stamp)));
        }
        self.pending.push_back(scan);
        Ok(())
    }

    fn covered(&self, t: f64) -> bool {
        self.imu.last().is_some_and(|s| s.stamp >= t) && self.wheel.last().is_some_and(|s| s.stamp >= t)
    }

    /// Processes queued scans whose IMU and wheel data have arrived.
    pub fn step(&mut self) -> Result<Vec<FrameResult>> {
        let mut out = Vec::new();
        while self.pending.front().is_some_and(|s| self.covered(s.stamp)) {
            let scan = self.pending.pop_front().unwrap();
            out.extend(self.process_scan(scan)?);
        }
        Ok(out)
    }

    /// Processes every queued scan with whatever sensor data is available.
    pub fn finish(&mut self) -> Result<Vec<FrameResult>> {
        let mut out = Vec::new();
        while let Some(scan) = self.pending.pop_front() {
            out.extend(self.process_scan(scan)?);
        }
        Ok(out)
    }

    fn wheel_at(&self, t: f64) -> Option<Pose3> {
        let s = &self.wheel;
        let idx = s.partition_point(|w| w.stamp < t);
        if idx < s.len() && idx > 0 && s[idx].stamp - s[idx - 1].stamp > self.cfg.wheel_max_gap {
            return None;
        }
        crate::dataio::wheel_pose_at(s, t).ok()
    }

    fn make_bundle(&mut self, scan: &LaserScan) -> FrameBundle {
        let feats = extract_features(scan, &self.cfg.features);
        let lines: Vec<LineSegment> = feats.lines.iter().flat_map(|l| chunk_line(l, self.cfg.chunk_len)).collect();
        let pts: Vec<Vector2<f64>> = scan_to_points(scan).iter().map(|p| p.xy).collect();
        let wheel_pose = self.wheel_at(scan.stamp);
        let (imu, increment) = match self.prev {
            Some((t0, prev_wheel)) => (
                imu_window(&self.imu, t0, scan.stamp).ok(),
                match (prev_wheel, wheel_pose) {
                    (Some(a), Some(b)) => Some(a.between(&b)),
                    _ => None,
                },
            ),
            None => (None, None),
        };
        self.prev = Some((scan.stamp, wheel_pose));
        let keep_from = scan.stamp - 1.0;
        let cut = self.imu.partition_point(|s| s.stamp < keep_from).saturating_sub(1);
        self.imu.drain(..cut);
        let cut = self.wheel.partition_point(|s| s.stamp < keep_from).saturating_sub(1);
        self.wheel.drain(..cut);
        FrameBundle {
            stamp: scan.stamp,
            raw_lines: feats.lines.len(),
            lines,
            corners: feats.corners,
            points: decimate_points(&pts, self.cfg.point_spacing),
            imu,
            wheel_pose,
            wheel: increment.map(|inc| wheel_delta(&Pose3::identity(), &inc)),
            wheel_increment: increment,
        }
    }

    pub fn process_scan(&mut self, scan: LaserScan) -> Result<Vec<FrameResult>> {
        let start = Instant::now();
        let bundle = self.make_bundle(&scan);
        let mut out = if self.is_initialized() {
            vec![self.track(bundle)?]
        } else {
            self.initialize_step(bundle)?
        };
        let dt = start.elapsed().as_secs_f64();
        if let Some(last) = out.last_mut() {
            last.time = dt;
        }
        Ok(out)
    }

    fn lidar_pose(&self, s: &State) -> Pose3 {
        s.pose().compose(&self.calib.imu_lidar())
    }

    fn chassis_pose(&self, s: &State) -> Pose3 {
        s.pose().compose(&self.calib.T_imu_base)
    }

    fn clear_init(&mut self) {
        self.init_buffer.clear();
        self.nonstationary = 0;
    }

    fn initialize_step(&mut self, b: FrameBundle) -> Result<Vec<FrameResult>> {
        let stationary = b.wheel.is_some_and(|w| w.d < self.cfg.stationary_d);
        if self.nonstationary == 0 && stationary && self.init_buffer.len() >= self.cfg.max_prefix.max(1) {
            self.init_buffer.remove(0);
        }
        if !stationary {
            self.nonstationary += 1;
        }
        self.init_buffer.push(b);
        if self.nonstationary < self.cfg.init_frames {
            return Ok(Vec::new());
        }
        self.init_attempts += 1;
        match self.try_initialize()? {
            Some(results) => Ok(results),
            None => {
                self.clear_init();
                Ok(Vec::new())
            }
        }
    }

    /// Checks the buffered frames and, if they pass, solves them jointly and
    /// starts tracking.
    fn try_initialize(&mut self) -> Result<Option<Vec<FrameResult>>> {
        let buf = std::mem::take(&mut self.init_buffer);
        let t_bl = self.calib.T_base_lidar;
        // chassis poses relative to frame 0
        let mut rel = vec![Pose3::identity()];
        for b in &buf[1..] {
            match b.wheel_increment {
                Some(inc) => rel.push(rel.last().unwrap().compose(&inc)),
                None => return Ok(None),
            }
        }
        let ref_index = LineIndex::build(&buf[0].lines);
        for (b, c) in buf.iter().zip(&rel).skip(1) {
            let guess = t_bl.inverse().compose(c).compose(&t_bl);
            if match_lines(&b.lines, &buf[0].lines, &ref_index, &guess, &self.cfg.matching).len() < self.cfg.init_min_matches {
                return Ok(None);
            }
        }
        if buf[1..].iter().any(|b| b.imu.is_none()) {
            return Ok(None);
        }

        // stationary prefix gives gravity direction and gyro bias
        let first_moving = buf[1..]
            .iter()
            .position(|b| !b.wheel.is_some_and(|w| w.d < self.cfg.still_d))
            .map_or(buf.len(), |i| i + 1);
        let prefix: Vec<&ImuSample> = buf[1..first_moving.max(1)].iter().flat_map(|b| b.imu.iter().flatten()).collect();
        let samples: Vec<&ImuSample> = if prefix.len() >= 10 {
            prefix.clone()
        } else {
            buf[1..].iter().flat_map(|b| b.imu.iter().flatten()).collect()
        };
        let n = samples.len() as f64;
        let mean_acc = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
        let gyro_bias = if prefix.len() >= 10 {
            prefix.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / prefix.len() as f64
        } else {
            Vector3::zeros()
        };
        let bias = ImuBias::new(Vector3::zeros(), gyro_bias);
        let r0 = level_attitude(&mean_acc, &self.calib);
        let body0 = Pose3::from_parts(*r0.matrix(), -(r0.matrix() * self.calib.T_imu_base.translation));
        let chassis0 = body0.compose(&self.calib.T_imu_base);
        let base_body = self.calib.T_imu_base.inverse();

        let mut frames: Vec<WindowFrame> = Vec::with_capacity(buf.len());
        for (b, c) in buf.iter().zip(&rel) {
            let body = chassis0.compose(c).compose(&base_body);
            let pre = match &b.imu {
                Some(s) if !frames.is_empty() => Some(integrate(s, &bias, &self.calib.imu_noise)?),
                _ => None,
            };
            frames.push(WindowFrame {
                bundle: b.clone(),
                state: State {
                    bias,
                    ..State::from_pose(&body, b.stamp)
                },
                pre,
                matches: 0,
            });
        }
        let m = frames.len();
        for i in 0..m {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(m - 1));
            let dt = frames[b].state.stamp - frames[a].state.stamp;
            if dt > 0.0 {
                frames[i].state.v = (frames[b].state.p - frames[a].state.p) / dt;
            }
        }

        let lidar0 = self.lidar_pose(&frames[0].state);
        let view = RefView {
            lines: &buf[0].lines,
            index: &ref_index,
            anchor: lidar0,
        };
        let summary = self.solve_frames(&mut frames, &view)?;
        if !(summary.final_cost <= summary.initial_cost) || frames.iter().any(|f| !f.state.is_finite()) {
            return Ok(None);
        }

        self.initial_state = Some(frames[0].state);
        self.refs.update(&buf[0].lines, &lidar0);
        let mut results = Vec::with_capacity(m);
        for f in &frames {
            results.push(self.finish_frame(f, false));
        }
        let keep = m.saturating_sub(self.cfg.window + 1);
        self.window = frames.into_iter().skip(keep).collect();
        self.nonstationary = 0;
        Ok(Some(results))
    }

    fn predict(&self, prev: &State, b: &FrameBundle, pre: Option<&Preintegration>) -> State {
        let g = self.gravity.g_world;
        let mut next = *prev;
        next.stamp = b.stamp;
        let r = prev.rotation();
        let imu_pred = pre.map(|pre| {
            let (alpha, beta, gamma) = pre.corrected(&prev.bias);
            let dt = pre.dt_total;
            (
                prev.p + prev.v * dt + g * (0.5 * dt * dt) + r * alpha,
                prev.v + g * dt + r * beta,
                r * gamma,
            )
        });
        if let Some((_, v, _)) = imu_pred {
            next.v = v;
        }
        match (b.wheel_increment, imu_pred) {
            (Some(inc), _) => {
                let chassis = self.chassis_pose(prev).compose(&inc);
                let body = chassis.compose(&self.calib.T_imu_base.inverse());
                next.p = body.translation;
                next.theta = body.rotvec();
            }
            (None, Some((p, _, rot))) => {
                next.p = p;
                next.theta = RotVec::from_matrix(&rot);
            }
            (None, None) => {}
        }
        next
    }

    fn track(&mut self, b: FrameBundle) -> Result<FrameResult> {
        let prev = self.window.back().expect("initialized tracker has a window").state;
        let pre = match &b.imu {
            Some(s) => integrate(s, &prev.bias, &self.calib.imu_noise).ok(),
            None => None,
        };
        let state = self.predict(&prev, &b, pre.as_ref());
        self.window.push_back(WindowFrame {
            bundle: b,
            state,
            pre,
            matches: 0,
        });
        while self.window.len() > self.cfg.window + 1 {
            self.window.pop_front();
        }
        let mut frames: Vec<WindowFrame> = self.window.drain(..).collect();
        let refs = self.refs.current.take();
        let solved = match &refs {
            Some(r) => {
                let view = RefView {
                    lines: &r.lines,
                    index: r.index(),
                    anchor: r.anchor,
                };
                self.solve_frames(&mut frames, &view)
            }
            None => {
                let empty = LineIndex::build(&[]);
                let view = RefView {
                    lines: &[],
                    index: &empty,
                    anchor: Pose3::identity(),
                };
                self.solve_frames(&mut frames, &view)
            }
        };
        self.refs.current = refs;
        self.window = frames.into();
        if let Err(e) = solved {
            log::warn!("window solve failed at {:.3}: {e}", state.stamp);
        }
        let newest = self.window.back().unwrap().clone();
        let lidar = self.lidar_pose(&newest.state);
        self.refs.update(&newest.bundle.lines, &lidar);
        let degraded = newest.matches < self.cfg.min_matches && newest.bundle.wheel_increment.is_none();
        Ok(self.finish_frame(&newest, degraded))
    }

    fn finish_frame(&mut self, f: &WindowFrame, degraded: bool) -> FrameResult {
        let chassis = self.chassis_pose(&f.state);
        let lidar = self.lidar_pose(&f.state);
        let lidar2 = lidar.to_pose2();
        let seen: Vec<Vector2<f64>> = f.bundle.corners.iter().map(|c| lidar2.transform_point(&c.position)).collect();
        self.corners.add(&seen, f.state.stamp, self.cfg.corner_merge);
        self.corners.prune(f.state.stamp - self.cfg.corner_horizon);
        let keyframe = if self.policy.check(f.state.stamp, &f.state.pose()) {
            let id = self.next_kf;
            self.next_kf += 1;
            Some(KeyframeRecord {
                id,
                stamp: f.state.stamp,
                pose: self.offset.compose(&lidar2),
                corners: self.corners.snapshot(&lidar2, self.cfg.corner_min_hits),
                points: f.bundle.points.clone(),
            })
        } else {
            None
        };
        FrameResult {
            stamp: f.state.stamp,
            state: f.state,
            chassis,
            lidar,
            lines: f.bundle.raw_lines,
            matches: f.matches,
            degraded,
            keyframe,
            time: 0.0,
        }
    }

    fn vb_prior_sqrt(&self) -> DMatrix<f64> {
        let c = &self.cfg;
        let mut d = Vec::with_capacity(9);
        for s in [c.prior_sigma_v, c.prior_sigma_ba, c.prior_sigma_bg] {
            d.extend([1.0 / s; 3]);
        }
        DMatrix::from_diagonal(&DVector::from_vec(d))
    }

    /// Joint solve with the oldest pose fixed and a prior on its speed-bias.
    fn solve_frames(&self, frames: &mut [WindowFrame], view: &RefView) -> Result<SolveSummary> {
        let opts = SolverOptions {
            max_iters: self.cfg.max_iters,
            ..SolverOptions::default()
        };
        let line_w = DMatrix::identity(2, 2) / self.calib.line_sigma;
        let mut first: Option<SolveSummary> = None;
        let mut last = None;
        for _ in 0..self.cfg.match_rounds.max(1) {
            let mut p = Problem::new();
            let mut slots = Vec::with_capacity(frames.len());
            for f in frames.iter() {
                let (pv, tv, vb) = f.state.slot_values();
                slots.push((
                    p.add_slot(Manifold::Euclidean(3), &pv),
                    p.add_slot(Manifold::RotVec, &tv),
                    p.add_slot(Manifold::Euclidean(9), &vb),
                ));
            }
            p.set_fixed(slots[0].0, true);
            p.set_fixed(slots[0].1, true);
            p.add_block(ResidualBlock::new(
                vec![slots[0].2],
                Box::new(VectorPrior {
                    mean: frames[0].state.slot_values().2.to_vec(),
                }),
                self.vb_prior_sqrt(),
            ));
            for i in 1..frames.len() {
                let (ps, ts, vs) = slots[i];
                let (pp, tp, vp) = slots[i - 1];
                let f = &mut frames[i];
                let guess = view.anchor.between(&f.state.pose().compose(&self.calib.imu_lidar()));
                let matches = match_lines(&f.bundle.lines, view.lines, view.index, &guess, &self.cfg.matching);
                f.matches = matches.len();
                for m in &matches {
                    if let Ok(factor) = LineFactor::anchored(m, &view.anchor, &self.calib) {
                        p.add_block(
                            ResidualBlock::new(vec![ps, ts], Box::new(factor), line_w.clone())
                                .with_loss(Loss::Huber(self.cfg.line_huber)),
                        );
                    }
                }
                if let Some(pre) = &f.pre {
                    let factor = ImuFactor::new(pre.clone(), self.gravity);
                    let w = factor.sqrt_information();
                    p.add_block(ResidualBlock::new(vec![pp, tp, vp, ps, ts, vs], Box::new(factor), w));
                }
                if self.cfg.use_wheel {
                    if let Some(d) = f.bundle.wheel {
                        let factor = WheelFactor::new(d, &self.calib);
                        let w = factor.sqrt_information(&self.calib);
                        p.add_block(ResidualBlock::new(vec![pp, tp, ps, ts], Box::new(factor), w));
                    }
                }
                if self.cfg.use_ground {
                    p.add_block(ResidualBlock::new(
                        vec![ps, ts],
                        Box::new(GroundFactor::new(&self.calib)),
                        GroundFactor::sqrt_information(&self.calib),
                    ));
                }
            }
            let summary = solver::solve(&mut p, &opts)?;
            for (f, (ps, ts, vs)) in frames.iter_mut().zip(&slots) {
                let s = State::from_slots(p.value(*ps), p.value(*ts), p.value(*vs), f.state.stamp);
                if s.is_finite() {
                    f.state = s;
                }
            }
            if first.is_none() {
                first = Some(summary.clone());
            }
            last = Some(summary);
        }
        let mut out = last.unwrap();
        out.initial_cost = first.unwrap().initial_cost;
        Ok(out)
    }
}

/// One tracked frame with its keyframe association.
#[derive(Debug, Clone)]
pub struct FrameLog {
    pub stamp: f64,
    /// Odometry-frame chassis pose.
    pub chassis: Pose3,
    pub lidar: Pose3,
    /// Latest keyframe at or before this frame.
    pub keyframe_id: Option<u64>,
    pub lines: usize,
    pub matches: usize,
    pub degraded: bool,
    pub time: f64,
}

pub struct RunOutput {
    pub frames: Vec<FrameLog>,
    /// Odometry-frame LiDAR pose of every keyframe.
    pub keyframe_odom: HashMap<u64, Pose2>,
    pub backend: Backend,
    pub initial_state: Option<State>,
    pub init_attempts: usize,
}

impl RunOutput {
    /// Chassis poses as tracked.
    pub fn frontend_trajectory(&self) -> Vec<(f64, Pose3)> {
        self.frames.iter().map(|f| (f.stamp, f.chassis)).collect()
    }

    /// Chassis poses re-anchored on the optimized keyframe poses.
    pub fn optimized_trajectory(&self) -> Vec<(f64, Pose3)> {
        if self.backend.loops.is_empty() {
            return self.frontend_trajectory();
        }
        let optimized: HashMap<u64, Pose2> = self.backend.trajectory().into_iter().map(|(id, _, p)| (id, p)).collect();
        self.frames
            .iter()
            .map(|f| {
                let delta = f
                    .keyframe_id
                    .and_then(|id| Some(optimized.get(&id)?.compose(&self.keyframe_odom.get(&id)?.inverse())))
                    .unwrap_or_else(Pose2::identity);
                (f.stamp, delta.to_pose3().compose(&f.chassis))
            })
            .collect()
    }

    pub fn keyframes(&self) -> Vec<&KeyframeRecord> {
        self.backend.db.records().collect()
    }

    /// Occupancy grid from the optimized keyframes.
    pub fn build_map(&self, cfg: MapConfig) -> GridMap {
        let mut map = GridMap::new(cfg);
        for kf in self.backend.db.records() {
            map.integrate_scan(&kf.pose, &kf.points);
        }
        map
    }
}

/// Runs the tracker over a recorded dataset with the back-end in lockstep.
pub fn run_dataset(data: &Dataset, cfg: FrontendConfig, mut backend: Backend) -> Result<RunOutput> {
    let mut tracker = Tracker::new(cfg, data.calib)?;
    let (mut ii, mut wi) = (0, 0);
    let mut frames = Vec::with_capacity(data.scans.len());
    let mut keyframe_odom = HashMap::new();
    let mut last_kf = None;
    let lookahead = 0.05;
    let mut handle = |tracker: &mut Tracker, results: Vec<FrameResult>| -> Result<()> {
        for r in results {
            if let Some(kf) = r.keyframe {
                keyframe_odom.insert(kf.id, r.lidar.to_pose2());
                last_kf = Some(kf.id);
                let reply = backend.add_keyframe(kf)?;
                if let Some(c) = reply.correction {
                    tracker.apply_correction(&c);
                }
            }
            frames.push(FrameLog {
                stamp: r.stamp,
                chassis: r.chassis,
                lidar: r.lidar,
                keyframe_id: last_kf,
                lines: r.lines,
                matches: r.matches,
                degraded: r.degraded,
                time: r.time,
            });
        }
        Ok(())
    };
    for scan in &data.scans {
        while ii < data.imu.len() && data.imu[ii].stamp < scan.stamp + lookahead {
            tracker.push_imu(data.imu[ii])?;
            ii += 1;
        }
        while wi < data.wheel.len() && data.wheel[wi].stamp < scan.stamp + lookahead {
            tracker.push_wheel(data.wheel[wi])?;
            wi += 1;
        }
        tracker.push_scan(scan.clone())?;
        let results = tracker.step()?;
        handle(&mut tracker, results)?;
    }
    let results = tracker.finish()?;
    handle(&mut tracker, results)?;
    Ok(RunOutput {
        frames,
        keyframe_odom,
        backend,
        initial_state: tracker.initial_state(),
        init_attempts: tracker.init_attempts(),
    })
}
