//! Synthetic worlds and sensor streams with exact ground truth.
//!
//! The chassis follows a planar velocity profile: forward speed and yaw rate
//! are given at knots and blended with a smoothstep, so heading and all
//! derivatives are analytic. IMU samples come from those derivatives. Ground
//! truth is then produced by integrating the noise-free samples with the same
//! midpoint rule the estimator uses, which makes the IMU model exact on
//! noise-free data. Scans and wheel odometry are generated from that truth.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Calibration, Dataset, ImuSample, LaserScan, WheelOdomSample};
use crate::error::{Error, Result};
use crate::factors::State;
use crate::geometry::{so3_exp, Pose2, Pose3, RotVec};
use crate::preintegration::{GravityVector, ImuBias};

pub const TRUTH_FILE: &str = "gt.tum";
pub const SCAN_TRUTH_FILE: &str = "scan_walls.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub name: String,
    pub walls: Vec<Wall>,
}

impl World {
    pub fn new(name: &str) -> Self {
        World {
            name: name.to_string(),
            walls: Vec::new(),
        }
    }

    pub fn wall(&mut self, a: (f64, f64), b: (f64, f64)) -> &mut Self {
        let id = self.walls.len();
        self.walls.push(Wall {
            a: Vector2::new(a.0, a.1),
            b: Vector2::new(b.0, b.1),
            id,
        });
        self
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)]) -> &mut Self {
        for w in pts.windows(2) {
            self.wall(w[0], w[1]);
        }
        self
    }

    /// Closed polyline through `pts`.
    pub fn polygon(&mut self, pts: &[(f64, f64)]) -> &mut Self {
        self.polyline(pts);
        if let (Some(&last), Some(&first)) = (pts.last(), pts.first()) {
            self.wall(last, first);
        }
        self
    }

    pub fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) -> &mut Self {
        self.polygon(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    pub fn bounds(&self) -> (Vector2<f64>, Vector2<f64>) {
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        for w in &self.walls {
            for p in [w.a, w.b] {
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.walls.is_empty() {
            return Err(Error::InvalidArgument(format!("world {} has no walls", self.name)));
        }
        if self.walls.iter().any(|w| (w.b - w.a).norm() < 1e-9) {
            return Err(Error::InvalidArgument(format!("world {} has a degenerate wall", self.name)));
        }
        Ok(())
    }

    /// Distance from `p` to the nearest wall.
    pub fn clearance(&self, p: &Vector2<f64>) -> f64 {
        self.walls
            .iter()
            .map(|w| {
                let d = w.b - w.a;
                let s = ((p - w.a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                (p - (w.a + d * s)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub angle_min: f64,
    pub angle_max: f64,
    pub angle_increment: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        let inc = 1f64.to_radians();
        ScanParams {
            angle_min: -PI,
            angle_max: PI - inc,
            angle_increment: inc,
            range_min: 0.1,
            range_max: 20.0,
        }
    }
}

/// Ray-cast scan from a planar LiDAR pose. Returns the scan and the wall hit
/// by each beam.
pub fn raycast_scan(
    world: &World,
    pose: &Pose2,
    params: &ScanParams,
    stamp: f64,
    range_clip: Option<f64>,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LaserScan, Vec<Option<usize>>)> {
    let (lo, hi) = world.bounds();
    let o = pose.xy;
    if o.x < lo.x || o.y < lo.y || o.x > hi.x || o.y > hi.y {
        return Err(Error::InvalidArgument(format!("pose ({}, {}) outside world {}", o.x, o.y, world.name)));
    }
    let n = LaserScan::expected_len(params.angle_min, params.angle_max, params.angle_increment);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let max_range = range_clip.map_or(params.range_max, |c| c.min(params.range_max));
    let mut ranges = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let a = pose.yaw + params.angle_min + i as f64 * params.angle_increment;
        let d = Vector2::new(a.cos(), a.sin());
        let mut best: Option<(f64, usize)> = None;
        for w in &world.walls {
            let e = w.b - w.a;
            let den = d.x * e.y - d.y * e.x;
            if den.abs() < 1e-12 {
                continue;
            }
            let q = w.a - o;
            let s = (q.x * e.y - q.y * e.x) / den;
            let u = (q.x * d.y - q.y * d.x) / den;
            if s > 1e-9 && (-1e-12..=1.0 + 1e-12).contains(&u) && best.is_none_or(|(bs, _)| s < bs) {
                best = Some((s, w.id));
            }
        }
        match best {
            Some((s, id)) if s <= max_range && s >= params.range_min => {
                let r = if noise_sigma > 0.0 { s + noise.sample(rng) } else { s };
                if r <= max_range {
                    ranges.push(r);
                    ids.push(Some(id));
                } else {
                    ranges.push(f64::INFINITY);
                    ids.push(None);
                }
            }
            _ => {
                ranges.push(f64::INFINITY);
                ids.push(None);
            }
        }
    }
    Ok((
        LaserScan {
            stamp,
            angle_min: params.angle_min,
            angle_max: params.angle_max,
            angle_increment: params.angle_increment,
            range_min: params.range_min,
            range_max: max_range,
            ranges,
        },
        ids,
    ))
}

/// Forward speed (m/s) and yaw rate (rad/s) of the chassis at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub scan_hz: f64,
    pub imu_hz: f64,
    pub wheel_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Rates {
            scan_hz: 10.0,
            imu_hz: 200.0,
            wheel_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Chassis pose at the first knot.
    pub start: Pose2,
    pub knots: Vec<Knot>,
    pub rates: Rates,
}

/// Chassis kinematics at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChassisMotion {
    pub yaw: f64,
    pub v: f64,
    pub v_dot: f64,
    pub omega: f64,
    pub omega_dot: f64,
}

fn smoothstep(s: f64) -> (f64, f64, f64) {
    // value, derivative, integral over [0, s]
    (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s), s * s * s - 0.5 * s.powi(4))
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::InvalidArgument("trajectory needs two knots".into()));
        }
        if self.knots.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidArgument("knot times must increase".into()));
        }
        let r = &self.rates;
        for (name, hz) in [("scan", r.scan_hz), ("wheel", r.wheel_hz)] {
            let k = r.imu_hz / hz;
            if !(hz > 0.0) || (k - k.round()).abs() > 1e-9 || k < 1.0 {
                return Err(Error::InvalidArgument(format!("imu rate must be a multiple of the {name} rate")));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.t) - self.knots[0].t
    }

    pub fn t0(&self) -> f64 {
        self.knots[0].t
    }

    pub fn motion(&self, t: f64) -> ChassisMotion {
        let mut yaw = self.start.yaw;
        let last = self.knots.len() - 1;
        for (i, w) in self.knots.windows(2).enumerate() {
            let (k0, k1) = (w[0], w[1]);
            let span = k1.t - k0.t;
            let inside = t < k1.t || i + 1 == last;
            let s = ((t.min(k1.t) - k0.t) / span).clamp(0.0, 1.0);
            let (f, df, int_f) = smoothstep(s);
            let dv = k1.v - k0.v;
            let dw = k1.omega - k0.omega;
            if inside {
                return ChassisMotion {
                    yaw: yaw + span * (k0.omega * s + dw * int_f),
                    v: k0.v + dv * f,
                    v_dot: dv * df / span,
                    omega: k0.omega + dw * f,
                    omega_dot: dw * df / span,
                };
            }
            yaw += span * (k0.omega + 0.5 * dw);
        }
        unreachable!("validated trajectory has at least one segment")
    }
}

/// Builds velocity knots from driving primitives.
#[derive(Debug, Clone)]
pub struct ProfileBuilder {
    t: f64,
    v: f64,
    omega: f64,
    knots: Vec<Knot>,
}

impl ProfileBuilder {
    pub fn new() -> Self {
        ProfileBuilder {
            t: 0.0,
            v: 0.0,
            omega: 0.0,
            knots: vec![Knot {
                t: 0.0,
                v: 0.0,
                omega: 0.0,
            }],
        }
    }

    fn push(&mut self, dur: f64, v: f64, omega: f64) -> &mut Self {
        self.t += dur;
        self.v = v;
        self.omega = omega;
        self.knots.push(Knot { t: self.t, v, omega });
        self
    }

    pub fn hold(&mut self, dur: f64) -> &mut Self {
        let (v, w) = (self.v, self.omega);
        self.push(dur, v, w)
    }

    pub fn speed(&mut self, v: f64, dur: f64) -> &mut Self {
        let w = self.omega;
        self.push(dur, v, w)
    }

    pub fn straight(&mut self, dist: f64) -> &mut Self {
        assert!(self.v > 0.0, "straight needs forward speed");
        self.hold(dist / self.v)
    }

    /// Arc (or in-place rotation when stopped) through `angle`; yaw rate ramps
    /// over `ramp` seconds at each end.
    pub fn turn(&mut self, angle: f64, rate: f64, ramp: f64) -> &mut Self {
        let w = rate.abs() * angle.signum();
        let hold = (angle.abs() - rate.abs() * ramp) / rate.abs();
        assert!(hold >= 0.0, "turn too short for its ramps");
        let v = self.v;
        self.push(ramp, v, w);
        self.push(hold, v, w);
        self.push(ramp, v, 0.0)
    }

    pub fn arc(&mut self, angle: f64, radius: f64, ramp: f64) -> &mut Self {
        let rate = self.v / radius;
        self.turn(angle, rate, ramp)
    }

    pub fn build(&self) -> Vec<Knot> {
        self.knots.clone()
    }
}

impl Default for ProfileBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// True body-frame IMU signals `(specific force, angular rate)` at `t`.
pub fn body_signals(traj: &TrajectorySpec, calib: &Calibration, g: &GravityVector, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let m = traj.motion(t);
    let (s, c) = m.yaw.sin_cos();
    let r2 = Matrix2::new(c, -s, s, c);
    let j = Matrix2::new(0.0, -1.0, 1.0, 0.0);
    let t_ob = calib.T_imu_base.inverse();
    let lever = Vector2::new(t_ob.translation.x, t_ob.translation.y);
    let a_o = Vector2::new(c, s) * m.v_dot + Vector2::new(-s, c) * (m.v * m.omega);
    let a_b = a_o + r2 * (j * m.omega_dot - Matrix2::identity() * m.omega * m.omega) * lever;
    let r_wo = RotVec::new(0.0, 0.0, m.yaw).to_matrix();
    let r_wb = r_wo * t_ob.rotation;
    let accel = r_wb.transpose() * (Vector3::new(a_b.x, a_b.y, 0.0) - g.g_world);
    let gyro = t_ob.rotation.transpose() * Vector3::new(0.0, 0.0, m.omega);
    (accel, gyro)
}

/// Noise-free IMU samples at the IMU rate over the whole trajectory.
pub fn clean_imu(traj: &TrajectorySpec, calib: &Calibration, g: &GravityVector) -> Vec<ImuSample> {
    let n = (traj.duration() * traj.rates.imu_hz).round() as usize;
    (0..=n)
        .map(|i| {
            let t = traj.t0() + i as f64 / traj.rates.imu_hz;
            let (accel, gyro) = body_signals(traj, calib, g, t);
            ImuSample { stamp: t, accel, gyro }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSimNoise {
    pub accel_density: f64,
    pub gyro_density: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub initial_bias: ImuBias,
}

impl ImuSimNoise {
    pub fn none() -> Self {
        ImuSimNoise {
            accel_density: 0.0,
            gyro_density: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            initial_bias: ImuBias::zero(),
        }
    }
}

/// Measured IMU stream: clean samples plus bias (with random walk) and white
/// noise. Returns the samples and the true bias at every sample.
pub fn generate_imu(clean: &[ImuSample], rate: f64, noise: &ImuSimNoise, seed: u64) -> (Vec<ImuSample>, Vec<ImuBias>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A0_u64);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |s: f64| Vector3::from_fn(|_, _| if s > 0.0 { s * std.sample(&mut rng) } else { 0.0 });
    let dt = 1.0 / rate;
    let mut bias = noise.initial_bias;
    let mut out = Vec::with_capacity(clean.len());
    let mut biases = Vec::with_capacity(clean.len());
    for (i, s) in clean.iter().enumerate() {
        if i > 0 {
            bias.accel += draw(noise.accel_bias_walk * dt.sqrt());
            bias.gyro += draw(noise.gyro_bias_walk * dt.sqrt());
        }
        out.push(ImuSample {
            stamp: s.stamp,
            accel: s.accel + bias.accel + draw(noise.accel_density * rate.sqrt()),
            gyro: s.gyro + bias.gyro + draw(noise.gyro_density * rate.sqrt()),
        });
        biases.push(bias);
    }
    (out, biases)
}

/// Ground-truth sample at the IMU rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    /// IMU body state, bias-free.
    pub body: State,
    pub chassis: Pose3,
}

/// Integrates clean samples with the estimator's midpoint rule.
pub fn integrate_truth(traj: &TrajectorySpec, calib: &Calibration, g: &GravityVector, clean: &[ImuSample]) -> Vec<TruthSample> {
    let m0 = traj.motion(traj.t0());
    let chassis0 = Pose3::new(
        RotVec::new(0.0, 0.0, traj.start.yaw),
        Vector3::new(traj.start.xy.x, traj.start.xy.y, 0.0),
    );
    let t_ob = calib.T_imu_base.inverse();
    let body0 = chassis0.compose(&t_ob);
    let lever = body0.translation - chassis0.translation;
    let v0 = Vector3::new(m0.yaw.cos(), m0.yaw.sin(), 0.0) * m0.v + Vector3::new(0.0, 0.0, m0.omega).cross(&lever);
    let (mut p, mut r, mut v) = (body0.translation, body0.rotation, v0);
    let mut out = Vec::with_capacity(clean.len());
    let mk = |p: Vector3<f64>, r: &nalgebra::Matrix3<f64>, v: Vector3<f64>, t: f64| {
        let body = Pose3::from_parts(*r, p);
        TruthSample {
            body: State {
                p,
                theta: RotVec::from_matrix(r),
                v,
                bias: ImuBias::zero(),
                stamp: t,
            },
            chassis: body.compose(&calib.T_imu_base),
        }
    };
    out.push(mk(p, &r, v, clean[0].stamp));
    for w in clean.windows(2) {
        let dt = w[1].stamp - w[0].stamp;
        let r1 = r * so3_exp(&((w[0].gyro + w[1].gyro) * (0.5 * dt)));
        let a = (r * w[0].accel + r1 * w[1].accel) * 0.5 + g.g_world;
        p += v * dt + a * (0.5 * dt * dt);
        v += a * dt;
        r = r1;
        out.push(mk(p, &r, v, w[1].stamp));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelSimNoise {
    /// Per-run scale error on distance (fraction, 1σ).
    pub scale_sigma: f64,
    /// Per-step multiplicative slip on distance (fraction, 1σ).
    pub step_slip_sigma: f64,
    /// Yaw noise per radian turned (1σ).
    pub yaw_per_rad: f64,
    /// Yaw noise per meter travelled (rad, 1σ).
    pub yaw_per_m: f64,
}

impl WheelSimNoise {
    pub fn none() -> Self {
        WheelSimNoise {
            scale_sigma: 0.0,
            step_slip_sigma: 0.0,
            yaw_per_rad: 0.0,
            yaw_per_m: 0.0,
        }
    }
}

/// Wheel odometry poses, starting at identity, from chassis truth sampled
/// every `stride` IMU samples. Noise scales with motion so standing still
/// adds no error.
pub fn generate_wheel(truth: &[TruthSample], stride: usize, noise: &WheelSimNoise, seed: u64) -> Vec<WheelOdomSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77EE1);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 + noise.scale_sigma * std.sample(&mut rng);
    let mut pose = Pose2::identity();
    let mut out = Vec::new();
    let mut prev: Option<Pose2> = None;
    for s in truth.iter().step_by(stride.max(1)) {
        let cur = s.chassis.to_pose2();
        if let Some(p) = prev {
            let inc = p.between(&cur);
            let d = inc.xy.norm();
            let mut xy = inc.xy;
            let mut yaw = inc.yaw;
            if d > 0.0 {
                xy *= scale * (1.0 + noise.step_slip_sigma * std.sample(&mut rng));
            }
            let yaw_sigma = noise.yaw_per_rad * inc.yaw.abs() + noise.yaw_per_m * d;
            if yaw_sigma > 0.0 {
                yaw += yaw_sigma * std.sample(&mut rng);
            }
            pose = pose.compose(&Pose2::new(yaw, xy.x, xy.y));
        }
        prev = Some(cur);
        out.push(WheelOdomSample {
            stamp: s.body.stamp,
            pose: pose.to_pose3(),
        });
    }
    out
}

/// Per-scan ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTruth {
    pub stamp: f64,
    pub lidar: Pose3,
    pub chassis: Pose3,
    pub wall_ids: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimNoise {
    pub range_sigma: f64,
    pub imu: ImuSimNoise,
    pub wheel: WheelSimNoise,
}

impl SimNoise {
    pub fn none() -> Self {
        SimNoise {
            range_sigma: 0.0,
            imu: ImuSimNoise::none(),
            wheel: WheelSimNoise::none(),
        }
    }
}

impl Default for SimNoise {
    fn default() -> Self {
        SimNoise {
            range_sigma: 0.01,
            imu: ImuSimNoise {
                accel_density: 0.01,
                gyro_density: 0.001,
                accel_bias_walk: 0.0005,
                gyro_bias_walk: 0.00005,
                initial_bias: ImuBias::new(Vector3::new(0.02, -0.03, 0.01), Vector3::new(0.002, -0.001, 0.003)),
            },
            wheel: WheelSimNoise {
                scale_sigma: 0.01,
                step_slip_sigma: 0.02,
                yaw_per_rad: 0.02,
                yaw_per_m: 0.005,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub world: World,
    pub trajectory: TrajectorySpec,
    pub scan: ScanParams,
    pub range_clip: Option<f64>,
    pub calib: Calibration,
    pub noise: SimNoise,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub truth: Vec<TruthSample>,
    pub scan_truth: Vec<ScanTruth>,
    /// True bias at every IMU sample.
    pub bias: Vec<ImuBias>,
    pub gravity: GravityVector,
}

impl SimOutput {
    /// Truth sample at an IMU-aligned stamp.
    pub fn truth_at(&self, stamp: f64) -> Option<&TruthSample> {
        let i = self.truth.partition_point(|s| s.body.stamp < stamp - 1e-9);
        self.truth.get(i).filter(|s| (s.body.stamp - stamp).abs() < 1e-9)
    }

    /// Chassis truth at every scan stamp.
    pub fn chassis_trajectory(&self) -> Vec<(f64, Pose3)> {
        self.scan_truth.iter().map(|s| (s.stamp, s.chassis)).collect()
    }
}

pub fn simulate(sc: &Scenario) -> Result<SimOutput> {
    sc.world.validate()?;
    sc.trajectory.validate()?;
    sc.calib.validate()?;
    let rates = sc.trajectory.rates;
    let g = GravityVector::down(sc.calib.gravity_magnitude);
    let clean = clean_imu(&sc.trajectory, &sc.calib, &g);
    let truth = integrate_truth(&sc.trajectory, &sc.calib, &g, &clean);
    let (imu, bias) = generate_imu(&clean, rates.imu_hz, &sc.noise.imu, sc.seed);
    let wheel_stride = (rates.imu_hz / rates.wheel_hz).round() as usize;
    let wheel = generate_wheel(&truth, wheel_stride, &sc.noise.wheel, sc.seed);
    let scan_stride = (rates.imu_hz / rates.scan_hz).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5CA7);
    let mut scans = Vec::new();
    let mut scan_truth = Vec::new();
    for s in truth.iter().step_by(scan_stride) {
        let lidar = s.chassis.compose(&sc.calib.T_base_lidar);
        let (scan, ids) = raycast_scan(
            &sc.world,
            &lidar.to_pose2(),
            &sc.scan,
            s.body.stamp,
            sc.range_clip,
            sc.noise.range_sigma,
            &mut rng,
        )?;
        scans.push(scan);
        scan_truth.push(ScanTruth {
            stamp: s.body.stamp,
            lidar,
            chassis: s.chassis,
            wall_ids: ids,
        });
    }
    Ok(SimOutput {
        dataset: Dataset {
            scans,
            imu,
            wheel,
            calib: sc.calib,
        },
        truth,
        scan_truth,
        bias,
        gravity: g,
    })
}

/// Writes the sensor streams, calibration, chassis truth (TUM) and per-beam
/// wall ids.
pub fn export_dataset(out: &SimOutput, dir: &Path) -> Result<()> {
    dataio::write_dataset(dir, &out.dataset)?;
    dataio::write_tum(&dir.join(TRUTH_FILE), &out.chassis_trajectory())?;
    let mut s = String::from("stamp,wall_ids\n");
    for st in &out.scan_truth {
        let ids: Vec<String> = st
            .wall_ids
            .iter()
            .map(|i| i.map_or_else(|| "-1".to_string(), |v| v.to_string()))
            .collect();
        s.push_str(&format!("{},{}\n", st.stamp, ids.join(";")));
    }
    fs::write(dir.join(SCAN_TRUTH_FILE), s)?;
    Ok(())
}

pub const SCENARIOS: [&str; 3] = ["square_loop", "corridor_clip", "two_rooms"];

fn base_calib() -> Calibration {
    let mut c = Calibration::default();
    c.T_imu_base = Pose3::new(RotVec::new(0.0, 0.0, 0.03), Vector3::new(-0.05, 0.02, -0.1));
    c
}

/// Square ring corridor around a central block, about 40 m of driving
/// with a revisit of the start.
pub fn square_loop_world() -> World {
    let mut w = World::new("square_loop");
    // outer wall with notches at irregular offsets
    w.polygon(&[
        (0.0, 0.0),
        (2.6, 0.0),
        (2.6, -0.4),
        (3.4, -0.4),
        (3.4, 0.0),
        (8.1, 0.0),
        (8.1, -0.5),
        (9.3, -0.5),
        (9.3, 0.0),
        (12.0, 0.0),
        (12.0, 4.2),
        (12.5, 4.2),
        (12.5, 5.0),
        (12.0, 5.0),
        (12.0, 12.0),
        (7.4, 12.0),
        (7.4, 12.6),
        (6.4, 12.6),
        (6.4, 12.0),
        (0.0, 12.0),
        (0.0, 9.4),
        (-0.4, 9.4),
        (-0.4, 8.8),
        (0.0, 8.8),
        (0.0, 5.9),
        (-0.6, 5.9),
        (-0.6, 4.6),
        (0.0, 4.6),
    ]);
    // central block with two bays
    w.polygon(&[
        (3.5, 3.5),
        (5.2, 3.5),
        (5.2, 3.9),
        (6.0, 3.9),
        (6.0, 3.5),
        (8.5, 3.5),
        (8.5, 7.1),
        (8.1, 7.1),
        (8.1, 7.9),
        (8.5, 7.9),
        (8.5, 8.5),
        (3.5, 8.5),
    ]);
    w
}

pub fn square_loop(seed: u64) -> Scenario {
    let knots = ProfileBuilder::new()
        .hold(2.0)
        .speed(0.5, 1.0)
        .straight(5.5)
        .arc(-FRAC_PI_2, 1.0, 0.4)
        .straight(6.1)
        .arc(-FRAC_PI_2, 1.0, 0.4)
        .straight(6.1)
        .arc(-FRAC_PI_2, 1.0, 0.4)
        .straight(6.1)
        .arc(-FRAC_PI_2, 1.0, 0.4)
        .straight(6.0)
        .speed(0.0, 1.0)
        .hold(1.0)
        .build();
    Scenario {
        world: square_loop_world(),
        trajectory: TrajectorySpec {
            start: Pose2::new(FRAC_PI_2, 1.75, 2.2),
            knots,
            rates: Rates::default(),
        },
        scan: ScanParams::default(),
        range_clip: None,
        calib: base_calib(),
        noise: SimNoise::default(),
        seed,
    }
}

/// Long 2 m corridor seen through a 3 m range clip.
pub fn corridor_clip(seed: u64) -> Scenario {
    let mut w = World::new("corridor_clip");
    w.rect(0.0, 0.0, 30.0, 2.0);
    let knots = ProfileBuilder::new().hold(2.0).speed(0.5, 1.0).straight(18.0).speed(0.0, 1.0).hold(1.0).build();
    Scenario {
        world: w,
        trajectory: TrajectorySpec {
            start: Pose2::new(0.0, 1.2, 1.0),
            knots,
            rates: Rates::default(),
        },
        scan: ScanParams::default(),
        range_clip: Some(3.0),
        calib: base_calib(),
        noise: SimNoise::default(),
        seed,
    }
}

pub fn two_rooms_world() -> World {
    let mut w = World::new("two_rooms");
    // room A, 7 × 6, door in the east wall
    w.polyline(&[
        (7.0, 3.6),
        (7.0, 6.0),
        (0.0, 6.0),
        (0.0, 3.8),
        (-0.5, 3.8),
        (-0.5, 2.9),
        (0.0, 2.9),
        (0.0, 0.0),
        (4.3, 0.0),
        (4.3, -0.4),
        (5.1, -0.4),
        (5.1, 0.0),
        (7.0, 0.0),
        (7.0, 2.4),
    ]);
    // room B, 4 × 5
    w.polyline(&[
        (7.0, 2.4),
        (7.0, 0.5),
        (11.0, 0.5),
        (11.0, 5.5),
        (7.0, 5.5),
        (7.0, 3.6),
    ]);
    // pillar in room A
    w.rect(3.0, 4.4, 3.5, 4.9);
    w
}

pub fn two_rooms(seed: u64) -> Scenario {
    let knots = ProfileBuilder::new()
        .hold(2.0)
        .speed(0.5, 1.0)
        .straight(7.0)
        .speed(0.0, 1.0)
        .turn(PI, 0.6, 0.5)
        .speed(0.5, 1.0)
        .straight(6.0)
        .speed(0.0, 1.0)
        .hold(1.0)
        .build();
    Scenario {
        world: two_rooms_world(),
        trajectory: TrajectorySpec {
            start: Pose2::new(0.0, 1.5, 3.0),
            knots,
            rates: Rates::default(),
        },
        scan: ScanParams::default(),
        range_clip: None,
        calib: base_calib(),
        noise: SimNoise::default(),
        seed,
    }
}

pub fn scenario(name: &str, seed: u64) -> Result<Scenario> {
    match name {
        "square_loop" => Ok(square_loop(seed)),
        "corridor_clip" => Ok(corridor_clip(seed)),
        "two_rooms" => Ok(two_rooms(seed)),
        other => Err(Error::InvalidArgument(format!(
            "unknown scenario {other}; expected one of {}",
            SCENARIOS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{imu_window, scan_to_points};
    use crate::preintegration::{imu_residual, integrate};
    use approx::assert_relative_eq;

    fn square_room() -> World {
        let mut w = World::new("room");
        w.rect(-2.0, -2.0, 2.0, 2.0);
        w
    }

    #[test]
    fn center_of_square_room() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (scan, ids) = raycast_scan(&square_room(), &Pose2::identity(), &ScanParams::default(), 0.0, None, 0.0, &mut rng).unwrap();
        let forward = scan.ranges.len() / 2;
        assert_relative_eq!(scan.beam_angle(forward), 0.0, epsilon = 1e-12);
        assert_relative_eq!(scan.ranges[forward], 2.0, epsilon = 1e-12);
        assert!(ids.iter().all(|i| i.is_some()));
        assert!(raycast_scan(&square_room(), &Pose2::new(0.0, 5.0, 0.0), &ScanParams::default(), 0.0, None, 0.0, &mut rng).is_err());
    }

    #[test]
    fn range_clip_drops_distant_walls() {
        let mut w = World::new("corridor");
        w.rect(0.0, 0.0, 40.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (scan, _) = raycast_scan(&w, &Pose2::new(0.0, 20.0, 1.0), &ScanParams::default(), 0.0, Some(3.0), 0.0, &mut rng).unwrap();
        let forward = scan.ranges.len() / 2;
        for k in forward - 10..=forward + 10 {
            assert!(!scan.ranges[k].is_finite());
        }
        assert!(scan.ranges.iter().filter(|r| r.is_finite()).all(|r| *r <= 3.0));
    }

    fn on_wall(world: &World, p: &Vector2<f64>) -> f64 {
        world.clearance(p)
    }

    #[test]
    fn noisy_points_stay_near_walls() {
        let world = square_loop_world();
        let sigma = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = Pose2::new(0.7, 1.8, 6.0);
        let (scan, _) = raycast_scan(&world, &pose, &ScanParams::default(), 0.0, None, sigma, &mut rng).unwrap();
        for p in scan_to_points(&scan) {
            let w = pose.transform_point(&p.xy);
            assert!(on_wall(&world, &w) <= 3.0 * sigma + 1e-9 || on_wall(&world, &w) < 0.05);
        }
        let (clean, _) = raycast_scan(&world, &pose, &ScanParams::default(), 0.0, None, 0.0, &mut rng).unwrap();
        for p in scan_to_points(&clean) {
            assert!(on_wall(&world, &pose.transform_point(&p.xy)) < 1e-9);
        }
    }

    fn circle_traj(v: f64, w: f64) -> TrajectorySpec {
        TrajectorySpec {
            start: Pose2::identity(),
            knots: vec![Knot { t: 0.0, v, omega: w }, Knot { t: 2.0, v, omega: w }],
            rates: Rates::default(),
        }
    }

    fn level_calib() -> Calibration {
        let mut c = Calibration::default();
        c.T_imu_base = Pose3::identity();
        c
    }

    #[test]
    fn imu_signals_for_simple_motions() {
        let g = GravityVector::down(9.81);
        let cal = level_calib();
        let (a, w) = body_signals(&circle_traj(0.0, 0.0), &cal, &g, 1.0);
        assert_relative_eq!(a, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-15);
        assert_eq!(w, Vector3::zeros());
        let (a, w) = body_signals(&circle_traj(1.0, 0.0), &cal, &g, 1.0);
        assert_relative_eq!(a, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-15);
        assert_eq!(w, Vector3::zeros());
        let (a, w) = body_signals(&circle_traj(0.8, 0.5), &cal, &g, 1.3);
        assert_relative_eq!(a, Vector3::new(0.0, 0.4, 9.81), epsilon = 1e-12);
        assert_relative_eq!(w.z, 0.5);
    }

    #[test]
    fn profile_heading_is_exact() {
        let knots = ProfileBuilder::new().hold(1.0).speed(0.5, 1.0).arc(-FRAC_PI_2, 1.0, 0.4).hold(0.5).build();
        let traj = TrajectorySpec {
            start: Pose2::new(0.3, 0.0, 0.0),
            knots,
            rates: Rates::default(),
        };
        let end = traj.motion(traj.knots.last().unwrap().t);
        assert_relative_eq!(end.yaw, 0.3 - FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(end.omega, 0.0);
    }

    #[test]
    fn truth_closes_imu_residual() {
        let mut sc = square_loop(1);
        sc.noise = SimNoise::none();
        sc.noise.imu.initial_bias = ImuBias::new(Vector3::new(0.05, -0.02, 0.03), Vector3::new(0.003, 0.0, -0.002));
        let out = simulate(&sc).unwrap();
        let bias = sc.noise.imu.initial_bias;
        for k in [3usize, 40, 120, 300] {
            let (a, b) = (&out.scan_truth[k], &out.scan_truth[k + 1]);
            let win = imu_window(&out.dataset.imu, a.stamp, b.stamp).unwrap();
            let pre = integrate(&win, &bias, &sc.calib.imu_noise).unwrap();
            let mut sa = out.truth_at(a.stamp).unwrap().body;
            let mut sb = out.truth_at(b.stamp).unwrap().body;
            sa.bias = bias;
            sb.bias = bias;
            let r = imu_residual(&sa, &sb, &pre, &out.gravity).unwrap();
            assert!(r.norm() < 1e-8, "{k}: {}", r.norm());
        }
    }

    #[test]
    fn scenarios_keep_clear_of_walls_and_close_their_loops() {
        for name in SCENARIOS {
            let mut sc = scenario(name, 0).unwrap();
            sc.noise = SimNoise::none();
            let out = simulate(&sc).unwrap();
            let min = out
                .scan_truth
                .iter()
                .map(|s| sc.world.clearance(&s.chassis.to_pose2().xy))
                .fold(f64::INFINITY, f64::min);
            assert!(min > 0.5, "{name}: clearance {min}");
            let first = out.scan_truth[0].chassis.translation;
            let last = out.scan_truth.last().unwrap().chassis.translation;
            let path: f64 = out.scan_truth.windows(2).map(|w| (w[1].chassis.translation - w[0].chassis.translation).norm()).sum();
            match name {
                "square_loop" => {
                    assert!((path - 40.0).abs() < 3.0, "path {path}");
                    assert!((last - first).norm() < 6.5);
                }
                "two_rooms" => assert!((last - first).norm() < 2.0),
                _ => {}
            }
            for s in &out.truth {
                assert!(s.chassis.translation.z.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_noise_wheel_equals_truth() {
        let mut sc = two_rooms(0);
        sc.noise = SimNoise::none();
        let out = simulate(&sc).unwrap();
        let c0 = out.truth[0].chassis;
        for w in &out.dataset.wheel {
            let t = out.truth_at(w.stamp).unwrap();
            let expect = c0.between(&t.chassis);
            assert!((expect.translation - w.pose.translation).norm() < 1e-9);
            assert!((expect.rotation - w.pose.rotation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn wheel_is_exact_at_rest() {
        let sc = two_rooms(3);
        let out = simulate(&sc).unwrap();
        // the first two seconds are stationary
        let still: Vec<_> = out.dataset.wheel.iter().filter(|w| w.stamp <= 2.0).collect();
        assert!(still.len() > 50);
        for w in still {
            assert_eq!(w.pose, Pose3::identity());
        }
    }

    #[test]
    fn wheel_slip_statistics() {
        let straight = TrajectorySpec {
            start: Pose2::identity(),
            knots: vec![Knot { t: 0.0, v: 1.0, omega: 0.0 }, Knot { t: 100.0, v: 1.0, omega: 0.0 }],
            rates: Rates::default(),
        };
        let cal = level_calib();
        let g = GravityVector::down(9.81);
        let truth = integrate_truth(&straight, &cal, &g, &clean_imu(&straight, &cal, &g));
        let noise = WheelSimNoise {
            scale_sigma: 0.01,
            ..WheelSimNoise::none()
        };
        let errs: Vec<f64> = (0..200)
            .map(|seed| {
                let w = generate_wheel(&truth, 4, &noise, seed);
                w.last().unwrap().pose.translation.x - 100.0
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 0.25, "mean {mean}");
        assert!(std > 0.7 && std < 1.3, "std {std}");
    }

    #[test]
    fn export_is_deterministic_and_round_trips() {
        let sc = two_rooms(9);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out = simulate(&sc).unwrap();
        export_dataset(&out, a.path()).unwrap();
        export_dataset(&simulate(&sc).unwrap(), b.path()).unwrap();
        for f in [dataio::SCAN_FILE, dataio::IMU_FILE, dataio::WHEEL_FILE, dataio::CALIB_FILE, TRUTH_FILE, SCAN_TRUTH_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let back = dataio::load_dataset(a.path()).unwrap();
        assert_eq!(back.imu, out.dataset.imu);
        assert_eq!(back.scans, out.dataset.scans);
        assert_eq!(back.wheel.len(), out.dataset.wheel.len());
        for (x, y) in back.wheel.iter().zip(&out.dataset.wheel) {
            assert_eq!(x.stamp, y.stamp);
            assert!((x.pose.rotation - y.pose.rotation).abs().max() < 1e-15);
            assert_eq!(x.pose.translation, y.pose.translation);
        }
        assert!(scenario("nope", 0).is_err());
    }
}
