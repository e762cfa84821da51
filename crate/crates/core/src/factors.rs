//! Observation models over window states: line-to-line, wheel odometry
//! increment, planar ground constraint and state priors.
//!
//! A state occupies three solver slots: position (`Euclidean(3)`), attitude
//! (`RotVec`) and speed-bias (`Euclidean(9)`: v, b_a, b_ω).

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, RowVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataio::Calibration;
use crate::error::{Error, Result};
use crate::features::{line_angle, LineIndex, LineSegment};
use crate::geometry::{right_jacobian_inv, skew, so3_exp, so3_log, wrap_angle, Pose3, RotVec};
use crate::preintegration::ImuBias;
use crate::solver::Factor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: Vector3<f64>,
    pub theta: RotVec,
    pub v: Vector3<f64>,
    pub bias: ImuBias,
    pub stamp: f64,
}

pub type SlotValues = ([f64; 3], [f64; 3], [f64; 9]);

impl State {
    pub fn at_rest(stamp: f64) -> Self {
        State {
            p: Vector3::zeros(),
            theta: RotVec::identity(),
            v: Vector3::zeros(),
            bias: ImuBias::zero(),
            stamp,
        }
    }

    pub fn from_pose(pose: &Pose3, stamp: f64) -> Self {
        State {
            p: pose.translation,
            theta: pose.rotvec(),
            ..State::at_rest(stamp)
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.theta.to_matrix()
    }

    /// IMU body pose in the world frame.
    pub fn pose(&self) -> Pose3 {
        Pose3::from_parts(self.rotation(), self.p)
    }

    pub fn speed_bias(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(self.v.as_slice());
        out[3..6].copy_from_slice(self.bias.accel.as_slice());
        out[6..].copy_from_slice(self.bias.gyro.as_slice());
        out
    }

    pub fn slot_values(&self) -> SlotValues {
        let mut p = [0.0; 3];
        let mut t = [0.0; 3];
        p.copy_from_slice(self.p.as_slice());
        t.copy_from_slice(self.theta.0.as_slice());
        (p, t, self.speed_bias())
    }

    pub fn from_slots(p: &[f64], theta: &[f64], vb: &[f64], stamp: f64) -> Self {
        State {
            p: Vector3::from_column_slice(p),
            theta: RotVec::from_vector(Vector3::from_column_slice(theta)),
            v: Vector3::from_column_slice(&vb[..3]),
            bias: ImuBias::new(Vector3::from_column_slice(&vb[3..6]), Vector3::from_column_slice(&vb[6..9])),
            stamp,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.theta.0.iter()).chain(self.v.iter()).all(|x| x.is_finite())
    }
}

fn v3(s: &[f64]) -> Vector3<f64> {
    Vector3::new(s[0], s[1], s[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Max angle between matched lines (rad).
    pub theta_match: f64,
    /// Max distance from the mapped current midpoint to the reference segment (m).
    pub d_match: f64,
    /// Min projected overlap, as a fraction of the shorter segment.
    pub min_overlap: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            theta_match: 10f64.to_radians(),
            d_match: 0.5,
            min_overlap: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMatch {
    pub ref_line: LineSegment,
    pub cur_line: LineSegment,
    pub ref_index: usize,
    pub cur_index: usize,
    /// Angle between the lines after mapping with the guess.
    pub angle: f64,
}

/// Planar part of a pose as `(R, t)`.
pub fn planar(pose: &Pose3) -> (Matrix2<f64>, Vector2<f64>) {
    let p2 = pose.to_pose2();
    (p2.rotation(), p2.xy)
}

/// Overlap of `b` projected on `a`, as a fraction of the shorter segment.
pub fn overlap_ratio(a: &LineSegment, b: &LineSegment) -> f64 {
    let d = a.direction();
    let s = |p: &Vector2<f64>| (p - a.p_start).dot(&d);
    let (a0, a1) = (0.0f64, a.length());
    let (b0, b1) = {
        let (x, y) = (s(&b.p_start), s(&b.p_end));
        (x.min(y), x.max(y))
    };
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let shorter = a.length().min(b.length());
    if shorter <= 0.0 {
        0.0
    } else {
        inter / shorter
    }
}

/// Smallest-angle reference candidate for every current line.
pub fn match_lines(
    cur_lines: &[LineSegment],
    ref_lines: &[LineSegment],
    index: &LineIndex,
    t_guess: &Pose3,
    cfg: &MatchConfig,
) -> Vec<LineMatch> {
    let (rot, t) = planar(t_guess);
    let mut out = Vec::new();
    for (ci, cur) in cur_lines.iter().enumerate() {
        let mapped = cur.transformed(&rot, &t);
        let mid = mapped.midpoint();
        let mut best: Option<(usize, f64)> = None;
        for ri in index.candidates(mapped.undirected_angle(), cfg.theta_match) {
            let r = &ref_lines[ri];
            let ang = line_angle(r, &mapped);
            if ang > cfg.theta_match
                || r.distance_to_segment(&mid) > cfg.d_match
                || overlap_ratio(r, &mapped) < cfg.min_overlap
            {
                continue;
            }
            if best.is_none_or(|(_, a)| ang < a) {
                best = Some((ri, ang));
            }
        }
        if let Some((ri, angle)) = best {
            out.push(LineMatch {
                ref_line: ref_lines[ri],
                cur_line: *cur,
                ref_index: ri,
                cur_index: ci,
                angle,
            });
        }
    }
    out
}

/// Point-to-line distances of the current endpoints mapped into the
/// reference LiDAR frame.
///
/// `Between` slots: `p_r, θ_r, p_c, θ_c`. `Anchored` slots: `p_c, θ_c`, with
/// the reference LiDAR pose given in world coordinates.
#[derive(Debug, Clone)]
pub struct LineFactor {
    line: [f64; 3],
    endpoints: [Vector3<f64>; 2],
    /// LiDAR pose in the IMU body frame.
    t_bl: Pose3,
    anchor: Option<Pose3>,
}

impl LineFactor {
    fn check(m: &LineMatch) -> Result<()> {
        if m.ref_line.length() < 1e-9 {
            return Err(Error::DegenerateGeometry("reference line endpoints coincide".into()));
        }
        Ok(())
    }

    fn build(m: &LineMatch, calib: &Calibration, anchor: Option<Pose3>) -> Result<Self> {
        Self::check(m)?;
        let r = &m.ref_line;
        let n = Vector2::new(r.coeffs[0], r.coeffs[1]);
        let scale = n.norm();
        Ok(LineFactor {
            line: [r.coeffs[0] / scale, r.coeffs[1] / scale, r.coeffs[2] / scale],
            endpoints: [
                Vector3::new(m.cur_line.p_start.x, m.cur_line.p_start.y, 0.0),
                Vector3::new(m.cur_line.p_end.x, m.cur_line.p_end.y, 0.0),
            ],
            t_bl: calib.imu_lidar(),
            anchor,
        })
    }

    pub fn between(m: &LineMatch, calib: &Calibration) -> Result<Self> {
        Self::build(m, calib, None)
    }

    /// `ref_lidar_world` is the reference LiDAR pose `T_wLr`.
    pub fn anchored(m: &LineMatch, ref_lidar_world: &Pose3, calib: &Calibration) -> Result<Self> {
        Self::build(m, calib, Some(*ref_lidar_world))
    }
}

impl Factor for LineFactor {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let (p_c, r_c, ref_pose, body_ref) = match self.anchor {
            Some(a) => (v3(params[0]), so3_exp(&v3(params[1])), a, None),
            None => {
                let p_r = v3(params[0]);
                let r_r = so3_exp(&v3(params[1]));
                let lr = Pose3::from_parts(r_r, p_r).compose(&self.t_bl);
                (v3(params[2]), so3_exp(&v3(params[3])), lr, Some((p_r, r_r)))
            }
        };
        let n3 = RowVector3::new(self.line[0], self.line[1], 0.0);
        let r_lr_t = ref_pose.rotation.transpose();
        let mut res = DVector::zeros(2);
        let mut rows_pc = [RowVector3::zeros(); 2];
        let mut rows_tc = [RowVector3::zeros(); 2];
        let mut rows_pr = [RowVector3::zeros(); 2];
        let mut rows_tr = [RowVector3::zeros(); 2];
        for (k, e) in self.endpoints.iter().enumerate() {
            let q = self.t_bl.transform_point(e);
            let pw = r_c * q + p_c;
            let local = r_lr_t * (pw - ref_pose.translation);
            res[k] = (n3 * local)[0] + self.line[2];
            let base = n3 * r_lr_t;
            rows_pc[k] = base;
            rows_tc[k] = -base * r_c * skew(&q);
            if let Some((p_r, r_r)) = body_ref {
                let y = r_r.transpose() * (pw - p_r);
                rows_pr[k] = -base;
                rows_tr[k] = n3 * self.t_bl.rotation.transpose() * skew(&y);
            }
        }
        if let Some(j) = jacobians {
            let (ipc, itc) = if self.anchor.is_some() { (0, 1) } else { (2, 3) };
            for k in 0..2 {
                j[ipc].row_mut(k).copy_from(&rows_pc[k]);
                j[itc].row_mut(k).copy_from(&rows_tc[k]);
                if self.anchor.is_none() {
                    j[0].row_mut(k).copy_from(&rows_pr[k]);
                    j[1].row_mut(k).copy_from(&rows_tr[k]);
                }
            }
        }
        res
    }
}

/// Unweighted `(d1, d2)` for a match given both body states.
pub fn line_residual(m: &LineMatch, state_r: &State, state_c: &State, calib: &Calibration) -> Result<Vector2<f64>> {
    let f = LineFactor::between(m, calib)?;
    let (a, b) = (state_r.slot_values(), state_c.slot_values());
    let r = f.evaluate(&[&a.0, &a.1, &b.0, &b.1], None);
    Ok(Vector2::new(r[0], r[1]) / calib.line_sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelDelta {
    pub d: f64,
    pub theta_d: f64,
    pub theta: f64,
    /// Translation too short for a meaningful direction.
    pub degenerate: bool,
}

pub const DEGENERATE_D: f64 = 1e-6;

/// Planar distance, heading of travel and rotation magnitude of `T_i⁻¹·T_j`.
pub fn wheel_delta(pose_i: &Pose3, pose_j: &Pose3) -> WheelDelta {
    let rel = pose_i.between(pose_j);
    let t = rel.translation;
    let d = t.x.hypot(t.y);
    let degenerate = d < DEGENERATE_D;
    WheelDelta {
        d,
        theta_d: if degenerate { 0.0 } else { t.y.atan2(t.x) },
        theta: so3_log(&rel.rotation).norm(),
        degenerate,
    }
}

/// Below this measured distance the travel direction is not constrained.
pub const WHEEL_DIRECTION_MIN_D: f64 = 0.005;

/// Wheel odometry increment between two states. Slots: `p_i, θ_i, p_j, θ_j`.
#[derive(Debug, Clone)]
pub struct WheelFactor {
    pub measured: WheelDelta,
    t_bo: Pose3,
}

impl WheelFactor {
    pub fn new(measured: WheelDelta, calib: &Calibration) -> Self {
        WheelFactor {
            measured,
            t_bo: calib.T_imu_base,
        }
    }

    /// Diagonal square-root information with motion-proportional sigmas.
    pub fn sqrt_information(&self, calib: &Calibration) -> DMatrix<f64> {
        let s = &calib.wheel_sigma;
        let m = &self.measured;
        let direction_weight = if m.degenerate || m.d < WHEEL_DIRECTION_MIN_D {
            0.0
        } else {
            1.0 / s.theta_d
        };
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / (s.d * m.d.max(0.05)),
            direction_weight,
            1.0 / (s.theta * m.theta.max(0.02)),
        ]))
    }
}

impl Factor for WheelFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let p_i = v3(params[0]);
        let r_i = so3_exp(&v3(params[1]));
        let p_j = v3(params[2]);
        let r_j = so3_exp(&v3(params[3]));
        let (r_bo, t_bo) = (self.t_bo.rotation, self.t_bo.translation);
        let r_bo_t = r_bo.transpose();
        let u = r_i.transpose() * (p_j - p_i + r_j * t_bo);
        let dp = r_bo_t * (u - t_bo);
        let dr = r_bo_t * r_i.transpose() * r_j * r_bo;
        let phi = so3_log(&dr);
        let d = dp.x.hypot(dp.y);
        let theta = phi.norm();
        let theta_d = if d < DEGENERATE_D { 0.0 } else { dp.y.atan2(dp.x) };
        let m = &self.measured;
        let res = DVector::from_vec(vec![m.d - d, wrap_angle(m.theta_d - theta_d), m.theta - theta]);
        if let Some(j) = jacobians {
            let du = [-r_i.transpose(), skew(&u), r_i.transpose(), -r_i.transpose() * r_j * skew(&t_bo)];
            let (g_d, g_td) = if d > 1e-9 {
                (
                    RowVector3::new(dp.x / d, dp.y / d, 0.0),
                    RowVector3::new(-dp.y / (d * d), dp.x / (d * d), 0.0),
                )
            } else {
                (RowVector3::zeros(), RowVector3::zeros())
            };
            let g_t = if theta > 1e-9 { phi.transpose() / theta } else { RowVector3::zeros() };
            let jinv = right_jacobian_inv(&phi);
            let dphi = [
                Matrix3::zeros(),
                -jinv * dr.transpose() * r_bo_t,
                Matrix3::zeros(),
                jinv * r_bo_t,
            ];
            for k in 0..4 {
                let ddp = r_bo_t * du[k];
                j[k].row_mut(0).copy_from(&(-g_d * ddp));
                j[k].row_mut(1).copy_from(&(-g_td * ddp));
                j[k].row_mut(2).copy_from(&(-g_t * dphi[k]));
            }
        }
        res
    }
}

/// Whitened wheel residual between two states.
pub fn wheel_residual(state_k: &State, state_k1: &State, measured: &WheelDelta, calib: &Calibration) -> Vector3<f64> {
    let f = WheelFactor::new(*measured, calib);
    let (a, b) = (state_k.slot_values(), state_k1.slot_values());
    let r = f.sqrt_information(calib) * f.evaluate(&[&a.0, &a.1, &b.0, &b.1], None);
    Vector3::new(r[0], r[1], r[2])
}

/// Chassis height and tilt. Slots: `p, θ`.
#[derive(Debug, Clone)]
pub struct GroundFactor {
    t_bo: Pose3,
}

impl GroundFactor {
    pub fn new(calib: &Calibration) -> Self {
        GroundFactor { t_bo: calib.T_imu_base }
    }

    pub fn sqrt_information(calib: &Calibration) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / calib.ground_sigma.z_m,
            1.0 / calib.ground_sigma.tilt_rad,
        ]))
    }
}

impl Factor for GroundFactor {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let p = v3(params[0]);
        let r = so3_exp(&v3(params[1]));
        let t_bo = self.t_bo.translation;
        let k = self.t_bo.rotation * Vector3::z();
        let z = p.z + (r * t_bo).z;
        let axis = r * k;
        let s = axis.x.hypot(axis.y);
        let tilt = s.clamp(0.0, 1.0).asin();
        if let Some(j) = jacobians {
            j[0].fill(0.0);
            j[0][(0, 2)] = 1.0;
            let ez = RowVector3::new(0.0, 0.0, 1.0);
            j[1].row_mut(0).copy_from(&(-ez * r * skew(&t_bo)));
            if s > 1e-9 && s < 1.0 {
                let ds = RowVector3::new(axis.x / s, axis.y / s, 0.0) / (1.0 - s * s).sqrt();
                j[1].row_mut(1).copy_from(&(-ds * r * skew(&k)));
            } else {
                j[1].row_mut(1).fill(0.0);
            }
        }
        DVector::from_vec(vec![z, tilt])
    }
}

/// Whitened ground residual of one state.
pub fn ground_residual(state: &State, calib: &Calibration) -> Vector2<f64> {
    let f = GroundFactor::new(calib);
    let s = state.slot_values();
    let r = GroundFactor::sqrt_information(calib) * f.evaluate(&[&s.0, &s.1], None);
    Vector2::new(r[0], r[1])
}

/// Full-state prior. Slots: `p, θ, vb`; residual `x ⊟ mean`.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    mean: State,
}

impl PriorFactor {
    pub fn new(mean: State) -> Self {
        PriorFactor { mean }
    }
}

impl Factor for PriorFactor {
    fn dim(&self) -> usize {
        15
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let p = v3(params[0]);
        let r = so3_exp(&v3(params[1]));
        let dphi = so3_log(&(self.mean.rotation().transpose() * r));
        let mean_vb = self.mean.speed_bias();
        let mut res = DVector::zeros(15);
        res.fixed_rows_mut::<3>(0).copy_from(&(p - self.mean.p));
        res.fixed_rows_mut::<3>(3).copy_from(&dphi);
        for i in 0..9 {
            res[6 + i] = params[2][i] - mean_vb[i];
        }
        if let Some(j) = jacobians {
            for m in j.iter_mut() {
                m.fill(0.0);
            }
            j[0].view_mut((0, 0), (3, 3)).fill_with_identity();
            j[1].view_mut((3, 0), (3, 3)).copy_from(&right_jacobian_inv(&dphi));
            j[2].view_mut((6, 0), (9, 9)).fill_with_identity();
        }
        res
    }
}

/// Prior on a Euclidean slot, `x − mean`.
#[derive(Debug, Clone)]
pub struct VectorPrior {
    pub mean: Vec<f64>,
}

impl Factor for VectorPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        if let Some(j) = jacobians {
            j[0].fill_with_identity();
        }
        DVector::from_iterator(self.mean.len(), params[0].iter().zip(&self.mean).map(|(x, m)| x - m))
    }
}

/// Whitened 15-row prior residual.
pub fn prior_residual(state: &State, prior_mean: &State, prior_sqrt_info: &DMatrix<f64>) -> DVector<f64> {
    let f = PriorFactor::new(*prior_mean);
    let s = state.slot_values();
    prior_sqrt_info * f.evaluate(&[&s.0, &s.1, &s.2], None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{check_jacobian, Manifold, Problem, ResidualBlock};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> LineSegment {
        LineSegment::from_endpoints(Vector2::new(ax, ay), Vector2::new(bx, by), 10, 0.0).unwrap()
    }

    fn calib() -> Calibration {
        let mut c = Calibration::default();
        c.T_base_lidar = Pose3::new(RotVec::new(0.0, 0.0, 0.1), Vector3::new(0.15, -0.02, 0.25));
        c.T_imu_base = Pose3::new(RotVec::new(0.01, -0.02, 0.05), Vector3::new(-0.05, 0.02, -0.1));
        c
    }

    fn room() -> Vec<LineSegment> {
        vec![
            seg(0.0, 0.0, 4.0, 0.0),
            seg(4.0, 0.0, 4.0, 3.0),
            seg(4.0, 3.0, 0.0, 3.0),
            seg(0.0, 3.0, 0.0, 0.0),
            seg(1.0, 1.0, 2.0, 2.0),
        ]
    }

    #[test]
    fn identical_frames_match_themselves() {
        let lines = room();
        let idx = LineIndex::build(&lines);
        let m = match_lines(&lines, &lines, &idx, &Pose3::identity(), &MatchConfig::default());
        assert_eq!(m.len(), lines.len());
        for x in &m {
            assert_eq!(x.ref_index, x.cur_index);
            assert!(x.angle < 1e-12);
        }
    }

    #[test]
    fn match_threshold_semantics() {
        let lines = room();
        let (s, c) = 5f64.to_radians().sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let center = Vector2::new(2.0, 1.5);
        let rotated: Vec<LineSegment> = lines.iter().map(|l| l.transformed(&rot, &(center - rot * center))).collect();
        let idx = LineIndex::build(&rotated);
        let wide = match_lines(&lines, &rotated, &idx, &Pose3::identity(), &MatchConfig::default());
        assert_eq!(wide.len(), lines.len());
        let narrow = MatchConfig {
            theta_match: 2f64.to_radians(),
            ..Default::default()
        };
        assert!(match_lines(&lines, &rotated, &idx, &Pose3::identity(), &narrow).is_empty());
    }

    #[test]
    fn overlap_gate_rejects_disjoint_colinear() {
        let r = vec![seg(0.0, 0.0, 1.0, 0.0)];
        let c = vec![seg(1.3, 0.0, 2.3, 0.0)];
        let idx = LineIndex::build(&r);
        let cfg = MatchConfig::default();
        assert!(match_lines(&c, &r, &idx, &Pose3::identity(), &cfg).is_empty());
        let c = vec![seg(0.5, 0.05, 1.5, 0.05)];
        assert_eq!(match_lines(&c, &r, &idx, &Pose3::identity(), &cfg).len(), 1);
    }

    fn lidar_identity_calib() -> Calibration {
        let mut c = Calibration::default();
        c.T_base_lidar = Pose3::identity();
        c.T_imu_base = Pose3::identity();
        c
    }

    fn line_match(r: LineSegment, c: LineSegment) -> LineMatch {
        LineMatch {
            ref_line: r,
            cur_line: c,
            ref_index: 0,
            cur_index: 0,
            angle: line_angle(&r, &c),
        }
    }

    #[test]
    fn line_residual_offsets() {
        let cal = lidar_identity_calib();
        let s = State::at_rest(0.0);
        let r = seg(0.0, 0.0, 2.0, 0.0);
        let d = line_residual(&line_match(r, seg(0.0, 0.1, 2.0, 0.1)), &s, &s, &cal).unwrap() * cal.line_sigma;
        assert_relative_eq!(d.x.abs(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(d.y.abs(), 0.1, epsilon = 1e-12);
        let d = line_residual(&line_match(r, seg(0.5, 0.0, 1.5, 0.2)), &s, &s, &cal).unwrap() * cal.line_sigma;
        assert_relative_eq!(d.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.y.abs(), 0.2, epsilon = 1e-12);
        let bad = LineMatch {
            ref_line: LineSegment {
                p_end: r.p_start,
                ..r
            },
            ..line_match(r, r)
        };
        assert!(matches!(line_residual(&bad, &s, &s, &cal), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn line_residual_vanishes_for_true_relative_pose() {
        let cal = calib();
        // level chassis poses; the body is tilted by the mounting
        let body = |c: Pose3| c.compose(&cal.T_imu_base.inverse());
        let sr = State::from_pose(&body(Pose3::new(RotVec::new(0.0, 0.0, 0.4), Vector3::new(1.0, -0.5, 0.0))), 0.0);
        let sc = State::from_pose(&body(Pose3::new(RotVec::new(0.0, 0.0, 0.9), Vector3::new(1.6, 0.1, 0.0))), 0.1);
        let t_bl = cal.imu_lidar();
        let lr = sr.pose().compose(&t_bl);
        let lc = sc.pose().compose(&t_bl);
        let wall_a = Vector3::new(3.0, -2.0, lr.translation.z);
        let wall_b = Vector3::new(3.5, 4.0, lr.translation.z);
        let to2 = |p: Vector3<f64>| Vector2::new(p.x, p.y);
        let r = LineSegment::from_endpoints(
            to2(lr.inverse().transform_point(&wall_a)),
            to2(lr.inverse().transform_point(&wall_b)),
            10,
            0.0,
        )
        .unwrap();
        let pa = wall_a * 0.3 + wall_b * 0.7;
        let pb = wall_a * 0.9 + wall_b * 0.1;
        let c = LineSegment::from_endpoints(
            to2(lc.inverse().transform_point(&pa)),
            to2(lc.inverse().transform_point(&pb)),
            10,
            0.1,
        )
        .unwrap();
        let m = line_match(r, c);
        let d = line_residual(&m, &sr, &sc, &cal).unwrap();
        assert!(d.norm() < 1e-9, "{d}");
        // endpoint labeling permutes the pair
        let swapped = line_residual(&line_match(r, c.reversed()), &sr, &sc, &cal).unwrap();
        assert_relative_eq!(swapped.x, d.y, epsilon = 1e-12);
        assert_relative_eq!(swapped.y, d.x, epsilon = 1e-12);
    }

    #[test]
    fn endpoint_swap_permutes_residual() {
        let cal = calib();
        let sr = State::from_pose(&Pose3::new(RotVec::new(0.01, 0.0, 0.4), Vector3::new(1.0, -0.5, 0.0)), 0.0);
        let sc = State::from_pose(&Pose3::new(RotVec::new(0.0, 0.02, 0.7), Vector3::new(1.3, 0.2, 0.0)), 0.1);
        let r = seg(0.0, 1.0, 3.0, 1.5);
        let c = seg(0.2, 0.8, 2.5, 1.9);
        let a = line_residual(&line_match(r, c), &sr, &sc, &cal).unwrap();
        let b = line_residual(&line_match(r, c.reversed()), &sr, &sc, &cal).unwrap();
        assert_relative_eq!(a.x, b.y, epsilon = 1e-12);
        assert_relative_eq!(a.y, b.x, epsilon = 1e-12);
    }

    #[test]
    fn wheel_delta_examples() {
        let pi = Pose3::identity();
        let pj = Pose3::new(RotVec::new(0.0, 0.0, FRAC_PI_2), Vector3::new(3.0, 4.0, 0.0));
        let w = wheel_delta(&pi, &pj);
        assert_relative_eq!(w.d, 5.0, epsilon = 1e-12);
        assert_relative_eq!(w.theta_d, 4f64.atan2(3.0), epsilon = 1e-12);
        assert_relative_eq!(w.theta, FRAC_PI_2, epsilon = 1e-12);
        assert!(!w.degenerate);
        let z = wheel_delta(&pj, &pj);
        assert!(z.degenerate);
        assert_eq!((z.d, z.theta_d), (0.0, 0.0));
        assert!(z.theta < 1e-12);
    }

    #[test]
    fn wheel_delta_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mut rp = || {
                Pose3::new(
                    RotVec::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-3.0..3.0)),
                    Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-0.2..0.2)),
                )
            };
            let (a, b) = (rp(), rp());
            let to_h = |p: &Pose3| {
                let mut m = nalgebra::Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation);
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
                m
            };
            let rel = to_h(&a).try_inverse().unwrap() * to_h(&b);
            let (x, y) = (rel[(0, 3)], rel[(1, 3)]);
            let tr = rel[(0, 0)] + rel[(1, 1)] + rel[(2, 2)];
            let ang = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            let w = wheel_delta(&a, &b);
            assert_relative_eq!(w.d, (x * x + y * y).sqrt(), epsilon = 1e-9);
            assert_relative_eq!(w.theta_d, y.atan2(x), epsilon = 1e-9);
            assert!((w.theta - ang).abs() < 1e-6);
        }
    }

    #[test]
    fn wheel_delta_is_symmetric_for_planar_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let mut rp = || Pose3::new(RotVec::new(0.0, 0.0, rng.random_range(-3.0..3.0)), Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0));
            let (a, b) = (rp(), rp());
            let (f, r) = (wheel_delta(&a, &b), wheel_delta(&b, &a));
            assert_relative_eq!(f.d, r.d, epsilon = 1e-9);
            assert_relative_eq!(f.theta, r.theta, epsilon = 1e-9);
        }
    }

    #[test]
    fn wheel_residual_rows() {
        let cal = lidar_identity_calib();
        let a = State::at_rest(0.0);
        let mut b = State::at_rest(0.1);
        b.p.x = 1.0;
        let f = WheelFactor::new(
            WheelDelta {
                d: 1.1,
                theta_d: 0.0,
                theta: 0.0,
                degenerate: false,
            },
            &cal,
        );
        let (x, y) = (a.slot_values(), b.slot_values());
        let r = f.evaluate(&[&x.0, &x.1, &y.0, &y.1], None);
        assert_relative_eq!(r[0], 0.1, epsilon = 1e-12);

        let mut c = State::at_rest(0.1);
        c.p = Vector3::new(-1.0, -0.0415, 0.0);
        let predicted = wheel_delta(&a.pose(), &c.pose()).theta_d;
        assert!(predicted < -3.09 && predicted > -3.11);
        let f = WheelFactor::new(
            WheelDelta {
                d: 1.0,
                theta_d: 3.1,
                theta: 0.0,
                degenerate: false,
            },
            &cal,
        );
        let z = c.slot_values();
        let r = f.evaluate(&[&x.0, &x.1, &z.0, &z.1], None);
        assert!(r[1].abs() < 0.1, "{}", r[1]);
        assert_relative_eq!(r[1], wrap_angle(3.1 - predicted), epsilon = 1e-12);
    }

    #[test]
    fn wheel_residual_zero_on_truth_and_direction_weight() {
        let cal = calib();
        let a = State::from_pose(&Pose3::new(RotVec::new(0.0, 0.0, 0.3), Vector3::new(0.4, 0.2, 0.1)), 0.0);
        let b = State::from_pose(&Pose3::new(RotVec::new(0.0, 0.0, 0.5), Vector3::new(0.9, 0.5, 0.1)), 0.1);
        let t_bo = cal.T_imu_base;
        let meas = wheel_delta(&a.pose().compose(&t_bo), &b.pose().compose(&t_bo));
        assert!(wheel_residual(&a, &b, &meas, &cal).norm() < 1e-9);
        let still = wheel_delta(&a.pose(), &a.pose());
        let w = WheelFactor::new(still, &cal).sqrt_information(&cal);
        assert_eq!(w[(1, 1)], 0.0);
    }

    #[test]
    fn ground_examples() {
        let cal = lidar_identity_calib();
        assert!(ground_residual(&State::at_rest(0.0), &cal).norm() < 1e-15);
        let mut s = State::at_rest(0.0);
        s.p.z = 0.05;
        let r = ground_residual(&s, &cal);
        assert_relative_eq!(r.x * cal.ground_sigma.z_m, 0.05, epsilon = 1e-15);
        assert_eq!(r.y, 0.0);
        let s = State::from_pose(&Pose3::new(RotVec::new(0.1, 0.0, 0.0), Vector3::zeros()), 0.0);
        let r = ground_residual(&s, &cal);
        assert!(r.x.abs() < 1e-15);
        assert_relative_eq!(r.y * cal.ground_sigma.tilt_rad, 0.1, epsilon = 1e-6);
    }

    #[test]
    fn prior_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = State {
            p: Vector3::new(1.0, 2.0, 0.0),
            theta: RotVec::new(0.1, 0.2, 1.0),
            v: Vector3::new(0.3, 0.0, 0.0),
            bias: ImuBias::new(Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.0, 0.001, 0.0)),
            stamp: 0.0,
        };
        let eye = DMatrix::identity(15, 15);
        assert!(prior_residual(&mean, &mean, &eye).norm() < 1e-15);
        let mut s = mean;
        s.p.x += 0.1;
        assert_relative_eq!(prior_residual(&s, &mean, &eye)[0], 0.1, epsilon = 1e-12);
        for _ in 0..50 {
            let delta: Vec<f64> = (0..15).map(|_| rng.random_range(-0.3..0.3)).collect();
            let mut s = mean;
            s.p += Vector3::from_column_slice(&delta[0..3]);
            s.theta = RotVec::from_matrix(&(mean.rotation() * so3_exp(&Vector3::from_column_slice(&delta[3..6]))));
            s.v += Vector3::from_column_slice(&delta[6..9]);
            s.bias.accel += Vector3::from_column_slice(&delta[9..12]);
            s.bias.gyro += Vector3::from_column_slice(&delta[12..15]);
            let r = prior_residual(&s, &mean, &eye);
            for i in 0..15 {
                assert_relative_eq!(r[i], delta[i], epsilon = 1e-9);
            }
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, stamp: f64) -> State {
        let mut r = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let mut theta = r(0.2);
        theta.z = r(PI).z;
        State {
            p: r(3.0),
            theta: RotVec::from_vector(theta),
            v: r(1.0),
            bias: ImuBias::new(r(0.05), r(0.01)),
            stamp,
        }
    }

    fn add_state(problem: &mut Problem, s: &State) -> [usize; 3] {
        let (p, t, vb) = s.slot_values();
        [
            problem.add_slot(Manifold::Euclidean(3), &p),
            problem.add_slot(Manifold::RotVec, &t),
            problem.add_slot(Manifold::Euclidean(9), &vb),
        ]
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cal = calib();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst = [0.0f64; 6];
        for _ in 0..100 {
            let a = random_state(&mut rng, 0.0);
            let b = random_state(&mut rng, 0.1);
            let mut problem = Problem::new();
            let sa = add_state(&mut problem, &a);
            let sb = add_state(&mut problem, &b);
            let mut rl = || seg(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let m = line_match(rl(), rl());
            problem.add_block(ResidualBlock::unweighted(vec![sa[0], sa[1], sb[0], sb[1]], Box::new(LineFactor::between(&m, &cal).unwrap())));
            let anchor = Pose3::new(RotVec::new(0.0, 0.0, 0.7), Vector3::new(0.3, 0.2, 0.1));
            problem.add_block(ResidualBlock::unweighted(vec![sb[0], sb[1]], Box::new(LineFactor::anchored(&m, &anchor, &cal).unwrap())));
            let meas = WheelDelta {
                d: 0.5,
                theta_d: 0.3,
                theta: 0.2,
                degenerate: false,
            };
            problem.add_block(ResidualBlock::unweighted(vec![sa[0], sa[1], sb[0], sb[1]], Box::new(WheelFactor::new(meas, &cal))));
            problem.add_block(ResidualBlock::unweighted(vec![sa[0], sa[1]], Box::new(GroundFactor::new(&cal))));
            problem.add_block(ResidualBlock::unweighted(vec![sa[0], sa[1], sa[2]], Box::new(PriorFactor::new(b))));
            problem.add_block(ResidualBlock::unweighted(vec![sa[2]], Box::new(VectorPrior { mean: b.speed_bias().to_vec() })));
            for (k, w) in worst.iter_mut().enumerate() {
                *w = w.max(check_jacobian(&problem, k).unwrap());
            }
        }
        for (k, w) in worst.iter().enumerate() {
            assert!(*w < 1e-5, "block {k}: {w}");
        }
    }
}
