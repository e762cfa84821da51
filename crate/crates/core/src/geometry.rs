//! Rotation-vector and rigid-transform algebra.
//!
//! Rotations are parameterized by rotation vectors (axis times angle) in the
//! canonical ball `‖θ‖ ≤ π`. Pose increments use the right perturbation
//! convention `R ⊞ δ = R·exp(δ)`, which is also the retraction used by the
//! solver for rotation slots.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SMALL_ANGLE: f64 = 1e-8;

/// Rotation vector in the canonical range `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotVec(pub Vector3<f64>);

impl RotVec {
    pub fn identity() -> Self {
        RotVec(Vector3::zeros())
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        RotVec(Vector3::new(x, y, z)).canonical()
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        RotVec(v).canonical()
    }

    /// Folds the vector into the `[0, π]` ball, flipping the axis when needed.
    pub fn canonical(self) -> Self {
        let angle = self.0.norm();
        if angle <= PI || !angle.is_finite() {
            return self;
        }
        let wrapped = angle.rem_euclid(2.0 * PI);
        let axis = self.0 / angle;
        if wrapped <= PI {
            RotVec(axis * wrapped)
        } else {
            RotVec(-axis * (2.0 * PI - wrapped))
        }
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        so3_exp(&self.0)
    }

    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        RotVec(so3_log(r))
    }
}

/// `[v]×`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential, validated.
pub fn exp_so3(v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite rotation vector {v:?}")));
    }
    Ok(so3_exp(v))
}

/// Logarithm of a rotation matrix, validated for orthonormality (1e-6).
pub fn log_so3(r: &Matrix3<f64>) -> Result<RotVec> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite rotation matrix".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "matrix is not a rotation (orthonormality error {ortho:e})"
        )));
    }
    Ok(RotVec(so3_log(r)))
}

/// Unchecked exponential.
pub fn so3_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    let k = skew(v);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Matrix3::identity() + a * k + b * k * k
}

/// Unchecked logarithm returning the canonical rotation vector.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = vee(&(r - r.transpose())) * 0.5;
    let s = w.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = s.atan2(c);
    if angle < SMALL_ANGLE {
        // log(R) ≈ vee(R - Rᵀ)/2 · (1 + θ²/6)
        return w * (1.0 + angle * angle / 6.0);
    }
    if angle < PI - 1e-3 {
        return w * (angle / s);
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part instead: (R + Rᵀ)/2 = cosθ·I + (1 - cosθ)·aaᵀ.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * c) / (1.0 - c);
    let (mut best, mut best_val) = (0, aat[(0, 0)]);
    for i in 1..3 {
        if aat[(i, i)] > best_val {
            best = i;
            best_val = aat[(i, i)];
        }
    }
    let mut axis = aat.column(best).into_owned() / best_val.max(1e-300).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    let v = axis * angle;
    RotVec(v).canonical().0
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ)·exp(Jr(φ)·δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() - (1.0 - angle.cos()) / a2 * k + (angle - angle.sin()) / (a2 * angle) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let coeff = 1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// `log(exp(θ)·exp(δ))`, the rotation-vector retraction.
pub fn boxplus_rotvec(theta: &Vector3<f64>, delta: &Vector3<f64>) -> Vector3<f64> {
    so3_log(&(so3_exp(theta) * so3_exp(delta)))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rigid transform in 3D. The rotation is kept as a matrix; the rotation
/// vector view is available through [`Pose3::rotvec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Pose3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: RotVec, translation: Vector3<f64>) -> Self {
        Pose3 {
            rotation: rotation.to_matrix(),
            translation,
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose3 { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn rotvec(&self) -> RotVec {
        RotVec::from_matrix(&self.rotation)
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let rt = self.rotation.transpose();
        Pose3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Unit quaternion `(x, y, z, w)` for TUM export.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_quaternion_xyzw(t: Vector3<f64>, q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Pose3 {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation: t,
        }
    }

    /// Geodesic interpolation: translation linearly, rotation along `exp(s·log(Δ))`.
    pub fn interpolate(&self, other: &Pose3, s: f64) -> Pose3 {
        let delta = so3_log(&(self.rotation.transpose() * other.rotation));
        Pose3 {
            rotation: self.rotation * so3_exp(&(delta * s)),
            translation: self.translation + (other.translation - self.translation) * s,
        }
    }

    /// Planar projection: xy translation and heading of the x axis.
    pub fn to_pose2(&self) -> Pose2 {
        Pose2::new(
            self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]),
            self.translation.x,
            self.translation.y,
        )
    }
}

/// Planar rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub yaw: f64,
    pub xy: Vector2<f64>,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn identity() -> Self {
        Pose2 {
            yaw: 0.0,
            xy: Vector2::zeros(),
        }
    }

    pub fn new(yaw: f64, x: f64, y: f64) -> Self {
        Pose2 {
            yaw: wrap_angle(yaw),
            xy: Vector2::new(x, y),
        }
    }

    pub fn rotation(&self) -> nalgebra::Matrix2<f64> {
        let (s, c) = self.yaw.sin_cos();
        nalgebra::Matrix2::new(c, -s, s, c)
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.xy + self.rotation() * other.xy;
        Pose2::new(self.yaw + other.yaw, t.x, t.y)
    }

    pub fn inverse(&self) -> Pose2 {
        let t = -(self.rotation().transpose() * self.xy);
        Pose2::new(-self.yaw, t.x, t.y)
    }

    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation() * p + self.xy
    }

    pub fn to_pose3(&self) -> Pose3 {
        Pose3 {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, self.yaw)),
            translation: Vector3::new(self.xy.x, self.xy.y, 0.0),
        }
    }
}

/// Least-squares rigid motion `T` with `dst ≈ T·src` (closed form).
pub fn rigid_fit_2d(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Pose2> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "rigid fit needs equal non-empty point lists, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector2<f64>>() / n;
    let cd = dst.iter().sum::<Vector2<f64>>() / n;
    let (mut dot, mut cross) = (0.0, 0.0);
    for (a, b) in src.iter().zip(dst) {
        let (a, b) = (a - cs, b - cd);
        dot += a.dot(&b);
        cross += a.x * b.y - a.y * b.x;
    }
    let yaw = if dot == 0.0 && cross == 0.0 { 0.0 } else { cross.atan2(dot) };
    let rot = Pose2::new(yaw, 0.0, 0.0).rotation();
    let t = cd - rot * cs;
    Ok(Pose2::new(yaw, t.x, t.y))
}
