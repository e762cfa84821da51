//! IMU preintegration between two frame stamps.
//!
//! Midpoint propagation of the increments (α, β, γ) in the frame of the first
//! sample. The error state (δα, δβ, δφ) is propagated with the exact Jacobian
//! of the discrete update, so covariance and bias Jacobians are consistent
//! with the increments themselves.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataio::{ImuNoise, ImuSample};
use crate::error::{Error, Result};
use crate::factors::State;
use crate::geometry::{right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log};
use crate::solver::Factor;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;
pub type Vector15 = SVector<f64, 15>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn new(accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        ImuBias { accel, gyro }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_plausible(&self) -> bool {
        self.accel.iter().chain(self.gyro.iter()).all(|x| x.is_finite())
            && self.accel.norm() < 2.0
            && self.gyro.norm() < 0.5
    }

    fn delta(&self, other: &ImuBias) -> (Vector3<f64>, Vector3<f64>) {
        (self.accel - other.accel, self.gyro - other.gyro)
    }
}

/// World-frame gravity acceleration; points down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityVector {
    pub g_world: Vector3<f64>,
}

impl GravityVector {
    pub fn new(direction: Vector3<f64>, magnitude: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 1e-9) || !n.is_finite() {
            return Err(Error::InvalidArgument("gravity direction is degenerate".into()));
        }
        Ok(GravityVector {
            g_world: direction * (magnitude / n),
        })
    }

    pub fn down(magnitude: f64) -> Self {
        GravityVector {
            g_world: Vector3::new(0.0, 0.0, -magnitude),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: Matrix3<f64>,
    pub dt_total: f64,
    /// Order (α, β, γ-tangent).
    pub covariance: Matrix9,
    /// ∂(α, β, γ)/∂(b_a, b_ω).
    pub j_bias: Matrix9x6,
    pub linearization_bias: ImuBias,
    pub noise: ImuNoise,
}

impl Preintegration {
    fn identity(bias: ImuBias, noise: ImuNoise) -> Self {
        Preintegration {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: Matrix3::identity(),
            dt_total: 0.0,
            covariance: Matrix9::zeros(),
            j_bias: Matrix9x6::zeros(),
            linearization_bias: bias,
            noise,
        }
    }

    fn block(&self, row: usize, col: usize) -> Matrix3<f64> {
        self.j_bias.fixed_view::<3, 3>(row, col).into_owned()
    }

    /// Increments re-linearized at `bias` to first order.
    pub fn corrected(&self, bias: &ImuBias) -> (Vector3<f64>, Vector3<f64>, Matrix3<f64>) {
        let (dba, dbg) = bias.delta(&self.linearization_bias);
        let alpha = self.alpha + self.block(0, 0) * dba + self.block(0, 3) * dbg;
        let beta = self.beta + self.block(3, 0) * dba + self.block(3, 3) * dbg;
        let gamma = self.gamma * so3_exp(&(self.block(6, 3) * dbg));
        (alpha, beta, gamma)
    }

    /// W = L⁻¹ for Σ + εI = L·Lᵀ, so WᵀW = Σ⁻¹ for the 9 kinematic rows.
    pub fn sqrt_information(&self) -> Matrix9 {
        let mut sym = (self.covariance + self.covariance.transpose()) * 0.5 + Matrix9::identity() * 1e-12;
        for _ in 0..6 {
            if let Some(c) = sym.cholesky() {
                if let Some(w) = c.l().solve_lower_triangular(&Matrix9::identity()) {
                    return w;
                }
            }
            sym += Matrix9::identity() * (sym.diagonal().max() * 1e-9).max(1e-12);
        }
        Matrix9::identity()
    }
}

/// Midpoint preintegration of `samples` at fixed `bias`.
pub fn integrate(samples: &[ImuSample], bias: &ImuBias, noise: &ImuNoise) -> Result<Preintegration> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("preintegration needs at least two samples".into()));
    }
    let mut pre = Preintegration::identity(*bias, *noise);
    for w in samples.windows(2) {
        let dt = w[1].stamp - w[0].stamp;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "non-monotone IMU stamps at {}",
                w[1].stamp
            )));
        }
        step(&mut pre, &w[0], &w[1], dt);
    }
    Ok(pre)
}

fn step(pre: &mut Preintegration, s0: &ImuSample, s1: &ImuSample, dt: f64) {
    let b = &pre.linearization_bias;
    let w = (s0.gyro + s1.gyro) * 0.5 - b.gyro;
    let phi = w * dt;
    let dr = so3_exp(&phi);
    let jr = right_jacobian(&phi);
    let r0 = pre.gamma;
    let r1 = r0 * dr;
    let u0 = s0.accel - b.accel;
    let u1 = s1.accel - b.accel;
    let a_mid = (r0 * u0 + r1 * u1) * 0.5;

    let r1u1 = r1 * skew(&u1);
    let d_phi = -(r0 * skew(&u0) + r1u1 * dr.transpose()) * 0.5;
    let d_ba = -(r0 + r1) * 0.5;
    let d_bg = r1u1 * jr * (0.5 * dt);
    let d_na0 = -r0 * 0.5;
    let d_na1 = -r1 * 0.5;
    let d_ng = r1u1 * jr * (0.25 * dt);
    let half_dt2 = 0.5 * dt * dt;
    let i3 = Matrix3::identity();

    let mut f = Matrix9::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
    f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(d_phi * half_dt2));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(d_phi * dt));
    f.fixed_view_mut::<3, 3>(6, 6).copy_from(&dr.transpose());

    let mut bmat = Matrix9x6::zeros();
    bmat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(d_ba * half_dt2));
    bmat.fixed_view_mut::<3, 3>(0, 3).copy_from(&(d_bg * half_dt2));
    bmat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(d_ba * dt));
    bmat.fixed_view_mut::<3, 3>(3, 3).copy_from(&(d_bg * dt));
    bmat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-jr * dt));

    // noise columns: n_a0, n_g0, n_a1, n_g1
    let mut g = SMatrix::<f64, 9, 12>::zeros();
    for (col, d) in [(0, d_na0), (3, d_ng), (6, d_na1), (9, d_ng)] {
        g.fixed_view_mut::<3, 3>(0, col).copy_from(&(d * half_dt2));
        g.fixed_view_mut::<3, 3>(3, col).copy_from(&(d * dt));
    }
    g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-jr * (0.5 * dt)));
    g.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-jr * (0.5 * dt)));

    let va = pre.noise.accel_density.powi(2) / dt;
    let vg = pre.noise.gyro_density.powi(2) / dt;
    let mut q = SMatrix::<f64, 12, 12>::zeros();
    for i in 0..3 {
        q[(i, i)] = va;
        q[(3 + i, 3 + i)] = vg;
        q[(6 + i, 6 + i)] = va;
        q[(9 + i, 9 + i)] = vg;
    }

    pre.alpha += pre.beta * dt + a_mid * half_dt2;
    pre.beta += a_mid * dt;
    pre.gamma = r1;
    pre.dt_total += dt;
    pre.covariance = f * pre.covariance * f.transpose() + g * q * g.transpose();
    pre.covariance = (pre.covariance + pre.covariance.transpose()) * 0.5;
    pre.j_bias = f * pre.j_bias + bmat;
}

/// First-order update of the increments to `new_bias`; covariance and
/// Jacobians are kept, the linearization point moves.
pub fn correct_for_bias(pre: &Preintegration, new_bias: &ImuBias) -> Preintegration {
    let (dba, dbg) = new_bias.delta(&pre.linearization_bias);
    if dba.norm() > 0.1 || dbg.norm() > 0.1 {
        log::warn!(
            "bias correction step is large (|δb_a|={:.3}, |δb_ω|={:.3}); consider re-integrating",
            dba.norm(),
            dbg.norm()
        );
    }
    let (alpha, beta, gamma) = pre.corrected(new_bias);
    Preintegration {
        alpha,
        beta,
        gamma,
        linearization_bias: *new_bias,
        ..pre.clone()
    }
}

/// Composes consecutive increments `[t0, t1]` and `[t1, t2]`.
pub fn compose(a: &Preintegration, b: &Preintegration) -> Preintegration {
    Preintegration {
        alpha: a.alpha + a.beta * b.dt_total + a.gamma * b.alpha,
        beta: a.beta + a.gamma * b.beta,
        gamma: a.gamma * b.gamma,
        dt_total: a.dt_total + b.dt_total,
        ..a.clone()
    }
}

/// Preintegrated IMU constraint between two consecutive states.
///
/// Parameter slots: `p_i, θ_i, vb_i, p_j, θ_j, vb_j` where `vb` stacks
/// velocity, accelerometer bias and gyro bias.
#[derive(Debug, Clone)]
pub struct ImuFactor {
    pub pre: Preintegration,
    pub gravity: GravityVector,
}

impl ImuFactor {
    pub fn new(pre: Preintegration, gravity: GravityVector) -> Self {
        ImuFactor { pre, gravity }
    }

    /// Square-root information of the 15 rows.
    pub fn sqrt_information(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(15, 15);
        w.view_mut((0, 0), (9, 9)).copy_from(&self.pre.sqrt_information());
        let dt = self.pre.dt_total.max(1e-9);
        let wa = 1.0 / (self.pre.noise.accel_bias_walk * dt.sqrt());
        let wg = 1.0 / (self.pre.noise.gyro_bias_walk * dt.sqrt());
        for i in 0..3 {
            w[(9 + i, 9 + i)] = wa;
            w[(12 + i, 12 + i)] = wg;
        }
        w
    }
}

fn v3(s: &[f64], at: usize) -> Vector3<f64> {
    Vector3::new(s[at], s[at + 1], s[at + 2])
}

impl Factor for ImuFactor {
    fn dim(&self) -> usize {
        15
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let p_i = v3(params[0], 0);
        let r_i = so3_exp(&v3(params[1], 0));
        let v_i = v3(params[2], 0);
        let bias_i = ImuBias::new(v3(params[2], 3), v3(params[2], 6));
        let p_j = v3(params[3], 0);
        let r_j = so3_exp(&v3(params[4], 0));
        let v_j = v3(params[5], 0);
        let ba_j = v3(params[5], 3);
        let bg_j = v3(params[5], 6);

        let dt = self.pre.dt_total;
        let g = self.gravity.g_world;
        let (alpha, beta, gamma) = self.pre.corrected(&bias_i);
        let rit = r_i.transpose();
        let dp = p_j - p_i - v_i * dt - g * (0.5 * dt * dt);
        let dv = v_j - v_i - g * dt;
        let e = gamma.transpose() * rit * r_j;
        let r_q = so3_log(&e);

        let mut r = DVector::zeros(15);
        r.fixed_rows_mut::<3>(0).copy_from(&(rit * dp - alpha));
        r.fixed_rows_mut::<3>(3).copy_from(&(rit * dv - beta));
        r.fixed_rows_mut::<3>(6).copy_from(&r_q);
        r.fixed_rows_mut::<3>(9).copy_from(&(ba_j - bias_i.accel));
        r.fixed_rows_mut::<3>(12).copy_from(&(bg_j - bias_i.gyro));

        if let Some(j) = jacobians {
            let jq = right_jacobian_inv(&r_q);
            let (_, dbg) = bias_i.delta(&self.pre.linearization_bias);
            let j_gbg = self.pre.block(6, 3);
            let i3 = Matrix3::identity();
            for m in j.iter_mut() {
                m.fill(0.0);
            }
            // p_i
            j[0].view_mut((0, 0), (3, 3)).copy_from(&(-rit));
            // θ_i
            j[1].view_mut((0, 0), (3, 3)).copy_from(&skew(&(rit * dp)));
            j[1].view_mut((3, 0), (3, 3)).copy_from(&skew(&(rit * dv)));
            j[1].view_mut((6, 0), (3, 3)).copy_from(&(-jq * r_j.transpose() * r_i));
            // v_i, b_a,i, b_ω,i
            j[2].view_mut((0, 0), (3, 3)).copy_from(&(-rit * dt));
            j[2].view_mut((3, 0), (3, 3)).copy_from(&(-rit));
            j[2].view_mut((0, 3), (3, 3)).copy_from(&(-self.pre.block(0, 0)));
            j[2].view_mut((0, 6), (3, 3)).copy_from(&(-self.pre.block(0, 3)));
            j[2].view_mut((3, 3), (3, 3)).copy_from(&(-self.pre.block(3, 0)));
            j[2].view_mut((3, 6), (3, 3)).copy_from(&(-self.pre.block(3, 3)));
            let dq_dbg = -jq * e.transpose() * right_jacobian(&(j_gbg * dbg)) * j_gbg;
            j[2].view_mut((6, 6), (3, 3)).copy_from(&dq_dbg);
            j[2].view_mut((9, 3), (3, 3)).copy_from(&(-i3));
            j[2].view_mut((12, 6), (3, 3)).copy_from(&(-i3));
            // p_j
            j[3].view_mut((0, 0), (3, 3)).copy_from(&rit);
            // θ_j
            j[4].view_mut((6, 0), (3, 3)).copy_from(&jq);
            // v_j, b_a,j, b_ω,j
            j[5].view_mut((3, 0), (3, 3)).copy_from(&rit);
            j[5].view_mut((9, 3), (3, 3)).copy_from(&i3);
            j[5].view_mut((12, 6), (3, 3)).copy_from(&i3);
        }
        r
    }
}

/// Whitened 15-row residual between two states.
pub fn imu_residual(state_k: &State, state_k1: &State, pre: &Preintegration, g: &GravityVector) -> Result<Vector15> {
    let gap = state_k1.stamp - state_k.stamp;
    if (gap - pre.dt_total).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "state gap {gap} does not match preintegration span {}",
            pre.dt_total
        )));
    }
    let factor = ImuFactor::new(pre.clone(), *g);
    let (a, b) = (state_k.slot_values(), state_k1.slot_values());
    let params: [&[f64]; 6] = [&a.0, &a.1, &a.2, &b.0, &b.1, &b.2];
    let raw = factor.evaluate(&params, None);
    Ok(Vector15::from_iterator((factor.sqrt_information() * raw).iter().copied()))
}
