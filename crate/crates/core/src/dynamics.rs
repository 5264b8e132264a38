//! Quadrotor translational dynamics with first-order attitude lags.
//!
//! The vehicle state is `(p, v, roll, pitch, yaw)` in the world frame and the
//! input is a mass-normalized collective thrust plus roll/pitch commands and a
//! yaw-rate command:
//!
//! ```text
//! p'     = v
//! v'     = g_W + R_WB (0, 0, thrust)
//! roll'  = (k_roll  * roll_cmd  - roll)  / tau_roll
//! pitch' = (k_pitch * pitch_cmd - pitch) / tau_pitch
//! yaw'   = yaw_rate_cmd
//! ```
//!
//! `R_WB` uses the Z-Y-X (yaw, pitch, roll) Euler convention. Discretization is
//! a classical RK4 step with the input held over the step.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 9;
pub const INPUT_DIM: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = Vector4<f64>;
pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputJacobian = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Vehicle state expressed in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl UavState {
    /// A hovering state at `position` with heading `yaw`.
    pub fn at_rest(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            roll: 0.0,
            pitch: 0.0,
            yaw,
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let p = self.position;
        let v = self.velocity;
        StateVector::from_column_slice(&[
            p.x, p.y, p.z, v.x, v.y, v.z, self.roll, self.pitch, self.yaw,
        ])
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: Vector3::new(x[0], x[1], x[2]),
            velocity: Vector3::new(x[3], x[4], x[5]),
            roll: x[6],
            pitch: x[7],
            yaw: x[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// Roll and pitch inside the attitude controller's operating envelope.
    pub fn within_envelope(&self) -> bool {
        self.roll.abs() < std::f64::consts::FRAC_PI_2 && self.pitch.abs() < std::f64::consts::FRAC_PI_2
    }
}

/// Mass-normalized thrust (m/s²) and attitude commands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub thrust: f64,
    pub roll_cmd: f64,
    pub pitch_cmd: f64,
    pub yaw_rate_cmd: f64,
}

impl ControlInput {
    pub fn new(thrust: f64, roll_cmd: f64, pitch_cmd: f64, yaw_rate_cmd: f64) -> Self {
        Self {
            thrust,
            roll_cmd,
            pitch_cmd,
            yaw_rate_cmd,
        }
    }

    /// The input that balances gravity with level attitude.
    pub fn hover(params: &ModelParams) -> Self {
        Self::new(params.gravity, 0.0, 0.0, 0.0)
    }

    pub fn to_vector(&self) -> InputVector {
        InputVector::new(self.thrust, self.roll_cmd, self.pitch_cmd, self.yaw_rate_cmd)
    }

    pub fn from_vector(u: &InputVector) -> Self {
        Self::new(u[0], u[1], u[2], u[3])
    }
}

/// Attitude-lag parameters and gravity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub tau_roll: f64,
    pub tau_pitch: f64,
    pub k_roll: f64,
    pub k_pitch: f64,
    pub gravity: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            tau_roll: 0.15,
            tau_pitch: 0.15,
            k_roll: 1.0,
            k_pitch: 1.0,
            gravity: 9.81,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tau_roll, self.tau_pitch, self.k_roll, self.k_pitch, self.gravity];
        if positive.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("model parameters must be positive: {self:?}")))
        }
    }
}

/// Body-to-world rotation, Z-Y-X convention: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_world_body(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Partial derivatives of `R_WB` with respect to roll, pitch and yaw.
pub(crate) fn rotation_partials(roll: f64, pitch: f64, yaw: f64) -> [Matrix3<f64>; 3] {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let d_roll = Matrix3::new(
        0.0,
        cy * sp * cr + sy * sr,
        -cy * sp * sr + sy * cr,
        0.0,
        sy * sp * cr - cy * sr,
        -sy * sp * sr - cy * cr,
        0.0,
        cp * cr,
        -cp * sr,
    );
    let d_pitch = Matrix3::new(
        -cy * sp,
        cy * cp * sr,
        cy * cp * cr,
        -sy * sp,
        sy * cp * sr,
        sy * cp * cr,
        -cp,
        -sp * sr,
        -sp * cr,
    );
    let d_yaw = Matrix3::new(
        -sy * cp,
        -sy * sp * sr - cy * cr,
        -sy * sp * cr + cy * sr,
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        0.0,
        0.0,
        0.0,
    );
    [d_roll, d_pitch, d_yaw]
}

fn derivative(x: &StateVector, u: &InputVector, params: &ModelParams) -> StateVector {
    let thrust_dir = rotation_world_body(x[6], x[7], x[8]).column(2).into_owned();
    let acc = thrust_dir * u[0] - Vector3::new(0.0, 0.0, params.gravity);
    StateVector::from_column_slice(&[
        x[3],
        x[4],
        x[5],
        acc.x,
        acc.y,
        acc.z,
        (params.k_roll * u[1] - x[6]) / params.tau_roll,
        (params.k_pitch * u[2] - x[7]) / params.tau_pitch,
        u[3],
    ])
}

/// Continuous-time Jacobians `(df/dx, df/du)`.
fn derivative_jacobians(
    x: &StateVector,
    u: &InputVector,
    params: &ModelParams,
) -> (StateJacobian, InputJacobian) {
    let mut fx = StateJacobian::zeros();
    let mut fu = InputJacobian::zeros();
    for i in 0..3 {
        fx[(i, 3 + i)] = 1.0;
    }
    let partials = rotation_partials(x[6], x[7], x[8]);
    for (a, dr) in partials.iter().enumerate() {
        let col = dr.column(2) * u[0];
        for i in 0..3 {
            fx[(3 + i, 6 + a)] = col[i];
        }
    }
    fx[(6, 6)] = -1.0 / params.tau_roll;
    fx[(7, 7)] = -1.0 / params.tau_pitch;

    let thrust_dir = rotation_world_body(x[6], x[7], x[8]).column(2).into_owned();
    for i in 0..3 {
        fu[(3 + i, 0)] = thrust_dir[i];
    }
    fu[(6, 1)] = params.k_roll / params.tau_roll;
    fu[(7, 2)] = params.k_pitch / params.tau_pitch;
    fu[(8, 3)] = 1.0;
    (fx, fu)
}

/// Continuous-time state rates for `(x, u)`.
pub fn state_derivative(x: &UavState, u: &ControlInput, params: &ModelParams) -> StateVector {
    derivative(&x.to_vector(), &u.to_vector(), params)
}

pub(crate) fn rk4(x: &StateVector, u: &InputVector, params: &ModelParams, dt: f64) -> StateVector {
    let k1 = derivative(x, u, params);
    let k2 = derivative(&(x + k1 * (0.5 * dt)), u, params);
    let k3 = derivative(&(x + k2 * (0.5 * dt)), u, params);
    let k4 = derivative(&(x + k3 * dt), u, params);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn check_finite(x: StateVector) -> Result<StateVector> {
    if x.iter().all(|c| c.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Divergence(format!("non-finite state {:?}", x.as_slice())))
    }
}

/// One RK4 step of length `dt` with `u` held constant.
pub fn integrate_step(x: &UavState, u: &ControlInput, params: &ModelParams, dt: f64) -> Result<UavState> {
    let next = check_finite(rk4(&x.to_vector(), &u.to_vector(), params, dt))?;
    Ok(UavState::from_vector(&next))
}

/// Discrete-time Jacobians of [`integrate_step`], propagated analytically
/// through the four RK4 stages.
pub fn linearize(
    x: &UavState,
    u: &ControlInput,
    params: &ModelParams,
    dt: f64,
) -> (StateJacobian, InputJacobian) {
    rk4_jacobians(&x.to_vector(), &u.to_vector(), params, dt)
}

pub(crate) fn rk4_jacobians(
    x: &StateVector,
    u: &InputVector,
    params: &ModelParams,
    dt: f64,
) -> (StateJacobian, InputJacobian) {
    let eye = StateJacobian::identity();
    let k1 = derivative(x, u, params);
    let (f1x, f1u) = derivative_jacobians(x, u, params);
    let dk1x = f1x;
    let dk1u = f1u;

    let x2 = x + k1 * (0.5 * dt);
    let k2 = derivative(&x2, u, params);
    let (f2x, f2u) = derivative_jacobians(&x2, u, params);
    let dk2x = f2x * (eye + dk1x * (0.5 * dt));
    let dk2u = f2x * dk1u * (0.5 * dt) + f2u;

    let x3 = x + k2 * (0.5 * dt);
    let k3 = derivative(&x3, u, params);
    let (f3x, f3u) = derivative_jacobians(&x3, u, params);
    let dk3x = f3x * (eye + dk2x * (0.5 * dt));
    let dk3u = f3x * dk2u * (0.5 * dt) + f3u;

    let x4 = x + k3 * dt;
    let (f4x, f4u) = derivative_jacobians(&x4, u, params);
    let dk4x = f4x * (eye + dk3x * dt);
    let dk4u = f4x * dk3u * dt + f4u;

    let a = eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (dt / 6.0);
    let b = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (dt / 6.0);
    (a, b)
}

/// Central finite-difference Jacobians of [`integrate_step`] with step `1e-6`.
pub fn linearize_numeric(
    x: &UavState,
    u: &ControlInput,
    params: &ModelParams,
    dt: f64,
) -> (StateJacobian, InputJacobian) {
    const STEP: f64 = 1e-6;
    let xv = x.to_vector();
    let uv = u.to_vector();
    let mut a = StateJacobian::zeros();
    let mut b = InputJacobian::zeros();
    for j in 0..STATE_DIM {
        let mut xp = xv;
        let mut xm = xv;
        xp[j] += STEP;
        xm[j] -= STEP;
        let col = (rk4(&xp, &uv, params, dt) - rk4(&xm, &uv, params, dt)) / (2.0 * STEP);
        a.set_column(j, &col);
    }
    for j in 0..INPUT_DIM {
        let mut up = uv;
        let mut um = uv;
        up[j] += STEP;
        um[j] -= STEP;
        let col = (rk4(&xv, &up, params, dt) - rk4(&xv, &um, params, dt)) / (2.0 * STEP);
        b.set_column(j, &col);
    }
    (a, b)
}

/// A discrete-time prediction model used by the shooting transcription.
pub trait PredictionModel: Send + Sync {
    fn step(&self, x: &StateVector, u: &InputVector, dt: f64) -> StateVector;
    fn jacobians(&self, x: &StateVector, u: &InputVector, dt: f64) -> (StateJacobian, InputJacobian);
}

/// The nonlinear quadrotor model discretized with RK4.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadrotorModel {
    pub params: ModelParams,
}

impl QuadrotorModel {
    pub fn new(params: ModelParams) -> Self {
        Self { params }
    }
}

impl PredictionModel for QuadrotorModel {
    fn step(&self, x: &StateVector, u: &InputVector, dt: f64) -> StateVector {
        rk4(x, u, &self.params, dt)
    }

    fn jacobians(&self, x: &StateVector, u: &InputVector, dt: f64) -> (StateJacobian, InputJacobian) {
        rk4_jacobians(x, u, &self.params, dt)
    }
}

/// The quadrotor model frozen at an operating point:
/// `x+ = f(x̄, ū) + A (x - x̄) + B (u - ū)`.
#[derive(Clone, Debug)]
pub struct LinearizedModel {
    pub x_bar: StateVector,
    pub u_bar: InputVector,
    pub next_bar: StateVector,
    pub a: StateJacobian,
    pub b: InputJacobian,
    pub dt: f64,
}

impl LinearizedModel {
    pub fn at(x: &UavState, u: &ControlInput, params: &ModelParams, dt: f64) -> Self {
        let (a, b) = linearize(x, u, params, dt);
        Self {
            x_bar: x.to_vector(),
            u_bar: u.to_vector(),
            next_bar: rk4(&x.to_vector(), &u.to_vector(), params, dt),
            a,
            b,
            dt,
        }
    }
}

impl PredictionModel for LinearizedModel {
    fn step(&self, x: &StateVector, u: &InputVector, dt: f64) -> StateVector {
        debug_assert!((dt - self.dt).abs() < 1e-12, "linearized model used with a different step");
        self.next_bar + self.a * (x - self.x_bar) + self.b * (u - self.u_bar)
    }

    fn jacobians(&self, _x: &StateVector, _u: &InputVector, _dt: f64) -> (StateJacobian, InputJacobian) {
        (self.a, self.b)
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}
