//! Quadrotor state propagation under body-frame velocity commands.
//!
//! Two modes are provided. [`step_rigid_body`] integrates the translational
//! and attitude kinematics driven by a mass-normalized collective thrust and
//! commanded body rates, with [`velocity_controller`] closing the loop from
//! velocity commands. [`step_kinematic`] is a first-order velocity lag with
//! level attitude, used for fast training.
//!
//! Quaternions are scalar-first `[q0, q1, q2, q3]` and rotate body vectors
//! into the world frame. World `z` points up; gravity is `(0, 0, -g_z)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Quat = Vector4<f64>;

/// Identity attitude.
pub fn quat_identity() -> Quat {
    Quat::new(1.0, 0.0, 0.0, 0.0)
}

/// Pure yaw rotation about world `z`.
pub fn quat_from_yaw(yaw: f64) -> Quat {
    let (s, c) = (0.5 * yaw).sin_cos();
    Quat::new(c, 0.0, 0.0, s)
}

/// Yaw angle of an attitude quaternion (radians, `(-pi, pi]`).
pub fn yaw_of(q: &Quat) -> f64 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
}

/// State of one drone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    /// Position in the world frame, m.
    pub p_w: Vec3,
    /// Velocity in the world frame, m/s.
    pub v_w: Vec3,
    /// Attitude, world from body, scalar first.
    pub q_wb: Quat,
    /// Body angular rates, rad/s.
    pub omega_b: Vec3,
}

impl QuadState {
    /// At rest at `position` with the given yaw.
    pub fn at_rest(position: Vec3, yaw: f64) -> Self {
        Self {
            p_w: position,
            v_w: Vec3::zeros(),
            q_wb: quat_from_yaw(yaw),
            omega_b: Vec3::zeros(),
        }
    }

    /// Unit forward direction (body `x`) in the world frame.
    pub fn forward(&self) -> Vec3 {
        body_to_world(&self.q_wb) * Vec3::x()
    }

    pub fn is_finite(&self) -> bool {
        self.p_w.iter().all(|v| v.is_finite())
            && self.v_w.iter().all(|v| v.is_finite())
            && self.q_wb.iter().all(|v| v.is_finite())
            && self.omega_b.iter().all(|v| v.is_finite())
    }
}

/// Physical constants, limits and controller gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    /// kg. Only enters through the mass-normalized thrust.
    pub mass: f64,
    /// m/s^2.
    pub gravity: f64,
    /// Upper bound on mass-normalized collective thrust, m/s^2.
    pub max_thrust: f64,
    /// Bound on commanded roll/pitch rates, rad/s.
    pub max_body_rate: f64,
    /// Per-axis bound on body velocity commands, m/s.
    pub max_velocity: f64,
    /// Bound on yaw rate commands, rad/s.
    pub max_yaw_rate: f64,
    /// Velocity error gain of the tracking controller, 1/s.
    pub velocity_gain: f64,
    /// Attitude error gain of the tracking controller, 1/s.
    pub attitude_gain: f64,
    /// Velocity lag time constant of the kinematic model, s.
    pub tau_velocity: f64,
    /// Yaw rate lag time constant of the kinematic model, s.
    pub tau_yaw: f64,
    /// Integration step, s.
    pub dt: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.087,
            gravity: 9.81,
            max_thrust: 2.0 * 9.81,
            max_body_rate: 6.0,
            max_velocity: 1.5,
            max_yaw_rate: 1.5,
            velocity_gain: 2.0,
            attitude_gain: 8.0,
            tau_velocity: 0.25,
            tau_yaw: 0.15,
            dt: 0.05,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("max_thrust", self.max_thrust),
            ("max_body_rate", self.max_body_rate),
            ("max_velocity", self.max_velocity),
            ("max_yaw_rate", self.max_yaw_rate),
            ("velocity_gain", self.velocity_gain),
            ("attitude_gain", self.attitude_gain),
            ("tau_velocity", self.tau_velocity),
            ("tau_yaw", self.tau_yaw),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "dynamics.{name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::Config(format!(
                "dynamics.dt must lie in (0, 0.1], got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// High-level action: desired body-frame velocity and yaw rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub yaw_rate: f64,
}

impl VelocityCommand {
    pub fn new(vx: f64, vy: f64, vz: f64, yaw_rate: f64) -> Self {
        Self {
            vx,
            vy,
            vz,
            yaw_rate,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.vx, self.vy, self.vz, self.yaw_rate]
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.vx, self.vy, self.vz)
    }

    /// Clamp every component into the configured command bounds.
    /// Non-finite components become zero.
    pub fn clamped(self, params: &QuadParams) -> Self {
        let c = |v: f64, b: f64| if v.is_finite() { v.clamp(-b, b) } else { 0.0 };
        Self {
            vx: c(self.vx, params.max_velocity),
            vy: c(self.vy, params.max_velocity),
            vz: c(self.vz, params.max_velocity),
            yaw_rate: c(self.yaw_rate, params.max_yaw_rate),
        }
    }
}

/// The 4x4 generator of quaternion kinematics for body rates `omega`.
pub fn skew_omega(omega: &Vec3) -> Matrix4<f64> {
    let (wx, wy, wz) = (omega.x, omega.y, omega.z);
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0, -wx, -wy, -wz,
        wx,  0.0,  wz, -wy,
        wy,  -wz, 0.0,  wx,
        wz,   wy, -wx, 0.0,
    );
    m
}

/// Time derivative of the attitude quaternion, `0.5 * Omega(omega) * q`.
pub fn quat_derivative(q: &Quat, omega: &Vec3) -> Quat {
    0.5 * skew_omega(omega) * q
}

/// Rotation matrix taking body-frame vectors to the world frame.
pub fn body_to_world(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    #[rustfmt::skip]
    let r = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z),       2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),       1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),       2.0 * (y * z + w * x),       1.0 - 2.0 * (x * x + y * y),
    );
    r
}

/// Propagate the attitude over `dt` with constant body rates using the
/// closed-form exponential of the generator, then renormalize.
fn integrate_attitude(q: &Quat, omega: &Vec3, dt: f64) -> Quat {
    let rate = omega.norm();
    let next = if rate < 1e-12 {
        *q + quat_derivative(q, omega) * dt
    } else {
        let half = 0.5 * rate * dt;
        let a = half.cos() * Matrix4::identity() + (half.sin() / rate) * skew_omega(omega);
        a * q
    };
    next / next.norm()
}

/// Advance the rigid-body model by one step.
///
/// Velocity uses the thrust and gravity acceleration of the current attitude;
/// position advances with the mean of old and new velocity, which is exact for
/// constant acceleration. Body rates are set to the commanded rates.
pub fn step_rigid_body(
    state: &QuadState,
    thrust: f64,
    omega_b: &Vec3,
    params: &QuadParams,
) -> Result<QuadState> {
    if !thrust.is_finite() {
        return Err(Error::NonFinite("thrust"));
    }
    if !omega_b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("body rates"));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    let dt = params.dt;
    let thrust = thrust.clamp(0.0, params.max_thrust);
    let r = body_to_world(&state.q_wb);
    let accel = r * Vec3::new(0.0, 0.0, thrust) + Vec3::new(0.0, 0.0, -params.gravity);
    let v_next = state.v_w + accel * dt;
    let p_next = state.p_w + 0.5 * (state.v_w + v_next) * dt;
    Ok(QuadState {
        p_w: p_next,
        v_w: v_next,
        q_wb: integrate_attitude(&state.q_wb, omega_b, dt),
        omega_b: *omega_b,
    })
}

/// Proportional velocity tracking: returns the collective thrust and the body
/// rates that steer the thrust axis toward the desired acceleration.
pub fn velocity_controller(
    state: &QuadState,
    cmd: &VelocityCommand,
    params: &QuadParams,
) -> (f64, Vec3) {
    let cmd = cmd.clamped(params);
    let r = body_to_world(&state.q_wb);
    let v_des = r * cmd.velocity();
    let a_des = params.velocity_gain * (v_des - state.v_w) + Vec3::new(0.0, 0.0, params.gravity);

    let body_z = r * Vec3::z();
    let thrust = a_des.dot(&body_z).clamp(0.0, params.max_thrust);

    let norm = a_des.norm();
    let (roll_rate, pitch_rate) = if norm > 1e-9 {
        // Desired thrust axis in body coordinates; e_z x z_des gives the
        // rotation axis that tilts the thrust toward it.
        let z_des_b = r.transpose() * (a_des / norm);
        let b = params.max_body_rate;
        (
            (-params.attitude_gain * z_des_b.y).clamp(-b, b),
            (params.attitude_gain * z_des_b.x).clamp(-b, b),
        )
    } else {
        (0.0, 0.0)
    };
    (thrust, Vec3::new(roll_rate, pitch_rate, cmd.yaw_rate))
}

/// Controller plus rigid-body integration in one call.
pub fn step_tracked(
    state: &QuadState,
    cmd: &VelocityCommand,
    params: &QuadParams,
) -> Result<QuadState> {
    let (thrust, rates) = velocity_controller(state, cmd, params);
    step_rigid_body(state, thrust, &rates, params)
}

/// First-order lag model with level attitude.
pub fn step_kinematic(state: &QuadState, cmd: &VelocityCommand, params: &QuadParams) -> QuadState {
    let cmd = cmd.clamped(params);
    let dt = params.dt;
    let yaw = yaw_of(&state.q_wb);
    let level = quat_from_yaw(yaw);
    let target = body_to_world(&level) * cmd.velocity();

    let kv = (dt / params.tau_velocity).min(1.0);
    let v_next = state.v_w + (target - state.v_w) * kv;
    let p_next = state.p_w + 0.5 * (state.v_w + v_next) * dt;

    let kw = (dt / params.tau_yaw).min(1.0);
    let yaw_rate = state.omega_b.z + (cmd.yaw_rate - state.omega_b.z) * kw;
    let yaw_next = yaw + 0.5 * (state.omega_b.z + yaw_rate) * dt;

    QuadState {
        p_w: p_next,
        v_w: v_next,
        q_wb: quat_from_yaw(yaw_next),
        omega_b: Vec3::new(0.0, 0.0, yaw_rate),
    }
}

/// Which propagation model the environment uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMode {
    #[default]
    Kinematic,
    RigidBody,
}

/// Advance one step in the chosen mode.
pub fn step(
    mode: DynamicsMode,
    state: &QuadState,
    cmd: &VelocityCommand,
    params: &QuadParams,
) -> Result<QuadState> {
    match mode {
        DynamicsMode::Kinematic => Ok(step_kinematic(state, cmd, params)),
        DynamicsMode::RigidBody => step_tracked(state, cmd, params),
    }
}
