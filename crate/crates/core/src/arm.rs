//! Planar two-link arm moving in the horizontal plane, driven by six muscles
//! through a constant activation-to-torque gain matrix.
//!
//! Joint angles are measured counter-clockwise: `q1` is the shoulder angle
//! from the +x axis, `q2` the elbow angle relative to the upper arm.

use nalgebra::{Matrix2, SMatrix, Vector2, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::muscle::ActivationTrajectory;
use crate::MUSCLES;

pub type Vec2 = Vector2<f64>;
/// Activation-to-torque gains, one column per muscle.
pub type MomentArms = SMatrix<f64, 2, MUSCLES>;

/// Below this `|det J|` the hand Jacobian is treated as singular.
pub const SINGULAR_DET: f64 = 1e-8;
/// Any state component above this magnitude aborts a simulation.
pub const BLOWUP_LIMIT: f64 = 1e6;
const ACTIVATION_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArmError {
    #[error("hand position ({x:.6}, {y:.6}) m is outside the reachable annulus")]
    Unreachable { x: f64, y: f64 },
    #[error("singular configuration: |det J| = {det:.3e}")]
    SingularConfiguration { det: f64 },
    #[error("activation {index} = {value} is outside [0, 1]")]
    Domain { index: usize, value: f64 },
    #[error("numerical blowup at t = {time:.4} s")]
    NumericalBlowup { time: f64 },
    #[error("integration step {dt_int} s does not divide control step {dt_ctrl} s")]
    InvalidStep { dt_ctrl: f64, dt_int: f64 },
}

/// Geometric and inertial parameters of the arm plus the muscle gain matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmParams {
    /// Upper arm length (m).
    pub l1: f64,
    /// Forearm length (m).
    pub l2: f64,
    /// Link masses (kg).
    pub m1: f64,
    pub m2: f64,
    /// Link moments of inertia (kg m^2).
    pub i1: f64,
    pub i2: f64,
    /// Center-of-mass distances from the proximal joint (m).
    pub s1: f64,
    pub s2: f64,
    /// Joint viscosity (N m s / rad), row-major.
    pub viscosity: [[f64; 2]; 2],
    /// Activation-to-torque gains (N m per unit activation), row-major 2x6.
    /// Muscles: shoulder flexor/extensor, elbow flexor/extensor,
    /// biarticular flexor/extensor.
    pub gains: [[f64; MUSCLES]; 2],
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            l1: 0.30,
            l2: 0.33,
            m1: 1.4,
            m2: 1.0,
            i1: 0.025,
            i2: 0.045,
            s1: 0.11,
            s2: 0.16,
            viscosity: [[0.05, 0.025], [0.025, 0.05]],
            gains: [
                [4.0, -4.0, 0.0, 0.0, 2.8, -3.5],
                [0.0, 0.0, 2.5, -2.5, 2.8, -3.5],
            ],
        }
    }
}

/// Joint angles (rad) and velocities (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState {
    pub q: Vec2,
    pub qd: Vec2,
}

impl JointState {
    pub fn at_rest(q: Vec2) -> Self {
        Self { q, qd: Vec2::zeros() }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.q.x, self.q.y, self.qd.x, self.qd.y)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self {
            q: Vec2::new(x[0], x[1]),
            qd: Vec2::new(x[2], x[3]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// Hand position (m), velocity (m/s) and acceleration (m/s^2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HandKinematics {
    pub p: Vec2,
    pub v: Vec2,
    pub a: Vec2,
}

/// Joint-space states sampled on the control grid, starting at t = 0.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub states: Vec<JointState>,
    pub final_hand: Vec2,
}

impl ArmParams {
    pub fn viscosity_matrix(&self) -> Matrix2<f64> {
        let b = &self.viscosity;
        Matrix2::new(b[0][0], b[0][1], b[1][0], b[1][1])
    }

    pub fn gain_matrix(&self) -> MomentArms {
        MomentArms::from_fn(|r, c| self.gains[r][c])
    }

    pub fn max_reach(&self) -> f64 {
        self.l1 + self.l2
    }

    pub fn min_reach(&self) -> f64 {
        (self.l1 - self.l2).abs()
    }

    pub fn forward_kinematics(&self, q: &Vec2) -> Vec2 {
        let (s1, c1) = q.x.sin_cos();
        let (s12, c12) = (q.x + q.y).sin_cos();
        Vec2::new(
            self.l1 * c1 + self.l2 * c12,
            self.l1 * s1 + self.l2 * s12,
        )
    }

    /// Closed-form inverse kinematics on the branch where `sign(q2) = elbow_sign`.
    pub fn inverse_kinematics(&self, p: &Vec2, elbow_sign: f64) -> Result<Vec2, ArmError> {
        let r = p.norm();
        let tol = 1e-12 * self.max_reach();
        if !r.is_finite() || r > self.max_reach() + tol || r < self.min_reach() - tol {
            return Err(ArmError::Unreachable { x: p.x, y: p.y });
        }
        let cos_q2 = ((r * r - self.l1 * self.l1 - self.l2 * self.l2)
            / (2.0 * self.l1 * self.l2))
            .clamp(-1.0, 1.0);
        let q2 = elbow_sign.signum() * cos_q2.acos();
        let q1 = p.y.atan2(p.x) - (self.l2 * q2.sin()).atan2(self.l1 + self.l2 * q2.cos());
        Ok(Vec2::new(q1, q2))
    }

    /// Hand Jacobian `d FK / d q`.
    pub fn jacobian(&self, q: &Vec2) -> Matrix2<f64> {
        let (s1, c1) = q.x.sin_cos();
        let (s12, c12) = (q.x + q.y).sin_cos();
        Matrix2::new(
            -self.l1 * s1 - self.l2 * s12,
            -self.l2 * s12,
            self.l1 * c1 + self.l2 * c12,
            self.l2 * c12,
        )
    }

    /// Time derivative of the Jacobian along joint velocity `qd`.
    pub fn jacobian_dot(&self, q: &Vec2, qd: &Vec2) -> Matrix2<f64> {
        let (s1, c1) = q.x.sin_cos();
        let (s12, c12) = (q.x + q.y).sin_cos();
        let w1 = qd.x;
        let w12 = qd.x + qd.y;
        Matrix2::new(
            -self.l1 * c1 * w1 - self.l2 * c12 * w12,
            -self.l2 * c12 * w12,
            -self.l1 * s1 * w1 - self.l2 * s12 * w12,
            -self.l2 * s12 * w12,
        )
    }

    /// Maps hand velocity and acceleration to joint velocity and acceleration.
    pub fn hand_to_joint_derivatives(
        &self,
        q: &Vec2,
        v: &Vec2,
        a: &Vec2,
    ) -> Result<(Vec2, Vec2), ArmError> {
        let j = self.jacobian(q);
        let det = j.determinant();
        if det.abs() <= SINGULAR_DET {
            return Err(ArmError::SingularConfiguration { det });
        }
        let j_inv = Matrix2::new(j.m22, -j.m12, -j.m21, j.m11) / det;
        let qd = j_inv * v;
        let qdd = j_inv * (a - self.jacobian_dot(q, &qd) * qd);
        Ok((qd, qdd))
    }

    fn inertia_constants(&self) -> (f64, f64, f64) {
        (
            self.i1 + self.i2 + self.m2 * self.l1 * self.l1,
            self.m2 * self.l1 * self.s2,
            self.i2,
        )
    }

    pub fn mass_matrix(&self, q: &Vec2) -> Matrix2<f64> {
        let (a1, a2, a3) = self.inertia_constants();
        let c2 = q.y.cos();
        Matrix2::new(a1 + 2.0 * a2 * c2, a3 + a2 * c2, a3 + a2 * c2, a3)
    }

    /// Coriolis and centripetal torques.
    pub fn coriolis(&self, q: &Vec2, qd: &Vec2) -> Vec2 {
        let (_, a2, _) = self.inertia_constants();
        let k = a2 * q.y.sin();
        Vec2::new(-qd.y * (2.0 * qd.x + qd.y) * k, qd.x * qd.x * k)
    }

    pub fn inverse_dynamics(&self, q: &Vec2, qd: &Vec2, qdd: &Vec2) -> Vec2 {
        self.mass_matrix(q) * qdd + self.coriolis(q, qd) + self.viscosity_matrix() * qd
    }

    pub fn forward_dynamics(&self, q: &Vec2, qd: &Vec2, tau: &Vec2) -> Vec2 {
        let h = self.mass_matrix(q);
        let rhs = tau - self.coriolis(q, qd) - self.viscosity_matrix() * qd;
        // H is SPD for valid parameters; solve the 2x2 system directly.
        let det = h.m11 * h.m22 - h.m12 * h.m21;
        Vec2::new(
            (h.m22 * rhs.x - h.m12 * rhs.y) / det,
            (h.m11 * rhs.y - h.m21 * rhs.x) / det,
        )
    }

    pub fn kinetic_energy(&self, state: &JointState) -> f64 {
        0.5 * state.qd.dot(&(self.mass_matrix(&state.q) * state.qd))
    }

    /// Time derivative of the state vector `(q, qd)` under torque `tau`.
    pub fn state_derivative(&self, x: &Vector4<f64>, tau: &Vec2) -> Vector4<f64> {
        let q = Vec2::new(x[0], x[1]);
        let qd = Vec2::new(x[2], x[3]);
        let qdd = self.forward_dynamics(&q, &qd, tau);
        Vector4::new(qd.x, qd.y, qdd.x, qdd.y)
    }

    /// One classical Runge-Kutta step with torque held constant.
    pub fn rk4_step(&self, x: &Vector4<f64>, tau: &Vec2, dt: f64) -> Vector4<f64> {
        rk4(x, dt, |y| self.state_derivative(y, tau))
    }

    pub fn activation_to_torque(&self, act: &Vector6<f64>) -> Result<Vec2, ArmError> {
        for (index, &value) in act.iter().enumerate() {
            if !(-ACTIVATION_SLACK..=1.0 + ACTIVATION_SLACK).contains(&value) {
                return Err(ArmError::Domain { index, value });
            }
        }
        Ok(self.gain_matrix() * act)
    }

    /// Drives the arm open-loop with zero-order-held activations and returns
    /// the state at every control instant (including t = 0).
    pub fn simulate_activations(
        &self,
        start: &JointState,
        traj: &ActivationTrajectory,
        dt_ctrl: f64,
        dt_int: f64,
    ) -> Result<Simulation, ArmError> {
        let substeps = substep_count(dt_ctrl, dt_int)?;
        let mut x = start.to_vector();
        let mut states = Vec::with_capacity(traj.steps() + 1);
        states.push(*start);
        for (k, row) in traj.rows().iter().enumerate() {
            let tau = self.activation_to_torque(&Vector6::from_row_slice(row))?;
            for s in 0..substeps {
                x = self.rk4_step(&x, &tau, dt_int);
                if !within_limits(&x) {
                    let time = k as f64 * dt_ctrl + (s + 1) as f64 * dt_int;
                    return Err(ArmError::NumericalBlowup { time });
                }
            }
            states.push(JointState::from_vector(&x));
        }
        let last = states.last().expect("initial state is always present");
        Ok(Simulation {
            final_hand: self.forward_kinematics(&last.q),
            states,
        })
    }
}

pub(crate) fn within_limits(x: &Vector4<f64>) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= BLOWUP_LIMIT)
}

fn substep_count(dt_ctrl: f64, dt_int: f64) -> Result<usize, ArmError> {
    let ratio = dt_ctrl / dt_int;
    let n = ratio.round();
    if !(dt_int > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 * n {
        return Err(ArmError::InvalidStep { dt_ctrl, dt_int });
    }
    Ok(n as usize)
}

/// Classical fourth-order Runge-Kutta step for an autonomous system.
pub fn rk4<F>(x: &Vector4<f64>, dt: f64, f: F) -> Vector4<f64>
where
    F: Fn(&Vector4<f64>) -> Vector4<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (0.5 * dt)));
    let k3 = f(&(x + k2 * (0.5 * dt)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}
