//! Iterative linear-quadratic trajectory optimization of joint torques.
//!
//! The solver is the deterministic (iLQR) form of iLQG: without
//! control-dependent noise the nominal controls coincide. Dynamics are
//! linearized by central finite differences of the discrete one-step map, so
//! the optimizer and the simulator share a single dynamics implementation.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{within_limits, ArmError, ArmParams, JointState, Vec2};
use crate::dataset::ReachPair;
use crate::{CONTROL_DT, HORIZON};

/// Perturbation used for finite-difference linearization.
pub const FD_STEP: f64 = 1e-6;
const ELBOW_SIGN: f64 = 1.0;
/// Expected decreases below this are treated as numerical noise.
const ABS_COST_FLOOR: f64 = 1e-24;

#[derive(Debug, Error, Clone)]
pub enum IlqgError {
    #[error("numerical blowup during rollout at step {step}")]
    NumericalBlowup { step: usize },
    #[error("not converged after {} iterations (cost {:.6e})", .0.iterations, .0.final_cost())]
    NotConverged(Box<Solution>),
    #[error(transparent)]
    Arm(#[from] ArmError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid torque trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Fifty joint-torque pairs (N m), one per 0.02 s control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueTrajectory {
    steps: Vec<Vec2>,
}

impl TorqueTrajectory {
    pub fn new(steps: Vec<Vec2>) -> Result<Self, IlqgError> {
        if steps.len() != HORIZON {
            return Err(IlqgError::InvalidTrajectory(format!(
                "expected {HORIZON} steps, got {}",
                steps.len()
            )));
        }
        if let Some(k) = steps.iter().position(|u| !u.iter().all(|v| v.is_finite())) {
            return Err(IlqgError::InvalidTrajectory(format!("step {k} is not finite")));
        }
        Ok(Self { steps })
    }

    pub fn zeros() -> Self {
        Self {
            steps: vec![Vec2::zeros(); HORIZON],
        }
    }

    pub fn steps(&self) -> &[Vec2] {
        &self.steps
    }

    pub fn max_abs(&self) -> f64 {
        self.steps.iter().map(|u| u.amax()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqgConfig {
    pub horizon: usize,
    /// Control and integration step (s).
    pub dt: f64,
    /// Terminal hand-position weight (1/m^2).
    pub w_p: f64,
    /// Terminal joint-velocity weight (s^2/rad^2).
    pub w_v: f64,
    /// Control effort weight (1/(N^2 m^2 s)).
    pub w_u: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    /// Multiplier applied to the regularization on failure, divisor on success.
    pub reg_factor: f64,
    pub max_iter: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub tol_rel: f64,
    /// Line-search step sizes, tried in order.
    pub alphas: Vec<f64>,
}

impl Default for IlqgConfig {
    fn default() -> Self {
        Self {
            horizon: HORIZON,
            dt: CONTROL_DT,
            w_p: 1e4,
            w_v: 1e2,
            w_u: 1e-2,
            reg_init: 1.0,
            reg_min: 1e-9,
            reg_max: 1e10,
            reg_factor: 10.0,
            max_iter: 100,
            tol_rel: 1e-9,
            alphas: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
        }
    }
}

impl IlqgConfig {
    /// Invariant violations, empty when the configuration is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.horizon != HORIZON {
            out.push(format!("horizon must be {HORIZON}"));
        }
        if ((self.horizon as f64 * self.dt) - 1.0).abs() > 1e-9 {
            out.push("horizon * dt must equal 1.0 s".into());
        }
        for (name, w) in [("w_p", self.w_p), ("w_v", self.w_v), ("w_u", self.w_u)] {
            if !(w >= 0.0) || !w.is_finite() {
                out.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.reg_min > 0.0 && self.reg_min <= self.reg_init && self.reg_init <= self.reg_max) {
            out.push("regularization bounds must satisfy 0 < reg_min <= reg_init <= reg_max".into());
        }
        if !(self.reg_factor > 1.0) {
            out.push("reg_factor must exceed 1".into());
        }
        if self.max_iter == 0 {
            out.push("max_iter must be positive".into());
        }
        if !(self.tol_rel >= 0.0) {
            out.push("tol_rel must be non-negative".into());
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            out.push("alphas must be a non-empty list of values in (0, 1]".into());
        }
        out
    }
}

/// Discrete-time dynamics `x_{k+1} = f(x_k, u_k)`.
pub trait Plant {
    fn step(&self, x: &Vector4<f64>, u: &Vec2) -> Vector4<f64>;
}

/// The arm advanced by one RK4 step with torque held constant.
pub struct ArmPlant<'a> {
    pub arm: &'a ArmParams,
    pub dt: f64,
}

impl Plant for ArmPlant<'_> {
    fn step(&self, x: &Vector4<f64>, u: &Vec2) -> Vector4<f64> {
        self.arm.rk4_step(x, u, self.dt)
    }
}

/// Frictionless planar point mass: state `(p, v)`, control is acceleration.
pub struct DoubleIntegrator {
    pub dt: f64,
}

impl Plant for DoubleIntegrator {
    fn step(&self, x: &Vector4<f64>, u: &Vec2) -> Vector4<f64> {
        let dt = self.dt;
        Vector4::new(
            x[0] + dt * x[2] + 0.5 * dt * dt * u.x,
            x[1] + dt * x[3] + 0.5 * dt * dt * u.y,
            x[2] + dt * u.x,
            x[3] + dt * u.y,
        )
    }
}

/// Second-order expansion of a running cost term.
#[derive(Debug, Clone, Copy)]
pub struct RunningExpansion {
    pub lx: Vector4<f64>,
    pub lu: Vec2,
    pub lxx: Matrix4<f64>,
    pub luu: Matrix2<f64>,
    pub lux: Matrix2x4<f64>,
}

pub trait Objective {
    fn running(&self, x: &Vector4<f64>, u: &Vec2) -> f64;
    fn running_expansion(&self, x: &Vector4<f64>, u: &Vec2) -> RunningExpansion;
    fn terminal(&self, x: &Vector4<f64>) -> f64;
    fn terminal_expansion(&self, x: &Vector4<f64>) -> (Vector4<f64>, Matrix4<f64>);
}

/// Endpoint position + terminal velocity + control effort.
pub struct ReachObjective<'a> {
    pub arm: &'a ArmParams,
    pub target: Vec2,
    pub w_p: f64,
    pub w_v: f64,
    pub w_u: f64,
    pub dt: f64,
}

impl<'a> ReachObjective<'a> {
    pub fn new(arm: &'a ArmParams, target: Vec2, cfg: &IlqgConfig) -> Self {
        Self {
            arm,
            target,
            w_p: cfg.w_p,
            w_v: cfg.w_v,
            w_u: cfg.w_u,
            dt: cfg.dt,
        }
    }

    fn endpoint_error(&self, x: &Vector4<f64>) -> Vec2 {
        self.arm.forward_kinematics(&Vec2::new(x[0], x[1])) - self.target
    }
}

impl Objective for ReachObjective<'_> {
    fn running(&self, _x: &Vector4<f64>, u: &Vec2) -> f64 {
        self.w_u * self.dt * u.norm_squared()
    }

    fn running_expansion(&self, _x: &Vector4<f64>, u: &Vec2) -> RunningExpansion {
        let c = 2.0 * self.w_u * self.dt;
        RunningExpansion {
            lx: Vector4::zeros(),
            lu: u * c,
            lxx: Matrix4::zeros(),
            luu: Matrix2::identity() * c,
            lux: Matrix2x4::zeros(),
        }
    }

    fn terminal(&self, x: &Vector4<f64>) -> f64 {
        self.w_p * self.endpoint_error(x).norm_squared()
            + self.w_v * (x[2] * x[2] + x[3] * x[3])
    }

    /// Gauss-Newton expansion: the position block drops the FK curvature term.
    fn terminal_expansion(&self, x: &Vector4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
        let q = Vec2::new(x[0], x[1]);
        let j = self.arm.jacobian(&q);
        let gq = j.transpose() * self.endpoint_error(x) * (2.0 * self.w_p);
        let hq = j.transpose() * j * (2.0 * self.w_p);
        let grad = Vector4::new(gq.x, gq.y, 2.0 * self.w_v * x[2], 2.0 * self.w_v * x[3]);
        let mut hess = Matrix4::zeros();
        hess.fixed_view_mut::<2, 2>(0, 0).copy_from(&hq);
        hess[(2, 2)] = 2.0 * self.w_v;
        hess[(3, 3)] = 2.0 * self.w_v;
        (grad, hess)
    }
}

/// `sum_k x'Qx + u'Ru + x_N' Qf x_N`.
pub struct QuadraticObjective {
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    pub qf: Matrix4<f64>,
}

impl Objective for QuadraticObjective {
    fn running(&self, x: &Vector4<f64>, u: &Vec2) -> f64 {
        x.dot(&(self.q * x)) + u.dot(&(self.r * u))
    }

    fn running_expansion(&self, x: &Vector4<f64>, u: &Vec2) -> RunningExpansion {
        RunningExpansion {
            lx: self.q * x * 2.0,
            lu: self.r * u * 2.0,
            lxx: self.q * 2.0,
            luu: self.r * 2.0,
            lux: Matrix2x4::zeros(),
        }
    }

    fn terminal(&self, x: &Vector4<f64>) -> f64 {
        x.dot(&(self.qf * x))
    }

    fn terminal_expansion(&self, x: &Vector4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
        (self.qf * x * 2.0, self.qf * 2.0)
    }
}

/// Central-difference Jacobians `(df/dx, df/du)` of a plant's step map.
pub fn linearize<P: Plant>(
    plant: &P,
    x: &Vector4<f64>,
    u: &Vec2,
    h: f64,
) -> (Matrix4<f64>, Matrix4x2<f64>) {
    let mut a = Matrix4::zeros();
    let mut b = Matrix4x2::zeros();
    for i in 0..4 {
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += h;
        xm[i] -= h;
        let col = (plant.step(&xp, u) - plant.step(&xm, u)) / (2.0 * h);
        a.set_column(i, &col);
    }
    for i in 0..2 {
        let mut up = *u;
        let mut um = *u;
        up[i] += h;
        um[i] -= h;
        let col = (plant.step(x, &up) - plant.step(x, &um)) / (2.0 * h);
        b.set_column(i, &col);
    }
    (a, b)
}

/// Linearization of the arm's RK4 step about `(x, u)`.
pub fn linearize_step(
    arm: &ArmParams,
    x: &JointState,
    u: &Vec2,
    dt: f64,
) -> (Matrix4<f64>, Matrix4x2<f64>) {
    linearize(&ArmPlant { arm, dt }, &x.to_vector(), u, FD_STEP)
}

/// Optimized controls and iteration diagnostics.
#[derive(Debug, Clone)]
pub struct Solution {
    pub controls: Vec<Vec2>,
    /// Nominal states, `controls.len() + 1` of them.
    pub states: Vec<Vector4<f64>>,
    /// Cost of the initial guess followed by every accepted iterate.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest eigenvalue of any regularized control Hessian used for an
    /// accepted step.
    pub min_quu_eigenvalue: f64,
}

impl Solution {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("history holds the initial cost")
    }
}

fn rollout_generic<P: Plant, C: Objective>(
    plant: &P,
    cost: &C,
    x0: &Vector4<f64>,
    controls: &[Vec2],
) -> Result<(Vec<Vector4<f64>>, f64), IlqgError> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    let mut total = 0.0;
    for (k, u) in controls.iter().enumerate() {
        let x = states[k];
        total += cost.running(&x, u);
        let next = plant.step(&x, u);
        if !within_limits(&next) {
            return Err(IlqgError::NumericalBlowup { step: k });
        }
        states.push(next);
    }
    total += cost.terminal(states.last().expect("x0 present"));
    Ok((states, total))
}

struct Gains {
    feedforward: Vec<Vec2>,
    feedback: Vec<Matrix2x4<f64>>,
    /// Predicted cost change is `alpha * linear + alpha^2 * quadratic`.
    linear: f64,
    quadratic: f64,
    min_eigenvalue: f64,
}

fn min_eigenvalue_sym2(m: &Matrix2<f64>) -> f64 {
    let tr = m.m11 + m.m22;
    let det = m.m11 * m.m22 - m.m12 * m.m21;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    0.5 * tr - disc
}

fn backward_pass<C: Objective>(
    cost: &C,
    lin: &[(Matrix4<f64>, Matrix4x2<f64>)],
    states: &[Vector4<f64>],
    controls: &[Vec2],
    reg: f64,
) -> Option<Gains> {
    let n = controls.len();
    let (mut vx, mut vxx) = cost.terminal_expansion(&states[n]);
    let mut feedforward = vec![Vec2::zeros(); n];
    let mut feedback = vec![Matrix2x4::zeros(); n];
    let mut linear = 0.0;
    let mut quadratic = 0.0;
    let mut min_eigenvalue = f64::INFINITY;
    for k in (0..n).rev() {
        let (a, b) = &lin[k];
        let l = cost.running_expansion(&states[k], &controls[k]);
        let qx = l.lx + a.transpose() * vx;
        let qu = l.lu + b.transpose() * vx;
        let qxx = l.lxx + a.transpose() * vxx * a;
        let quu = l.luu + b.transpose() * vxx * b;
        let qux = l.lux + b.transpose() * vxx * a;
        let mut quu_reg = quu + Matrix2::identity() * reg;
        quu_reg = (quu_reg + quu_reg.transpose()) * 0.5;
        let eig = min_eigenvalue_sym2(&quu_reg);
        if !(eig > 0.0) {
            return None;
        }
        min_eigenvalue = min_eigenvalue.min(eig);
        let inv = quu_reg.try_inverse()?;
        let kff = -(inv * qu);
        let kfb = -(inv * qux);
        linear += kff.dot(&qu);
        quadratic += 0.5 * kff.dot(&(quu * kff));
        vx = qx + kfb.transpose() * quu * kff + kfb.transpose() * qu + qux.transpose() * kff;
        vxx = qxx + kfb.transpose() * quu * kfb + kfb.transpose() * qux + qux.transpose() * kfb;
        vxx = (vxx + vxx.transpose()) * 0.5;
        feedforward[k] = kff;
        feedback[k] = kfb;
    }
    Some(Gains {
        feedforward,
        feedback,
        linear,
        quadratic,
        min_eigenvalue,
    })
}

fn forward_pass<P: Plant, C: Objective>(
    plant: &P,
    cost: &C,
    states: &[Vector4<f64>],
    controls: &[Vec2],
    gains: &Gains,
    alpha: f64,
) -> Option<(Vec<Vector4<f64>>, Vec<Vec2>, f64)> {
    let n = controls.len();
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    xs.push(states[0]);
    let mut total = 0.0;
    for k in 0..n {
        let x = xs[k];
        let u = controls[k] + gains.feedforward[k] * alpha + gains.feedback[k] * (x - states[k]);
        total += cost.running(&x, &u);
        let next = plant.step(&x, &u);
        if !within_limits(&next) {
            return None;
        }
        us.push(u);
        xs.push(next);
    }
    total += cost.terminal(&xs[n]);
    total.is_finite().then_some((xs, us, total))
}

/// Generic iLQR loop from an initial control guess.
pub fn optimize<P: Plant, C: Objective>(
    plant: &P,
    cost: &C,
    x0: &Vector4<f64>,
    initial: Vec<Vec2>,
    cfg: &IlqgConfig,
) -> Result<Solution, IlqgError> {
    let (mut states, mut current) = rollout_generic(plant, cost, x0, &initial)?;
    let mut controls = initial;
    let mut history = vec![current];
    let mut reg = cfg.reg_init;
    let mut min_eig = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_iter {
        iterations += 1;
        let lin: Vec<_> = states
            .iter()
            .zip(&controls)
            .map(|(x, u)| linearize(plant, x, u, FD_STEP))
            .collect();
        loop {
            let gains = match backward_pass(cost, &lin, &states, &controls, reg) {
                Some(g) => g,
                None => {
                    if reg >= cfg.reg_max {
                        break 'outer;
                    }
                    reg = (reg * cfg.reg_factor).min(cfg.reg_max);
                    continue;
                }
            };
            let expected = -(gains.linear + gains.quadratic);
            // The absolute floor covers problems whose optimal cost is zero.
            if !(expected > (1e-3 * cfg.tol_rel * current).max(ABS_COST_FLOOR)) {
                // Nothing left to gain at this linearization.
                converged = true;
                break 'outer;
            }
            let accepted = cfg.alphas.iter().find_map(|&alpha| {
                forward_pass(plant, cost, &states, &controls, &gains, alpha)
                    .filter(|(_, _, c)| *c < current)
            });
            match accepted {
                Some((xs, us, c)) => {
                    let rel = (current - c) / current;
                    states = xs;
                    controls = us;
                    current = c;
                    history.push(c);
                    min_eig = min_eig.min(gains.min_eigenvalue);
                    reg = (reg / cfg.reg_factor).max(cfg.reg_min);
                    if rel < cfg.tol_rel {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    if reg >= cfg.reg_max {
                        break 'outer;
                    }
                    reg = (reg * cfg.reg_factor).min(cfg.reg_max);
                }
            }
        }
    }

    let solution = Solution {
        controls,
        states,
        cost_history: history,
        iterations,
        converged,
        min_quu_eigenvalue: min_eig,
    };
    if converged {
        Ok(solution)
    } else {
        Err(IlqgError::NotConverged(Box::new(solution)))
    }
}

/// Cost terms of a reach rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub position: f64,
    pub velocity: f64,
    pub effort: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.position + self.velocity + self.effort
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<JointState>,
    pub cost: CostBreakdown,
}

/// Simulates torques `u` from `x0` and scores the result against `target`.
pub fn rollout(
    arm: &ArmParams,
    x0: &JointState,
    u: &TorqueTrajectory,
    cfg: &IlqgConfig,
    target: &Vec2,
) -> Result<Rollout, IlqgError> {
    let plant = ArmPlant { arm, dt: cfg.dt };
    let objective = ReachObjective::new(arm, *target, cfg);
    let (states, _) = rollout_generic(&plant, &objective, &x0.to_vector(), u.steps())?;
    let last = states.last().expect("x0 present");
    let err = objective.endpoint_error(last);
    let cost = CostBreakdown {
        position: cfg.w_p * err.norm_squared(),
        velocity: cfg.w_v * (last[2] * last[2] + last[3] * last[3]),
        effort: u
            .steps()
            .iter()
            .map(|v| cfg.w_u * cfg.dt * v.norm_squared())
            .sum(),
    };
    Ok(Rollout {
        states: states.iter().map(JointState::from_vector).collect(),
        cost,
    })
}

/// Optimized reach controls.
#[derive(Debug, Clone)]
pub struct ReachSolution {
    pub torques: TorqueTrajectory,
    pub cost_history: Vec<f64>,
    pub final_hand: Vec2,
    pub converged: bool,
    pub iterations: usize,
    pub min_quu_eigenvalue: f64,
}

impl ReachSolution {
    pub fn from_solution(arm: &ArmParams, sol: Solution) -> Self {
        let last = sol.states.last().expect("states present");
        Self {
            final_hand: arm.forward_kinematics(&Vec2::new(last[0], last[1])),
            torques: TorqueTrajectory { steps: sol.controls },
            cost_history: sol.cost_history,
            converged: sol.converged,
            iterations: sol.iterations,
            min_quu_eigenvalue: sol.min_quu_eigenvalue,
        }
    }
}

/// Torque controls moving the hand from `pair.start` (at rest) to `pair.end`.
/// A solve that stops before converging returns `NotConverged` carrying its
/// best iterate.
pub fn ilqg_solve(
    arm: &ArmParams,
    pair: &ReachPair,
    cfg: &IlqgConfig,
) -> Result<ReachSolution, IlqgError> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(IlqgError::InvalidConfig(violations.join("; ")));
    }
    arm.inverse_kinematics(&pair.end, ELBOW_SIGN)?;
    let q0 = arm.inverse_kinematics(&pair.start, ELBOW_SIGN)?;
    let x0 = JointState::at_rest(q0).to_vector();
    let plant = ArmPlant { arm, dt: cfg.dt };
    let objective = ReachObjective::new(arm, pair.end, cfg);
    optimize(&plant, &objective, &x0, vec![Vec2::zeros(); cfg.horizon], cfg)
        .map(|sol| ReachSolution::from_solution(arm, sol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(start: (f64, f64), end: (f64, f64)) -> ReachPair {
        ReachPair {
            start: Vec2::new(start.0, start.1),
            end: Vec2::new(end.0, end.1),
        }
    }

    #[test]
    fn idle_rollout_at_target_costs_nothing() {
        let arm = ArmParams::default();
        let cfg = IlqgConfig::default();
        let x0 = JointState::at_rest(Vec2::new(0.4, 1.5));
        let target = arm.forward_kinematics(&x0.q);
        let r = rollout(&arm, &x0, &TorqueTrajectory::zeros(), &cfg, &target).unwrap();
        assert_eq!(r.cost.total(), 0.0);
        assert_eq!(r.states.len(), HORIZON + 1);
    }

    #[test]
    fn idle_rollout_pays_only_position() {
        let arm = ArmParams::default();
        let cfg = IlqgConfig::default();
        let x0 = JointState::at_rest(Vec2::new(0.4, 1.5));
        let target = arm.forward_kinematics(&x0.q) + Vec2::new(0.03, -0.04);
        let r = rollout(&arm, &x0, &TorqueTrajectory::zeros(), &cfg, &target).unwrap();
        let expected = cfg.w_p * (arm.forward_kinematics(&x0.q) - target).norm_squared();
        assert_eq!(r.cost.total(), expected);
    }

    #[test]
    fn effort_term_scales_with_weight() {
        let arm = ArmParams::default();
        let cfg = IlqgConfig::default();
        let doubled = IlqgConfig {
            w_u: 2.0 * cfg.w_u,
            ..cfg.clone()
        };
        let x0 = JointState::at_rest(Vec2::new(0.4, 1.5));
        let u = TorqueTrajectory::new(
            (0..HORIZON)
                .map(|k| Vec2::new(0.1 * (k as f64).sin(), -0.05))
                .collect(),
        )
        .unwrap();
        let target = Vec2::new(0.0, 0.4);
        let a = rollout(&arm, &x0, &u, &cfg, &target).unwrap();
        let b = rollout(&arm, &x0, &u, &doubled, &target).unwrap();
        assert!((b.cost.effort - 2.0 * a.cost.effort).abs() <= 1e-15 * a.cost.effort);
        assert_eq!(a.cost.position, b.cost.position);
    }

    #[test]
    fn torque_always_moves_velocity() {
        let arm = ArmParams::default();
        let x = JointState {
            q: Vec2::new(0.2, 1.9),
            qd: Vec2::new(0.3, -0.1),
        };
        let (_, b) = linearize_step(&arm, &x, &Vec2::new(0.1, 0.2), 0.02);
        assert!(b.iter().all(|v| v.is_finite()));
        assert!(b.fixed_view::<2, 2>(2, 0).norm() > 0.0);
    }

    #[test]
    fn double_integrator_linearization_is_exact() {
        let dt = 0.02;
        let plant = DoubleIntegrator { dt };
        let (a, b) = linearize(&plant, &Vector4::new(0.1, -0.3, 0.7, 0.2), &Vec2::new(0.4, -1.0), FD_STEP);
        let expected_a = Matrix4::new(
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        let expected_b = Matrix4x2::new(0.5 * dt * dt, 0.0, 0.0, 0.5 * dt * dt, dt, 0.0, 0.0, dt);
        assert!((a - expected_a).amax() < 1e-8);
        assert!((b - expected_b).amax() < 1e-8);
    }

    #[test]
    fn finite_differences_converge() {
        let arm = ArmParams::default();
        let plant = ArmPlant { arm: &arm, dt: 0.02 };
        let x = Vector4::new(0.3, 1.7, 0.4, -0.6);
        let u = Vec2::new(0.2, -0.1);
        let (a1, _) = linearize(&plant, &x, &u, 1e-6);
        let (a2, _) = linearize(&plant, &x, &u, 5e-7);
        assert!((a1 - a2).amax() < 1e-6);
    }

    #[test]
    fn zero_reach_needs_no_control() {
        let arm = ArmParams::default();
        let sol = ilqg_solve(&arm, &pair((0.0, 0.35), (0.0, 0.35)), &IlqgConfig::default()).unwrap();
        assert!(sol.torques.max_abs() < 1e-6);
        assert!(*sol.cost_history.last().unwrap() < 1e-10);
        assert!(sol.converged);
    }

    #[test]
    fn reach_lands_on_target() {
        let arm = ArmParams::default();
        let p = pair((0.05, 0.30), (0.12, 0.37));
        let sol = ilqg_solve(&arm, &p, &IlqgConfig::default()).unwrap();
        assert!((sol.final_hand - p.end).norm() < 2e-3, "{:?}", sol.final_hand);
        assert!(sol.cost_history.windows(2).all(|w| w[1] < w[0]));
        assert!(sol.min_quu_eigenvalue > 0.0);
    }

    #[test]
    fn unreachable_endpoint_is_rejected() {
        let arm = ArmParams::default();
        let err = ilqg_solve(&arm, &pair((0.0, 0.35), (0.0, 0.9)), &IlqgConfig::default()).unwrap_err();
        assert!(matches!(err, IlqgError::Arm(ArmError::Unreachable { .. })));
    }

    #[test]
    fn solve_is_deterministic() {
        let arm = ArmParams::default();
        let p = pair((-0.1, 0.40), (-0.15, 0.33));
        let a = ilqg_solve(&arm, &p, &IlqgConfig::default()).unwrap();
        let b = ilqg_solve(&arm, &p, &IlqgConfig::default()).unwrap();
        assert_eq!(a.torques, b.torques);
        assert_eq!(a.cost_history, b.cost_history);
    }

    #[test]
    fn config_invariants() {
        assert!(IlqgConfig::default().violations().is_empty());
        let bad = IlqgConfig {
            dt: 0.01,
            reg_min: 2.0,
            w_u: -1.0,
            ..IlqgConfig::default()
        };
        assert_eq!(bad.violations().len(), 3);
    }
}
