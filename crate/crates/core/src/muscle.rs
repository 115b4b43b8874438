//! Minimum-norm muscle activations realizing a joint torque.
//!
//! Each control step solves
//!
//! ```text
//!     minimize    |a|^2
//!     subject to  R a = tau,  0 <= a <= 1
//! ```
//!
//! The objective is strictly convex, so the minimizer is unique. For a
//! multiplier `lambda` the box-constrained minimizer of the Lagrangian is
//! `a(lambda) = clip(R^T lambda / 2, 0, 1)`, and the optimal multiplier solves
//! the piecewise-linear 2-D system `R a(lambda) = tau`. We run an active-set
//! (semismooth Newton) iteration on that system, seeded from the pseudoinverse
//! solution, with a backtracking line search on the concave dual. Each
//! iteration fixes the face (which coordinates sit at 0, at 1, or in between)
//! and solves the equality-constrained QP on it exactly. If the iteration
//! stalls on a degenerate face, every face is enumerated instead.

use nalgebra::{Matrix2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{MomentArms, Vec2};
use crate::ilqg::TorqueTrajectory;
use crate::{HORIZON, MUSCLES, TRAJ_DIM};

const MAX_NEWTON_ITERS: usize = 64;
const RANK_TOL: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;
/// Slack accepted on activation bounds when validating external trajectories.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MuscleError {
    #[error("gain matrix does not have full row rank")]
    RankDeficient,
    #[error("torque ({0:.6}, {1:.6}) N m is not achievable with activations in [0, 1]")]
    Infeasible(f64, f64),
    #[error("torque at step {step} is not achievable with activations in [0, 1]")]
    InfeasibleStep { step: usize },
    #[error("no face satisfied the optimality conditions (degenerate problem)")]
    Degenerate,
    #[error("invalid activation trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Six muscle activations, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationVector(Vector6<f64>);

impl ActivationVector {
    pub fn new(a: Vector6<f64>) -> Result<Self, MuscleError> {
        if a.iter().all(|v| in_unit_interval(*v)) {
            Ok(Self(a))
        } else {
            Err(MuscleError::InvalidTrajectory(format!(
                "activation vector {:?} leaves [0, 1]",
                a.as_slice()
            )))
        }
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn to_array(&self) -> [f64; MUSCLES] {
        self.0.into()
    }

    pub fn objective(&self) -> f64 {
        self.0.norm_squared()
    }
}

/// Optimal activations together with the torque-constraint multiplier that
/// certifies them: `a = clip(R^T multiplier / 2, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSolution {
    pub activations: ActivationVector,
    pub multiplier: Vec2,
}

fn in_unit_interval(v: f64) -> bool {
    (-BOUND_SLACK..=1.0 + BOUND_SLACK).contains(&v)
}

fn clip_activations(r: &MomentArms, lambda: &Vec2) -> (Vector6<f64>, Vector6<f64>) {
    let s = r.transpose() * lambda * 0.5;
    (s, s.map(|v| v.clamp(0.0, 1.0)))
}

/// Dual objective `min_{a in box} |a|^2 - lambda^T (R a - tau)`.
fn dual_value(r: &MomentArms, tau: &Vec2, lambda: &Vec2) -> f64 {
    let (s, a) = clip_activations(r, lambda);
    a.iter()
        .zip(s.iter())
        .map(|(ai, si)| ai * ai - 2.0 * si * ai)
        .sum::<f64>()
        + lambda.dot(tau)
}

/// Tests `tau` against every facet of the zonotope `R [0,1]^6`.
pub fn is_feasible(r: &MomentArms, tau: &Vec2) -> bool {
    let scale = r.abs().sum().max(1.0);
    let tol = 1e-12 * scale;
    for c in r.column_iter() {
        let len = c.norm();
        if len <= RANK_TOL * scale {
            continue;
        }
        let normal = Vec2::new(-c[1], c[0]) / len;
        for dir in [normal, -normal] {
            let support: f64 = r.column_iter().map(|g| dir.dot(&g).max(0.0)).sum();
            if dir.dot(tau) > support + tol {
                return false;
            }
        }
    }
    true
}

pub(crate) fn check_rank(r: &MomentArms) -> Result<Matrix2<f64>, MuscleError> {
    let gram = r * r.transpose();
    let scale = gram.trace().max(f64::MIN_POSITIVE);
    if !r.iter().all(|v| v.is_finite()) || gram.determinant() <= RANK_TOL * scale * scale {
        return Err(MuscleError::RankDeficient);
    }
    Ok(gram)
}

/// Solves `H d = rhs` for a symmetric PSD 2x2 `H`, falling back to the
/// pseudoinverse when `H` is rank deficient. Returns `None` when `H = 0`.
fn solve_psd2(h: &Matrix2<f64>, rhs: &Vec2) -> Option<Vec2> {
    let scale = h.trace();
    if !(scale > 0.0) {
        return None;
    }
    if h.determinant() > RANK_TOL * scale * scale {
        return h.try_inverse().map(|inv| inv * rhs);
    }
    let eig = h.symmetric_eigen();
    let mut out = Vec2::zeros();
    for (i, &val) in eig.eigenvalues.iter().enumerate() {
        if val > RANK_TOL * scale {
            let v = eig.eigenvectors.column(i);
            out += v * (v.dot(rhs) / val);
        }
    }
    Some(out)
}

fn residual(r: &MomentArms, tau: &Vec2, a: &Vector6<f64>) -> f64 {
    (r * a - tau).norm()
}

fn newton(r: &MomentArms, tau: &Vec2, gram: &Matrix2<f64>, tol: f64) -> Option<Vec2> {
    // Pseudoinverse seed: exact whenever no bound is active.
    let mut lambda = gram.try_inverse()? * tau * 2.0;
    for _ in 0..MAX_NEWTON_ITERS {
        let (s, a) = clip_activations(r, &lambda);
        let grad = tau - r * a;
        if grad.norm() <= tol {
            return Some(lambda);
        }
        let mut h = Matrix2::zeros();
        for (i, c) in r.column_iter().enumerate() {
            if s[i] > 0.0 && s[i] < 1.0 {
                h += c * c.transpose() * 0.5;
            }
        }
        let step = solve_psd2(&h, &grad)?;
        let slope = grad.dot(&step);
        if !(slope > 0.0) {
            return None;
        }
        let base = dual_value(r, tau, &lambda);
        let mut t = 1.0;
        loop {
            let trial = lambda + step * t;
            if dual_value(r, tau, &trial) >= base + ARMIJO * t * slope {
                lambda = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return None;
            }
        }
    }
    None
}

/// Face membership for the exhaustive search.
#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

fn enumerate_faces(r: &MomentArms, tau: &Vec2, tol: f64) -> Option<Vec2> {
    let mut best: Option<(f64, Vec2)> = None;
    let mut faces = [Bound::Free; MUSCLES];
    for code in 0..3usize.pow(MUSCLES as u32) {
        let mut c = code;
        for f in faces.iter_mut() {
            *f = match c % 3 {
                0 => Bound::Free,
                1 => Bound::Lower,
                _ => Bound::Upper,
            };
            c /= 3;
        }
        let mut h = Matrix2::zeros();
        let mut rhs = *tau;
        for (i, col) in r.column_iter().enumerate() {
            match faces[i] {
                Bound::Free => h += col * col.transpose() * 0.5,
                Bound::Upper => rhs -= col,
                Bound::Lower => {}
            }
        }
        let lambda = solve_psd2(&h, &rhs).unwrap_or_else(Vec2::zeros);
        let (s, a) = clip_activations(r, &lambda);
        let consistent = faces.iter().zip(s.iter()).all(|(f, &si)| match f {
            Bound::Free => (-1e-12..=1.0 + 1e-12).contains(&si),
            Bound::Lower => si <= 1e-12,
            Bound::Upper => si >= 1.0 - 1e-12,
        });
        let res = residual(r, tau, &a);
        if consistent && res <= tol {
            let obj = a.norm_squared();
            if best.is_none_or(|(b, _)| obj < b) {
                best = Some((obj, lambda));
            }
        }
    }
    best.map(|(_, l)| l)
}

/// Smallest-norm activations in `[0,1]^6` producing torque `tau`.
pub fn solve_activation_qp(r: &MomentArms, tau: &Vec2) -> Result<QpSolution, MuscleError> {
    let gram = check_rank(r)?;
    if !tau.iter().all(|v| v.is_finite()) || !is_feasible(r, tau) {
        return Err(MuscleError::Infeasible(tau.x, tau.y));
    }
    let tol = 1e-13 * (1.0 + tau.norm() + r.abs().max());
    let lambda = newton(r, tau, &gram, tol)
        .or_else(|| enumerate_faces(r, tau, 1e3 * tol))
        .ok_or(MuscleError::Degenerate)?;
    let (_, a) = clip_activations(r, &lambda);
    Ok(QpSolution {
        activations: ActivationVector(a),
        multiplier: lambda,
    })
}

/// Applies [`solve_activation_qp`] independently at every control step.
pub fn torques_to_activations(
    r: &MomentArms,
    torques: &TorqueTrajectory,
) -> Result<ActivationTrajectory, MuscleError> {
    check_rank(r)?;
    let rows = torques
        .steps()
        .iter()
        .enumerate()
        .map(|(step, tau)| match solve_activation_qp(r, tau) {
            Ok(sol) => Ok(sol.activations.to_array()),
            Err(MuscleError::Infeasible(..)) => Err(MuscleError::InfeasibleStep { step }),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, _>>()?;
    ActivationTrajectory::from_rows(rows)
}

/// Fifty control steps of six activations. Flattens time-major: step 0
/// muscles 0..5, then step 1, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrajectory {
    rows: Vec<[f64; MUSCLES]>,
}

impl ActivationTrajectory {
    pub fn zeros() -> Self {
        Self {
            rows: vec![[0.0; MUSCLES]; HORIZON],
        }
    }

    pub fn from_rows(rows: Vec<[f64; MUSCLES]>) -> Result<Self, MuscleError> {
        if rows.len() != HORIZON {
            return Err(MuscleError::InvalidTrajectory(format!(
                "expected {HORIZON} steps, got {}",
                rows.len()
            )));
        }
        for (k, row) in rows.iter().enumerate() {
            if let Some(m) = row.iter().position(|v| !in_unit_interval(*v)) {
                return Err(MuscleError::InvalidTrajectory(format!(
                    "step {k} muscle {m} = {} leaves [0, 1]",
                    row[m]
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_flat(values: &[f64]) -> Result<Self, MuscleError> {
        if values.len() != TRAJ_DIM {
            return Err(MuscleError::InvalidTrajectory(format!(
                "expected {TRAJ_DIM} values, got {}",
                values.len()
            )));
        }
        let rows = values
            .chunks_exact(MUSCLES)
            .map(|c| c.try_into().expect("chunk has MUSCLES entries"))
            .collect();
        Self::from_rows(rows)
    }

    pub fn rows(&self) -> &[[f64; MUSCLES]] {
        &self.rows
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_r() -> MomentArms {
        crate::ArmParams::default().gain_matrix()
    }

    fn simple_r() -> MomentArms {
        MomentArms::from_row_slice(&[
            1.0, -1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, -1.0, 0.0, 0.0,
        ])
    }

    fn kkt_holds(r: &MomentArms, sol: &QpSolution, tol: f64) -> bool {
        let a = sol.activations.as_vector();
        let g = r.transpose() * sol.multiplier;
        (0..MUSCLES).all(|i| {
            if a[i] <= 0.0 {
                2.0 * a[i] >= g[i] - tol
            } else if a[i] >= 1.0 {
                2.0 * a[i] <= g[i] + tol
            } else {
                (2.0 * a[i] - g[i]).abs() <= tol
            }
        })
    }

    #[test]
    fn zero_torque_gives_zero_activation() {
        let sol = solve_activation_qp(&default_r(), &Vec2::zeros()).unwrap();
        assert_eq!(*sol.activations.as_vector(), Vector6::zeros());
    }

    #[test]
    fn projects_onto_lower_face() {
        let r = simple_r();
        let sol = solve_activation_qp(&r, &Vec2::new(0.5, 0.0)).unwrap();
        let a = sol.activations.as_vector();
        assert!((a - Vector6::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(kkt_holds(&r, &sol, 1e-12));
    }

    #[test]
    fn unreachable_torque_is_infeasible() {
        let err = solve_activation_qp(&default_r(), &Vec2::new(100.0, 0.0)).unwrap_err();
        assert!(matches!(err, MuscleError::Infeasible(..)));
        // Just past the shoulder flexion limit 4.0 + 2.8 with the elbow at 2.8.
        assert!(is_feasible(&default_r(), &Vec2::new(6.8, 2.8)));
        assert!(!is_feasible(&default_r(), &Vec2::new(6.8 + 1e-6, 2.8)));
    }

    #[test]
    fn rank_deficient_gain_matrix_is_rejected() {
        let r = MomentArms::from_row_slice(&[
            1.0, -1.0, 0.0, 0.0, 0.0, 0.0, //
            2.0, -2.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        assert_eq!(
            solve_activation_qp(&r, &Vec2::zeros()).unwrap_err(),
            MuscleError::RankDeficient
        );
    }

    #[test]
    fn saturated_solution_reaches_upper_bound() {
        let r = default_r();
        let tau = Vec2::new(6.5, 2.0);
        let sol = solve_activation_qp(&r, &tau).unwrap();
        let a = sol.activations.as_vector();
        assert!(a.iter().any(|v| *v == 1.0));
        assert!((r * a - tau).norm() < 1e-9);
        assert!(kkt_holds(&r, &sol, 1e-8));
    }

    #[test]
    fn enumeration_agrees_with_newton() {
        let r = default_r();
        for tau in [
            Vec2::new(0.5, 0.2),
            Vec2::new(-2.0, 1.0),
            Vec2::new(6.0, 2.5),
            Vec2::new(-0.3, -0.9),
        ] {
            let gram = check_rank(&r).unwrap();
            let a = newton(&r, &tau, &gram, 1e-13).unwrap();
            let b = enumerate_faces(&r, &tau, 1e-10).unwrap();
            let (_, xa) = clip_activations(&r, &a);
            let (_, xb) = clip_activations(&r, &b);
            assert!((xa - xb).norm() < 1e-10, "{tau:?}");
        }
    }

    #[test]
    fn zero_torque_trajectory() {
        let torques = TorqueTrajectory::zeros();
        let acts = torques_to_activations(&default_r(), &torques).unwrap();
        assert_eq!(acts, ActivationTrajectory::zeros());
        assert_eq!(acts.flatten().len(), 300);
    }

    #[test]
    fn infeasible_step_is_located() {
        let mut steps = vec![Vec2::new(0.1, 0.1); HORIZON];
        steps[17] = Vec2::new(50.0, 0.0);
        steps[30] = Vec2::new(50.0, 0.0);
        let torques = TorqueTrajectory::new(steps).unwrap();
        assert_eq!(
            torques_to_activations(&default_r(), &torques).unwrap_err(),
            MuscleError::InfeasibleStep { step: 17 }
        );
    }

    #[test]
    fn permuting_steps_permutes_rows() {
        let r = default_r();
        let steps: Vec<Vec2> = (0..HORIZON)
            .map(|k| Vec2::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()))
            .collect();
        let mut reversed = steps.clone();
        reversed.reverse();
        let fwd = torques_to_activations(&r, &TorqueTrajectory::new(steps).unwrap()).unwrap();
        let rev = torques_to_activations(&r, &TorqueTrajectory::new(reversed).unwrap()).unwrap();
        for k in 0..HORIZON {
            assert_eq!(fwd.rows()[k], rev.rows()[HORIZON - 1 - k]);
        }
    }

    #[test]
    fn trajectory_validation() {
        assert!(ActivationTrajectory::from_rows(vec![[0.0; 6]; 49]).is_err());
        let mut flat = vec![0.1; 300];
        assert!(ActivationTrajectory::from_flat(&flat).is_ok());
        flat[123] = 1.5;
        assert!(ActivationTrajectory::from_flat(&flat).is_err());
        assert!(ActivationTrajectory::from_flat(&flat[..299]).is_err());
    }

    fn arb_problem() -> impl Strategy<Value = (MomentArms, Vec2)> {
        (
            proptest::collection::vec(-5.0f64..5.0, 12),
            proptest::collection::vec(0.0f64..1.0, 6),
        )
            .prop_filter_map("rank deficient", |(g, a)| {
                let r = MomentArms::from_row_slice(&g);
                check_rank(&r).ok()?;
                let tau = r * Vector6::from_row_slice(&a);
                Some((r, tau))
            })
    }

    proptest! {
        #[test]
        fn solution_is_kkt_point((r, tau) in arb_problem()) {
            let sol = solve_activation_qp(&r, &tau).unwrap();
            let a = sol.activations.as_vector();
            prop_assert!((r * a - tau).norm() < 1e-9);
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(kkt_holds(&r, &sol, 1e-8));
        }

        #[test]
        fn interior_pseudoinverse_is_returned_exactly(
            g in proptest::collection::vec(-5.0f64..5.0, 12),
            l in proptest::collection::vec(-1.0f64..1.0, 2),
            scale in 0.01f64..1.0,
        ) {
            // Flip columns so that R^T lambda > 0; then a = s R^T lambda lies in
            // the row space and is its own pseudoinverse solution.
            let lambda = Vec2::new(l[0], l[1]);
            prop_assume!(lambda.norm() > 0.1);
            let mut r = MomentArms::from_row_slice(&g);
            for mut c in r.column_iter_mut() {
                if c.dot(&lambda) < 0.0 {
                    c.neg_mut();
                }
            }
            prop_assume!(check_rank(&r).is_ok());
            let dir = r.transpose() * lambda;
            prop_assume!(dir.min() > 1e-6);
            let a = dir * (scale / dir.max());
            let tau = r * a;
            let sol = solve_activation_qp(&r, &tau).unwrap();
            prop_assert!((sol.activations.as_vector() - a).norm() < 1e-10);
        }

        #[test]
        fn resolving_is_idempotent((r, tau) in arb_problem()) {
            let first = solve_activation_qp(&r, &tau).unwrap();
            let again = solve_activation_qp(&r, &(r * first.activations.as_vector())).unwrap();
            prop_assert!((first.activations.objective() - again.activations.objective()).abs() < 1e-10);
        }
    }
}
