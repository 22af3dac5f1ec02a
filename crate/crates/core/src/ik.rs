//! Weighted-marker inverse kinematics.
//!
//! Minimizes `Σₙ ½·Wₙ·‖targetₙ − keypointₙ(q)‖²` with Levenberg–Marquardt on
//! the √W-scaled residuals. Rotational coordinates are conditioned against
//! translations by a fixed scale (`rotation_scale_mm` mm per radian) in the
//! damping term, and weights are normalized by their maximum so the iterates
//! do not depend on the overall weight scale.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{DofKind, JointPositions, Pose, SkeletonError, SkeletonModel, NUM_KEYPOINTS};

#[derive(Debug, Error)]
pub enum IkError {
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("expected {NUM_KEYPOINTS} targets, got {0}")]
    TargetCount(usize),
    #[error("target {0} has a non-finite position or an invalid weight")]
    InvalidTarget(usize),
    #[error("solver produced a non-finite iterate")]
    NonFinite,
    #[error("invalid settings: {0}")]
    Settings(&'static str),
}

/// A 3D target for one keypoint with its confidence weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: Vector3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkSettings {
    pub max_iterations: usize,
    /// Largest scaled step component (mm, or mm-equivalent for rotations)
    /// below which the solve is considered converged.
    pub step_tolerance: f64,
    /// Normalized objective (mm²) below which the solve stops.
    pub residual_tolerance: f64,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub rotation_scale_mm: f64,
    pub enforce_limits: bool,
}

impl Default for IkSettings {
    fn default() -> IkSettings {
        IkSettings {
            max_iterations: 50,
            step_tolerance: 1e-8,
            residual_tolerance: 1e-4,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            rotation_scale_mm: 500.0,
            enforce_limits: false,
        }
    }
}

impl IkSettings {
    pub fn validate(&self) -> Result<(), IkError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.max_iterations < 1 {
            return Err(IkError::Settings("max_iterations must be at least 1"));
        }
        if !(positive(self.step_tolerance) && positive(self.residual_tolerance) && positive(self.lambda0)) {
            return Err(IkError::Settings("tolerances and lambda0 must be positive"));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down > 1.0) {
            return Err(IkError::Settings("lambda adaptation factors must exceed 1"));
        }
        if !positive(self.rotation_scale_mm) {
            return Err(IkError::Settings("rotation scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct IkSolution {
    pub pose: Pose,
    /// Objective at the returned pose, in mm² with the caller's weights.
    pub objective: f64,
    pub converged: bool,
    /// All weights were zero; the initial pose was returned untouched.
    pub no_evidence: bool,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

impl IkSolution {
    /// Solver trace as CSV (`iteration,lambda,objective,accepted`).
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,lambda,objective,accepted\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.lambda, r.objective, r.accepted as u8));
        }
        s
    }
}

fn check_targets(targets: &[Target]) -> Result<(), IkError> {
    if targets.len() != NUM_KEYPOINTS {
        return Err(IkError::TargetCount(targets.len()));
    }
    for (i, t) in targets.iter().enumerate() {
        if !(t.weight.is_finite() && t.weight >= 0.0) || t.position.iter().any(|v| !v.is_finite()) {
            return Err(IkError::InvalidTarget(i));
        }
    }
    Ok(())
}

fn weighted_objective(positions: &JointPositions, targets: &[Target], weights: impl Fn(usize) -> f64) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(n, t)| 0.5 * weights(n) * (t.position - positions.keypoints[n]).norm_squared())
        .sum()
}

/// Objective value at `pose`.
pub fn objective(model: &SkeletonModel, pose: &Pose, targets: &[Target]) -> Result<f64, IkError> {
    check_targets(targets)?;
    let positions = model.forward_kinematics(pose)?;
    Ok(weighted_objective(&positions, targets, |n| targets[n].weight))
}

/// Analytic gradient of [`objective`] with respect to the pose.
pub fn objective_gradient(model: &SkeletonModel, pose: &Pose, targets: &[Target]) -> Result<DVector<f64>, IkError> {
    check_targets(targets)?;
    let (positions, jac) = model.keypoint_jacobian(pose)?;
    let mut residual = DVector::zeros(3 * NUM_KEYPOINTS);
    for (n, t) in targets.iter().enumerate() {
        let r = (positions.keypoints[n] - t.position) * t.weight;
        residual.fixed_rows_mut::<3>(3 * n).copy_from(&r);
    }
    Ok(jac.transpose() * residual)
}

/// Solves the weighted IK problem starting from `q_init`.
pub fn solve(model: &SkeletonModel, q_init: &Pose, targets: &[Target], settings: &IkSettings) -> Result<IkSolution, IkError> {
    settings.validate()?;
    check_targets(targets)?;
    let w_max = targets.iter().map(|t| t.weight).fold(0.0, f64::max);
    let positions = model.forward_kinematics(q_init)?;
    if w_max == 0.0 {
        return Ok(IkSolution {
            pose: q_init.clone(),
            objective: 0.0,
            converged: false,
            no_evidence: true,
            iterations: 0,
            trace: Vec::new(),
        });
    }
    let w: Vec<f64> = targets.iter().map(|t| t.weight / w_max).collect();
    let damping: DVector<f64> = DVector::from_iterator(
        model.total_dof(),
        model.dof_kinds().iter().map(|k| match k {
            DofKind::Translation => 1.0,
            DofKind::Rotation => settings.rotation_scale_mm * settings.rotation_scale_mm,
        }),
    );
    let scale: DVector<f64> = damping.map(f64::sqrt);

    let mut q = q_init.clone();
    let mut f = weighted_objective(&positions, targets, |n| w[n]);
    let mut lambda = settings.lambda0;
    let mut trace = Vec::new();
    let mut converged = f <= settings.residual_tolerance;
    let mut iterations = 0;

    let n = model.total_dof();
    while !converged && iterations < settings.max_iterations {
        let (positions, jac) = model.keypoint_jacobian(&q)?;
        let mut jtj = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for (k, t) in targets.iter().enumerate() {
            if w[k] == 0.0 {
                continue;
            }
            let rows = jac.rows(3 * k, 3);
            let r = t.position - positions.keypoints[k];
            jtj += rows.transpose() * rows * w[k];
            g += rows.transpose() * r * w[k];
        }

        let mut accepted = false;
        while iterations < settings.max_iterations {
            iterations += 1;
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * damping[i];
            }
            let Some(chol) = a.cholesky() else {
                lambda *= settings.lambda_up;
                continue;
            };
            let delta = chol.solve(&g);
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(IkError::NonFinite);
            }
            let mut q_new = Pose(&q.0 + &delta);
            if settings.enforce_limits {
                model.clamp_limits(&mut q_new);
            }
            model.normalize_pose(&mut q_new);
            let f_new = weighted_objective(&model.forward_kinematics(&q_new)?, targets, |k| w[k]);
            if !f_new.is_finite() {
                return Err(IkError::NonFinite);
            }
            let step = delta.component_mul(&scale).amax();
            if f_new < f {
                trace.push(IterationRecord { iteration: iterations, lambda, objective: f_new * w_max, accepted: true });
                q = q_new;
                f = f_new;
                lambda = (lambda / settings.lambda_down).max(1e-15);
                accepted = true;
                converged = f <= settings.residual_tolerance || step <= settings.step_tolerance;
                break;
            }
            trace.push(IterationRecord { iteration: iterations, lambda, objective: f_new * w_max, accepted: false });
            if step <= settings.step_tolerance {
                // no decrease from a negligible step: at a stationary point
                converged = true;
                break;
            }
            lambda *= settings.lambda_up;
        }
        if !accepted && !converged {
            break;
        }
    }

    let objective = weighted_objective(&model.forward_kinematics(&q)?, targets, |k| targets[k].weight);
    Ok(IkSolution { pose: q, objective, converged, no_evidence: false, iterations, trace })
}

/// Uniform-weight targets at the given keypoint positions.
pub fn uniform_targets(positions: &[Vector3<f64>; NUM_KEYPOINTS]) -> Vec<Target> {
    positions.iter().map(|&p| Target { position: p, weight: 1.0 }).collect()
}
