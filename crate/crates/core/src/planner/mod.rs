//! Planners driven by a [`FieldProvider`]: multi-step projection to contact
//! and a penalty-based trajectory optimizer.

mod bank;
mod bench;

pub use bank::{BankConfig, BoundaryBank};
pub use bench::{
    projection_ordering, projection_trials, run_projection, run_trajectories, summarize_projection, summarize_trajectories, trajectory_ordering,
    trajectory_trials, OrderingCheck, ProjectionRow, ProjectionSummary, ProjectionTrial, TargetCategory, TrajectoryRow,
    TrajectorySummary, TrajectoryTrial,
};

use crate::field::{norm, FieldProvider};
use crate::geometry::{is_colliding, robot_scene_distance, Configuration, GeometryError, RobotModel, Scene};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("no obstacle of the target scene is within reach")]
    Unreachable,
    #[error("start configuration is in collision")]
    StartInCollision,
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub max_steps: usize,
    /// Contact when the robot's clearance to the target is at most this.
    pub contact_tol: f64,
    /// Gradients with a larger norm are normalized; smaller ones are used
    /// as-is, which damps the step.
    pub normalize_above: f64,
    /// Consecutive undefined-gradient steps before giving up.
    pub max_failed_steps: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_steps: 100,
            contact_tol: 0.01,
            normalize_above: 0.1,
            max_failed_steps: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionOutcome {
    Contact,
    StepBudget,
    UndefinedGradient,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub success: bool,
    pub outcome: ProjectionOutcome,
    /// Projection updates attempted before contact (0 if `q0` touches).
    pub steps: usize,
    pub failed_steps: usize,
    pub final_q: Configuration,
    pub wall_time: Duration,
    pub trace: Vec<Configuration>,
}

fn reachable(model: &RobotModel, target: &Scene) -> bool {
    let r_link = model.link_radii().iter().copied().fold(0.0, f64::max);
    target
        .obstacles
        .iter()
        .any(|o| o.center.norm() - o.radius - r_link <= model.reach())
}

/// Repeats `q <- clamp(q - d(q) g(q))` until the robot touches `target`.
pub fn project_to_contact(
    provider: &mut dyn FieldProvider,
    model: &RobotModel,
    target: &Scene,
    q0: &[f64],
    cfg: &ProjectionConfig,
) -> Result<ProjectionResult, PlannerError> {
    model.check(q0)?;
    if !reachable(model, target) {
        return Err(PlannerError::Unreachable);
    }
    let start = Instant::now();
    let touching = |q: &[f64]| robot_scene_distance(model, target, q) <= cfg.contact_tol;
    let mut q = model.clamp(q0);
    let mut trace = vec![q.clone()];
    let mut failed = 0;
    let mut consecutive = 0;
    let finish = |success, outcome, steps, failed, q: Configuration, trace| ProjectionResult {
        success,
        outcome,
        steps,
        failed_steps: failed,
        final_q: q,
        wall_time: start.elapsed(),
        trace,
    };
    for step in 0..cfg.max_steps {
        if touching(&q) {
            return Ok(finish(true, ProjectionOutcome::Contact, step, failed, q, trace));
        }
        let ans = provider.query(&q).ok().and_then(|a| a.gradient.map(|g| (a.distance, g)));
        let Some((d, g)) = ans.filter(|(d, g)| d.is_finite() && g.iter().all(|v| v.is_finite())) else {
            failed += 1;
            consecutive += 1;
            if consecutive >= cfg.max_failed_steps {
                return Ok(finish(false, ProjectionOutcome::UndefinedGradient, step + 1, failed, q, trace));
            }
            continue;
        };
        consecutive = 0;
        let n = norm(&g);
        let s = if n > cfg.normalize_above { d / n } else { d };
        let next: Vec<f64> = q.iter().zip(&g).map(|(qi, gi)| qi - s * gi).collect();
        q = model.clamp(&next);
        trace.push(q.clone());
    }
    let ok = touching(&q);
    let outcome = if ok {
        ProjectionOutcome::Contact
    } else {
        ProjectionOutcome::StepBudget
    };
    Ok(finish(ok, outcome, cfg.max_steps, failed, q, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Free waypoints after the fixed start.
    pub n_waypoints: usize,
    pub w_collision: f64,
    /// Clearance (radians) below which the collision penalty is active.
    pub margin: f64,
    pub w_goal: f64,
    pub max_iters: usize,
    /// Fraction of the preconditioned step applied per iteration.
    pub step: f64,
    /// Largest per-waypoint move per iteration (radians).
    pub max_waypoint_step: f64,
    pub goal_tol: f64,
    /// Stop once no waypoint moves more than this.
    pub converge_tol: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_waypoints: 24,
            w_collision: 50.0,
            margin: 0.15,
            w_goal: 1000.0,
            max_iters: 200,
            step: 0.5,
            max_waypoint_step: 0.2,
            goal_tol: 0.05,
            converge_tol: 1e-6,
        }
    }
}

impl TrajectoryConfig {
    fn validate(&self) -> Result<(), PlannerError> {
        if self.n_waypoints == 0 || self.max_iters == 0 {
            return Err(PlannerError::InvalidConfig("n_waypoints and max_iters must be positive".into()));
        }
        let pos = [self.step, self.max_waypoint_step, self.goal_tol];
        if pos.iter().any(|v| !(*v > 0.0)) || !(self.w_goal >= 0.0) || !(self.w_collision >= 0.0) {
            return Err(PlannerError::InvalidConfig("weights and steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub success: bool,
    /// `|q_final - q_target|`.
    pub tracking_error: f64,
    pub opt_steps: usize,
    /// Start followed by the free waypoints.
    pub trajectory: Vec<Configuration>,
    pub colliding_waypoints: usize,
    pub diverged: bool,
}

/// Minimizes `sum |q_{i+1} - q_i|^2 + w_c sum max(0, m - d(q_i))^2
/// + w_g |q_N - q_target|^2` with the start fixed. Steps are preconditioned
/// by the inverse of the quadratic part, so the collision push is spread
/// smoothly along the path.
pub fn optimize_trajectory(
    provider: &mut dyn FieldProvider,
    model: &RobotModel,
    scene: &Scene,
    q_start: &[f64],
    q_target: &[f64],
    cfg: &TrajectoryConfig,
) -> Result<TrajectoryResult, PlannerError> {
    cfg.validate()?;
    model.check(q_start)?;
    model.check(q_target)?;
    if is_colliding(model, scene, q_start) {
        return Err(PlannerError::StartInCollision);
    }
    let n = cfg.n_waypoints;
    let dof = model.dof();
    let mut x: Vec<Configuration> = (0..=n)
        .map(|i| {
            let s = i as f64 / n as f64;
            q_start.iter().zip(q_target).map(|(a, b)| a + s * (b - a)).collect()
        })
        .collect();
    let mut iters = 0;
    let mut diverged = false;
    for it in 0..cfg.max_iters {
        iters = it + 1;
        let answers = provider.query_batch(&x[1..]);
        let mut grad = vec![vec![0.0; dof]; n + 1];
        let mut cost = 0.0;
        for i in 1..=n {
            let prev = &x[i - 1];
            for k in 0..dof {
                let dk = x[i][k] - prev[k];
                cost += dk * dk;
                grad[i][k] += 2.0 * dk;
                grad[i - 1][k] -= 2.0 * dk;
            }
            if let Ok(a) = &answers[i - 1] {
                let pen = (cfg.margin - a.distance).max(0.0);
                cost += cfg.w_collision * pen * pen;
                if let (true, Some(g)) = (pen > 0.0, &a.gradient) {
                    for k in 0..dof {
                        grad[i][k] -= 2.0 * cfg.w_collision * pen * g[k];
                    }
                }
            }
        }
        for k in 0..dof {
            let e = x[n][k] - q_target[k];
            cost += cfg.w_goal * e * e;
            grad[n][k] += 2.0 * cfg.w_goal * e;
        }
        if !cost.is_finite() || grad.iter().flatten().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        let delta = precondition(&grad[1..], cfg.w_goal);
        let mut moved: f64 = 0.0;
        for (i, d) in delta.iter().enumerate() {
            let mut step: Vec<f64> = d.iter().map(|v| cfg.step * v).collect();
            let sn = norm(&step);
            if sn > cfg.max_waypoint_step {
                step.iter_mut().for_each(|v| *v *= cfg.max_waypoint_step / sn);
            }
            let next: Vec<f64> = x[i + 1].iter().zip(&step).map(|(a, b)| a - b).collect();
            let next = model.clamp(&next);
            moved = moved.max(crate::sampling::dist(&next, &x[i + 1]));
            x[i + 1] = next;
        }
        if moved < cfg.converge_tol {
            break;
        }
    }
    let tracking_error = crate::sampling::dist(&x[n], q_target);
    let colliding_waypoints = x.iter().filter(|q| is_colliding(model, scene, q)).count();
    Ok(TrajectoryResult {
        success: !diverged && colliding_waypoints == 0 && tracking_error <= cfg.goal_tol,
        tracking_error,
        opt_steps: iters,
        trajectory: x,
        colliding_waypoints,
        diverged,
    })
}

/// Solves `H d = g` per joint, where `H / 2` is the first-difference
/// Laplacian with a fixed start, free end, and `w_goal` added at the end.
fn precondition(grad: &[Vec<f64>], w_goal: f64) -> Vec<Vec<f64>> {
    let n = grad.len();
    let dof = grad[0].len();
    let mut out = vec![vec![0.0; dof]; n];
    for k in 0..dof {
        let diag: Vec<f64> = (0..n)
            .map(|i| 2.0 * if i + 1 == n { 1.0 + w_goal } else { 2.0 })
            .collect();
        let rhs: Vec<f64> = grad.iter().map(|g| g[k]).collect();
        let sol = solve_tridiagonal(-2.0, &diag, &rhs);
        for (o, s) in out.iter_mut().zip(sol) {
            o[k] = s;
        }
    }
    out
}

/// Thomas algorithm for a symmetric tridiagonal system with constant
/// off-diagonal `off`.
fn solve_tridiagonal(off: f64, diag: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off * c[i - 1];
        c[i] = off / m;
        d[i] = (rhs[i] - off * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}
