//! Non-learned field evaluators and the provider interface planners consume.
//!
//! The distributional field is the expectation of distance and unit direction
//! over a sample set of minimal-distance collision configurations. The
//! single-nearest baseline and the task-space pullback are kept here too so
//! that every provider reports through the same [`FieldAnswer`].

use crate::geometry::{jacobian_point, link_point, Configuration, RobotModel, Scene};
use crate::oracle::{mean_unit_direction, oracle_cdf, CollisionGrid, OracleError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Distances below this are treated as coincident.
pub const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("empty sample set")]
    EmptySet,
    #[error("sample {0} coincides with the query; direction undefined")]
    SingularDirection(usize),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("provider failure: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Empirical,
    BaselineCdf,
    SdfPullback,
    LearnedDirect,
    LearnedMc,
}

impl Provenance {
    pub const ALL: [Provenance; 6] = [
        Provenance::Oracle,
        Provenance::Empirical,
        Provenance::BaselineCdf,
        Provenance::SdfPullback,
        Provenance::LearnedDirect,
        Provenance::LearnedMc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Oracle => "oracle",
            Provenance::Empirical => "empirical",
            Provenance::BaselineCdf => "baseline_cdf",
            Provenance::SdfPullback => "sdf_pullback",
            Provenance::LearnedDirect => "learned_direct",
            Provenance::LearnedMc => "learned_mc",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Provenance::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown provider '{s}'"))
    }
}

/// Distance, gradient (absent where undefined) and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldAnswer {
    pub distance: f64,
    pub gradient: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl FieldAnswer {
    pub fn gradient_norm(&self) -> Option<f64> {
        self.gradient.as_ref().map(|g| norm(g))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance from `q` to the samples.
pub fn empirical_distance(q: &[f64], samples: &[Configuration]) -> Result<f64, FieldError> {
    if samples.is_empty() {
        return Err(FieldError::EmptySet);
    }
    Ok(samples.iter().map(|s| dist(q, s)).sum::<f64>() / samples.len() as f64)
}

/// Mean unit direction from the samples toward `q`. Not renormalized: the
/// norm shrinks when the samples disagree.
pub fn empirical_gradient(q: &[f64], samples: &[Configuration]) -> Result<Vec<f64>, FieldError> {
    if samples.is_empty() {
        return Err(FieldError::EmptySet);
    }
    if let Some(i) = samples.iter().position(|s| dist(q, s) < COINCIDENT_EPS) {
        return Err(FieldError::SingularDirection(i));
    }
    Ok(mean_unit_direction(q, samples))
}

/// Single-nearest field over a fixed boundary set. Ties go to the lowest
/// index.
pub fn baseline_cdf(q: &[f64], boundary_samples: &[Configuration]) -> FieldAnswer {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, s) in boundary_samples.iter().enumerate() {
        let d = dist(q, s);
        if d < best.1 {
            best = (i, d);
        }
    }
    let gradient = if best.0 == usize::MAX || best.1 < COINCIDENT_EPS {
        None
    } else {
        let s = &boundary_samples[best.0];
        Some(q.iter().zip(s).map(|(a, b)| (a - b) / best.1).collect())
    };
    FieldAnswer {
        distance: best.1,
        gradient,
        provenance: Provenance::BaselineCdf,
    }
}

/// A point on the robot: link index and fraction along it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub link: usize,
    pub param: f64,
}

impl ControlPoint {
    pub fn tip(model: &RobotModel) -> Self {
        Self {
            link: model.dof() - 1,
            param: 1.0,
        }
    }
}

/// Task-space clearance of the control points pulled back through the
/// point Jacobian. Distance is the smallest signed workspace distance; the
/// gradient is `J^T grad_sdf` at that point, normalized.
pub fn sdf_pullback_gradient(
    model: &RobotModel,
    scene: &Scene,
    q: &[f64],
    control_points: &[ControlPoint],
) -> FieldAnswer {
    let mut best: Option<(ControlPoint, f64, usize)> = None;
    for cp in control_points {
        let p = link_point(model, q, cp.link, cp.param);
        for (k, o) in scene.obstacles.iter().enumerate() {
            let d = p.distance(o.center) - o.radius;
            if best.map_or(true, |b| d < b.1) {
                best = Some((*cp, d, k));
            }
        }
    }
    let Some((cp, distance, k)) = best else {
        return FieldAnswer {
            distance: f64::INFINITY,
            gradient: None,
            provenance: Provenance::SdfPullback,
        };
    };
    let p = link_point(model, q, cp.link, cp.param);
    let o = scene.obstacles[k];
    let r = p - o.center;
    let rn = r.norm();
    let gradient = if rn < COINCIDENT_EPS {
        None
    } else {
        let n = r * (1.0 / rn);
        let jac = jacobian_point(model, q, cp.link, cp.param).expect("control point on a link");
        let g: Vec<f64> = jac.iter().map(|row| row[0] * n.x + row[1] * n.y).collect();
        let gn = norm(&g);
        // Zero pullback means the radial direction is in the Jacobian null space.
        (gn > 1e-9).then(|| g.iter().map(|v| v / gn).collect())
    };
    FieldAnswer {
        distance,
        gradient,
        provenance: Provenance::SdfPullback,
    }
}

/// Anything that answers distance/gradient queries for one robot and scene.
pub trait FieldProvider {
    fn provenance(&self) -> Provenance;

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError>;

    fn query_batch(&mut self, qs: &[Configuration]) -> Vec<Result<FieldAnswer, FieldError>> {
        qs.iter().map(|q| self.query(q)).collect()
    }
}

/// Grid oracle: exact distance and uniform-weight expected gradient over the
/// brute-force minimal set.
pub struct OracleProvider<'a> {
    pub grid: &'a CollisionGrid,
    pub tol: f64,
}

impl<'a> OracleProvider<'a> {
    pub fn new(grid: &'a CollisionGrid) -> Self {
        Self {
            grid,
            tol: grid.default_tolerance(),
        }
    }
}

impl FieldProvider for OracleProvider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError> {
        let ans = oracle_cdf(self.grid, q, self.tol)?;
        let gradient = (ans.d_min > 0.0 && ans.d_min.is_finite())
            .then(|| mean_unit_direction(q, &ans.minimal_set));
        Ok(FieldAnswer {
            distance: ans.d_min,
            gradient,
            provenance: Provenance::Oracle,
        })
    }
}

pub struct BaselineProvider {
    pub boundary_samples: Vec<Configuration>,
}

impl FieldProvider for BaselineProvider {
    fn provenance(&self) -> Provenance {
        Provenance::BaselineCdf
    }

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError> {
        if self.boundary_samples.is_empty() {
            return Err(FieldError::EmptySet);
        }
        Ok(baseline_cdf(q, &self.boundary_samples))
    }
}

pub struct SdfPullbackProvider<'a> {
    pub model: &'a RobotModel,
    pub scene: &'a Scene,
    pub control_points: Vec<ControlPoint>,
}

impl<'a> SdfPullbackProvider<'a> {
    /// End-effector only.
    pub fn tip_only(model: &'a RobotModel, scene: &'a Scene) -> Self {
        Self {
            model,
            scene,
            control_points: vec![ControlPoint::tip(model)],
        }
    }
}

impl FieldProvider for SdfPullbackProvider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::SdfPullback
    }

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError> {
        Ok(sdf_pullback_gradient(self.model, self.scene, q, &self.control_points))
    }
}
