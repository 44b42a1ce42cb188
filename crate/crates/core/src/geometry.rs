//! Planar serial-chain kinematics, disc obstacles and exact robot/scene
//! clearance.
//!
//! Links are capsules (a segment swept by a disc of the link radius) and
//! obstacles are discs, so every distance here has a closed form. Collision
//! ground truth for the rest of the crate is `robot_scene_distance <= 0`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

/// Joint vector, radians.
pub type Configuration = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("robot model: {0}")]
    InvalidModel(String),
    #[error("obstacle radius must be positive, got {0}")]
    InvalidObstacle(f64),
    #[error("configuration has {got} joints, robot has {expected}")]
    DofMismatch { expected: usize, got: usize },
    #[error("joint {joint} = {value} outside limits [{lo}, {hi}]")]
    LimitViolation {
        joint: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("link index {0} out of range")]
    LinkIndex(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Planar n-link chain with capsule links, base pinned at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RobotModelSpec", into = "RobotModelSpec")]
pub struct RobotModel {
    link_lengths: Vec<f64>,
    link_radii: Vec<f64>,
    joint_limits: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RobotModelSpec {
    link_lengths: Vec<f64>,
    link_radii: Vec<f64>,
    joint_limits: Vec<[f64; 2]>,
}

impl TryFrom<RobotModelSpec> for RobotModel {
    type Error = GeometryError;
    fn try_from(s: RobotModelSpec) -> Result<Self, Self::Error> {
        RobotModel::new(
            s.link_lengths,
            s.link_radii,
            s.joint_limits.into_iter().map(|[lo, hi]| (lo, hi)).collect(),
        )
    }
}

impl From<RobotModel> for RobotModelSpec {
    fn from(m: RobotModel) -> Self {
        RobotModelSpec {
            link_lengths: m.link_lengths,
            link_radii: m.link_radii,
            joint_limits: m.joint_limits.into_iter().map(|(lo, hi)| [lo, hi]).collect(),
        }
    }
}

impl RobotModel {
    pub fn new(
        link_lengths: Vec<f64>,
        link_radii: Vec<f64>,
        joint_limits: Vec<(f64, f64)>,
    ) -> Result<Self, GeometryError> {
        let dof = link_lengths.len();
        if dof == 0 {
            return Err(GeometryError::InvalidModel("no links".into()));
        }
        if link_radii.len() != dof || joint_limits.len() != dof {
            return Err(GeometryError::InvalidModel(format!(
                "{} lengths, {} radii, {} limits",
                dof,
                link_radii.len(),
                joint_limits.len()
            )));
        }
        if let Some(l) = link_lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(GeometryError::InvalidModel(format!("link length {l} not positive")));
        }
        if let Some(r) = link_radii.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(GeometryError::InvalidModel(format!("link radius {r} negative")));
        }
        for (i, &(lo, hi)) in joint_limits.iter().enumerate() {
            // Tiny slack so limits written as +-3.14159265 are accepted.
            if !(lo <= hi && lo >= -PI - 1e-9 && hi <= PI + 1e-9) {
                return Err(GeometryError::InvalidModel(format!(
                    "joint {i} limits [{lo}, {hi}] must be non-empty within [-pi, pi]"
                )));
            }
        }
        Ok(Self {
            link_lengths,
            link_radii,
            joint_limits,
        })
    }

    /// Uniform-radius chain with full `[-pi, pi]` limits.
    pub fn planar(link_lengths: &[f64], link_radius: f64) -> Result<Self, GeometryError> {
        let n = link_lengths.len();
        Self::new(link_lengths.to_vec(), vec![link_radius; n], vec![(-PI, PI); n])
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    pub fn link_radii(&self) -> &[f64] {
        &self.link_radii
    }

    pub fn joint_limits(&self) -> &[(f64, f64)] {
        &self.joint_limits
    }

    /// Total chain length.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Bound on workspace speed of any robot point per unit Euclidean joint
    /// speed: `sqrt(sum_j r_j^2)` with `r_j` the chain length beyond joint `j`.
    /// Reach alone bounds it only under the 1-norm on joint velocities.
    pub fn lipschitz_bound(&self) -> f64 {
        let mut beyond = 0.0;
        let mut acc = 0.0;
        for l in self.link_lengths.iter().rev() {
            beyond += l;
            acc += beyond * beyond;
        }
        acc.sqrt()
    }

    pub fn check(&self, q: &[f64]) -> Result<(), GeometryError> {
        if q.len() != self.dof() {
            return Err(GeometryError::DofMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        for (joint, (&value, &(lo, hi))) in q.iter().zip(&self.joint_limits).enumerate() {
            if !(value >= lo && value <= hi) {
                return Err(GeometryError::LimitViolation { joint, value, lo, hi });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &[f64]) -> Configuration {
        q.iter()
            .zip(&self.joint_limits)
            .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
            .collect()
    }

    /// Joint positions: `dof + 1` points, base first, tip last.
    fn joint_points(&self, q: &[f64]) -> Vec<Point2> {
        let mut pts = Vec::with_capacity(self.dof() + 1);
        let mut p = Point2::default();
        let mut angle = 0.0;
        pts.push(p);
        for (len, qi) in self.link_lengths.iter().zip(q) {
            angle += qi;
            p = p + Point2::new(angle.cos(), angle.sin()) * *len;
            pts.push(p);
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObstacleSpec", into = "ObstacleSpec")]
pub struct Obstacle {
    pub center: Point2,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ObstacleSpec {
    center: [f64; 2],
    radius: f64,
}

impl TryFrom<ObstacleSpec> for Obstacle {
    type Error = GeometryError;
    fn try_from(s: ObstacleSpec) -> Result<Self, Self::Error> {
        Obstacle::new(Point2::new(s.center[0], s.center[1]), s.radius)
    }
}

impl From<Obstacle> for ObstacleSpec {
    fn from(o: Obstacle) -> Self {
        ObstacleSpec {
            center: [o.center.x, o.center.y],
            radius: o.radius,
        }
    }
}

impl Obstacle {
    pub fn new(center: Point2, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidObstacle(radius));
        }
        Ok(Self { center, radius })
    }
}

/// Disc obstacles in the plane. An empty scene is valid (free space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl Scene {
    pub fn new(id: impl Into<String>, obstacles: Vec<Obstacle>) -> Self {
        Self {
            id: id.into(),
            obstacles,
        }
    }

    pub fn empty(id: impl Into<String>) -> Self {
        Self::new(id, Vec::new())
    }
}

/// Forward kinematics output: one segment per link, base at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPose {
    pub segments: Vec<(Point2, Point2)>,
}

impl LinkPose {
    pub fn tip(&self) -> Point2 {
        self.segments.last().map(|s| s.1).unwrap_or_default()
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &[f64]) -> Result<LinkPose, GeometryError> {
    model.check(q)?;
    Ok(pose_unchecked(model, q))
}

fn pose_unchecked(model: &RobotModel, q: &[f64]) -> LinkPose {
    let pts = model.joint_points(q);
    LinkPose {
        segments: pts.windows(2).map(|w| (w[0], w[1])).collect(),
    }
}

/// Signed distance from `p` to the union of scene discs; `+inf` for an empty
/// scene.
pub fn task_sdf(scene: &Scene, p: Point2) -> f64 {
    scene
        .obstacles
        .iter()
        .map(|o| p.distance(o.center) - o.radius)
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(a + ab * t)
}

/// Minimum clearance between the capsule chain and the scene discs.
/// Non-positive means collision. Joint limits are not checked so that
/// optimizers can probe freely; `+inf` for an empty scene.
pub fn robot_scene_distance(model: &RobotModel, scene: &Scene, q: &[f64]) -> f64 {
    if scene.obstacles.is_empty() {
        return f64::INFINITY;
    }
    let pts = model.joint_points(q);
    let mut best = f64::INFINITY;
    for (i, w) in pts.windows(2).enumerate() {
        let r = model.link_radii[i];
        for o in &scene.obstacles {
            let d = point_segment_distance(o.center, w[0], w[1]) - r - o.radius;
            best = best.min(d);
        }
    }
    best
}

/// Boundary counts as colliding.
pub fn is_colliding(model: &RobotModel, scene: &Scene, q: &[f64]) -> bool {
    robot_scene_distance(model, scene, q) <= 0.0
}

/// Workspace position of the point at fraction `param` along link `link`.
pub fn link_point(model: &RobotModel, q: &[f64], link: usize, param: f64) -> Point2 {
    let pts = model.joint_points(q);
    pts[link] + (pts[link + 1] - pts[link]) * param
}

/// Partial derivatives of a point on a link with respect to each joint angle.
/// Row `j` holds `(dx/dq_j, dy/dq_j)`.
pub fn jacobian_point(
    model: &RobotModel,
    q: &[f64],
    link_index: usize,
    point_param: f64,
) -> Result<Vec<[f64; 2]>, GeometryError> {
    if link_index >= model.dof() {
        return Err(GeometryError::LinkIndex(link_index));
    }
    if q.len() != model.dof() {
        return Err(GeometryError::DofMismatch {
            expected: model.dof(),
            got: q.len(),
        });
    }
    let pts = model.joint_points(q);
    let p = pts[link_index] + (pts[link_index + 1] - pts[link_index]) * point_param;
    Ok((0..model.dof())
        .map(|j| {
            if j <= link_index {
                let d = (p - pts[j]).perp();
                [d.x, d.y]
            } else {
                [0.0, 0.0]
            }
        })
        .collect())
}
