//! Standard robots and scenes shared by tests, benchmarks and the CLI.

use crate::geometry::{Obstacle, Point2, RobotModel, Scene};
use std::f64::consts::{FRAC_PI_2, PI};

pub const LINK_RADIUS: f64 = 0.05;

/// Two unit links, full joint range.
pub fn fixture_arm() -> RobotModel {
    RobotModel::planar(&[1.0, 1.0], LINK_RADIUS).expect("valid fixture arm")
}

/// One disc in front of the arm.
pub fn fixture_scene() -> Scene {
    Scene::new("fixture", vec![disc(1.2, 0.0, 0.3)])
}

/// Two unit links with the elbow limited to `[-pi/2, pi/2]`, which keeps link 2
/// at least one meter from the base.
pub fn symmetric_arm() -> RobotModel {
    RobotModel::new(
        vec![1.0, 1.0],
        vec![LINK_RADIUS; 2],
        vec![(-PI, PI), (-FRAC_PI_2, FRAC_PI_2)],
    )
    .expect("valid symmetric arm")
}

/// Discs mirrored across the x axis and close enough to the base that only
/// link 1 can touch them. The colliding set is two bands in q1 mirrored about
/// `q1 = 0`, so every query `(0, q2)` has two equidistant minimizers.
pub fn symmetric_scene() -> Scene {
    Scene::new("symmetric", vec![disc(0.5, 0.35, 0.15), disc(0.5, -0.35, 0.15)])
}

/// Two discs leaving a narrow passage for the arm.
pub fn narrow_gap_scene() -> Scene {
    Scene::new("narrow-gap", vec![disc(1.25, 0.55, 0.3), disc(1.25, -0.55, 0.3)])
}

pub fn disc(x: f64, y: f64, r: f64) -> Obstacle {
    Obstacle::new(Point2::new(x, y), r).expect("positive radius")
}
