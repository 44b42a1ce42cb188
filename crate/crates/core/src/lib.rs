//! Distributional configuration-space distance fields for planar robots.

pub mod field;
pub mod fixtures;
pub mod geometry;
pub mod neural;
pub mod oracle;
pub mod planner;
pub mod sampling;
