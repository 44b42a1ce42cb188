//! Robot-centric boundary bank for the single-nearest baseline.
//!
//! Contact configurations are stored per workspace grid point, independent
//! of any scene. A scene is then represented by the grid points inside its
//! obstacles, and the baseline field is the nearest stored configuration.

use crate::geometry::{is_colliding, Configuration, Obstacle, Point2, RobotModel, Scene};
use crate::sampling::{optimize_to_boundary, seed_rng, uniform_in_limits, SamplerConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    /// Workspace grid spacing (meters).
    pub spacing: f64,
    /// Optimizer seeds per grid point; failed seeds are dropped.
    pub per_point: usize,
    pub seed: u64,
    /// Radius of the probe disc placed at a grid point.
    pub probe_radius: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            spacing: 0.1,
            per_point: 16,
            seed: 0,
            probe_radius: 1e-3,
        }
    }
}

type Cell = (i64, i64);

pub struct BoundaryBank {
    model: RobotModel,
    cfg: BankConfig,
    sampler: SamplerConfig,
    cache: BTreeMap<Cell, Vec<Configuration>>,
}

impl BoundaryBank {
    pub fn new(model: RobotModel, cfg: BankConfig) -> Self {
        Self {
            model,
            cfg,
            sampler: SamplerConfig::default(),
            cache: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn grid_point(&self, cell: Cell) -> Point2 {
        Point2::new(cell.0 as f64 * self.cfg.spacing, cell.1 as f64 * self.cfg.spacing)
    }

    /// Grid points representing `o`: those inside the disc within one
    /// spacing of its rim, or the nearest grid point when none lies inside.
    pub fn cells_for(&self, o: &Obstacle) -> Vec<Cell> {
        let h = self.cfg.spacing;
        let lo = |v: f64| ((v - o.radius) / h).floor() as i64;
        let hi = |v: f64| ((v + o.radius) / h).ceil() as i64;
        let mut cells = Vec::new();
        for i in lo(o.center.x)..=hi(o.center.x) {
            for j in lo(o.center.y)..=hi(o.center.y) {
                let d = self.grid_point((i, j)).distance(o.center);
                if d <= o.radius && d >= o.radius - h {
                    cells.push((i, j));
                }
            }
        }
        if cells.is_empty() {
            cells.push(((o.center.x / h).round() as i64, (o.center.y / h).round() as i64));
        }
        cells
    }

    fn compute(&self, cell: Cell) -> Vec<Configuration> {
        let probe = Scene::new(
            "probe",
            vec![Obstacle::new(self.grid_point(cell), self.cfg.probe_radius).expect("positive probe radius")],
        );
        let stream = (cell.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (cell.1 as u64);
        let mut rng = seed_rng(self.cfg.seed, stream);
        let mut out = Vec::new();
        for _ in 0..self.cfg.per_point {
            let s = uniform_in_limits(&self.model, &mut rng);
            if is_colliding(&self.model, &probe, &s) {
                continue;
            }
            if let Ok(q) = optimize_to_boundary(&self.model, &probe, &s, &s, &self.sampler) {
                out.push(q);
            }
        }
        out
    }

    /// Fills the cache for every grid point the scenes need.
    pub fn prepare<'s>(&mut self, scenes: impl IntoIterator<Item = &'s Scene>) {
        let mut need: Vec<Cell> = scenes
            .into_iter()
            .flat_map(|s| s.obstacles.iter().flat_map(|o| self.cells_for(o)))
            .filter(|c| !self.cache.contains_key(c))
            .collect();
        need.sort_unstable();
        need.dedup();
        let done: Vec<(Cell, Vec<Configuration>)> = need.par_iter().map(|&c| (c, self.compute(c))).collect();
        self.cache.extend(done);
    }

    /// Stored contact configurations for `scene`, in grid order.
    pub fn samples_for(&self, scene: &Scene) -> Vec<Configuration> {
        let mut cells: Vec<Cell> = scene.obstacles.iter().flat_map(|o| self.cells_for(o)).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
            .into_iter()
            .flat_map(|c| match self.cache.get(&c) {
                Some(v) => v.clone(),
                None => self.compute(c),
            })
            .collect()
    }

    pub fn cached_points(&self) -> usize {
        self.cache.len()
    }
}
