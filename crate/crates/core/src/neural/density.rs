//! Quadrature of the flow density over configuration space.
//!
//! The conditional density is concentrated near a few contact
//! configurations, so a uniform grid over the whole box either misses the
//! peaks or is too expensive. Cells are instead chosen where flow samples
//! land, widened by a few cells, and integrated with a fine midpoint rule.

use super::model::FlowModel;
use super::NeuralError;
use crate::geometry::Scene;
use crate::sampling::seed_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityQuadrature {
    /// Flow samples used to locate the support.
    pub probe_samples: usize,
    /// Coarse cell edge length.
    pub cell: f64,
    /// Midpoints per cell edge.
    pub subdivisions: usize,
    /// Cells added around each occupied cell, per axis.
    pub dilation: usize,
    pub seed: u64,
}

impl Default for DensityQuadrature {
    fn default() -> Self {
        Self {
            probe_samples: 4096,
            cell: 0.05,
            subdivisions: 16,
            dilation: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityIntegral {
    pub mass: f64,
    pub cells: usize,
    pub evaluations: usize,
}

fn offsets(dof: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dof {
        out = out
            .into_iter()
            .flat_map(|o| {
                (lo..=hi).map(move |k| {
                    let mut v = o.clone();
                    v.push(k);
                    v
                })
            })
            .collect();
    }
    out
}

/// Integrates `p(x | q, scene)` over the dilated sample support.
pub fn integrate_density(
    model: &FlowModel,
    q: &[f64],
    scene: &Scene,
    quad: &DensityQuadrature,
) -> Result<DensityIntegral, NeuralError> {
    if quad.probe_samples == 0 || quad.subdivisions == 0 || !(quad.cell > 0.0) {
        return Err(NeuralError::InvalidConfig("density quadrature needs samples, cells and subdivisions".into()));
    }
    let dof = model.arch().dof;
    let mut rng = seed_rng(quad.seed, 0);
    let z0: Vec<Vec<f64>> = (0..quad.probe_samples)
        .map(|_| (0..dof).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let samples = model.cnf_sample_batch(q, scene, &z0)?;
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(NeuralError::NonFinite("flow sample".into()));
    }

    let k = quad.dilation as i64;
    let around = offsets(dof, -k, k);
    let mut cells = BTreeSet::new();
    for s in &samples {
        let base: Vec<i64> = s.iter().map(|v| (v / quad.cell).floor() as i64).collect();
        for o in &around {
            cells.insert(base.iter().zip(o).map(|(b, d)| b + d).collect::<Vec<i64>>());
        }
    }

    let n = quad.subdivisions as i64;
    let inner = offsets(dof, 0, n - 1);
    let h = quad.cell / n as f64;
    let points: Vec<Vec<f64>> = cells
        .iter()
        .flat_map(|c| {
            inner.iter().map(move |i| {
                c.iter()
                    .zip(i)
                    .map(|(&ci, &ii)| ci as f64 * quad.cell + (ii as f64 + 0.5) * h)
                    .collect()
            })
        })
        .collect();
    let partial: Vec<f64> = points
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            model
                .cnf_logprob_batch(q, scene, chunk)
                .map(|lp| lp.iter().map(|l| l.exp()).sum::<f64>())
        })
        .collect::<Result<_, _>>()?;
    Ok(DensityIntegral {
        mass: partial.iter().sum::<f64>() * h.powi(dof as i32),
        cells: cells.len(),
        evaluations: points.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::neural::Arch;

    #[test]
    fn translated_normal_integrates_to_one() {
        let arch = Arch {
            trunk_width: 8,
            dyn_width: 8,
            ..Arch::default()
        };
        let mut m = FlowModel::new(arch, 0).unwrap();
        m.set_constant_dynamics(&[0.7, -1.3]);
        let quad = DensityQuadrature {
            probe_samples: 512,
            cell: 0.5,
            subdivisions: 8,
            dilation: 2,
            seed: 1,
        };
        let r = integrate_density(&m, &[0.0, 0.0], &fixtures::fixture_scene(), &quad).unwrap();
        assert!((r.mass - 1.0).abs() < 5e-3, "mass {}", r.mass);
    }

    #[test]
    fn offsets_enumerate_the_cube() {
        assert_eq!(offsets(2, -1, 1).len(), 9);
        assert_eq!(offsets(3, 0, 3).len(), 64);
        assert!(offsets(2, -1, 1).contains(&vec![-1, 1]));
    }
}
