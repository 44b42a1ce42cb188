//! Provider construction shared by eval-field and bench.

use anyhow::{bail, Context, Result};
use qflow::field::{empirical_distance, empirical_gradient, FieldAnswer, FieldError, FieldProvider, Provenance};
use qflow::geometry::{RobotModel, Scene};
use qflow::neural::{Checkpoint, FlowModel};
use qflow::sampling::{adaptive_refinement_sample, SamplerConfig};
use std::path::{Path, PathBuf};

/// Runs the adaptive sampler at every query; each query gets its own seed.
pub struct EmpiricalProvider<'a> {
    pub robot: &'a RobotModel,
    pub scene: &'a Scene,
    pub sampler: SamplerConfig,
    queries: u64,
}

impl<'a> EmpiricalProvider<'a> {
    pub fn new(robot: &'a RobotModel, scene: &'a Scene, sampler: SamplerConfig) -> Self {
        Self {
            robot,
            scene,
            sampler,
            queries: 0,
        }
    }
}

impl FieldProvider for EmpiricalProvider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::Empirical
    }

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError> {
        let cfg = SamplerConfig {
            rng_seed: self.sampler.rng_seed.wrapping_add(self.queries),
            ..self.sampler.clone()
        };
        self.queries += 1;
        let set = adaptive_refinement_sample(self.robot, self.scene, q, &cfg)
            .map_err(|e| FieldError::Provider(e.to_string()))?;
        if set.d_min_est == 0.0 {
            return Ok(FieldAnswer {
                distance: 0.0,
                gradient: None,
                provenance: Provenance::Empirical,
            });
        }
        Ok(FieldAnswer {
            distance: empirical_distance(q, &set.samples)?,
            gradient: empirical_gradient(q, &set.samples).ok(),
            provenance: Provenance::Empirical,
        })
    }
}

pub fn needs_model(providers: &[Provenance]) -> bool {
    providers
        .iter()
        .any(|p| matches!(p, Provenance::LearnedDirect | Provenance::LearnedMc))
}

/// The explicit checkpoint, else the training output in `out`.
pub fn load_model(explicit: Option<&Path>, default: &Path, out: &Path) -> Result<FlowModel> {
    let p: PathBuf = match explicit {
        Some(p) => crate::in_out(out, p),
        None => crate::in_out(out, default),
    };
    if !p.is_file() {
        bail!(
            "learned providers need a checkpoint, but {} does not exist; run `qflow train` or set the checkpoint",
            p.display()
        );
    }
    let c = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
    Ok(c.model()?)
}
