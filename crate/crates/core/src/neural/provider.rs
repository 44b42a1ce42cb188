//! Field providers backed by a trained model.

use super::model::FlowModel;
use crate::field::{FieldAnswer, FieldError, FieldProvider, Provenance};
use crate::geometry::{Configuration, Scene};
use crate::sampling::seed_rng;
use rand_chacha::ChaCha8Rng;

/// Regression head: `max(0, d)` and its autodiff gradient.
pub struct LearnedDirectProvider<'a> {
    pub model: &'a FlowModel,
    pub scene: &'a Scene,
}

impl FieldProvider for LearnedDirectProvider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::LearnedDirect
    }

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError> {
        let d = self
            .model
            .predict_distance(q, self.scene)
            .map_err(|e| FieldError::Provider(e.to_string()))?;
        let g = self
            .model
            .predict_gradient(q, self.scene)
            .map_err(|e| FieldError::Provider(e.to_string()))?;
        Ok(FieldAnswer {
            distance: d.max(0.0),
            gradient: g.iter().all(|v| v.is_finite()).then_some(g),
            provenance: Provenance::LearnedDirect,
        })
    }

    fn query_batch(&mut self, qs: &[Configuration]) -> Vec<Result<FieldAnswer, FieldError>> {
        let d = self.model.predict_distance_batch(qs, self.scene);
        let g = self.model.predict_gradient_batch(qs, self.scene);
        match (d, g) {
            (Ok(d), Ok(g)) => d
                .into_iter()
                .zip(g)
                .map(|(d, g)| {
                    Ok(FieldAnswer {
                        distance: d.max(0.0),
                        gradient: g.iter().all(|v| v.is_finite()).then_some(g),
                        provenance: Provenance::LearnedDirect,
                    })
                })
                .collect(),
            (Err(e), _) | (_, Err(e)) => qs.iter().map(|_| Err(FieldError::Provider(e.to_string()))).collect(),
        }
    }
}

/// Flow samples: mean distance and mean unit direction over `samples` draws.
pub struct LearnedMcProvider<'a> {
    pub model: &'a FlowModel,
    pub scene: &'a Scene,
    pub samples: usize,
    rng: ChaCha8Rng,
}

impl<'a> LearnedMcProvider<'a> {
    pub fn new(model: &'a FlowModel, scene: &'a Scene, samples: usize, seed: u64) -> Self {
        Self {
            model,
            scene,
            samples,
            rng: seed_rng(seed, 0),
        }
    }
}

impl FieldProvider for LearnedMcProvider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::LearnedMc
    }

    fn query(&mut self, q: &[f64]) -> Result<FieldAnswer, FieldError> {
        let est = self
            .model
            .monte_carlo(q, self.scene, self.samples, &mut self.rng)
            .map_err(|e| FieldError::Provider(e.to_string()))?;
        Ok(FieldAnswer {
            distance: est.distance,
            gradient: est.gradient,
            provenance: Provenance::LearnedMc,
        })
    }

    fn query_batch(&mut self, qs: &[Configuration]) -> Vec<Result<FieldAnswer, FieldError>> {
        match self.model.monte_carlo_batch(qs, self.scene, self.samples, &mut self.rng) {
            Ok(est) => est
                .into_iter()
                .map(|e| {
                    Ok(FieldAnswer {
                        distance: e.distance,
                        gradient: e.gradient,
                        provenance: Provenance::LearnedMc,
                    })
                })
                .collect(),
            Err(e) => qs.iter().map(|_| Err(FieldError::Provider(e.to_string()))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::neural::Arch;

    #[test]
    fn providers_report_their_provenance_and_are_seeded() {
        let m = FlowModel::new(
            Arch {
                trunk_width: 8,
                dyn_width: 8,
                ..Arch::default()
            },
            0,
        )
        .unwrap();
        let s = fixtures::fixture_scene();
        let q = vec![0.2, 0.4];
        let mut d = LearnedDirectProvider { model: &m, scene: &s };
        let a = d.query(&q).unwrap();
        assert_eq!(a.provenance, Provenance::LearnedDirect);
        assert!(a.distance >= 0.0);
        let b = d.query_batch(&[q.clone()]).remove(0).unwrap();
        assert_eq!(a, b);

        let mut p1 = LearnedMcProvider::new(&m, &s, 16, 4);
        let mut p2 = LearnedMcProvider::new(&m, &s, 16, 4);
        let (x, y) = (p1.query(&q).unwrap(), p2.query(&q).unwrap());
        assert_eq!(x, y);
        assert_eq!(x.provenance, Provenance::LearnedMc);
        assert!(x.gradient_norm().unwrap() <= 1.0 + 1e-12);
    }
}
