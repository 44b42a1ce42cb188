//! Adam with step decay and global-norm clipping over seeded batches.

use super::checkpoint::Checkpoint;
use super::loss::{loss_and_gradients, Batch, LossReport, TrainingConfig};
use super::matrix::Matrix;
use super::model::FlowModel;
use super::NeuralError;
use crate::sampling::Dataset;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    fn zeros_like(params: &[Matrix]) -> Self {
        let z: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// Batch loss recorded before the update of `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("training diverged at step {step}: {source}")]
    NonFinite {
        step: usize,
        source: NeuralError,
        /// State before the failing step.
        last_good: Box<Checkpoint>,
    },
}

pub struct Trainer {
    model: FlowModel,
    cfg: TrainingConfig,
    adam: AdamState,
    history: Vec<HistoryRow>,
    step: usize,
}

impl Trainer {
    pub fn new(model: FlowModel, cfg: TrainingConfig) -> Result<Self, NeuralError> {
        cfg.validate()?;
        let adam = AdamState::zeros_like(model.params());
        Ok(Self {
            model,
            cfg,
            adam,
            history: Vec::new(),
            step: 0,
        })
    }

    /// Continues from a checkpoint. `cfg` may extend `steps`; every other
    /// field should match the original run for the history to be contiguous.
    pub fn resume(ckpt: Checkpoint, cfg: Option<TrainingConfig>) -> Result<Self, NeuralError> {
        let model = ckpt.model()?;
        let cfg = cfg.unwrap_or(ckpt.training);
        cfg.validate()?;
        let adam = ckpt.adam.unwrap_or_else(|| AdamState::zeros_like(model.params()));
        Ok(Self {
            model,
            cfg,
            adam,
            history: ckpt.history,
            step: ckpt.step,
        })
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.model.arch().clone(),
            training: self.cfg.clone(),
            step: self.step,
            params: self.model.params().to_vec(),
            adam: Some(self.adam.clone()),
            history: self.history.clone(),
            provenance: String::new(),
        }
    }

    pub fn into_parts(self) -> (FlowModel, Vec<HistoryRow>) {
        (self.model, self.history)
    }

    /// One optimizer update. On a non-finite loss or update the state is
    /// left untouched.
    pub fn step(&mut self, dataset: &Dataset) -> Result<LossReport, TrainError> {
        let step = self.step;
        let fail = |this: &Self, source: NeuralError| TrainError::NonFinite {
            step,
            source,
            last_good: Box::new(this.checkpoint()),
        };
        let batch = Batch::for_step(&self.model, dataset, &self.cfg, step as u64)?;
        let (report, mut grads) = match loss_and_gradients(&self.model, &batch, &self.cfg) {
            Ok(r) => r,
            Err(e @ NeuralError::NonFiniteLoss { .. }) => return Err(fail(self, e)),
            Err(e) => return Err(e.into()),
        };
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.cfg.learning_rate_at(step);
        let mut next = self.model.params().to_vec();
        let mut adam = self.adam.clone();
        adam_update(&mut next, &grads, &mut adam, lr, &self.cfg);
        if next.iter().any(|p| !p.is_finite()) {
            return Err(fail(self, NeuralError::NonFinite("parameters after update".into())));
        }
        self.model.params_mut().clone_from_slice(&next);
        self.adam = adam;
        self.history.push(HistoryRow { step, lr, loss: report });
        self.step += 1;
        Ok(report)
    }

    /// Trains until `cfg.steps`, handing a checkpoint to `on_checkpoint`
    /// every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut on_checkpoint: impl FnMut(&Checkpoint),
    ) -> Result<(), TrainError> {
        while !self.is_finished() {
            self.step(dataset)?;
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                on_checkpoint(&self.checkpoint());
            }
        }
        Ok(())
    }
}

/// Trains a fresh copy of `model` for `cfg.steps` updates.
pub fn train(
    model: FlowModel,
    dataset: &Dataset,
    cfg: &TrainingConfig,
) -> Result<(FlowModel, Vec<HistoryRow>), TrainError> {
    if dataset.records.is_empty() {
        return Err(NeuralError::InvalidConfig("dataset has no records".into()).into());
    }
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(dataset, |_| {})?;
    Ok(t.into_parts())
}

pub(crate) fn clip_global_norm(grads: &mut [Matrix], clip: f64) -> f64 {
    let n = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if clip > 0.0 && n > clip {
        let s = clip / n;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    n
}

fn adam_update(params: &mut [Matrix], grads: &[Matrix], st: &mut AdamState, lr: f64, cfg: &TrainingConfig) {
    st.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(st.t as i32);
    let c2 = 1.0 - b2.powi(st.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut st.m).zip(&mut st.v) {
        for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::neural::Arch;
    use crate::sampling::{build_dataset, SamplerConfig};
    use std::sync::OnceLock;

    fn dataset() -> &'static Dataset {
        static D: OnceLock<Dataset> = OnceLock::new();
        D.get_or_init(|| {
            build_dataset(
                &fixtures::fixture_arm(),
                &[fixtures::fixture_scene()],
                8,
                &SamplerConfig {
                    n_global: 6,
                    n_local: 2,
                    ..SamplerConfig::default()
                },
            )
            .unwrap()
        })
    }

    fn small() -> FlowModel {
        FlowModel::new(
            Arch {
                trunk_width: 12,
                dyn_width: 12,
                trunk_layers: 2,
                dyn_hidden_layers: 1,
                ode_steps: 4,
                ..Arch::default()
            },
            11,
        )
        .unwrap()
    }

    fn quick() -> TrainingConfig {
        TrainingConfig {
            steps: 6,
            batch_size: 4,
            collocation_per_batch: 4,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
        let mut g = vec![Matrix::from_vec(1, 2, vec![0.3, 0.4])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Matrix::from_vec(1, 2, vec![1.0, 1.0])];
        let g = vec![Matrix::from_vec(1, 2, vec![2.0, -0.5])];
        let mut st = AdamState::zeros_like(&p);
        adam_update(&mut p, &g, &mut st, 0.1, &TrainingConfig::default());
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, ha) = train(small(), dataset(), &quick()).unwrap();
        let (b, hb) = train(small(), dataset(), &quick()).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
        let (c, _) = train(small(), dataset(), &TrainingConfig { seed: 6, ..quick() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn chunk_count_preserves_result_up_to_rounding() {
        let (a, _) = train(small(), dataset(), &quick()).unwrap();
        let (b, _) = train(small(), dataset(), &TrainingConfig { chunks: 3, ..quick() }).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resume_continues_history_contiguously() {
        let cfg = quick();
        let (full, full_hist) = train(small(), dataset(), &cfg).unwrap();
        let mut t = Trainer::new(small(), TrainingConfig { steps: 3, ..cfg.clone() }).unwrap();
        t.run(dataset(), |_| {}).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut t = Trainer::resume(ckpt, Some(cfg)).unwrap();
        t.run(dataset(), |_| {}).unwrap();
        let (m, hist) = t.into_parts();
        assert_eq!(m.params(), full.params());
        assert_eq!(hist, full_hist);
        assert_eq!(hist.iter().map(|h| h.step).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoints_emitted_on_interval() {
        let mut seen = Vec::new();
        let mut t = Trainer::new(small(), TrainingConfig { checkpoint_every: 2, ..quick() }).unwrap();
        t.run(dataset(), |c| seen.push(c.step)).unwrap();
        assert_eq!(seen, vec![2, 4, 6]);
    }

    #[test]
    fn non_finite_aborts_with_last_good_state() {
        let mut m = small();
        let before = m.params().to_vec();
        let hw = m.layout().head.0;
        m.params_mut()[hw].data_mut()[0] = 1e300;
        let mut t = Trainer::new(m, TrainingConfig { lambda_nll: 0.0, ..quick() }).unwrap();
        match t.step(dataset()) {
            Err(TrainError::NonFinite { step, last_good, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(last_good.step, 0);
                assert_eq!(last_good.params[hw].data()[0], 1e300);
                assert_eq!(last_good.params[0], before[0]);
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
        assert_eq!(t.steps_done(), 0);
    }

    #[test]
    fn single_record_overfits_distance() {
        let d = dataset();
        let rec = d.records.iter().position(|r| r.y_d > 0.0).unwrap();
        let one = Dataset {
            records: vec![d.records[rec].clone()],
            ..d.clone()
        };
        let cfg = TrainingConfig {
            lambda_nll: 0.0,
            lambda_grad: 0.0,
            lambda_eik: 0.0,
            lambda_ten: 0.0,
            steps: 2000,
            batch_size: 1,
            collocation_per_batch: 0,
            ..TrainingConfig::default()
        };
        let (m, hist) = train(small(), &one, &cfg).unwrap();
        let r = &one.records[0];
        let err = (m.predict_distance(&r.q, &one.scenes[0]).unwrap() - r.y_d).powi(2);
        assert!(err < 1e-4, "final squared error {err}");
        assert!(hist.last().unwrap().loss.dist < 1e-4);
    }
}
