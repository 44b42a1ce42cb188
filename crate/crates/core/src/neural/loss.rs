//! Hybrid objective: flow likelihood plus distance, direction, eikonal and
//! tension terms on the regression head.

use super::matrix::Matrix;
use super::model::{conditioning, head, head_gradient, log_prob, trunk, trunk_input, FlowModel};
use super::tape::{Eval, Ops, Tape};
use super::NeuralError;
use crate::field::norm;
use crate::geometry::{is_colliding, Configuration};
use crate::sampling::{seed_rng, uniform_in_limits, Dataset};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Gradients of the targets below this norm are not used for `L_grad`.
const MIN_TARGET_GRADIENT: f64 = 1e-6;
/// Collocation draws that land in collision are redrawn up to this many times.
const COLLOCATION_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda_nll: f64,
    pub lambda_dist: f64,
    pub lambda_grad: f64,
    pub lambda_eik: f64,
    pub lambda_ten: f64,
    pub learning_rate: f64,
    /// Multiplier applied every `lr_decay_every` steps.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Optimizer steps (one batch each).
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Collision samples per record drawn for the likelihood term each step.
    pub nll_targets_per_record: usize,
    /// Uniform free configurations added to the eikonal and tension terms.
    pub collocation_per_batch: usize,
    /// Central difference step on the predicted gradient for the Hessian.
    pub tension_step: f64,
    /// Fixed partition of each batch; results do not depend on thread count.
    pub chunks: usize,
    /// Steps between checkpoints; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_nll: 1.0,
            lambda_dist: 1.0,
            lambda_grad: 0.5,
            lambda_eik: 0.1,
            lambda_ten: 0.01,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 2000,
            steps: 5000,
            batch_size: 32,
            seed: 0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            nll_targets_per_record: 1,
            collocation_per_batch: 32,
            tension_step: 1e-3,
            chunks: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn lambdas(&self) -> [f64; 5] {
        [
            self.lambda_nll,
            self.lambda_dist,
            self.lambda_grad,
            self.lambda_eik,
            self.lambda_ten,
        ]
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.into()));
        let l = self.lambdas();
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        if l.iter().all(|v| *v == 0.0) {
            return bad("at least one loss weight must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if self.batch_size == 0 || self.chunks == 0 {
            return bad("batch_size and chunks must be positive");
        }
        if self.nll_targets_per_record == 0 && self.lambda_nll > 0.0 {
            return bad("nll_targets_per_record must be positive when lambda_nll > 0");
        }
        if !(self.tension_step > 0.0) {
            return bad("tension_step must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let k = if self.lr_decay_every == 0 {
            0
        } else {
            step / self.lr_decay_every
        };
        self.learning_rate * self.lr_decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub dist: f64,
    pub grad: f64,
    pub eik: f64,
    pub ten: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 5] {
        [self.nll, self.dist, self.grad, self.eik, self.ten]
    }

    pub fn weighted_total(&self, cfg: &TrainingConfig) -> f64 {
        self.components().iter().zip(cfg.lambdas()).map(|(c, l)| c * l).sum()
    }

    fn accumulate(&mut self, other: &LossReport) {
        self.nll += other.nll;
        self.dist += other.dist;
        self.grad += other.grad;
        self.eik += other.eik;
        self.ten += other.ten;
        self.total += other.total;
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// One record's contribution to a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    /// Index into the dataset's record list; used in diagnostics.
    pub record: usize,
    pub features: Vec<f64>,
    pub q: Configuration,
    pub y_d: f64,
    /// Unit target direction, when usable.
    pub y_g: Option<Vec<f64>>,
    pub colliding: bool,
    pub nll_targets: Vec<Configuration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationPoint {
    pub features: Vec<f64>,
    pub q: Configuration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub records: Vec<BatchRecord>,
    pub collocation: Vec<CollocationPoint>,
}

impl Batch {
    /// Every listed record with all of its collision samples and no
    /// collocation points.
    pub fn from_records(model: &FlowModel, dataset: &Dataset, indices: &[usize]) -> Result<Self, NeuralError> {
        let records = indices
            .iter()
            .map(|&i| {
                let r = &dataset.records[i];
                batch_record(model, dataset, i, r.samples.clone())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            records,
            collocation: Vec::new(),
        })
    }

    /// The batch used at optimizer step `step`: records without replacement,
    /// a random subset of each record's samples, and collision-free
    /// collocation points in the scenes that have records.
    pub fn for_step(model: &FlowModel, dataset: &Dataset, cfg: &TrainingConfig, step: u64) -> Result<Self, NeuralError> {
        if dataset.records.is_empty() {
            return Err(NeuralError::InvalidConfig("dataset has no records".into()));
        }
        let mut rng = seed_rng(cfg.seed, step);
        let n = dataset.records.len();
        let mut idx = sample_indices(&mut rng, n, cfg.batch_size.min(n)).into_vec();
        idx.sort_unstable();
        let mut records = Vec::with_capacity(idx.len());
        for i in idx {
            let r = &dataset.records[i];
            let m = cfg.nll_targets_per_record.min(r.samples.len());
            let mut pick = sample_indices(&mut rng, r.samples.len(), m).into_vec();
            pick.sort_unstable();
            let targets = pick.into_iter().map(|k| r.samples[k].clone()).collect();
            records.push(batch_record(model, dataset, i, targets)?);
        }
        let mut scenes: Vec<usize> = dataset.records.iter().map(|r| r.scene_index).collect();
        scenes.sort_unstable();
        scenes.dedup();
        let mut collocation = Vec::with_capacity(cfg.collocation_per_batch);
        for _ in 0..cfg.collocation_per_batch {
            let s = scenes[rng.random_range(0..scenes.len())];
            let scene = &dataset.scenes[s];
            for _ in 0..COLLOCATION_RETRIES {
                let q = uniform_in_limits(&dataset.robot, &mut rng);
                if !is_colliding(&dataset.robot, scene, &q) {
                    collocation.push(CollocationPoint {
                        features: model.scene_features(scene)?,
                        q,
                    });
                    break;
                }
            }
        }
        Ok(Self { records, collocation })
    }

    fn split(&self, chunks: usize) -> Vec<Batch> {
        let part = |n: usize, c: usize| {
            let lo = n * c / chunks;
            let hi = n * (c + 1) / chunks;
            lo..hi
        };
        (0..chunks)
            .map(|c| Batch {
                records: self.records[part(self.records.len(), c)].to_vec(),
                collocation: self.collocation[part(self.collocation.len(), c)].to_vec(),
            })
            .collect()
    }

    /// Denominators of each mean, taken over the whole batch.
    fn normalizers(&self) -> Normalizers {
        let free = self.records.iter().filter(|r| !r.colliding).count();
        Normalizers {
            nll: self.records.iter().map(|r| r.nll_targets.len()).sum(),
            dist: self.records.len(),
            grad: self.records.iter().filter(|r| r.y_g.is_some()).count(),
            field: free + self.collocation.len(),
        }
    }
}

fn batch_record(
    model: &FlowModel,
    dataset: &Dataset,
    index: usize,
    nll_targets: Vec<Configuration>,
) -> Result<BatchRecord, NeuralError> {
    let r = &dataset.records[index];
    let colliding = r.y_d <= 0.0;
    let y_g = r.y_g.as_ref().and_then(|g| {
        let n = norm(g);
        (!colliding && n >= MIN_TARGET_GRADIENT).then(|| g.iter().map(|v| v / n).collect())
    });
    Ok(BatchRecord {
        record: index,
        features: model.scene_features(dataset.scene_of(r))?,
        q: r.q.clone(),
        y_d: r.y_d,
        y_g,
        colliding,
        nll_targets,
    })
}

#[derive(Debug, Clone, Copy)]
struct Normalizers {
    nll: usize,
    dist: usize,
    grad: usize,
    field: usize,
}

/// Builds the weighted loss of one chunk; returns the total node and the
/// five component nodes, each already divided by its batch-wide count.
fn chunk_loss<O: Ops>(
    o: &mut O,
    model: &FlowModel,
    chunk: &Batch,
    norms: Normalizers,
    cfg: &TrainingConfig,
) -> Result<(O::V, [Option<O::V>; 5]), NeuralError> {
    let arch = model.arch();
    let lay = model.layout();
    let dof = arch.dof;
    let nr = chunk.records.len();
    let rows_q: Vec<Configuration> = chunk
        .records
        .iter()
        .map(|r| r.q.clone())
        .chain(chunk.collocation.iter().map(|c| c.q.clone()))
        .collect();
    let rows_f: Vec<Vec<f64>> = chunk
        .records
        .iter()
        .map(|r| r.features.clone())
        .chain(chunk.collocation.iter().map(|c| c.features.clone()))
        .collect();
    if rows_q.is_empty() {
        let z = o.constant(Matrix::scalar(0.0));
        return Ok((z, [None, None, None, None, None]));
    }
    let qm = Matrix::from_rows(&rows_q);
    let fm = Matrix::from_rows(&rows_f);
    let qv = o.constant(qm.clone());
    let fv = o.constant(fm.clone());
    let x = trunk_input(o, arch, &qv, &fv);
    let (enc, hs) = trunk(o, &lay, &x);

    let mut parts: [Option<O::V>; 5] = [None, None, None, None, None];

    if cfg.lambda_nll > 0.0 && norms.nll > 0 {
        let mut owner = Vec::new();
        let mut targets = Vec::new();
        for (i, r) in chunk.records.iter().enumerate() {
            for t in &r.nll_targets {
                owner.push(i);
                targets.push(t.clone());
            }
        }
        if !targets.is_empty() {
            let c_all = conditioning(o, &lay, &enc);
            let c = o.gather_rows(&c_all, &owner);
            let lp = log_prob(o, &lay, dof, Matrix::from_rows(&targets), &c, arch.ode_steps)?;
            let s = o.sum_all(&lp);
            parts[0] = Some(o.scale(&s, -1.0 / norms.nll as f64));
        }
    }

    if cfg.lambda_dist > 0.0 && nr > 0 {
        let d_all = head(o, &lay, &enc);
        let d = o.row_slice(&d_all, 0, nr);
        let y = o.constant(Matrix::from_vec(nr, 1, chunk.records.iter().map(|r| r.y_d).collect()));
        let e = o.sub(&d, &y);
        let e2 = o.square(&e);
        let s = o.sum_all(&e2);
        parts[1] = Some(o.scale(&s, 1.0 / norms.dist as f64));
    }

    let grad_rows: Vec<usize> = (0..nr).filter(|&i| chunk.records[i].y_g.is_some()).collect();
    let field_rows: Vec<usize> = (0..nr)
        .filter(|&i| !chunk.records[i].colliding)
        .chain(nr..rows_q.len())
        .collect();
    let want_grad = cfg.lambda_grad > 0.0 && !grad_rows.is_empty();
    let want_eik = cfg.lambda_eik > 0.0 && !field_rows.is_empty();
    let want_ten = cfg.lambda_ten > 0.0 && !field_rows.is_empty();

    if want_grad || want_eik {
        let g_all = head_gradient(o, &lay, arch, &qm, &hs);
        if want_grad {
            let g = o.gather_rows(&g_all, &grad_rows);
            let targets: Vec<Vec<f64>> = grad_rows
                .iter()
                .map(|&i| chunk.records[i].y_g.clone().expect("filtered"))
                .collect();
            let y = o.constant(Matrix::from_rows(&targets));
            let gy = o.mul(&g, &y);
            let dot = o.sum_cols(&gy);
            let gn = row_norm(o, &g);
            let cos = o.div(&dot, &gn);
            let s = o.sum_all(&cos);
            // sum(1 - cos) = count - sum(cos)
            let s = o.add_scalar(&s, -(grad_rows.len() as f64));
            parts[2] = Some(o.scale(&s, -1.0 / norms.grad as f64));
        }
        if want_eik {
            let g = o.gather_rows(&g_all, &field_rows);
            let gn = row_norm(o, &g);
            let r = o.add_scalar(&gn, -1.0);
            let r = o.abs(&r);
            let s = o.sum_all(&r);
            parts[3] = Some(o.scale(&s, 1.0 / norms.field as f64));
        }
    }

    if want_ten {
        let base_q = gather(&qm, &field_rows);
        let base_f = gather(&fm, &field_rows);
        let h = cfg.tension_step;
        let mut acc: Option<O::V> = None;
        for k in 0..dof {
            let mut grads = Vec::with_capacity(2);
            for sign in [1.0, -1.0] {
                let mut q = base_q.clone();
                for r in 0..q.rows() {
                    let v = q.get(r, k) + sign * h;
                    q.set(r, k, v);
                }
                let qv = o.constant(q.clone());
                let fv = o.constant(base_f.clone());
                let x = trunk_input(o, arch, &qv, &fv);
                let (_, hs) = trunk(o, &lay, &x);
                grads.push(head_gradient(o, &lay, arch, &q, &hs));
            }
            let diff = o.sub(&grads[0], &grads[1]);
            let col = o.scale(&diff, 0.5 / h);
            let sq = o.square(&col);
            let s = o.sum_all(&sq);
            acc = Some(match acc {
                Some(a) => o.add(&a, &s),
                None => s,
            });
        }
        let acc = acc.expect("dof >= 1");
        parts[4] = Some(o.scale(&acc, 1.0 / norms.field as f64));
    }

    let lambdas = cfg.lambdas();
    let mut total: Option<O::V> = None;
    for (p, l) in parts.iter().zip(lambdas) {
        if let Some(p) = p {
            let w = o.scale(p, l);
            total = Some(match total {
                Some(t) => o.add(&t, &w),
                None => w,
            });
        }
    }
    let total = total.unwrap_or_else(|| o.constant(Matrix::scalar(0.0)));
    Ok((total, parts))
}

fn row_norm<O: Ops>(o: &mut O, g: &O::V) -> O::V {
    let sq = o.square(g);
    let s = o.sum_cols(&sq);
    let s = o.add_scalar(&s, 1e-12);
    o.sqrt(&s)
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>())
}

fn report_of<O: Ops>(o: &O, total: &O::V, parts: &[Option<O::V>; 5]) -> LossReport {
    let v = |p: &Option<O::V>| p.as_ref().map_or(0.0, |p| o.val(p).data()[0]);
    LossReport {
        nll: v(&parts[0]),
        dist: v(&parts[1]),
        grad: v(&parts[2]),
        eik: v(&parts[3]),
        ten: v(&parts[4]),
        total: o.val(total).data()[0],
    }
}

/// Batch losses without gradients.
pub fn compute_losses(model: &FlowModel, batch: &Batch, cfg: &TrainingConfig) -> Result<LossReport, NeuralError> {
    let norms = batch.normalizers();
    let mut e = Eval::new(model.params());
    let (total, parts) = chunk_loss(&mut e, model, batch, norms, cfg)?;
    let report = report_of(&e, &total, &parts);
    if !report.is_finite() {
        return Err(non_finite(model, batch, cfg));
    }
    Ok(report)
}

/// Batch losses and parameter gradients of the total. Chunks are evaluated
/// in parallel and summed in chunk order.
pub fn loss_and_gradients(
    model: &FlowModel,
    batch: &Batch,
    cfg: &TrainingConfig,
) -> Result<(LossReport, Vec<Matrix>), NeuralError> {
    use rayon::prelude::*;
    let norms = batch.normalizers();
    let chunks = batch.split(cfg.chunks);
    let results: Vec<Result<(LossReport, Vec<Matrix>), NeuralError>> = chunks
        .par_iter()
        .map(|c| {
            let mut t = Tape::new(model.params());
            let (total, parts) = chunk_loss(&mut t, model, c, norms, cfg)?;
            let report = report_of(&t, &total, &parts);
            let g = t.backward(total);
            Ok((report, g.params))
        })
        .collect();
    let mut report = LossReport::default();
    let mut grads: Vec<Matrix> = model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for r in results {
        let (rep, g) = r?;
        report.accumulate(&rep);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    if !report.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(non_finite(model, batch, cfg));
    }
    Ok((report, grads))
}

/// Locates the first record whose own loss is non-finite.
fn non_finite(model: &FlowModel, batch: &Batch, cfg: &TrainingConfig) -> NeuralError {
    for r in &batch.records {
        let single = Batch {
            records: vec![r.clone()],
            collocation: Vec::new(),
        };
        let mut e = Eval::new(model.params());
        let ok = match chunk_loss(&mut e, model, &single, single.normalizers(), cfg) {
            Ok((total, _)) => e.val(&total).is_finite(),
            Err(_) => false,
        };
        if !ok {
            return NeuralError::NonFiniteLoss { record: Some(r.record) };
        }
    }
    NeuralError::NonFiniteLoss { record: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Arch;
    use crate::{fixtures, sampling::build_dataset, sampling::SamplerConfig};
    use std::sync::OnceLock;

    fn small_model(seed: u64) -> FlowModel {
        FlowModel::new(
            Arch {
                trunk_width: 12,
                dyn_width: 12,
                trunk_layers: 2,
                ode_steps: 4,
                ..Arch::default()
            },
            seed,
        )
        .unwrap()
    }

    fn dataset() -> &'static Dataset {
        static D: OnceLock<Dataset> = OnceLock::new();
        D.get_or_init(|| {
            build_dataset(
                &fixtures::fixture_arm(),
                &[fixtures::fixture_scene()],
                6,
                &SamplerConfig {
                    n_global: 6,
                    n_local: 2,
                    ..SamplerConfig::default()
                },
            )
            .unwrap()
        })
    }

    fn record(q: Vec<f64>, y_g: Option<Vec<f64>>) -> BatchRecord {
        BatchRecord {
            record: 0,
            features: small_model(0).scene_features(&fixtures::fixture_scene()).unwrap(),
            q: q.clone(),
            y_d: 0.5,
            y_g,
            colliding: false,
            nll_targets: vec![vec![0.1, 0.2]],
        }
    }

    fn only(i: usize) -> TrainingConfig {
        let mut l = [0.0; 5];
        l[i] = 1.0;
        TrainingConfig {
            lambda_nll: l[0],
            lambda_dist: l[1],
            lambda_grad: l[2],
            lambda_eik: l[3],
            lambda_ten: l[4],
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn direction_loss_spans_cosine_range() {
        let m = small_model(1);
        let q = vec![0.3, -0.4];
        let g = m.predict_gradient(&q, &fixtures::fixture_scene()).unwrap();
        let n = norm(&g);
        let unit: Vec<f64> = g.iter().map(|v| v / n).collect();
        let cfg = only(2);
        let cases = [
            (unit.clone(), 0.0),
            (vec![-unit[1], unit[0]], 1.0),
            (vec![-unit[0], -unit[1]], 2.0),
        ];
        for (y, want) in cases {
            let b = Batch {
                records: vec![record(q.clone(), Some(y))],
                collocation: Vec::new(),
            };
            let r = compute_losses(&m, &b, &cfg).unwrap();
            assert!((r.grad - want).abs() < 1e-9, "{} vs {want}", r.grad);
        }
    }

    #[test]
    fn eikonal_zero_for_unit_gradient() {
        let mut m = small_model(2);
        let q = vec![0.3, -0.4];
        let s = fixtures::fixture_scene();
        let g = m.predict_gradient(&q, &s).unwrap();
        let n = norm(&g);
        let hw = m.layout().head.0;
        let p = &mut m.params_mut()[hw];
        *p = p.map(|v| v / n);
        let b = Batch {
            records: vec![record(q, None)],
            collocation: Vec::new(),
        };
        let r = compute_losses(&m, &b, &only(3)).unwrap();
        assert!(r.eik < 1e-9, "{}", r.eik);
    }

    #[test]
    fn weight_isolation_and_recombination() {
        let m = small_model(3);
        let d = dataset();
        let b = Batch::for_step(&m, d, &TrainingConfig::default(), 0).unwrap();
        let r = compute_losses(&m, &b, &only(0)).unwrap();
        assert_eq!(r.total, r.nll);
        let cfg = TrainingConfig::default();
        let r = compute_losses(&m, &b, &cfg).unwrap();
        assert!(r.components().iter().all(|v| *v > 0.0));
        assert!((r.total - r.weighted_total(&cfg)).abs() < 1e-6);
    }

    #[test]
    fn chunked_gradients_match_whole_batch() {
        let m = small_model(4);
        let d = dataset();
        let one = TrainingConfig {
            batch_size: 5,
            collocation_per_batch: 3,
            ..TrainingConfig::default()
        };
        let three = TrainingConfig { chunks: 3, ..one.clone() };
        let b = Batch::for_step(&m, d, &one, 7).unwrap();
        let (r1, g1) = loss_and_gradients(&m, &b, &one).unwrap();
        let (r3, g3) = loss_and_gradients(&m, &b, &three).unwrap();
        assert!((r1.total - r3.total).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g3) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        let e = compute_losses(&m, &b, &one).unwrap();
        assert!((e.total - r1.total).abs() < 1e-12);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = small_model(5);
        let d = dataset();
        let cfg = TrainingConfig {
            batch_size: 3,
            collocation_per_batch: 2,
            nll_targets_per_record: 2,
            ..TrainingConfig::default()
        };
        let b = Batch::for_step(&m, d, &cfg, 3).unwrap();
        let (_, g) = loss_and_gradients(&m, &b, &cfg).unwrap();
        let h = 1e-6;
        // One entry from every parameter tensor.
        for (pi, p) in m.params().iter().enumerate() {
            let k = (pi * 7) % p.data().len();
            let mut plus = m.params().to_vec();
            plus[pi].data_mut()[k] += h;
            let mut minus = m.params().to_vec();
            minus[pi].data_mut()[k] -= h;
            let mp = FlowModel::from_parts(m.arch().clone(), plus).unwrap();
            let mm = FlowModel::from_parts(m.arch().clone(), minus).unwrap();
            let fd = (compute_losses(&mp, &b, &cfg).unwrap().total - compute_losses(&mm, &b, &cfg).unwrap().total)
                / (2.0 * h);
            let an = g[pi].data()[k];
            assert!(
                (an - fd).abs() <= 1e-5 * fd.abs().max(1e-2),
                "param {pi}[{k}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn colliding_records_skip_direction_terms() {
        let m = small_model(6);
        let mut r = record(vec![0.0, 0.0], Some(vec![1.0, 0.0]));
        r.colliding = true;
        r.y_g = None;
        let b = Batch {
            records: vec![r],
            collocation: Vec::new(),
        };
        let rep = compute_losses(&m, &b, &TrainingConfig::default()).unwrap();
        assert_eq!((rep.grad, rep.eik, rep.ten), (0.0, 0.0, 0.0));
        assert!(rep.dist > 0.0 && rep.nll != 0.0);
    }

    #[test]
    fn invalid_weights_rejected() {
        let cfg = TrainingConfig {
            lambda_nll: 0.0,
            lambda_dist: 0.0,
            lambda_grad: 0.0,
            lambda_eik: 0.0,
            lambda_ten: 0.0,
            ..TrainingConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainingConfig {
            lambda_eik: -1.0,
            ..TrainingConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn schedule_halves() {
        let c = TrainingConfig::default();
        assert_eq!(c.learning_rate_at(0), 1e-3);
        assert_eq!(c.learning_rate_at(1999), 1e-3);
        assert_eq!(c.learning_rate_at(2000), 5e-4);
        assert_eq!(c.learning_rate_at(4500), 2.5e-4);
    }
}
