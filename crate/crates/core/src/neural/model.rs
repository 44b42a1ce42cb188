//! The shared-trunk network: conditioning encoder, flow dynamics and the
//! distance head, plus inference entry points.

use super::matrix::Matrix;
use super::tape::{Eval, Ops, Tape};
use super::NeuralError;
use crate::field::{empirical_distance, empirical_gradient, COINCIDENT_EPS};
use crate::geometry::{Configuration, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Network shape. Fixed at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub dof: usize,
    /// Octave-spaced sinusoid frequencies per joint; 0 disables encoding.
    pub pe_frequencies: usize,
    /// Obstacle slots in the scene feature vector.
    pub max_obstacles: usize,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    pub dyn_width: usize,
    /// Hidden layers of the dynamics after the conditioned input layer.
    pub dyn_hidden_layers: usize,
    pub activation: String,
    pub ode_steps: usize,
    pub ode_scheme: String,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            dof: 2,
            pe_frequencies: 2,
            max_obstacles: 4,
            trunk_width: 64,
            trunk_layers: 4,
            dyn_width: 64,
            dyn_hidden_layers: 2,
            activation: "tanh".into(),
            ode_steps: 20,
            ode_scheme: "rk4".into(),
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidArch(m.into()));
        if self.dof == 0 || self.trunk_width == 0 || self.dyn_width == 0 {
            return bad("dimensions must be positive");
        }
        if self.trunk_layers == 0 {
            return bad("trunk needs at least one layer");
        }
        if self.ode_steps == 0 {
            return bad("ode_steps must be positive");
        }
        if self.activation != "tanh" {
            return bad("only the tanh activation is supported");
        }
        if self.ode_scheme != "rk4" {
            return bad("only the rk4 scheme is supported");
        }
        Ok(())
    }

    pub fn encoded_dim(&self) -> usize {
        self.dof * (1 + 2 * self.pe_frequencies)
    }

    pub fn input_dim(&self) -> usize {
        self.encoded_dim() + 4 * self.max_obstacles
    }
}

/// Parameter indices in declaration order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub trunk: Vec<(usize, usize)>,
    pub head: (usize, usize),
    pub dyn_z: usize,
    pub dyn_t: usize,
    pub dyn_c: usize,
    pub dyn_b: usize,
    pub dyn_hidden: Vec<(usize, usize)>,
    pub dyn_out: (usize, usize),
    pub shapes: Vec<(usize, usize)>,
}

impl Layout {
    fn new(a: &Arch) -> Self {
        let mut shapes = Vec::new();
        let mut push = |r: usize, c: usize| {
            shapes.push((r, c));
            shapes.len() - 1
        };
        let mut trunk = Vec::new();
        let mut fan_in = a.input_dim();
        for _ in 0..a.trunk_layers {
            trunk.push((push(fan_in, a.trunk_width), push(1, a.trunk_width)));
            fan_in = a.trunk_width;
        }
        let head = (push(a.trunk_width, 1), push(1, 1));
        let dyn_z = push(a.dof, a.dyn_width);
        let dyn_t = push(1, a.dyn_width);
        let dyn_c = push(a.trunk_width, a.dyn_width);
        let dyn_b = push(1, a.dyn_width);
        let dyn_hidden = (0..a.dyn_hidden_layers)
            .map(|_| (push(a.dyn_width, a.dyn_width), push(1, a.dyn_width)))
            .collect();
        let dyn_out = (push(a.dyn_width, a.dof), push(1, a.dof));
        Self {
            trunk,
            head,
            dyn_z,
            dyn_t,
            dyn_c,
            dyn_b,
            dyn_hidden,
            dyn_out,
            shapes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    arch: Arch,
    params: Vec<Matrix>,
}

impl FlowModel {
    /// Glorot-uniform weights, zero biases. The flow output layer starts
    /// small so the initial flow is close to the identity.
    pub fn new(arch: Arch, seed: u64) -> Result<Self, NeuralError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let biases: Vec<usize> = layout
            .trunk
            .iter()
            .map(|l| l.1)
            .chain([layout.head.1, layout.dyn_b, layout.dyn_out.1])
            .chain(layout.dyn_hidden.iter().map(|l| l.1))
            .collect();
        let params = layout
            .shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                if biases.contains(&i) {
                    return Matrix::zeros(r, c);
                }
                let mut a = (6.0 / (r + c) as f64).sqrt();
                if i == layout.dyn_out.0 {
                    a *= 0.1;
                }
                Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-a..a)).collect())
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: Arch, params: Vec<Matrix>) -> Result<Self, NeuralError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.shapes.len()
            || params.iter().zip(&layout.shapes).any(|(p, s)| p.shape() != *s)
        {
            return Err(NeuralError::InvalidArch("parameter shapes do not match the architecture".into()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NeuralError::NonFinite("parameters".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// Makes the flow a pure translation `dz/dt = c` (identity for `c = 0`).
    pub fn set_constant_dynamics(&mut self, c: &[f64]) {
        assert_eq!(c.len(), self.arch.dof);
        let (w, b) = self.layout().dyn_out;
        self.params[w] = Matrix::zeros(self.arch.dyn_width, self.arch.dof);
        self.params[b] = Matrix::from_vec(1, self.arch.dof, c.to_vec());
    }

    fn check_dof(&self, q: &[f64]) -> Result<(), NeuralError> {
        if q.len() != self.arch.dof {
            return Err(NeuralError::DofMismatch {
                expected: self.arch.dof,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// `max_obstacles` slots of `(cx, cy, r, mask)`, zero padded.
    pub fn scene_features(&self, scene: &Scene) -> Result<Vec<f64>, NeuralError> {
        let k = self.arch.max_obstacles;
        if scene.obstacles.len() > k {
            return Err(NeuralError::SceneTooLarge {
                obstacles: scene.obstacles.len(),
                slots: k,
            });
        }
        let mut f = vec![0.0; 4 * k];
        for (i, o) in scene.obstacles.iter().enumerate() {
            f[4 * i..4 * i + 4].copy_from_slice(&[o.center.x, o.center.y, o.radius, 1.0]);
        }
        Ok(f)
    }

    /// Positional encoding of `q` followed by the scene features; the trunk
    /// input.
    pub fn raw_input(&self, q: &[f64], scene: &Scene) -> Result<Vec<f64>, NeuralError> {
        self.check_dof(q)?;
        let mut x = positional_encoding(q, self.arch.pe_frequencies);
        x.extend(self.scene_features(scene)?);
        Ok(x)
    }

    /// Trunk output: the conditioning vector shared by flow and head.
    pub fn encode_input(&self, q: &[f64], scene: &Scene) -> Result<Vec<f64>, NeuralError> {
        self.check_dof(q)?;
        let feats = self.scene_features(scene)?;
        let mut e = Eval::new(&self.params);
        let qv = e.constant(Matrix::from_vec(1, q.len(), q.to_vec()));
        let fv = e.constant(Matrix::from_vec(1, feats.len(), feats));
        let x = trunk_input(&mut e, &self.arch, &qv, &fv);
        let (enc, _) = trunk(&mut e, &self.layout(), &x);
        Ok(e.val(&enc).data().to_vec())
    }

    pub fn predict_distance(&self, q: &[f64], scene: &Scene) -> Result<f64, NeuralError> {
        Ok(self.predict_distance_batch(&[q.to_vec()], scene)?[0])
    }

    pub fn predict_distance_batch(&self, qs: &[Configuration], scene: &Scene) -> Result<Vec<f64>, NeuralError> {
        let (qm, fm) = self.batch_inputs(qs, scene)?;
        let mut e = Eval::new(&self.params);
        let qv = e.constant(qm);
        let fv = e.constant(fm);
        let x = trunk_input(&mut e, &self.arch, &qv, &fv);
        let lay = self.layout();
        let (enc, _) = trunk(&mut e, &lay, &x);
        let d = head(&mut e, &lay, &enc);
        Ok(e.val(&d).data().to_vec())
    }

    /// Reverse-mode gradient of the head output with respect to `q`.
    pub fn predict_gradient(&self, q: &[f64], scene: &Scene) -> Result<Vec<f64>, NeuralError> {
        Ok(self.predict_gradient_batch(&[q.to_vec()], scene)?.remove(0))
    }

    pub fn predict_gradient_batch(&self, qs: &[Configuration], scene: &Scene) -> Result<Vec<Vec<f64>>, NeuralError> {
        let (qm, fm) = self.batch_inputs(qs, scene)?;
        let mut t = Tape::new(&self.params);
        let qv = t.input(qm);
        let fv = t.constant(fm);
        let x = trunk_input(&mut t, &self.arch, &qv, &fv);
        let lay = self.layout();
        let (enc, _) = trunk(&mut t, &lay, &x);
        let d = head(&mut t, &lay, &enc);
        let s = t.sum_all(&d);
        let g = t.backward(s);
        Ok(g.wrt(qv).expect("input adjoint").to_rows())
    }

    fn batch_inputs(&self, qs: &[Configuration], scene: &Scene) -> Result<(Matrix, Matrix), NeuralError> {
        for q in qs {
            self.check_dof(q)?;
        }
        let feats = self.scene_features(scene)?;
        let qm = Matrix::from_rows(qs);
        let fm = Matrix::from_rows(&vec![feats; qs.len()]);
        Ok((qm, fm))
    }

    /// Pushes prior draws through the flow from `t = 0` to `t = 1`.
    pub fn cnf_sample(&self, q: &[f64], scene: &Scene, z0: &[f64]) -> Result<Configuration, NeuralError> {
        Ok(self.cnf_sample_batch(q, scene, &[z0.to_vec()])?.remove(0))
    }

    pub fn cnf_sample_batch(&self, q: &[f64], scene: &Scene, z0: &[Vec<f64>]) -> Result<Vec<Configuration>, NeuralError> {
        for z in z0 {
            self.check_dof(z)?;
        }
        let enc = self.encode_input(q, scene)?;
        let mut e = Eval::new(&self.params);
        let lay = self.layout();
        let encv = e.constant(Matrix::from_vec(1, enc.len(), enc));
        let c1 = conditioning(&mut e, &lay, &encv);
        let c = e.gather_rows(&c1, &vec![0; z0.len()]);
        let z = e.constant(Matrix::from_rows(z0));
        let (z1, _) = integrate(&mut e, &lay, z, &c, 0.0, 1.0, self.arch.ode_steps, false)?;
        Ok(e.val(&z1).to_rows())
    }

    /// Inverse map from `t = 1` back to `t = 0`, without the density term.
    pub fn cnf_inverse(&self, q: &[f64], scene: &Scene, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_dof(x)?;
        let enc = self.encode_input(q, scene)?;
        let mut e = Eval::new(&self.params);
        let lay = self.layout();
        let encv = e.constant(Matrix::from_vec(1, enc.len(), enc));
        let c = conditioning(&mut e, &lay, &encv);
        let z = e.constant(Matrix::from_vec(1, x.len(), x.to_vec()));
        let (z0, _) = integrate(&mut e, &lay, z, &c, 1.0, 0.0, self.arch.ode_steps, false)?;
        Ok(e.val(&z0).data().to_vec())
    }

    /// Exact log density of `target` under the conditional flow.
    pub fn cnf_logprob(&self, q: &[f64], scene: &Scene, target: &[f64]) -> Result<f64, NeuralError> {
        Ok(self.cnf_logprob_batch(q, scene, &[target.to_vec()])?[0])
    }

    pub fn cnf_logprob_batch(&self, q: &[f64], scene: &Scene, targets: &[Vec<f64>]) -> Result<Vec<f64>, NeuralError> {
        for t in targets {
            self.check_dof(t)?;
            if t.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFinite("log-prob target".into()));
            }
        }
        let enc = self.encode_input(q, scene)?;
        let mut e = Eval::new(&self.params);
        let lay = self.layout();
        let encv = e.constant(Matrix::from_vec(1, enc.len(), enc));
        let c1 = conditioning(&mut e, &lay, &encv);
        let c = e.gather_rows(&c1, &vec![0; targets.len()]);
        let lp = log_prob(&mut e, &lay, self.arch.dof, Matrix::from_rows(targets), &c, self.arch.ode_steps)?;
        Ok(e.val(&lp).data().to_vec())
    }

    /// Divergence of the dynamics at `(z, t)` by the exact tangent passes.
    pub fn dynamics_trace(&self, q: &[f64], scene: &Scene, z: &[f64], t: f64) -> Result<f64, NeuralError> {
        let enc = self.encode_input(q, scene)?;
        let mut e = Eval::new(&self.params);
        let lay = self.layout();
        let encv = e.constant(Matrix::from_vec(1, enc.len(), enc));
        let c = conditioning(&mut e, &lay, &encv);
        let zv = e.constant(Matrix::from_vec(1, z.len(), z.to_vec()));
        let (_, tr) = dynamics(&mut e, &lay, &zv, t, &c, true);
        Ok(e.val(&tr.expect("trace requested")).data()[0])
    }

    /// Value of the dynamics at `(z, t)`.
    pub fn dynamics_value(&self, q: &[f64], scene: &Scene, z: &[f64], t: f64) -> Result<Vec<f64>, NeuralError> {
        let enc = self.encode_input(q, scene)?;
        let mut e = Eval::new(&self.params);
        let lay = self.layout();
        let encv = e.constant(Matrix::from_vec(1, enc.len(), enc));
        let c = conditioning(&mut e, &lay, &encv);
        let zv = e.constant(Matrix::from_vec(1, z.len(), z.to_vec()));
        let (h, _) = dynamics(&mut e, &lay, &zv, t, &c, false);
        Ok(e.val(&h).data().to_vec())
    }

    /// Expected distance and gradient over `m` flow samples.
    pub fn monte_carlo(
        &self,
        q: &[f64],
        scene: &Scene,
        m: usize,
        rng: &mut impl Rng,
    ) -> Result<MonteCarloEstimate, NeuralError> {
        Ok(self.monte_carlo_batch(&[q.to_vec()], scene, m, rng)?.remove(0))
    }

    /// `monte_carlo` for many queries in one integration. Prior draws are
    /// taken query by query, so a batch of one matches `monte_carlo`.
    pub fn monte_carlo_batch(
        &self,
        qs: &[Configuration],
        scene: &Scene,
        m: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<MonteCarloEstimate>, NeuralError> {
        if m == 0 {
            return Err(NeuralError::InvalidArch("Monte Carlo sample count must be positive".into()));
        }
        if qs.is_empty() {
            return Ok(Vec::new());
        }
        let dof = self.arch.dof;
        let z0: Vec<Vec<f64>> = (0..qs.len() * m)
            .map(|_| (0..dof).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let enc: Vec<Vec<f64>> = qs.iter().map(|q| self.encode_input(q, scene)).collect::<Result<_, _>>()?;
        let mut e = Eval::new(&self.params);
        let lay = self.layout();
        let encv = e.constant(Matrix::from_rows(&enc));
        let cq = conditioning(&mut e, &lay, &encv);
        let rows: Vec<usize> = (0..qs.len()).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let c = e.gather_rows(&cq, &rows);
        let z = e.constant(Matrix::from_rows(&z0));
        let (z1, _) = integrate(&mut e, &lay, z, &c, 0.0, 1.0, self.arch.ode_steps, false)?;
        let all = e.val(&z1).to_rows();
        Ok(qs
            .iter()
            .zip(all.chunks(m))
            .map(|(q, samples)| estimate(q, samples.to_vec()))
            .collect())
    }

    /// Mean unit direction over `m` flow samples; `None` when every sample
    /// coincides with `q`.
    pub fn monte_carlo_gradient(
        &self,
        q: &[f64],
        scene: &Scene,
        m: usize,
        rng: &mut impl Rng,
    ) -> Result<Option<Vec<f64>>, NeuralError> {
        Ok(self.monte_carlo(q, scene, m, rng)?.gradient)
    }
}

fn estimate(q: &[f64], samples: Vec<Configuration>) -> MonteCarloEstimate {
    let kept: Vec<Configuration> = samples
        .iter()
        .filter(|s| crate::sampling::dist(q, s) >= COINCIDENT_EPS)
        .cloned()
        .collect();
    let distance = empirical_distance(q, &samples).expect("m >= 1");
    let gradient = (!kept.is_empty()).then(|| empirical_gradient(q, &kept).expect("coincident samples removed"));
    MonteCarloEstimate {
        distance,
        gradient,
        samples,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub distance: f64,
    pub gradient: Option<Vec<f64>>,
    pub samples: Vec<Configuration>,
}

/// `[q, sin(2^f q), cos(2^f q) for f in 0..F]`
pub fn positional_encoding(q: &[f64], frequencies: usize) -> Vec<f64> {
    let mut x = q.to_vec();
    for f in 0..frequencies {
        let w = (1u64 << f) as f64;
        x.extend(q.iter().map(|v| (w * v).sin()));
        x.extend(q.iter().map(|v| (w * v).cos()));
    }
    x
}

/// Derivative of the positional encoding along joint `k`, one row per query.
pub(crate) fn positional_tangent(q: &Matrix, frequencies: usize, k: usize, width: usize) -> Matrix {
    let dof = q.cols();
    let mut t = Matrix::zeros(q.rows(), width);
    for r in 0..q.rows() {
        let v = q.get(r, k);
        t.set(r, k, 1.0);
        for f in 0..frequencies {
            let w = (1u64 << f) as f64;
            let base = dof * (1 + 2 * f);
            t.set(r, base + k, w * (w * v).cos());
            t.set(r, base + dof + k, -w * (w * v).sin());
        }
    }
    t
}

pub(crate) fn trunk_input<O: Ops>(o: &mut O, arch: &Arch, q: &O::V, feats: &O::V) -> O::V {
    let mut parts = vec![q.clone()];
    for f in 0..arch.pe_frequencies {
        let s = o.scale(q, (1u64 << f) as f64);
        parts.push(o.sin(&s));
        parts.push(o.cos(&s));
    }
    parts.push(feats.clone());
    o.concat_cols(&parts)
}

/// Trunk forward; also returns every hidden activation for tangent passes.
pub(crate) fn trunk<O: Ops>(o: &mut O, lay: &Layout, x: &O::V) -> (O::V, Vec<O::V>) {
    let mut h = x.clone();
    let mut hs = Vec::with_capacity(lay.trunk.len());
    for &(w, b) in &lay.trunk {
        let (wv, bv) = (o.param(w), o.param(b));
        let a = o.matmul(&h, &wv);
        let a = o.add_row(&a, &bv);
        h = o.tanh(&a);
        hs.push(h.clone());
    }
    (h, hs)
}

pub(crate) fn head<O: Ops>(o: &mut O, lay: &Layout, enc: &O::V) -> O::V {
    let (w, b) = (o.param(lay.head.0), o.param(lay.head.1));
    let d = o.matmul(enc, &w);
    o.add_row(&d, &b)
}

/// Forward-mode derivative of the head output along each joint, built from
/// graph ops so it can itself be differentiated with respect to the weights.
pub(crate) fn head_gradient<O: Ops>(o: &mut O, lay: &Layout, arch: &Arch, q: &Matrix, hs: &[O::V]) -> O::V {
    let damp: Vec<O::V> = hs.iter().map(|h| o.one_minus_square(h)).collect();
    let width = arch.input_dim();
    let hw = o.param(lay.head.0);
    let mut cols = Vec::with_capacity(arch.dof);
    for k in 0..arch.dof {
        let dx = o.constant(positional_tangent(q, arch.pe_frequencies, k, width));
        let mut t = dx;
        for (l, &(w, _)) in lay.trunk.iter().enumerate() {
            let wv = o.param(w);
            let a = o.matmul(&t, &wv);
            t = o.mul(&damp[l], &a);
        }
        cols.push(o.matmul(&t, &hw));
    }
    o.concat_cols(&cols)
}

/// Time-independent part of the first dynamics layer.
pub(crate) fn conditioning<O: Ops>(o: &mut O, lay: &Layout, enc: &O::V) -> O::V {
    let (w, b) = (o.param(lay.dyn_c), o.param(lay.dyn_b));
    let c = o.matmul(enc, &w);
    o.add_row(&c, &b)
}

/// `dz/dt` and, optionally, its exact divergence from one tangent pass per
/// state dimension.
pub(crate) fn dynamics<O: Ops>(o: &mut O, lay: &Layout, z: &O::V, t: f64, c: &O::V, trace: bool) -> (O::V, Option<O::V>) {
    let wz = o.param(lay.dyn_z);
    let wt = o.param(lay.dyn_t);
    let a = o.matmul(z, &wz);
    let tw = o.scale(&wt, t);
    let a = o.add_row(&a, &tw);
    let a = o.add(&a, c);
    let mut h = o.tanh(&a);
    let mut hs = vec![h.clone()];
    for &(w, b) in &lay.dyn_hidden {
        let (wv, bv) = (o.param(w), o.param(b));
        let a = o.matmul(&h, &wv);
        let a = o.add_row(&a, &bv);
        h = o.tanh(&a);
        hs.push(h.clone());
    }
    let (wo, bo) = (o.param(lay.dyn_out.0), o.param(lay.dyn_out.1));
    let out = o.matmul(&h, &wo);
    let out = o.add_row(&out, &bo);
    if !trace {
        return (out, None);
    }
    let dof = o.val(z).cols();
    let damp: Vec<O::V> = hs.iter().map(|h| o.one_minus_square(h)).collect();
    let mut total: Option<O::V> = None;
    for k in 0..dof {
        let row = o.row_slice(&wz, k, 1);
        let mut s = o.mul_row(&damp[0], &row);
        for (l, &(w, _)) in lay.dyn_hidden.iter().enumerate() {
            let wv = o.param(w);
            let a = o.matmul(&s, &wv);
            s = o.mul(&damp[l + 1], &a);
        }
        let jk = o.matmul(&s, &wo);
        let d = o.col_slice(&jk, k, 1);
        total = Some(match total {
            Some(acc) => o.add(&acc, &d),
            None => d,
        });
    }
    (out, total)
}

fn axpy<O: Ops>(o: &mut O, x: &O::V, a: f64, y: &O::V) -> O::V {
    let s = o.scale(y, a);
    o.add(x, &s)
}

/// Fixed-step RK4 from `t0` to `t1` (either direction). With `trace`, also
/// integrates `dl/dt = div h` from `l(t0) = 0`.
pub(crate) fn integrate<O: Ops>(
    o: &mut O,
    lay: &Layout,
    z0: O::V,
    c: &O::V,
    t0: f64,
    t1: f64,
    steps: usize,
    trace: bool,
) -> Result<(O::V, Option<O::V>), NeuralError> {
    let dt = (t1 - t0) / steps as f64;
    let mut z = z0;
    let mut l: Option<O::V> = None;
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let (k1, d1) = dynamics(o, lay, &z, t, c, trace);
        let z2 = axpy(o, &z, 0.5 * dt, &k1);
        let (k2, d2) = dynamics(o, lay, &z2, t + 0.5 * dt, c, trace);
        let z3 = axpy(o, &z, 0.5 * dt, &k2);
        let (k3, d3) = dynamics(o, lay, &z3, t + 0.5 * dt, c, trace);
        let z4 = axpy(o, &z, dt, &k3);
        let (k4, d4) = dynamics(o, lay, &z4, t + dt, c, trace);
        let s23 = o.add(&k2, &k3);
        let s14 = o.add(&k1, &k4);
        let inc = axpy(o, &s14, 2.0, &s23);
        z = axpy(o, &z, dt / 6.0, &inc);
        if !o.val(&z).is_finite() {
            return Err(NeuralError::Divergence { step: i });
        }
        if let (Some(d1), Some(d2), Some(d3), Some(d4)) = (d1, d2, d3, d4) {
            let s23 = o.add(&d2, &d3);
            let s14 = o.add(&d1, &d4);
            let inc = axpy(o, &s14, 2.0, &s23);
            let step = o.scale(&inc, dt / 6.0);
            l = Some(match l {
                Some(prev) => o.add(&prev, &step),
                None => step,
            });
        }
    }
    Ok((z, l))
}

/// Per-row log density of `targets` (`n x dof`) given per-row conditioning.
pub(crate) fn log_prob<O: Ops>(
    o: &mut O,
    lay: &Layout,
    dof: usize,
    targets: Matrix,
    c: &O::V,
    steps: usize,
) -> Result<O::V, NeuralError> {
    let x = o.constant(targets);
    let (z0, l) = integrate(o, lay, x, c, 1.0, 0.0, steps, true)?;
    let sq = o.square(&z0);
    let r = o.sum_cols(&sq);
    let base = o.scale(&r, -0.5);
    let base = o.add_scalar(&base, -0.5 * dof as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(o.add(&base, &l.expect("trace integrated")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn small_arch() -> Arch {
        Arch {
            trunk_width: 16,
            dyn_width: 16,
            ode_steps: 8,
            ..Arch::default()
        }
    }

    fn std_normal_logpdf(x: &[f64]) -> f64 {
        -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn passthrough_encoding_shape() {
        let arch = Arch {
            pe_frequencies: 0,
            max_obstacles: 1,
            ..small_arch()
        };
        let m = FlowModel::new(arch, 0).unwrap();
        let x = m.raw_input(&[0.3, -0.2], &fixtures::fixture_scene()).unwrap();
        assert_eq!(x, vec![0.3, -0.2, 1.2, 0.0, 0.3, 1.0]);
    }

    #[test]
    fn sinusoids_at_zero() {
        let x = positional_encoding(&[0.0, 0.0], 3);
        assert_eq!(x.len(), 2 * 7);
        for f in 0..3 {
            let base = 2 * (1 + 2 * f);
            assert_eq!(&x[base..base + 2], &[0.0, 0.0]);
            assert_eq!(&x[base + 2..base + 4], &[1.0, 1.0]);
        }
    }

    #[test]
    fn empty_slots_are_inert() {
        let m = FlowModel::new(small_arch(), 1).unwrap();
        let s = fixtures::fixture_scene();
        let f = m.scene_features(&s).unwrap();
        assert!(f[4..].iter().all(|v| *v == 0.0));
        let mut g = f.clone();
        // Swap two empty slots.
        g.swap(8, 12);
        assert_eq!(f, g);
        let too_many = Scene::new("x", vec![fixtures::disc(1.0, 1.0, 0.1); 5]);
        assert!(matches!(m.scene_features(&too_many), Err(NeuralError::SceneTooLarge { .. })));
    }

    #[test]
    fn identity_and_translation_flows() {
        let mut m = FlowModel::new(small_arch(), 2).unwrap();
        let s = fixtures::fixture_scene();
        let q = [0.4, -1.0];
        m.set_constant_dynamics(&[0.0, 0.0]);
        let z0 = [0.7, -0.3];
        assert_eq!(m.cnf_sample(&q, &s, &z0).unwrap(), z0.to_vec());
        let x = [1.1, 0.25];
        assert!((m.cnf_logprob(&q, &s, &x).unwrap() - std_normal_logpdf(&x)).abs() < 1e-12);

        let c = [0.5, -1.5];
        m.set_constant_dynamics(&c);
        let out = m.cnf_sample(&q, &s, &z0).unwrap();
        assert!((out[0] - 1.2).abs() < 1e-12 && (out[1] + 1.8).abs() < 1e-12);
        let shifted = [x[0] - c[0], x[1] - c[1]];
        assert!((m.cnf_logprob(&q, &s, &x).unwrap() - std_normal_logpdf(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn untrained_outputs_are_finite() {
        let m = FlowModel::new(Arch::default(), 3).unwrap();
        let s = fixtures::fixture_scene();
        let q = [1.0, 2.0];
        assert!(m.predict_distance(&q, &s).unwrap().is_finite());
        assert!(m.predict_gradient(&q, &s).unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(m.encode_input(&q, &s).unwrap().len(), 64);
    }

    #[test]
    fn tangent_gradient_matches_reverse_mode() {
        let m = FlowModel::new(small_arch(), 4).unwrap();
        let s = fixtures::fixture_scene();
        let qs = vec![vec![0.3, -0.7], vec![2.0, 1.0], vec![-3.0, 0.1]];
        let rev = m.predict_gradient_batch(&qs, &s).unwrap();
        let (qm, fm) = m.batch_inputs(&qs, &s).unwrap();
        let mut e = Eval::new(m.params());
        let lay = m.layout();
        let qv = e.constant(qm.clone());
        let fv = e.constant(fm);
        let x = trunk_input(&mut e, m.arch(), &qv, &fv);
        let (_, hs) = trunk(&mut e, &lay, &x);
        let g = head_gradient(&mut e, &lay, m.arch(), &qm, &hs);
        for (r, row) in e.val(&g).to_rows().iter().enumerate() {
            for k in 0..2 {
                assert!((row[k] - rev[r][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_single_sample_is_unit() {
        let m = FlowModel::new(small_arch(), 5).unwrap();
        let s = fixtures::fixture_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = m.monte_carlo_gradient(&[0.2, 0.3], &s, 1, &mut rng).unwrap().unwrap();
        assert!((crate::field::norm(&g) - 1.0).abs() < 1e-12);
        let a = m.monte_carlo_gradient(&[0.2, 0.3], &s, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = m.monte_carlo_gradient(&[0.2, 0.3], &s, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_batch_matches_sequential_queries() {
        let m = FlowModel::new(small_arch(), 8).unwrap();
        let s = fixtures::fixture_scene();
        let qs = vec![vec![0.2, 0.3], vec![-1.0, 2.0], vec![2.5, -0.4]];
        let batch = m.monte_carlo_batch(&qs, &s, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (q, b) in qs.iter().zip(&batch) {
            let one = m.monte_carlo(q, &s, 8, &mut rng).unwrap();
            assert!((one.distance - b.distance).abs() < 1e-12);
            for (x, y) in one.samples.iter().flatten().zip(b.samples.iter().flatten()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_detected() {
        let mut m = FlowModel::new(small_arch(), 6).unwrap();
        m.set_constant_dynamics(&[f64::MAX, 0.0]);
        let r = m.cnf_sample(&[0.0, 0.0], &fixtures::fixture_scene(), &[f64::MAX, 0.0]);
        assert!(matches!(r, Err(NeuralError::Divergence { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn exact_trace_matches_finite_differences(
            seed in 0u64..1000, z1 in -2.0f64..2.0, z2 in -2.0f64..2.0, t in 0.0f64..1.0,
        ) {
            let m = FlowModel::new(small_arch(), seed).unwrap();
            let s = fixtures::fixture_scene();
            let q = [0.5, -0.5];
            let z = [z1, z2];
            let tr = m.dynamics_trace(&q, &s, &z, t).unwrap();
            let h = 1e-5;
            let mut fd = 0.0;
            for k in 0..2 {
                let mut zp = z; zp[k] += h;
                let mut zm = z; zm[k] -= h;
                fd += (m.dynamics_value(&q, &s, &zp, t).unwrap()[k] - m.dynamics_value(&q, &s, &zm, t).unwrap()[k]) / (2.0 * h);
            }
            prop_assert!((tr - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {}", tr, fd);
        }

        #[test]
        fn flow_round_trip(seed in 0u64..1000, z1 in -2.5f64..2.5, z2 in -2.5f64..2.5) {
            let m = FlowModel::new(Arch { ode_steps: 20, ..small_arch() }, seed).unwrap();
            let s = fixtures::fixture_scene();
            let q = [1.0, 0.5];
            let x = m.cnf_sample(&q, &s, &[z1, z2]).unwrap();
            let back = m.cnf_inverse(&q, &s, &x).unwrap();
            prop_assert!((back[0] - z1).abs() < 1e-3 && (back[1] - z2).abs() < 1e-3);
        }

        #[test]
        fn reverse_gradient_matches_finite_differences(
            seed in 0u64..1000, q1 in -3.0f64..3.0, q2 in -3.0f64..3.0,
        ) {
            let m = FlowModel::new(small_arch(), seed).unwrap();
            let s = fixtures::fixture_scene();
            let g = m.predict_gradient(&[q1, q2], &s).unwrap();
            let h = 1e-4;
            let fd: Vec<f64> = (0..2).map(|k| {
                let mut p = [q1, q2]; p[k] += h;
                let mut n = [q1, q2]; n[k] -= h;
                (m.predict_distance(&p, &s).unwrap() - m.predict_distance(&n, &s).unwrap()) / (2.0 * h)
            }).collect();
            let err = ((g[0] - fd[0]).powi(2) + (g[1] - fd[1]).powi(2)).sqrt();
            let scale = (fd[0].powi(2) + fd[1].powi(2)).sqrt().max(1e-6);
            prop_assert!(err / scale < 1e-4, "rel err {}", err / scale);
        }
    }
}
