//! Discovery of minimal-distance collision configurations by optimization:
//! global exploration from random seeds, then local refinement inside an
//! epsilon-ball around every near-minimal solution.

mod dataset;
mod optimize;

pub use dataset::{build_dataset, Dataset, TrainingRecord, DATASET_MAGIC, DATASET_VERSION};
pub use optimize::{optimize_to_boundary, DescentRule};

use crate::geometry::{is_colliding, Configuration, GeometryError, RobotModel, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene '{0}' has no obstacles")]
    FreeScene(String),
    #[error("optimizer did not reach the boundary within {0} iterations")]
    NoConvergence(usize),
    #[error("all {attempted} global seeds failed ({no_convergence} did not converge, {no_bracket} found no boundary)")]
    AllSeedsFailed {
        attempted: usize,
        no_convergence: usize,
        no_bracket: usize,
    },
    #[error("no collision boundary reachable from the seed")]
    NoBoundary,
    #[error("dataset quality: {dropped} of {total} records dropped")]
    DatasetQuality { dropped: usize, total: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_global: usize,
    pub n_local: usize,
    /// Refinement ball radius in radians.
    pub radius: f64,
    pub max_opt_iters: usize,
    pub boundary_tol: f64,
    pub equality_tol_rel: f64,
    pub rng_seed: u64,
    /// Per-query cap on the emitted sample count.
    pub max_samples: usize,
    pub descent: DescentRule,
    /// Central difference step for clearance gradients.
    pub fd_step: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_global: 16,
            n_local: 8,
            radius: 0.1,
            max_opt_iters: 200,
            boundary_tol: 1e-4,
            equality_tol_rel: 0.01,
            rng_seed: 0,
            max_samples: 64,
            descent: DescentRule::Newton,
            fd_step: 1e-6,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let bad = |m: &str| Err(SamplingError::InvalidConfig(m.to_string()));
        if self.n_global == 0 {
            return bad("n_global must be positive");
        }
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.max_opt_iters == 0 || self.max_samples == 0 {
            return bad("iteration and sample caps must be positive");
        }
        if !(self.boundary_tol > 0.0) || !(self.fd_step > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.equality_tol_rel > 0.0 && self.equality_tol_rel <= 0.1) {
            return bad("equality_tol_rel must lie in (0, 0.1]");
        }
        Ok(())
    }

    pub fn dedup_radius(&self) -> f64 {
        self.radius / 10.0
    }

    /// Optimizer calls one query can cost at most.
    pub fn max_optimizer_calls(&self) -> usize {
        self.n_global * (1 + self.n_local)
    }
}

/// Optimizer bookkeeping for one query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    pub global_ok: usize,
    pub global_failed: usize,
    pub local_ok: usize,
    pub local_failed: usize,
    pub local_rejected: usize,
    pub duplicates: usize,
}

impl SampleStats {
    pub fn optimizer_calls(&self) -> usize {
        self.global_ok + self.global_failed + self.local_ok + self.local_failed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSampleSet {
    pub query: Configuration,
    pub samples: Vec<Configuration>,
    pub d_min_est: f64,
    pub scene_id: String,
    pub stats: SampleStats,
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub(crate) fn uniform_in_limits(model: &RobotModel, rng: &mut impl Rng) -> Configuration {
    model
        .joint_limits()
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..=hi))
        .collect()
}

/// Uniform point in the ball of radius `r` around `c`, clamped into the
/// joint limits.
fn sample_ball(model: &RobotModel, c: &[f64], r: f64, rng: &mut impl Rng) -> Configuration {
    let n = c.len();
    let mut dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let rho = r * rng.random::<f64>().powf(1.0 / n as f64);
    for (d, ci) in dir.iter_mut().zip(c) {
        *d = ci + *d / norm * rho;
    }
    model.clamp(&dir)
}

pub(crate) fn seed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples near-minimal collision configurations for one query.
///
/// Global seed `i` is the `i`-th draw of one rng stream, so seed sequences
/// are nested in `n_global`. Refinement around global solution `i` draws from
/// its own stream, independent of which other solutions were kept.
pub fn adaptive_refinement_sample(
    model: &RobotModel,
    scene: &Scene,
    q: &[f64],
    cfg: &SamplerConfig,
) -> Result<CollisionSampleSet, SamplingError> {
    cfg.validate()?;
    model.check(q)?;
    if scene.obstacles.is_empty() {
        return Err(SamplingError::FreeScene(scene.id.clone()));
    }
    let mut stats = SampleStats::default();
    if is_colliding(model, scene, q) {
        return Ok(CollisionSampleSet {
            query: q.to_vec(),
            samples: vec![q.to_vec()],
            d_min_est: 0.0,
            scene_id: scene.id.clone(),
            stats,
        });
    }

    let mut global_rng = seed_rng(cfg.rng_seed, 0);
    let mut global: Vec<(usize, Configuration, f64)> = Vec::new();
    let (mut no_conv, mut no_bracket) = (0, 0);
    for i in 0..cfg.n_global {
        let seed = uniform_in_limits(model, &mut global_rng);
        match optimize_to_boundary(model, scene, &seed, q, cfg) {
            Ok(s) => {
                stats.global_ok += 1;
                let d = dist(q, &s);
                global.push((i, s, d));
            }
            Err(SamplingError::NoConvergence(_)) => {
                stats.global_failed += 1;
                no_conv += 1;
            }
            Err(SamplingError::NoBoundary) => {
                stats.global_failed += 1;
                no_bracket += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if global.is_empty() {
        return Err(SamplingError::AllSeedsFailed {
            attempted: cfg.n_global,
            no_convergence: no_conv,
            no_bracket,
        });
    }

    let d_min = global.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
    let accept = |d: f64, d_min: f64| d <= d_min * (1.0 + cfg.equality_tol_rel);
    let kept: Vec<_> = global.into_iter().filter(|g| accept(g.2, d_min)).collect();

    let mut found: Vec<(Configuration, f64)> = kept.iter().map(|g| (g.1.clone(), g.2)).collect();
    for (i, center, _) in &kept {
        let mut rng = seed_rng(cfg.rng_seed, 1 + *i as u64);
        for _ in 0..cfg.n_local {
            let seed = sample_ball(model, center, cfg.radius, &mut rng);
            match optimize_to_boundary(model, scene, &seed, q, cfg) {
                Ok(s) => {
                    let d = dist(q, &s);
                    if accept(d, d_min) {
                        stats.local_ok += 1;
                        found.push((s, d));
                    } else {
                        stats.local_rejected += 1;
                    }
                }
                Err(SamplingError::NoConvergence(_) | SamplingError::NoBoundary) => {
                    stats.local_failed += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    // Refinement may undercut the global minimum; re-apply the equality test
    // against the final estimate so every sample stays within tolerance.
    let d_min_est = found.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
    let mut samples: Vec<Configuration> = Vec::new();
    let r = cfg.dedup_radius();
    for (s, d) in found {
        if !accept(d, d_min_est) {
            stats.local_rejected += 1;
            continue;
        }
        if samples.iter().any(|t| dist(t, &s) < r) {
            stats.duplicates += 1;
            continue;
        }
        samples.push(s);
    }
    if samples.len() > cfg.max_samples {
        let n = samples.len();
        samples = (0..cfg.max_samples)
            .map(|k| samples[k * n / cfg.max_samples].clone())
            .collect();
    }
    Ok(CollisionSampleSet {
        query: q.to_vec(),
        samples,
        d_min_est,
        scene_id: scene.id.clone(),
        stats,
    })
}

/// Single-linkage cluster labels at linkage distance `eps`. Labels are
/// numbered in order of first appearance.
pub fn single_linkage_clusters(points: &[Configuration], eps: f64) -> Vec<usize> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if dist(&points[i], &points[j]) <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut roots: Vec<usize> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        let l = match roots.iter().position(|&x| x == r) {
            Some(l) => l,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        labels[i] = l;
    }
    labels
}

pub fn cluster_count(points: &[Configuration], eps: f64) -> usize {
    single_linkage_clusters(points, eps)
        .into_iter()
        .max()
        .map_or(0, |m| m + 1)
}
