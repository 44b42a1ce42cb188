use super::{dist, SamplerConfig, SamplingError};
use crate::geometry::{robot_scene_distance, Configuration, RobotModel, Scene};
use serde::{Deserialize, Serialize};

/// Search direction of the penalty descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentRule {
    /// Steepest descent on the penalty objective.
    Gradient,
    /// Gradient preconditioned by the Gauss-Newton metric of the penalty
    /// residuals, `I + mu * grad_f grad_f^T`. Removes the ill-conditioning
    /// that large penalty weights cause across the boundary.
    GaussNewton,
    /// Damped Newton step with a finite-difference clearance Hessian, which
    /// adds the boundary curvature term the Gauss-Newton metric drops. Falls
    /// back to Gauss-Newton where the Hessian is unusable.
    #[default]
    Newton,
}

const PENALTY_SCHEDULE: [f64; 8] = [1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8];
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const STEP_TOL: f64 = 1e-10;
const HESSIAN_STEP: f64 = 1e-4;

struct Problem<'a> {
    model: &'a RobotModel,
    scene: &'a Scene,
    target: &'a [f64],
    h: f64,
}

impl Problem<'_> {
    fn f(&self, q: &[f64]) -> f64 {
        robot_scene_distance(self.model, self.scene, q)
    }

    fn grad_f(&self, q: &[f64]) -> Vec<f64> {
        let mut x = q.to_vec();
        (0..q.len())
            .map(|k| {
                x[k] = q[k] + self.h;
                let fp = self.f(&x);
                x[k] = q[k] - self.h;
                let fm = self.f(&x);
                x[k] = q[k];
                (fp - fm) / (2.0 * self.h)
            })
            .collect()
    }

    fn hessian_f(&self, q: &[f64]) -> Vec<Vec<f64>> {
        let n = q.len();
        let mut x = q.to_vec();
        let mut cols = Vec::with_capacity(n);
        for k in 0..n {
            x[k] = q[k] + HESSIAN_STEP;
            let gp = self.grad_f(&x);
            x[k] = q[k] - HESSIAN_STEP;
            let gm = self.grad_f(&x);
            x[k] = q[k];
            cols.push(
                gp.iter()
                    .zip(&gm)
                    .map(|(a, b)| (a - b) / (2.0 * HESSIAN_STEP))
                    .collect::<Vec<_>>(),
            );
        }
        (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (cols[i][j] + cols[j][i])).collect())
            .collect()
    }

    fn objective(&self, q: &[f64], mu: f64) -> f64 {
        let d2: f64 = q.iter().zip(self.target).map(|(a, b)| (a - b).powi(2)).sum();
        d2 + mu * self.f(q).max(0.0).powi(2)
    }
}

/// Moves `q_init` onto the collision boundary near its closest point to
/// `q_query`. A colliding query is returned unchanged.
pub fn optimize_to_boundary(
    model: &RobotModel,
    scene: &Scene,
    q_init: &[f64],
    q_query: &[f64],
    cfg: &SamplerConfig,
) -> Result<Configuration, SamplingError> {
    model.check(q_init)?;
    model.check(q_query)?;
    let p = Problem {
        model,
        scene,
        target: q_query,
        h: cfg.fd_step,
    };
    if !p.f(q_query).is_finite() {
        return Err(SamplingError::FreeScene(scene.id.clone()));
    }
    if p.f(q_query) <= 0.0 {
        return Ok(q_query.to_vec());
    }
    let f0 = p.f(q_init);
    if f0.abs() <= cfg.boundary_tol && is_stationary(&p, q_init) {
        return Ok(q_init.to_vec());
    }

    let tol = cfg.boundary_tol;
    let mut x = q_init.to_vec();
    let mut iters = 0;
    for &mu in &PENALTY_SCHEDULE {
        loop {
            if iters >= cfg.max_opt_iters {
                return Err(SamplingError::NoConvergence(cfg.max_opt_iters));
            }
            iters += 1;
            // Inside the colliding set the objective is flat in the penalty
            // term; jump straight to the boundary crossing toward the query.
            if p.f(&x) < -tol {
                x = bisect(&p, x, q_query.to_vec(), tol)?;
            }
            let phi = p.objective(&x, mu);
            let fx = p.f(&x).max(0.0);
            let gf = if fx > 0.0 { p.grad_f(&x) } else { vec![0.0; x.len()] };
            let g: Vec<f64> = x
                .iter()
                .zip(q_query)
                .zip(&gf)
                .map(|((a, b), c)| 2.0 * (a - b) + 2.0 * mu * fx * c)
                .collect();
            let dir = match cfg.descent {
                DescentRule::Gradient => g.iter().map(|v| -v).collect::<Vec<_>>(),
                DescentRule::GaussNewton => gauss_newton_direction(&g, &gf, mu, fx > 0.0),
                DescentRule::Newton => {
                    newton_direction(&p, &x, &g, &gf, mu, fx).unwrap_or_else(|| gauss_newton_direction(&g, &gf, mu, fx > 0.0))
                }
            };
            let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            if slope >= -1e-18 * (1.0 + phi) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                let cand = model.clamp(&cand);
                if p.objective(&cand, mu) <= phi + ARMIJO_C * t * slope {
                    accepted = Some(cand);
                    break;
                }
                t *= 0.5;
            }
            let Some(next) = accepted else { break };
            let step = dist(&next, &x);
            x = next;
            if step < STEP_TOL * (1.0 + x.iter().map(|v| v.abs()).sum::<f64>()) {
                break;
            }
        }
    }
    snap_to_boundary(&p, x, cfg.boundary_tol)
}

/// Solves `(I + mu a a^T) d = -g / 2` by Sherman-Morrison.
fn gauss_newton_direction(g: &[f64], a: &[f64], mu: f64, active: bool) -> Vec<f64> {
    let half: Vec<f64> = g.iter().map(|v| -0.5 * v).collect();
    if !active {
        return half;
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let ah: f64 = a.iter().zip(&half).map(|(x, y)| x * y).sum();
    let k = mu * ah / (1.0 + mu * aa);
    half.iter().zip(a).map(|(h, ai)| h - k * ai).collect()
}

/// Solves `(I + mu (a a^T + f H_f)) d = -g / 2`, adding Levenberg damping
/// until the matrix is positive definite. `None` if no damping works.
fn newton_direction(p: &Problem, x: &[f64], g: &[f64], a: &[f64], mu: f64, f: f64) -> Option<Vec<f64>> {
    let n = x.len();
    let rhs: Vec<f64> = g.iter().map(|v| -0.5 * v).collect();
    if f <= 0.0 {
        return Some(rhs);
    }
    let hf = p.hessian_f(x);
    let base: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (i == j) as u8 as f64 + mu * (a[i] * a[j] + f * hf[i][j]))
                .collect()
        })
        .collect();
    let scale = base.iter().enumerate().map(|(i, r)| r[i].abs()).fold(1.0, f64::max);
    let mut lambda = 0.0;
    for _ in 0..30 {
        let mut m = base.clone();
        for (i, r) in m.iter_mut().enumerate() {
            r[i] += lambda;
        }
        if let Some(d) = cholesky_solve(m, &rhs) {
            return Some(d);
        }
        lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 10.0 };
    }
    None
}

fn cholesky_solve(mut m: Vec<Vec<f64>>, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = m[j][j];
        for k in 0..j {
            d -= m[j][k] * m[j][k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        m[j][j] = d;
        for i in j + 1..n {
            let mut s = m[i][j];
            for k in 0..j {
                s -= m[i][k] * m[j][k];
            }
            m[i][j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= m[i][k] * y[k];
        }
        y[i] /= m[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= m[k][i] * y[k];
        }
        y[i] /= m[i][i];
    }
    Some(y)
}

/// On the boundary with the query direction parallel to the clearance
/// gradient: a first-order critical point of the projection problem.
fn is_stationary(p: &Problem, q: &[f64]) -> bool {
    let gf = p.grad_f(q);
    let r: Vec<f64> = p.target.iter().zip(q).map(|(a, b)| a - b).collect();
    let (gn, rn) = (norm(&gf), norm(&r));
    if gn < 1e-12 || rn < 1e-12 {
        return false;
    }
    let cos = gf.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / (gn * rn);
    cos > 1.0 - 1e-8
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Bisection onto the zero level. From outside it marches down the clearance
/// gradient until it brackets the boundary; from inside it bisects toward
/// the (free) query.
fn snap_to_boundary(p: &Problem, x: Configuration, tol: f64) -> Result<Configuration, SamplingError> {
    let fx = p.f(&x);
    if fx.abs() <= tol {
        return Ok(x);
    }
    let (inside, outside) = if fx < 0.0 {
        (x, p.target.to_vec())
    } else {
        let gf = p.grad_f(&x);
        let gn = norm(&gf);
        if gn < 1e-12 {
            return Err(SamplingError::NoBoundary);
        }
        let mut s = 2.0 * fx / gn;
        let mut hit = None;
        for _ in 0..20 {
            let cand: Vec<f64> = x.iter().zip(&gf).map(|(a, g)| a - s * g / gn).collect();
            let cand = p.model.clamp(&cand);
            if p.f(&cand) <= 0.0 {
                hit = Some(cand);
                break;
            }
            s *= 2.0;
        }
        match hit {
            Some(h) => (h, x),
            None => return Err(SamplingError::NoBoundary),
        }
    };
    bisect(p, inside, outside, tol)
}

/// Bisects the segment between a colliding and a free configuration down to
/// the zero level.
fn bisect(p: &Problem, inside: Configuration, outside: Configuration, tol: f64) -> Result<Configuration, SamplingError> {
    let (mut a, mut b) = (inside, outside);
    for _ in 0..200 {
        let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect();
        let fm = p.f(&mid);
        if fm.abs() <= tol {
            return Ok(mid);
        }
        if fm < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(SamplingError::NoBoundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, disc};

    fn one_link() -> (RobotModel, Scene) {
        let m = RobotModel::planar(&[1.0], 0.05).unwrap();
        // Colliding angles form one interval centred on pi/2.
        (m, Scene::new("s", vec![disc(0.0, 1.0, 0.3)]))
    }

    #[test]
    fn one_dof_converges_to_nearest_endpoint() {
        let (m, s) = one_link();
        let cfg = SamplerConfig::default();
        // Brute force over a fine angle grid for the lower endpoint.
        let n = 2_000_000;
        let lower = (0..n)
            .map(|i| -0.5 + 2.5 * i as f64 / n as f64)
            .find(|&a| robot_scene_distance(&m, &s, &[a]) <= 0.0)
            .unwrap();
        let closed_form = std::f64::consts::FRAC_PI_2 - 0.35f64.asin();
        assert!((lower - closed_form).abs() < 2e-6);
        for init in [0.2, 0.9, 1.3, -0.4] {
            let q = optimize_to_boundary(&m, &s, &[init], &[0.0], &cfg).unwrap();
            assert!((q[0] - closed_form).abs() < 1e-3, "init {init}: {}", q[0]);
            assert!(robot_scene_distance(&m, &s, &q).abs() <= cfg.boundary_tol);
        }
    }

    #[test]
    fn boundary_optimum_is_a_fixed_point() {
        let (m, s) = one_link();
        let cfg = SamplerConfig::default();
        let q0 = optimize_to_boundary(&m, &s, &[0.3], &[0.0], &cfg).unwrap();
        let q1 = optimize_to_boundary(&m, &s, &q0, &[0.0], &cfg).unwrap();
        assert!((q1[0] - q0[0]).abs() < 1e-6);
        assert!(robot_scene_distance(&m, &s, &q1).abs() <= cfg.boundary_tol);
    }

    #[test]
    fn colliding_query_returned() {
        let (m, s) = one_link();
        let q = optimize_to_boundary(&m, &s, &[0.0], &[1.5], &SamplerConfig::default()).unwrap();
        assert_eq!(q, vec![1.5]);
    }

    #[test]
    fn every_descent_rule_reaches_boundary() {
        let (m, s) = one_link();
        for (descent, iters) in [
            (DescentRule::Gradient, 20_000),
            (DescentRule::GaussNewton, 1000),
            (DescentRule::Newton, 200),
        ] {
            let cfg = SamplerConfig {
                descent,
                max_opt_iters: iters,
                ..Default::default()
            };
            let q = optimize_to_boundary(&m, &s, &[0.2], &[0.0], &cfg).unwrap();
            assert!(robot_scene_distance(&m, &s, &q).abs() <= cfg.boundary_tol);
            assert!((q[0] - (std::f64::consts::FRAC_PI_2 - 0.35f64.asin())).abs() < 1e-2);
        }
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let m = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let x = cholesky_solve(m, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
        assert!(cholesky_solve(vec![vec![1.0, 2.0], vec![2.0, 1.0]], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn two_dof_solution_is_locally_minimal() {
        let m = fixtures::fixture_arm();
        let s = fixtures::fixture_scene();
        let cfg = SamplerConfig::default();
        let query = [1.5, 1.0];
        let q = optimize_to_boundary(&m, &s, &[1.0, 0.5], &query, &cfg).unwrap();
        let d = dist(&q, &query);
        // No colliding configuration in a small neighbourhood is closer.
        for i in 0..64 {
            let a = i as f64 / 64.0 * std::f64::consts::TAU;
            for r in [0.01, 0.03] {
                let c = [q[0] + r * a.cos(), q[1] + r * a.sin()];
                if robot_scene_distance(&m, &s, &c) < -cfg.boundary_tol {
                    assert!(dist(&c, &query) > d - 1e-3);
                }
            }
        }
    }

    #[test]
    fn starting_outside_limits_is_rejected() {
        let (m, s) = one_link();
        let r = optimize_to_boundary(&m, &s, &[4.0], &[0.0], &SamplerConfig::default());
        assert!(matches!(r, Err(SamplingError::Geometry(_))));
    }
}
