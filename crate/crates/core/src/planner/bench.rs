//! Seeded trial sets and runners for the projection and trajectory suites.

use super::{optimize_trajectory, project_to_contact, PlannerError, ProjectionConfig, ProjectionOutcome, TrajectoryConfig};
use crate::field::{FieldProvider, Provenance};
use crate::geometry::{is_colliding, robot_scene_distance, Configuration, Obstacle, Point2, RobotModel, Scene};
use crate::sampling::{seed_rng, uniform_in_limits};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;

/// Rejection-sampling budget per trial.
const MAX_DRAWS: usize = 10_000;
/// Initial configurations keep at least this clearance to the target.
const MIN_START_CLEARANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetCategory {
    /// Close to the base; the links, not the tip, must make contact.
    CloseProximity,
    /// At the rim of the workspace; contact needs a nearly straight arm.
    NearSingularity,
    Generic,
}

impl TargetCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetCategory::CloseProximity => "close_proximity",
            TargetCategory::NearSingularity => "near_singularity",
            TargetCategory::Generic => "generic",
        }
    }

    /// Range of `|center| - radius - link radius` as fractions of the reach.
    fn reach_band(self) -> (f64, f64) {
        match self {
            TargetCategory::CloseProximity => (0.2, 0.55),
            TargetCategory::Generic => (0.55, 0.95),
            TargetCategory::NearSingularity => (0.95, 0.995),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTrial {
    pub id: usize,
    pub category: TargetCategory,
    /// One disc, the button.
    pub target: Scene,
    pub q0: Configuration,
}

/// Trials cycle through the three categories. Each draws a button position in
/// the category's band and a start configuration clear of it.
pub fn projection_trials(model: &RobotModel, n: usize, button_radius: f64, seed: u64) -> Vec<ProjectionTrial> {
    let cats = [
        TargetCategory::CloseProximity,
        TargetCategory::NearSingularity,
        TargetCategory::Generic,
    ];
    let r_link = model.link_radii().iter().copied().fold(0.0, f64::max);
    (0..n)
        .map(|id| {
            let mut rng = seed_rng(seed, id as u64);
            let category = cats[id % cats.len()];
            let (lo, hi) = category.reach_band();
            let s = rng.random_range(lo..hi) * model.reach();
            let rho = s + button_radius + r_link;
            let phi = rng.random_range(-PI..PI);
            let button = Obstacle::new(Point2::new(rho * phi.cos(), rho * phi.sin()), button_radius)
                .expect("positive button radius");
            let target = Scene::new(format!("button-{id}"), vec![button]);
            let q0 = (0..MAX_DRAWS)
                .map(|_| uniform_in_limits(model, &mut rng))
                .find(|q| robot_scene_distance(model, &target, q) > MIN_START_CLEARANCE)
                .expect("free start configuration");
            ProjectionTrial {
                id,
                category,
                target,
                q0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub trial: usize,
    pub category: TargetCategory,
    pub provider: Provenance,
    pub success: bool,
    pub outcome: ProjectionOutcome,
    pub steps: usize,
    pub failed_steps: usize,
    pub final_clearance: f64,
    /// Excluded from determinism comparisons.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Runs every trial with a fresh provider from `make`, in parallel; rows are
/// in trial order.
pub fn run_projection<'a, F>(
    model: &RobotModel,
    trials: &'a [ProjectionTrial],
    cfg: &ProjectionConfig,
    make: F,
) -> Result<Vec<ProjectionRow>, PlannerError>
where
    F: Fn(&'a ProjectionTrial) -> Box<dyn FieldProvider + 'a> + Sync,
{
    trials
        .par_iter()
        .map(|t| {
            let mut p = make(t);
            let r = project_to_contact(p.as_mut(), model, &t.target, &t.q0, cfg)?;
            Ok(ProjectionRow {
                trial: t.id,
                category: t.category,
                provider: p.provenance(),
                success: r.success,
                outcome: r.outcome,
                steps: r.steps,
                failed_steps: r.failed_steps,
                final_clearance: robot_scene_distance(model, &t.target, &r.final_q),
                wall_time_s: r.wall_time.as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub provider: Provenance,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful trials; NaN when there are none.
    pub mean_steps: f64,
    pub mean_wall_time_s: f64,
}

fn providers_in_order<T>(rows: &[T], key: impl Fn(&T) -> Provenance) -> Vec<Provenance> {
    let mut seen = Vec::new();
    for r in rows {
        if !seen.contains(&key(r)) {
            seen.push(key(r));
        }
    }
    seen
}

pub fn summarize_projection(rows: &[ProjectionRow]) -> Vec<ProjectionSummary> {
    providers_in_order(rows, |r| r.provider)
        .into_iter()
        .map(|p| {
            let mine: Vec<&ProjectionRow> = rows.iter().filter(|r| r.provider == p).collect();
            let ok: Vec<&&ProjectionRow> = mine.iter().filter(|r| r.success).collect();
            let mean_steps = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| r.steps as f64).sum::<f64>() / ok.len() as f64
            };
            ProjectionSummary {
                provider: p,
                trials: mine.len(),
                successes: ok.len(),
                success_rate: ok.len() as f64 / mine.len() as f64,
                mean_steps,
                mean_wall_time_s: mine.iter().map(|r| r.wall_time_s).sum::<f64>() / mine.len() as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrial {
    pub id: usize,
    pub q_start: Configuration,
    pub q_target: Configuration,
}

/// Collision-free start/goal pairs whose straight joint-space segment
/// collides, so that every instance needs the collision term.
pub fn trajectory_trials(model: &RobotModel, scene: &Scene, n: usize, seed: u64) -> Vec<TrajectoryTrial> {
    let free = |q: &[f64]| !is_colliding(model, scene, q);
    (0..n)
        .map(|id| {
            let mut rng = seed_rng(seed, id as u64);
            for _ in 0..MAX_DRAWS {
                let a = uniform_in_limits(model, &mut rng);
                let b = uniform_in_limits(model, &mut rng);
                if !free(&a) || !free(&b) {
                    continue;
                }
                let blocked = (1..64).any(|k| {
                    let s = k as f64 / 64.0;
                    let q: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * (y - x)).collect();
                    !free(&q)
                });
                if blocked {
                    return TrajectoryTrial {
                        id,
                        q_start: a,
                        q_target: b,
                    };
                }
            }
            panic!("no blocked start/goal pair found for trial {id}");
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub trial: usize,
    pub provider: Provenance,
    pub success: bool,
    pub tracking_error: f64,
    pub opt_steps: usize,
    pub colliding_waypoints: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
}

pub fn run_trajectories<'a, F>(
    model: &RobotModel,
    scene: &Scene,
    trials: &'a [TrajectoryTrial],
    cfg: &TrajectoryConfig,
    make: F,
) -> Result<Vec<TrajectoryRow>, PlannerError>
where
    F: Fn(&'a TrajectoryTrial) -> Box<dyn FieldProvider + 'a> + Sync,
{
    trials
        .par_iter()
        .map(|t| {
            let start = Instant::now();
            let mut p = make(t);
            let r = optimize_trajectory(p.as_mut(), model, scene, &t.q_start, &t.q_target, cfg)?;
            Ok(TrajectoryRow {
                trial: t.id,
                provider: p.provenance(),
                success: r.success,
                tracking_error: r.tracking_error,
                opt_steps: r.opt_steps,
                colliding_waypoints: r.colliding_waypoints,
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub provider: Provenance,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_tracking_error: f64,
    pub mean_opt_steps: f64,
}

pub fn summarize_trajectories(rows: &[TrajectoryRow]) -> Vec<TrajectorySummary> {
    providers_in_order(rows, |r| r.provider)
        .into_iter()
        .map(|p| {
            let mine: Vec<&TrajectoryRow> = rows.iter().filter(|r| r.provider == p).collect();
            let n = mine.len() as f64;
            let successes = mine.iter().filter(|r| r.success).count();
            TrajectorySummary {
                provider: p,
                trials: mine.len(),
                successes,
                success_rate: successes as f64 / n,
                mean_tracking_error: mine.iter().map(|r| r.tracking_error).sum::<f64>() / n,
                mean_opt_steps: mine.iter().map(|r| r.opt_steps as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

/// One evaluated benchmark ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn find<T>(rows: &[T], p: Provenance, key: impl Fn(&T) -> Provenance) -> Option<&T> {
    rows.iter().find(|r| key(r) == p)
}

fn missing(name: &str, p: Provenance) -> OrderingCheck {
    OrderingCheck {
        name: name.into(),
        passed: false,
        detail: format!("no rows for {}", p.as_str()),
    }
}

/// `a - b >= gap_pp` percentage points, evaluated on the integer counts.
fn rate_gap(a: (usize, usize), b: (usize, usize), gap_pp: usize) -> bool {
    let lhs = 100 * (a.0 as u128 * b.1 as u128) as i128 - 100 * (b.0 as u128 * a.1 as u128) as i128;
    lhs >= (gap_pp as u128 * a.1 as u128 * b.1 as u128) as i128
}

/// Success rates strictly ordered learned-MC, baseline, SDF pullback with at
/// least `gap_pp` points between neighbours, and learned-MC needing no more
/// steps on average than the baseline.
pub fn projection_ordering(summary: &[ProjectionSummary], gap_pp: usize) -> Vec<OrderingCheck> {
    let get = |p| find(summary, p, |s: &ProjectionSummary| s.provider);
    let mut out = Vec::new();
    let chain = [Provenance::LearnedMc, Provenance::BaselineCdf, Provenance::SdfPullback];
    for w in chain.windows(2) {
        let name = format!("success {} >= {} + {gap_pp}pp", w[0].as_str(), w[1].as_str());
        out.push(match (get(w[0]), get(w[1])) {
            (Some(a), Some(b)) => OrderingCheck {
                passed: rate_gap((a.successes, a.trials), (b.successes, b.trials), gap_pp),
                detail: format!("{:.3} vs {:.3}", a.success_rate, b.success_rate),
                name,
            },
            (None, _) => missing(&name, w[0]),
            (_, None) => missing(&name, w[1]),
        });
    }
    let name = "mean steps learned_mc <= baseline_cdf".to_string();
    out.push(match (get(Provenance::LearnedMc), get(Provenance::BaselineCdf)) {
        (Some(a), Some(b)) => OrderingCheck {
            passed: a.mean_steps <= b.mean_steps,
            detail: format!("{:.3} vs {:.3}", a.mean_steps, b.mean_steps),
            name,
        },
        (None, _) => missing(&name, Provenance::LearnedMc),
        (_, None) => missing(&name, Provenance::BaselineCdf),
    });
    out
}

/// Learned-MC succeeds at least as often as the baseline with a mean tracking
/// error no larger.
pub fn trajectory_ordering(summary: &[TrajectorySummary]) -> Vec<OrderingCheck> {
    let get = |p| find(summary, p, |s: &TrajectorySummary| s.provider);
    let (a, b) = match (get(Provenance::LearnedMc), get(Provenance::BaselineCdf)) {
        (Some(a), Some(b)) => (a, b),
        (a, _) => {
            let p = if a.is_none() { Provenance::LearnedMc } else { Provenance::BaselineCdf };
            return vec![
                missing("success learned_mc >= baseline_cdf", p),
                missing("tracking error learned_mc <= baseline_cdf", p),
            ];
        }
    };
    vec![
        OrderingCheck {
            name: "success learned_mc >= baseline_cdf".into(),
            passed: rate_gap((a.successes, a.trials), (b.successes, b.trials), 0),
            detail: format!("{:.3} vs {:.3}", a.success_rate, b.success_rate),
        },
        OrderingCheck {
            name: "tracking error learned_mc <= baseline_cdf".into(),
            passed: a.mean_tracking_error <= b.mean_tracking_error,
            detail: format!("{:.3e} vs {:.3e}", a.mean_tracking_error, b.mean_tracking_error),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BaselineProvider, SdfPullbackProvider};
    use crate::fixtures;
    use crate::planner::{BankConfig, BoundaryBank};

    #[test]
    fn trials_are_seeded_and_in_band() {
        let arm = fixtures::symmetric_arm();
        let a = projection_trials(&arm, 12, 0.025, 3);
        assert_eq!(a, projection_trials(&arm, 12, 0.025, 3));
        assert_ne!(a, projection_trials(&arm, 12, 0.025, 4));
        for t in &a {
            let o = &t.target.obstacles[0];
            let s = (o.center.norm() - o.radius - 0.05) / arm.reach();
            let (lo, hi) = t.category.reach_band();
            assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            assert!(robot_scene_distance(&arm, &t.target, &t.q0) > MIN_START_CLEARANCE);
        }
    }

    #[test]
    fn projection_runs_reproduce() {
        let arm = fixtures::symmetric_arm();
        let trials = projection_trials(&arm, 6, 0.025, 1);
        let mut bank = BoundaryBank::new(arm.clone(), BankConfig::default());
        bank.prepare(trials.iter().map(|t| &t.target));
        let run = || {
            run_projection(&arm, &trials, &ProjectionConfig::default(), |t| {
                Box::new(BaselineProvider {
                    boundary_samples: bank.samples_for(&t.target),
                })
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        let strip = |rows: &[ProjectionRow]| {
            rows.iter()
                .map(|r| ProjectionRow {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        let s = summarize_projection(&a);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].successes, a.iter().filter(|r| r.success).count());
    }

    fn summary(p: Provenance, successes: usize, trials: usize, mean_steps: f64) -> ProjectionSummary {
        ProjectionSummary {
            provider: p,
            trials,
            successes,
            success_rate: successes as f64 / trials as f64,
            mean_steps,
            mean_wall_time_s: 0.0,
        }
    }

    #[test]
    fn projection_ordering_uses_exact_gaps() {
        let s = vec![
            summary(Provenance::LearnedMc, 63, 210, 2.0),
            summary(Provenance::BaselineCdf, 42, 210, 1.0),
            summary(Provenance::SdfPullback, 22, 210, 5.0),
        ];
        let c = projection_ordering(&s, 10);
        // 30% vs 20% is exactly ten points; 20% vs 10.5% is under.
        assert!(c[0].passed);
        assert!(!c[1].passed);
        assert!(!c[2].passed);
        let c = projection_ordering(&s[..2], 10);
        assert!(!c[1].passed && c[1].detail.contains("sdf_pullback"));
    }

    #[test]
    fn trajectory_trials_are_blocked_and_free_at_ends() {
        let arm = fixtures::fixture_arm();
        let scene = fixtures::narrow_gap_scene();
        let trials = trajectory_trials(&arm, &scene, 5, 2);
        for t in &trials {
            assert!(!is_colliding(&arm, &scene, &t.q_start));
            assert!(!is_colliding(&arm, &scene, &t.q_target));
        }
        let rows = run_trajectories(&arm, &scene, &trials, &TrajectoryConfig::default(), |_| {
            Box::new(SdfPullbackProvider::tip_only(&arm, &scene))
        })
        .unwrap();
        let s = summarize_trajectories(&rows);
        assert_eq!(s[0].trials, 5);
        assert_eq!(s[0].successes, rows.iter().filter(|r| r.success).count());
    }
}
