use crate::artifacts::{csv_writer, finish_csv, num, svg_comment};
use crate::config::RunConfig;
use crate::plot::field_svg;
use crate::providers::{load_model, needs_model, EmpiricalProvider};
use crate::Outcome;
use anyhow::Result;
use qflow::field::{BaselineProvider, FieldAnswer, FieldProvider, OracleProvider, Provenance, SdfPullbackProvider};
use qflow::geometry::{Configuration, RobotModel, Scene};
use qflow::neural::{FlowModel, LearnedDirectProvider, LearnedMcProvider};
use qflow::oracle::{build_collision_grid, CollisionGrid};
use std::path::Path;

/// One row of `field_metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMetrics {
    pub scene: String,
    pub provider: Provenance,
    pub queries: usize,
    pub failures: usize,
    pub distance_mae: f64,
    pub distance_max_err: f64,
    /// Queries whose oracle gradient norm exceeds the threshold.
    pub direction_queries: usize,
    pub cos_median: f64,
    pub cos_mean: f64,
    pub cos_above_0_9: f64,
    pub eikonal_residual_mean: f64,
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "scene",
    "provider",
    "queries",
    "failures",
    "distance_mae",
    "distance_max_err",
    "direction_queries",
    "cos_median",
    "cos_mean",
    "cos_above_0_9",
    "eikonal_residual_mean",
];

/// Cell centers of an `n`-per-axis grid over the joint box, first joint
/// slowest. Offset from the oracle grid's centers unless `n` divides its
/// resolution.
pub fn query_grid(robot: &RobotModel, n: usize) -> Vec<Configuration> {
    let lim = robot.joint_limits();
    let total = n.pow(lim.len() as u32);
    (0..total)
        .map(|mut flat| {
            let mut q = vec![0.0; lim.len()];
            for k in (0..lim.len()).rev() {
                let i = flat % n;
                flat /= n;
                let (lo, hi) = lim[k];
                q[k] = lo + (i as f64 + 0.5) / n as f64 * (hi - lo);
            }
            q
        })
        .collect()
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let robot = cfg.robot()?;
    let scenes = cfg.scenes(&robot)?;
    let e = &cfg.eval;
    let model = if needs_model(&e.providers) {
        Some(load_model(e.checkpoint.as_deref(), &cfg.train.checkpoint, out)?)
    } else {
        None
    };
    let queries = query_grid(&robot, e.grid);
    let mut files = Vec::new();
    let mut messages = Vec::new();
    let plots = e.plots && robot.dof() == 2;
    if e.plots && !plots {
        messages.push(format!("plots skipped: robot has {} joints, plots need 2", robot.dof()));
    }

    let metrics_path = out.join("field_metrics.csv");
    let queries_path = out.join("field_queries.csv");
    let mut mw = csv_writer(&metrics_path, "eval-field", cfg)?;
    mw.write_record(METRIC_COLUMNS)?;
    let mut qw = csv_writer(&queries_path, "eval-field", cfg)?;
    let dof = robot.dof();
    let mut qheader = vec!["scene".to_string(), "provider".to_string()];
    qheader.extend((0..dof).map(|k| format!("q{k}")));
    qheader.push("distance".into());
    qheader.extend((0..dof).map(|k| format!("g{k}")));
    qheader.push("oracle_distance".into());
    qheader.extend((0..dof).map(|k| format!("oracle_g{k}")));
    qw.write_record(&qheader)?;

    for scene in &scenes {
        if scene.obstacles.is_empty() {
            messages.push(format!("scene {}: no obstacles, field undefined; skipped", scene.id));
            continue;
        }
        let grid = build_collision_grid(&robot, scene, &e.oracle_resolution)?;
        let reference = answers(&mut OracleProvider::new(&grid), &queries);
        for &p in &e.providers {
            let got = evaluate(p, cfg, &robot, scene, &grid, model.as_ref(), &queries);
            let m = metrics(&scene.id, p, &reference, &got, e.min_oracle_gradient);
            mw.write_record([
                m.scene.clone(),
                p.as_str().to_string(),
                m.queries.to_string(),
                m.failures.to_string(),
                num(m.distance_mae),
                num(m.distance_max_err),
                m.direction_queries.to_string(),
                num(m.cos_median),
                num(m.cos_mean),
                num(m.cos_above_0_9),
                num(m.eikonal_residual_mean),
            ])?;
            for ((q, a), r) in queries.iter().zip(&got).zip(&reference) {
                let mut row = vec![scene.id.clone(), p.as_str().to_string()];
                row.extend(q.iter().map(|v| num(*v)));
                push_answer(&mut row, a.as_ref(), dof);
                push_answer(&mut row, r.as_ref(), dof);
                qw.write_record(&row)?;
            }
            messages.push(format!(
                "{} {}: mae {:.4} cos median {:.4} eik {:.4}",
                scene.id, p, m.distance_mae, m.cos_median, m.eikonal_residual_mean
            ));
            if plots {
                let path = out.join(format!("field_{}_{}.svg", file_safe(&scene.id), p.as_str()));
                let title = format!("{} / {}", scene.id, p.as_str());
                let svg = field_svg(
                    &svg_comment("eval-field", cfg),
                    &title,
                    &grid,
                    &queries,
                    &got,
                    e.grid,
                    e.plot_grid,
                );
                std::fs::write(&path, svg)?;
                files.push(path);
            }
        }
    }
    finish_csv(mw)?;
    finish_csv(qw)?;
    files.insert(0, queries_path);
    files.insert(0, metrics_path);
    Ok(Outcome {
        files,
        passed: true,
        messages,
    })
}

fn push_answer(row: &mut Vec<String>, a: Option<&FieldAnswer>, dof: usize) {
    match a {
        Some(a) => {
            row.push(num(a.distance));
            match &a.gradient {
                Some(g) => row.extend(g.iter().map(|v| num(*v))),
                None => row.extend((0..dof).map(|_| String::new())),
            }
        }
        None => row.extend((0..=dof).map(|_| String::new())),
    }
}

pub(crate) fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn answers(p: &mut dyn FieldProvider, qs: &[Configuration]) -> Vec<Option<FieldAnswer>> {
    p.query_batch(qs).into_iter().map(Result::ok).collect()
}

fn evaluate(
    p: Provenance,
    cfg: &RunConfig,
    robot: &RobotModel,
    scene: &Scene,
    grid: &CollisionGrid,
    model: Option<&FlowModel>,
    qs: &[Configuration],
) -> Vec<Option<FieldAnswer>> {
    match p {
        Provenance::Oracle => answers(&mut OracleProvider::new(grid), qs),
        Provenance::BaselineCdf => answers(
            &mut BaselineProvider {
                boundary_samples: grid.boundary_points(),
            },
            qs,
        ),
        Provenance::SdfPullback => answers(&mut SdfPullbackProvider::tip_only(robot, scene), qs),
        Provenance::Empirical => answers(&mut EmpiricalProvider::new(robot, scene, cfg.sampler.clone()), qs),
        Provenance::LearnedDirect => {
            let model = model.expect("checked by needs_model");
            answers(&mut LearnedDirectProvider { model, scene }, qs)
        }
        Provenance::LearnedMc => {
            let model = model.expect("checked by needs_model");
            answers(&mut LearnedMcProvider::new(model, scene, cfg.eval.mc_samples, cfg.seed), qs)
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Missing answers count as failures and are left out of the distance
/// error; a missing gradient counts as cosine 0 and norm 0.
pub fn metrics(
    scene: &str,
    provider: Provenance,
    reference: &[Option<FieldAnswer>],
    got: &[Option<FieldAnswer>],
    min_oracle_gradient: f64,
) -> FieldMetrics {
    let mut failures = 0;
    let (mut err_sum, mut err_max, mut n_err) = (0.0, 0.0_f64, 0);
    let mut cos = Vec::new();
    let mut eik = Vec::new();
    for (r, g) in reference.iter().zip(got) {
        let Some(g) = g else {
            failures += 1;
            continue;
        };
        let Some(r) = r else { continue };
        let e = (g.distance - r.distance).abs();
        err_sum += e;
        err_max = err_max.max(e);
        n_err += 1;
        let Some(rg) = &r.gradient else { continue };
        if r.gradient_norm().unwrap_or(0.0) <= min_oracle_gradient {
            continue;
        }
        match &g.gradient {
            Some(gg) => {
                cos.push(cosine(gg, rg));
                eik.push((g.gradient_norm().unwrap_or(0.0) - 1.0).abs());
            }
            None => {
                cos.push(0.0);
                eik.push(1.0);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    FieldMetrics {
        scene: scene.to_string(),
        provider,
        queries: reference.len(),
        failures,
        distance_mae: if n_err == 0 { f64::NAN } else { err_sum / n_err as f64 },
        distance_max_err: err_max,
        direction_queries: cos.len(),
        cos_median: median(&cos),
        cos_mean: mean(&cos),
        cos_above_0_9: if cos.is_empty() {
            f64::NAN
        } else {
            cos.iter().filter(|&&c| c > 0.9).count() as f64 / cos.len() as f64
        },
        eikonal_residual_mean: mean(&eik),
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(d: f64, g: Option<Vec<f64>>) -> Option<FieldAnswer> {
        Some(FieldAnswer {
            distance: d,
            gradient: g,
            provenance: Provenance::Oracle,
        })
    }

    #[test]
    fn metrics_of_identical_answers_are_exact() {
        let r = vec![ans(0.5, Some(vec![1.0, 0.0])), ans(0.0, None), ans(1.0, Some(vec![0.0, 0.3]))];
        let m = metrics("s", Provenance::Oracle, &r, &r, 0.5);
        assert_eq!(m.distance_mae, 0.0);
        assert_eq!(m.failures, 0);
        // The 0.3-norm gradient is below the threshold.
        assert_eq!(m.direction_queries, 1);
        assert_eq!(m.cos_median, 1.0);
        assert_eq!(m.eikonal_residual_mean, 0.0);
    }

    #[test]
    fn missing_gradients_count_against_the_provider() {
        let r = vec![ans(0.5, Some(vec![1.0, 0.0])), ans(0.7, Some(vec![0.0, 1.0]))];
        let g = vec![ans(0.6, None), None];
        let m = metrics("s", Provenance::LearnedMc, &r, &g, 0.5);
        assert_eq!(m.failures, 1);
        assert!((m.distance_mae - 0.1).abs() < 1e-12);
        assert_eq!((m.direction_queries, m.cos_median, m.eikonal_residual_mean), (1, 0.0, 1.0));
    }

    #[test]
    fn query_grid_is_row_major_cell_centers() {
        let r = qflow::fixtures::fixture_arm();
        let q = query_grid(&r, 3);
        assert_eq!(q.len(), 9);
        let (lo, hi) = r.joint_limits()[1];
        assert!((q[1][1] - (lo + 1.5 / 3.0 * (hi - lo))).abs() < 1e-12);
        assert_eq!(q[1][0], q[0][0]);
        assert_eq!(median(&[3.0, 1.0, 2.0, 4.0]), 2.5);
    }
}
