use crate::artifacts::write_text;
use crate::config::{provenance_text, RunConfig};
use crate::{in_out, Outcome};
use anyhow::{Context, Result};
use qflow::oracle::{build_collision_grid, oracle_cdf};
use qflow::sampling::{build_dataset, Dataset};
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct Report {
    pub records: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub free_scenes: Vec<String>,
    pub scenes: Vec<SceneReport>,
    /// `[lo, hi, records]`: records with between lo and hi samples.
    pub sample_count_histogram: Vec<[usize; 3]>,
    pub y_d: Stats,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub oracle_check: Vec<OracleCheck>,
}

#[derive(Debug, Serialize)]
pub struct SceneReport {
    pub id: String,
    pub records: usize,
    pub colliding_queries: usize,
}

#[derive(Debug, Default, Serialize)]
pub struct Stats {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Stats {
    fn of(v: impl IntoIterator<Item = f64>) -> Self {
        let mut s = Stats {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            ..Stats::default()
        };
        let mut sum = 0.0;
        for x in v {
            s.count += 1;
            sum += x;
            s.min = s.min.min(x);
            s.max = s.max.max(x);
        }
        if s.count == 0 {
            return Stats::default();
        }
        s.mean = sum / s.count as f64;
        s
    }
}

/// Per-scene comparison of the distance targets with a brute-force grid.
#[derive(Debug, Serialize)]
pub struct OracleCheck {
    pub scene: String,
    pub resolution: Vec<usize>,
    pub cell_diagonal: f64,
    pub y_d_mae: f64,
    /// Fraction inside `[oracle - diag, oracle * (1 + equality_tol_rel) + diag]`.
    pub within_band: f64,
    pub oracle: Stats,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let robot = cfg.robot()?;
    let scenes = cfg.scenes(&robot)?;
    let mut dataset = build_dataset(&robot, &scenes, cfg.gen_data.queries_per_scene, &cfg.sampler)
        .context("generating dataset")?;
    dataset.provenance = provenance_text("gen-data", cfg);
    let path = in_out(out, &cfg.gen_data.output);
    let mut w = crate::artifacts::create(&path)?;
    dataset.write_to(&mut w)?;
    std::io::Write::flush(&mut w)?;

    let report = report(&dataset, cfg)?;
    let report_path = path.with_extension("report.toml");
    write_text(&report_path, "gen-data", cfg, &toml::to_string(&report)?)?;
    let mut o = Outcome::ok(vec![path, report_path]);
    o.messages.push(format!(
        "{} records, {} dropped ({:.1}%), {} free scenes",
        report.records,
        report.dropped,
        100.0 * report.drop_rate,
        report.free_scenes.len()
    ));
    Ok(o)
}

pub fn report(d: &Dataset, cfg: &RunConfig) -> Result<Report> {
    let attempted = d.records.len() + d.dropped;
    let scenes = d
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| SceneReport {
            id: s.id.clone(),
            records: d.records_for_scene(i).count(),
            colliding_queries: d.records_for_scene(i).filter(|r| r.y_d == 0.0).count(),
        })
        .collect();
    let mut bins = Vec::new();
    let (mut lo, mut hi) = (1, 1);
    let max = d.records.iter().map(|r| r.samples.len()).max().unwrap_or(0);
    while lo <= max {
        let n = d.records.iter().filter(|r| (lo..=hi).contains(&r.samples.len())).count();
        bins.push([lo, hi, n]);
        lo = hi + 1;
        hi = 2 * hi + 1;
    }
    let mut oracle_check = Vec::new();
    if cfg.gen_data.oracle_check {
        for (i, scene) in d.scenes.iter().enumerate() {
            if scene.obstacles.is_empty() {
                continue;
            }
            let grid = build_collision_grid(&d.robot, scene, &cfg.gen_data.oracle_resolution)?;
            let diag = grid.cell_diagonal();
            let rel = d.sampler.equality_tol_rel;
            let mut oracle = Vec::new();
            let (mut err, mut inside) = (0.0, 0);
            for r in d.records_for_scene(i) {
                let o = oracle_cdf(&grid, &r.q, grid.default_tolerance())?.d_min;
                err += (r.y_d - o).abs();
                if r.y_d >= o - diag && r.y_d <= o * (1.0 + rel) + diag {
                    inside += 1;
                }
                oracle.push(o);
            }
            let n = oracle.len().max(1) as f64;
            oracle_check.push(OracleCheck {
                scene: scene.id.clone(),
                resolution: grid.resolution().to_vec(),
                cell_diagonal: diag,
                y_d_mae: err / n,
                within_band: inside as f64 / n,
                oracle: Stats::of(oracle),
            });
        }
    }
    Ok(Report {
        records: d.records.len(),
        dropped: d.dropped,
        drop_rate: if attempted == 0 { 0.0 } else { d.dropped as f64 / attempted as f64 },
        free_scenes: d.free_scenes.clone(),
        scenes,
        sample_count_histogram: bins,
        y_d: Stats::of(d.records.iter().map(|r| r.y_d)),
        oracle_check,
    })
}
