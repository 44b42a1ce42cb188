use crate::artifacts::{csv_writer, finish_csv, num, svg_comment};
use crate::config::RunConfig;
use crate::eval::{file_safe, query_grid};
use crate::plot::field_svg;
use crate::Outcome;
use anyhow::Result;
use qflow::field::{FieldProvider, OracleProvider};
use qflow::oracle::build_collision_grid;
use std::path::Path;

/// One grid file per scene. The binary format has no room for provenance,
/// so `oracle_summary.csv` carries it for the whole run.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let robot = cfg.robot()?;
    let scenes = cfg.scenes(&robot)?;
    let plots = cfg.oracle.plots && robot.dof() == 2;
    let mut files = Vec::new();
    let mut messages = Vec::new();
    if cfg.oracle.plots && !plots {
        messages.push(format!("plots skipped: robot has {} joints, plots need 2", robot.dof()));
    }
    let summary_path = out.join("oracle_summary.csv");
    let mut w = csv_writer(&summary_path, "oracle-build", cfg)?;
    w.write_record([
        "scene",
        "file",
        "resolution",
        "cells",
        "colliding_fraction",
        "boundary_cells",
        "cell_diagonal",
    ])?;
    for scene in &scenes {
        let grid = build_collision_grid(&robot, scene, &cfg.oracle.resolution)?;
        let name = format!("oracle_{}.grd", file_safe(&scene.id));
        let path = out.join(&name);
        let mut f = crate::artifacts::create(&path)?;
        grid.write_to(&mut f)?;
        std::io::Write::flush(&mut f)?;
        files.push(path);
        let res: Vec<String> = grid.resolution().iter().map(|n| n.to_string()).collect();
        w.write_record([
            scene.id.clone(),
            name,
            res.join("x"),
            grid.len().to_string(),
            num(grid.colliding_fraction()),
            grid.boundary_points().len().to_string(),
            num(grid.cell_diagonal()),
        ])?;
        messages.push(format!(
            "{}: {:.2}% colliding",
            scene.id,
            100.0 * grid.colliding_fraction()
        ));
        if plots {
            let qs = query_grid(&robot, cfg.eval.grid);
            let answers: Vec<_> = OracleProvider::new(&grid)
                .query_batch(&qs)
                .into_iter()
                .map(Result::ok)
                .collect();
            let path = out.join(format!("oracle_{}.svg", file_safe(&scene.id)));
            let title = format!("{} / oracle", scene.id);
            let svg = field_svg(
                &svg_comment("oracle-build", cfg),
                &title,
                &grid,
                &qs,
                &answers,
                cfg.eval.grid,
                cfg.eval.plot_grid,
            );
            std::fs::write(&path, svg)?;
            files.push(path);
        }
    }
    finish_csv(w)?;
    files.insert(0, summary_path);
    Ok(Outcome {
        files,
        passed: true,
        messages,
    })
}
