use crate::config::commented;
use crate::config::RunConfig;
use crate::Outcome;
use anyhow::{anyhow, bail, Context, Result};
use qflow::neural::{Checkpoint, CHECKPOINT_MAGIC};
use qflow::oracle::{CollisionGrid, GRID_MAGIC};
use qflow::sampling::{Dataset, DATASET_MAGIC};
use std::io::Write;
use std::path::Path;

/// Text dump of a binary artifact, chosen by its magic bytes. The dump
/// repeats the provenance stored in the input where the format has one.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let input = cfg
        .export
        .input
        .as_ref()
        .map(|p| crate::in_out(out, p))
        .ok_or_else(|| anyhow!("nothing to export: pass a file or set export.input"))?;
    crate::require_file(&input, "export input")?;
    let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
    let magic = bytes.get(..8).ok_or_else(|| anyhow!("{} is too short", input.display()))?;
    let default_ext = if magic == DATASET_MAGIC || magic == CHECKPOINT_MAGIC { "tsv" } else { "csv" };
    let output = match &cfg.export.output {
        Some(p) => crate::in_out(out, p),
        None => out.join(
            Path::new(input.file_name().unwrap_or_default()).with_extension(default_ext),
        ),
    };
    let mut w = crate::artifacts::create(&output)?;
    if magic == DATASET_MAGIC {
        let d = Dataset::from_bytes(&bytes)?;
        w.write_all(commented(&d.provenance, "# ").as_bytes())?;
        d.export_tsv(&mut w)?;
    } else if magic == CHECKPOINT_MAGIC {
        checkpoint_tsv(&Checkpoint::from_bytes(&bytes)?, &mut w)?;
    } else if magic == GRID_MAGIC {
        grid_csv(&CollisionGrid::read_from(bytes.as_slice())?, &mut w)?;
    } else {
        bail!("{} is not a dataset, checkpoint or grid", input.display());
    }
    w.flush()?;
    Ok(Outcome {
        files: vec![output],
        passed: true,
        messages: Vec::new(),
    })
}

fn checkpoint_tsv(c: &Checkpoint, w: &mut impl Write) -> Result<()> {
    w.write_all(commented(&c.provenance, "# ").as_bytes())?;
    writeln!(w, "# step {}", c.step)?;
    w.write_all(commented(&format!("[arch]\n{}", toml::to_string(&c.arch)?), "# ").as_bytes())?;
    w.write_all(commented(&format!("[training]\n{}", toml::to_string(&c.training)?), "# ").as_bytes())?;
    writeln!(w, "param\trow\tcol\tvalue")?;
    for (k, m) in c.params.iter().enumerate() {
        for r in 0..m.rows() {
            for (col, v) in m.row(r).iter().enumerate() {
                writeln!(w, "{k}\t{r}\t{col}\t{v}")?;
            }
        }
    }
    Ok(())
}

fn grid_csv(g: &CollisionGrid, w: &mut impl Write) -> Result<()> {
    let res: Vec<String> = g.resolution().iter().map(|n| n.to_string()).collect();
    writeln!(w, "# resolution {}", res.join("x"))?;
    let mut cols: Vec<String> = (0..g.dof()).map(|k| format!("q{k}")).collect();
    cols.push("colliding".into());
    writeln!(w, "{}", cols.join(","))?;
    for (i, &f) in g.flags().iter().enumerate() {
        let c: Vec<String> = g.cell_center(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{}", c.join(","), u8::from(f))?;
    }
    Ok(())
}
