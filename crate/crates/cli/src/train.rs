use crate::artifacts::{csv_writer, finish_csv, num};
use crate::config::{provenance_text, RunConfig};
use crate::{in_out, require_file, Outcome};
use anyhow::{bail, Context, Result};
use qflow::neural::{Checkpoint, FlowModel, HistoryRow, TrainError, Trainer};
use qflow::sampling::Dataset;
use std::path::{Path, PathBuf};

pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let data_path = in_out(out, &cfg.train.dataset);
    require_file(&data_path, "dataset")?;
    let dataset = Dataset::read_from(std::fs::File::open(&data_path)?)
        .with_context(|| format!("reading {}", data_path.display()))?;
    if dataset.records.is_empty() {
        bail!("dataset {} has no records", data_path.display());
    }
    let mut trainer = match &cfg.train.resume {
        Some(p) => {
            let p = in_out(out, p);
            require_file(&p, "checkpoint")?;
            let ckpt = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::resume(ckpt, Some(cfg.training.clone()))?
        }
        None => {
            if cfg.arch.dof != dataset.robot.dof() {
                bail!("arch.dof = {} but the dataset robot has {} joints", cfg.arch.dof, dataset.robot.dof());
            }
            Trainer::new(FlowModel::new(cfg.arch.clone(), cfg.training.seed)?, cfg.training.clone())?
        }
    };

    let ckpt_path = in_out(out, &cfg.train.checkpoint);
    let history_path = in_out(out, &cfg.train.history);
    let provenance = provenance_text("train", cfg);
    let mut saved = Vec::new();
    let mut save_err = None;
    let result = trainer.run(&dataset, |c| {
        let p = sibling(&ckpt_path, &format!("step{}", c.step));
        let mut c = c.clone();
        c.provenance = provenance.clone();
        match c.save(&p) {
            Ok(()) => saved.push(p),
            Err(e) => save_err = Some(e),
        }
    });
    if let Some(e) = save_err {
        return Err(e).context("writing periodic checkpoint");
    }
    match result {
        Ok(()) => {}
        Err(TrainError::NonFinite { step, source, last_good }) => {
            let p = sibling(&ckpt_path, "last_good");
            let mut c = *last_good;
            c.provenance = provenance.clone();
            c.save(&p)?;
            write_history(&history_path, cfg, &c.history)?;
            eprintln!("last good checkpoint: {}", p.display());
            bail!("training diverged at step {step}: {source}; last good checkpoint at {}", p.display());
        }
        Err(e) => return Err(e.into()),
    }
    let mut c = trainer.checkpoint();
    c.provenance = provenance;
    c.save(&ckpt_path)?;
    write_history(&history_path, cfg, trainer.history())?;
    let mut files = vec![ckpt_path, history_path];
    files.extend(saved);
    let mut o = Outcome::ok(files);
    if let Some(last) = trainer.history().last() {
        o.messages.push(format!("step {} total loss {:.6}", last.step, last.loss.total));
    }
    Ok(o)
}

/// `model.ckp` -> `model.<tag>.ckp`.
fn sibling(p: &Path, tag: &str) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = p.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckp".into());
    p.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn write_history(path: &Path, cfg: &RunConfig, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv_writer(path, "train", cfg)?;
    w.write_record(["step", "nll", "dist", "grad", "eik", "ten", "total"])?;
    for r in rows {
        let l = &r.loss;
        w.write_record([
            r.step.to_string(),
            num(l.nll),
            num(l.dist),
            num(l.grad),
            num(l.eik),
            num(l.ten),
            num(l.total),
        ])?;
    }
    finish_csv(w)
}
