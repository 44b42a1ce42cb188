//! Output files. Every text artifact starts with the provenance block as
//! comments so a row can be regenerated from its own file.

use crate::config::{commented, provenance_text, RunConfig};
use anyhow::{Context, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// CSV writer whose first lines are `# `-prefixed provenance.
pub fn csv_writer(path: &Path, command: &str, cfg: &RunConfig) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = create(path)?;
    w.write_all(commented(&provenance_text(command, cfg), "# ").as_bytes())?;
    Ok(csv::Writer::from_writer(w))
}

pub fn finish_csv(w: csv::Writer<BufWriter<File>>) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {}", e.error()))?;
    inner.flush()?;
    Ok(())
}

/// Reads a CSV written by [`csv_writer`], skipping the comment block.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn write_text(path: &Path, command: &str, cfg: &RunConfig, body: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(commented(&provenance_text(command, cfg), "# ").as_bytes())?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Provenance as an XML comment; `--` is not allowed inside one.
pub fn svg_comment(command: &str, cfg: &RunConfig) -> String {
    format!("<!--\n{}-->\n", provenance_text(command, cfg).replace("--", "- -"))
}

/// Shortest text that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}
