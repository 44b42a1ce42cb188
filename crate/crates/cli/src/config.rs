//! Run configuration: one TOML document shared by every subcommand, with
//! dotted `--set key=value` overrides applied on top.

use anyhow::{anyhow, bail, Context, Result};
use qflow::field::Provenance;
use qflow::fixtures;
use qflow::geometry::{RobotModel, Scene};
use qflow::neural::{Arch, TrainingConfig};
use qflow::planner::{projection_trials, BankConfig, ProjectionConfig, TrajectoryConfig};
use qflow::sampling::SamplerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use toml::{Table, Value};

/// Output directory when neither `--out` nor the config names one.
pub const OUT_DIR_ENV: &str = "QFLOW_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "qflow-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RobotSpec {
    /// `fixture`, `symmetric`, or a path to a TOML robot file.
    Named(String),
    Inline(RobotModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSpec {
    /// `fixture`, `symmetric`, `narrow-gap`, `empty`, or a path to a TOML
    /// scene file.
    Named(String),
    Inline(Scene),
}

/// Single-button scenes drawn like the projection benchmark targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ButtonFamily {
    pub count: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ButtonFamily {
    fn default() -> Self {
        Self {
            count: 64,
            radius: 0.025,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub queries_per_scene: usize,
    pub output: PathBuf,
    /// Compare targets against a brute-force grid in the report.
    pub oracle_check: bool,
    pub oracle_resolution: Vec<usize>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            queries_per_scene: 2000,
            output: "dataset.qfd".into(),
            oracle_check: false,
            oracle_resolution: vec![256, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset.qfd".into(),
            checkpoint: "model.ckp".into(),
            history: "loss_history.csv".into(),
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub providers: Vec<Provenance>,
    /// Held-out query grid, points per axis.
    pub grid: usize,
    pub oracle_resolution: Vec<usize>,
    pub mc_samples: usize,
    /// Queries with a smaller oracle gradient norm are left out of the
    /// direction statistics.
    pub min_oracle_gradient: f64,
    pub plots: bool,
    /// Quiver arrows per axis.
    pub plot_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            providers: vec![Provenance::Oracle, Provenance::BaselineCdf, Provenance::SdfPullback],
            grid: 30,
            oracle_resolution: vec![256, 256],
            mc_samples: 256,
            min_oracle_gradient: 0.5,
            plots: true,
            plot_grid: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Projection,
    Trajectory,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Projection => "projection",
            Suite::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub suite: Suite,
    pub providers: Vec<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub trials: usize,
    /// Seeds the instance set; independent of the top-level seed so one
    /// instance set can be run under several training seeds.
    pub trial_seed: u64,
    pub button_radius: f64,
    pub mc_samples: usize,
    /// Required success-rate separation between neighbouring providers.
    pub gap_pp: usize,
    /// Exit non-zero when an ordering check fails.
    pub assert_ordering: bool,
    pub bank: BankConfig,
    pub projection: ProjectionConfig,
    pub trajectory: TrajectoryConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suite: Suite::Projection,
            providers: vec![Provenance::BaselineCdf, Provenance::SdfPullback],
            checkpoint: None,
            trials: 210,
            trial_seed: 0,
            button_radius: 0.025,
            mc_samples: 64,
            gap_pp: 10,
            assert_ordering: false,
            bank: BankConfig::default(),
            projection: ProjectionConfig::default(),
            trajectory: TrajectoryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub resolution: Vec<usize>,
    pub plots: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            resolution: vec![256, 256],
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Defaults to the input name with a text extension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Everything a command may read. Paths under the command sections are
/// relative to the output directory; robot and scene files are relative to
/// the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every component seed before a command runs.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub robot: RobotSpec,
    pub scenes: Vec<SceneSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buttons: Option<ButtonFamily>,
    pub sampler: SamplerConfig,
    pub gen_data: GenDataConfig,
    pub arch: Arch,
    pub training: TrainingConfig,
    pub train: TrainCmdConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub oracle: OracleConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            robot: RobotSpec::Named("fixture".into()),
            scenes: vec![SceneSpec::Named("fixture".into())],
            buttons: None,
            sampler: SamplerConfig::default(),
            gen_data: GenDataConfig::default(),
            arch: Arch::default(),
            training: TrainingConfig::default(),
            train: TrainCmdConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            oracle: OracleConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then the overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table.clone()).try_into().context("invalid configuration")?;
        let canonical = Value::try_from(&cfg)?;
        let mut unknown = Vec::new();
        unknown_keys(&Value::Table(table), &canonical, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }
        Ok(cfg.with_seed_applied())
    }

    fn with_seed_applied(mut self) -> Self {
        self.sampler.rng_seed = self.seed;
        self.training.seed = self.seed;
        self.bench.bank.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// `--out`, then the config, then the environment, then `qflow-out`.
    pub fn resolve_out_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| DEFAULT_OUT_DIR.into())
    }

    pub fn robot(&self) -> Result<RobotModel> {
        match &self.robot {
            RobotSpec::Inline(m) => Ok(m.clone()),
            RobotSpec::Named(n) => match n.as_str() {
                "fixture" => Ok(fixtures::fixture_arm()),
                "symmetric" => Ok(fixtures::symmetric_arm()),
                path => read_toml(Path::new(path)).with_context(|| format!("robot `{path}`")),
            },
        }
    }

    /// Listed scenes followed by the button family, if any.
    pub fn scenes(&self, robot: &RobotModel) -> Result<Vec<Scene>> {
        let mut out = Vec::new();
        for s in &self.scenes {
            out.push(match s {
                SceneSpec::Inline(s) => s.clone(),
                SceneSpec::Named(n) => match n.as_str() {
                    "fixture" => fixtures::fixture_scene(),
                    "symmetric" => fixtures::symmetric_scene(),
                    "narrow-gap" => fixtures::narrow_gap_scene(),
                    "empty" => Scene::empty("empty"),
                    path => read_toml(Path::new(path)).with_context(|| format!("scene `{path}`"))?,
                },
            });
        }
        if let Some(b) = &self.buttons {
            out.extend(projection_trials(robot, b.count, b.radius, b.seed).into_iter().map(|t| t.target));
        }
        Ok(out)
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

/// `a.b.c=value`. The value is parsed as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn unknown_keys(user: &Value, canonical: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Table(u), Value::Table(c)) = (user, canonical) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match c.get(k) {
            Some(cv) => unknown_keys(v, cv, &path, out),
            // Optional sections are absent from the canonical form when unset.
            None if v.is_table() && v.as_table().is_some_and(|t| t.is_empty()) => {}
            None => out.push(path),
        }
    }
}

/// Version, command and the resolved configuration, as comment lines
/// starting with `prefix`.
pub fn provenance_text(command: &str, cfg: &RunConfig) -> String {
    let mut s = format!("qflow {}\ncommand = {command}\nseed = {}\n", env!("CARGO_PKG_VERSION"), cfg.seed);
    s.push_str("[config]\n");
    s.push_str(&cfg.to_toml());
    s
}

pub fn commented(text: &str, prefix: &str) -> String {
    text.lines()
        .map(|l| if l.is_empty() { prefix.trim_end().to_string() } else { format!("{prefix}{l}") })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_strings() {
        let mut t = Table::new();
        apply_override(&mut t, "bench.trials=30").unwrap();
        apply_override(&mut t, "bench.suite=trajectory").unwrap();
        apply_override(&mut t, "eval.providers=[\"oracle\"]").unwrap();
        apply_override(&mut t, "seed=7").unwrap();
        let c = RunConfig::from_table(t).unwrap();
        assert_eq!(c.bench.trials, 30);
        assert_eq!(c.bench.suite, Suite::Trajectory);
        assert_eq!(c.eval.providers, vec![Provenance::Oracle]);
        assert_eq!((c.seed, c.training.seed, c.sampler.rng_seed), (7, 7, 7));
    }

    #[test]
    fn typos_are_rejected() {
        let mut t = Table::new();
        apply_override(&mut t, "training.stpes=10").unwrap();
        let e = RunConfig::from_table(t).unwrap_err().to_string();
        assert!(e.contains("training.stpes"), "{e}");
        assert!(apply_override(&mut Table::new(), "no_equals").is_err());
    }

    #[test]
    fn canonical_form_round_trips() {
        let mut c = RunConfig::default();
        c.buttons = Some(ButtonFamily::default());
        c.scenes.push(SceneSpec::Inline(fixtures::narrow_gap_scene()));
        let back = RunConfig::from_table(c.to_toml().parse().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn named_fixtures_resolve() {
        let mut c = RunConfig::default();
        c.robot = RobotSpec::Named("symmetric".into());
        c.scenes = vec![SceneSpec::Named("narrow-gap".into()), SceneSpec::Named("empty".into())];
        c.buttons = Some(ButtonFamily {
            count: 3,
            ..ButtonFamily::default()
        });
        let r = c.robot().unwrap();
        let s = c.scenes(&r).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], fixtures::narrow_gap_scene());
        assert!(s[1].obstacles.is_empty());
        c.scenes = vec![SceneSpec::Named("/nonexistent/scene.toml".into())];
        assert!(c.scenes(&r).is_err());
    }
}
