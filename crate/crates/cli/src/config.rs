//! Run configuration: defaults, TOML file, environment and overrides.
//!
//! Precedence from lowest to highest: built-in defaults, the config file,
//! the output-root environment variable, `key=value` overrides, then the
//! ablation flags.

use std::path::{Path, PathBuf};

use fnoflow::constraints::ConstraintSchedule;
use fnoflow::datasets::{DatasetSpec, SplitMode};
use fnoflow::discovery::{GpConfig, PatternConfig, SearchConfig};
use fnoflow::guidance::GuidanceConfig;
use fnoflow::metrics::{EvalOptions, VIOLATION_THRESHOLD};
use fnoflow::model::ModelConfig;
use fnoflow::sampler::{IntegratorConfig, Method};
use fnoflow::trainer::{AdamConfig, TrainConfig};
use fnoflow::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Overrides the configured output directory when set.
pub const OUTPUT_ROOT_ENV: &str = "FNOFLOW_OUTPUT_ROOT";
pub const RESOLVED_FILE: &str = "resolved.toml";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSection {
    pub method: Method,
    pub steps: usize,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        let i = IntegratorConfig::default();
        Self {
            method: i.method,
            steps: i.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Number of test conditions to sample; 0 means all.
    pub n: usize,
    pub batch_size: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 0, batch_size: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub violation_threshold: f64,
    pub long_fraction: f64,
    pub mmd: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            violation_threshold: VIOLATION_THRESHOLD,
            long_fraction: 0.5,
            mmd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub starts: usize,
    /// Scale of the Gaussian offset between the two starts of each pair.
    pub start_offset: f64,
    pub lipschitz_probes: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            starts: 100,
            start_offset: 1e-3,
            lipschitz_probes: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverySection {
    /// State column whose residual is analysed.
    pub channel: usize,
    /// Test trajectories used; 0 means all.
    pub n_trajectories: usize,
    pub alpha_sig: f64,
    pub permutations: usize,
    pub lambda: Option<f64>,
    pub max_terms: usize,
    pub subset_budget: usize,
    pub beam: usize,
    pub top_k: usize,
    pub gp: GpConfig,
}

impl Default for DiscoverySection {
    fn default() -> Self {
        let s = SearchConfig::default();
        let p = PatternConfig::default();
        Self {
            channel: 0,
            n_trajectories: 40,
            alpha_sig: p.alpha_sig,
            permutations: p.permutations,
            lambda: s.lambda,
            max_terms: s.max_terms,
            subset_budget: s.subset_budget,
            beam: s.beam,
            top_k: s.top_k,
            gp: s.gp,
        }
    }
}

/// Input locations; empty means the default place under `output_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub samples: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for splitting, training, sampling and discovery. Dataset
    /// generation has its own seed so runs can share data.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    /// Threads used for independent sampling batches.
    pub workers: usize,
    pub dataset: DatasetSpec,
    pub split: SplitMode,
    pub model: ModelConfig,
    pub schedule: ConstraintSchedule,
    pub guidance: GuidanceConfig,
    pub train: TrainSection,
    pub integrator: IntegratorSection,
    pub sample: SampleSection,
    pub metrics: MetricsSection,
    pub verify: VerifySection,
    pub discovery: DiscoverySection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            precision: Precision::default(),
            workers: 1,
            dataset: DatasetSpec::default(),
            split: SplitMode::default(),
            model: ModelConfig::default(),
            schedule: ConstraintSchedule::default(),
            guidance: GuidanceConfig::default(),
            train: TrainSection::default(),
            integrator: IntegratorSection::default(),
            sample: SampleSection::default(),
            metrics: MetricsSection::default(),
            verify: VerifySection::default(),
            discovery: DiscoverySection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Ablation switches applied after every other source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ablation {
    pub no_guidance: bool,
    pub flat_schedule: bool,
    /// 1-based constraint levels whose base weight is zeroed.
    pub zero_lambda: Vec<usize>,
    /// No constraints, no consistency term and no guidance.
    pub baseline: bool,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: self.train.adam,
            clip_norm: self.train.clip_norm,
            seed: self.seed,
            schedule: self.schedule,
            guidance: self.guidance,
            model: self.model.clone(),
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            method: self.integrator.method,
            steps: self.integrator.steps,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.metrics.violation_threshold,
            long_fraction: self.metrics.long_fraction,
            with_mmd: self.metrics.mmd,
        }
    }

    pub fn pattern_config(&self) -> PatternConfig {
        PatternConfig {
            alpha_sig: self.discovery.alpha_sig,
            permutations: self.discovery.permutations,
            seed: self.seed,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let d = &self.discovery;
        SearchConfig {
            lambda: d.lambda,
            max_terms: d.max_terms,
            subset_budget: d.subset_budget,
            beam: d.beam,
            top_k: d.top_k,
            gp: d.gp,
            seed: self.seed,
        }
    }

    fn under(&self, p: &Path, default: &str) -> PathBuf {
        if p.as_os_str().is_empty() {
            self.output_dir.join(default)
        } else {
            p.to_path_buf()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.under(&self.paths.data, "data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.under(&self.paths.checkpoint, "train/model.ckpt")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.under(&self.paths.samples, "samples")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.integrator().validate()?;
        if !(self.metrics.violation_threshold > 0.0) {
            return Err(Error::Config("metrics.violation_threshold must be positive".into()));
        }
        if !(self.metrics.long_fraction > 0.0 && self.metrics.long_fraction <= 1.0) {
            return Err(Error::Config("metrics.long_fraction must lie in (0, 1]".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.sample.batch_size == 0 {
            return Err(Error::Config("sample.batch_size must be positive".into()));
        }
        if self.verify.starts == 0 || self.verify.lipschitz_probes < 2 {
            return Err(Error::Config("verify needs starts >= 1 and lipschitz_probes >= 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize resolved config: {e}")))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets a dotted `key=value` override in `table`, creating sections on the way.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn typed<T: DeserializeOwned>(value: toml::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = match (prefix.is_empty(), path.as_str()) {
            (true, p) => p.to_string(),
            (false, ".") => prefix.to_string(),
            (false, p) => format!("{prefix}.{p}"),
        };
        Error::Config(format!("key `{key}`: {}", e.into_inner().message()))
    })
}

fn take_tag(section: &mut toml::Table, name: &str, tag: &str, default: &str) -> Result<String> {
    match section.remove(tag) {
        None => Ok(default.to_string()),
        Some(toml::Value::String(s)) => Ok(s),
        Some(v) => Err(Error::Config(format!("key `{name}.{tag}`: expected a string, found {}", v.type_str()))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtrapolateFields {
    column: usize,
    train_max: f64,
    test_min: f64,
}

/// Deserializes a table, naming the offending key on failure.
///
/// The tagged `dataset` and `split` sections are decoded per variant so
/// errors inside them still carry the full key path. Their tags default to
/// `oscillator` and `random`.
pub fn from_table(mut table: toml::Table) -> Result<RunConfig> {
    let section = |table: &mut toml::Table, name: &str| -> Result<Option<toml::Table>> {
        match table.remove(name) {
            None => Ok(None),
            Some(toml::Value::Table(t)) => Ok(Some(t)),
            Some(v) => Err(Error::Config(format!("key `{name}`: expected a table, found {}", v.type_str()))),
        }
    };
    let dataset = match section(&mut table, "dataset")? {
        None => None,
        Some(mut t) => {
            let kind = take_tag(&mut t, "dataset", "kind", "oscillator")?;
            let body = toml::Value::Table(t);
            Some(match kind.as_str() {
                "oscillator" => DatasetSpec::Oscillator(typed(body, "dataset")?),
                "battery" => DatasetSpec::Battery(typed(body, "dataset")?),
                other => {
                    return Err(Error::Config(format!(
                        "key `dataset.kind`: unknown variant `{other}`, expected `oscillator` or `battery`"
                    )))
                }
            })
        }
    };
    let split = match section(&mut table, "split")? {
        None => None,
        Some(mut t) => {
            let mode = take_tag(&mut t, "split", "mode", "random")?;
            Some(match mode.as_str() {
                "random" => {
                    if let Some(k) = t.keys().next() {
                        return Err(Error::Config(format!("key `split.{k}`: unknown field for mode `random`")));
                    }
                    SplitMode::Random
                }
                "extrapolate" => {
                    let f: ExtrapolateFields = typed(toml::Value::Table(t), "split")?;
                    SplitMode::Extrapolate {
                        column: f.column,
                        train_max: f.train_max,
                        test_min: f.test_min,
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "key `split.mode`: unknown variant `{other}`, expected `random` or `extrapolate`"
                    )))
                }
            })
        }
    };
    let mut cfg: RunConfig = typed(toml::Value::Table(table), "")?;
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(s) = split {
        cfg.split = s;
    }
    Ok(cfg)
}

pub fn resolve(path: Option<&Path>, overrides: &[String], ablation: &Ablation) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() {
            table.insert("output_dir".into(), toml::Value::String(root));
        }
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg = from_table(table)?;
    if ablation.baseline {
        cfg.schedule.lambda_base = [0.0; 4];
        cfg.schedule.beta_consist = 0.0;
        cfg.guidance.alpha_max = 0.0;
    }
    if ablation.no_guidance {
        cfg.guidance.alpha_max = 0.0;
    }
    if ablation.flat_schedule {
        cfg.schedule.flat = true;
    }
    for &l in &ablation.zero_lambda {
        if !(1..=4).contains(&l) {
            return Err(Error::Config(format!("--zero-lambda takes a level in 1..=4, got {l}")));
        }
        cfg.schedule.lambda_base[l - 1] = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        let cfg = resolve(Some(&p), &[], &Ablation::default()).unwrap();
        let mut want = RunConfig::default();
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            want.output_dir = root.into();
        }
        assert_eq!(cfg, want);
    }

    #[test]
    fn override_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 3\n[train]\nepochs = 4\n");
        let cfg = resolve(Some(&p), &["seed=7".into(), "guidance.alpha_max=0.25".into()], &Ablation::default()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.guidance.alpha_max, 0.25);
    }

    #[test]
    fn resolved_config_is_a_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "[dataset]\nkind = \"battery\"\nn_cells = 12\n[split]\nmode = \"extrapolate\"\ncolumn = 1\ntrain_max = 0.2\ntest_min = 0.25\n[discovery]\nlambda = 0.001\n",
        );
        let a = resolve(Some(&p), &["integrator.method=\"euler\"".into()], &Ablation::default()).unwrap();
        let q = write(dir.path(), &a.to_toml().unwrap());
        let b = resolve(Some(&q), &[], &Ablation::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[train]\nepochz = 4\n");
        let e = resolve(Some(&p), &[], &Ablation::default()).unwrap_err().to_string();
        assert!(e.contains("epochz"), "{e}");
        let e = resolve(None, &["train.epochs=\"many\"".into()], &Ablation::default()).unwrap_err().to_string();
        assert!(e.contains("train.epochs") && e.contains("expected"), "{e}");
        let e = resolve(None, &["dataset.n_trajectories=1.5".into()], &Ablation::default()).unwrap_err().to_string();
        assert!(e.contains("dataset.n_trajectories"), "{e}");
    }

    #[test]
    fn ablation_flags() {
        let a = Ablation {
            flat_schedule: true,
            zero_lambda: vec![2, 4],
            no_guidance: true,
            ..Default::default()
        };
        let cfg = resolve(None, &[], &a).unwrap();
        assert!(cfg.schedule.flat);
        assert_eq!(cfg.schedule.lambda_base, [1.0, 0.0, 0.5, 0.0]);
        assert_eq!(cfg.guidance.alpha_max, 0.0);
        let base = resolve(None, &[], &Ablation { baseline: true, ..Default::default() }).unwrap();
        assert!(!base.train_config().uses_bank());
        assert!(resolve(None, &[], &Ablation { zero_lambda: vec![5], ..Default::default() }).is_err());
    }
}
