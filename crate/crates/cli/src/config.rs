//! Experiment configuration: one JSON document, overridden by `--set dotted.key=value` flags,
//! rejected on unknown keys, and validated before any command starts work.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use causaldpo::causal::{AmplificationConfig, ScmSpec};
use causaldpo::evalrec::SplitSpec;
use causaldpo::recsim::RecSimConfig;
use causaldpo::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "CAUSALDPO_OUTPUT_ROOT";

/// Partition names, in the order they are written.
pub const PARTITIONS: [&str; 4] = ["train", "valid", "iid_test", "ood_test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Users, items and exposure bias from the recommendation simulator.
    #[default]
    Recsim,
    /// Ancestral samples of a tabular SCM: `x` is the user, `y` the item.
    Scm,
}

/// A tabular SCM given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScmRef {
    File { file: PathBuf },
    Inline(ScmSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub recsim: RecSimConfig,
    pub scm: Option<ScmRef>,
    /// Samples drawn from the SCM source.
    pub n_samples: usize,
    /// Counterfactual records per user for the exposure shift (recsim source).
    pub exposure_per_user: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Recsim,
            recsim: RecSimConfig::default(),
            scm: None,
            n_samples: 10_000,
            exposure_per_user: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub partition: String,
    /// Policy or checkpoint to evaluate; defaults to each sweep seed's trained policy.
    pub policy: Option<PathBuf>,
    pub groups: usize,
    pub time_buckets: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            partition: "ood_test".into(),
            policy: None,
            groups: 5,
            time_buckets: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackdoorOptions {
    /// Samples used to estimate the tables; 0 skips the estimated-table comparison.
    pub samples: usize,
}

impl Default for BackdoorOptions {
    fn default() -> Self {
        Self { samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Dataset directory read by `train` and `eval`; defaults to `<output_dir>/data`.
    pub data_dir: Option<PathBuf>,
    /// Root seed. Sub-sections take their seed from here.
    pub seed: u64,
    /// Sweep points for `train` and `eval`; defaults to `[seed]`.
    pub seeds: Option<Vec<u64>>,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub prop1: AmplificationConfig,
    pub backdoor: BackdoorOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            data_dir: None,
            seed: 0,
            seeds: None,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            prop1: AmplificationConfig::default(),
            backdoor: BackdoorOptions::default(),
        }
    }
}

/// Seeds belong to the root; a sub-section seed would silently fork the streams.
const SECTION_SEEDS: [&str; 3] = ["data.recsim.seed", "train.seed", "prop1.seed"];

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// Set `dotted` in `doc`, creating intermediate objects. The value is parsed as JSON when it
/// can be, and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| failure::config(format!("override `{assignment}` is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(failure::config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(failure::config(format!("override `{key}`: `{}` is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

impl ExperimentConfig {
    /// Parse `path` (or the defaults), apply overrides, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| failure::config(format!("parsing config {}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !doc.is_object() {
            return Err(failure::config("config must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        for key in SECTION_SEEDS {
            if lookup(&doc, key).is_some() {
                return Err(failure::config(format!("`{key}` is not configurable; set the root `seed`")));
            }
        }
        let mut cfg: Self = serde_json::from_value(doc).map_err(|e| failure::config(format!("config: {e}")))?;
        cfg.data.recsim.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.prop1.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.recsim.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        self.prop1.validate()?;
        if let Some(ScmRef::Inline(s)) = &self.data.scm {
            s.validate()?;
        }
        if self.data.source == Source::Scm && self.data.scm.is_none() {
            return Err(failure::config("data.source is \"scm\" but data.scm is not set"));
        }
        if self.data.exposure_per_user < 1 {
            return Err(failure::config("data.exposure_per_user must be >= 1"));
        }
        if !PARTITIONS.contains(&self.eval.partition.as_str()) {
            return Err(failure::config(format!(
                "eval.partition must be one of {PARTITIONS:?}, got {:?}",
                self.eval.partition
            )));
        }
        if self.eval.groups < 1 || self.eval.time_buckets < 1 {
            return Err(failure::config("eval.groups and eval.time_buckets must be >= 1"));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(failure::config("seeds must not be empty"));
            }
            let mut sorted = seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return Err(failure::config("seeds must be distinct"));
            }
        }
        Ok(())
    }

    /// Output directory, placed under `$CAUSALDPO_OUTPUT_ROOT` when that is set and the
    /// configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.output_dir().join("data"))
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    /// Training settings for one sweep point.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// The configured SCM, reading it from disk when referenced by path.
    pub fn scm(&self) -> anyhow::Result<ScmSpec> {
        let spec = match &self.data.scm {
            None => return Err(failure::config("data.scm is not set")),
            Some(ScmRef::Inline(s)) => s.clone(),
            Some(ScmRef::File { file }) => {
                let text = fs::read_to_string(file).with_context(|| format!("reading SCM {}", file.display()))?;
                serde_json::from_str(&text).map_err(|e| failure::config(format!("parsing SCM {}: {e}", file.display())))?
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}
