//! Experiment configuration: one TOML file, every section optional, plus
//! `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corrective::{LqrWeights, RecoveryOptions};
use crate::datagen::DatasetSpec;
use crate::dynamics::{PendulumParams, SimConfig};
use crate::embedding::TsneConfig;
use crate::error::{Error, Result};
use crate::region::DEFAULT_P_T;
use crate::srl::PolicyConfig;

/// Version of the code that produced an artifact: `git describe` at build
/// time when available, the crate version otherwise.
pub const VERSION: &str = env!("SRLAB_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub p_t: f64,
    /// Kernel width of the safety assessment; `None` picks 2% of the
    /// embedded bounding-box diagonal.
    pub bandwidth: Option<f64>,
    /// Grid points per axis of the emitted region grid.
    pub grid_resolution: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            p_t: DEFAULT_P_T,
            bandwidth: None,
            grid_resolution: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Learner steps per training run.
    pub total_steps: usize,
    pub seeds: Vec<u64>,
    /// Uniform states drawn by `eval`.
    pub eval_samples: usize,
    /// Seed of the evaluation draws and of the divergence proxy split.
    pub eval_seed: u64,
    /// Samples per distribution used by `bounds`.
    pub bound_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_steps: 100_000,
            seeds: vec![0, 1, 2],
            eval_samples: 10_000,
            eval_seed: 0,
            bound_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// The real plant; its nominal counterpart drops `delta`.
    pub pendulum: PendulumParams,
    pub sim: SimConfig,
    pub lqr: LqrWeights,
    pub recovery: RecoveryOptions,
    pub dataset: DatasetSpec,
    pub tsne: TsneConfig,
    pub region: RegionConfig,
    pub policy: PolicyConfig,
    pub run: RunConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pendulum: PendulumParams::default(),
            sim: SimConfig::default(),
            lqr: LqrWeights::default(),
            recovery: RecoveryOptions::default(),
            dataset: DatasetSpec::default(),
            tsne: TsneConfig::default(),
            region: RegionConfig::default(),
            policy: PolicyConfig::default(),
            run: RunConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table).try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.pendulum.validate()?;
        self.sim.validate()?;
        self.dataset.validate()?;
        self.tsne.validate(self.dataset.k)?;
        self.policy.validate()?;
        if !(self.recovery.horizon > 0.0 && self.recovery.tolerance > 0.0) {
            return Err(Error::InvalidParameter("recovery horizon and tolerance must be positive".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidParameter("run.seeds must not be empty".into()));
        }
        if self.region.grid_resolution < 2 {
            return Err(Error::InvalidParameter("region.grid_resolution must be at least 2".into()));
        }
        Ok(())
    }

    pub fn nominal(&self) -> PendulumParams {
        self.pendulum.as_nominal()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// `a.b.c=value`; the value is parsed as a TOML value and taken as a plain
/// string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidParameter(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidParameter(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut cursor = table;
    for key in parents {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidParameter(format!("override `{path}`: `{key}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.dataset.k, 1000);
        assert_eq!(c.region.p_t, 0.8);
    }

    #[test]
    fn overrides_win_over_file() {
        let text = "[dataset]\nalpha = 0.25\n[pendulum]\ndelta = 1.1\n";
        let c = ExperimentConfig::from_toml_str(
            text,
            &["dataset.alpha=1".into(), "run.seeds=[4, 5]".into(), "output_dir=runs/a".into()],
        )
        .unwrap();
        assert_eq!(c.dataset.alpha, 1.0);
        assert_eq!(c.pendulum.delta, 1.1);
        assert_eq!(c.run.seeds, vec![4, 5]);
        assert_eq!(c.output_dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[dataset]\nkk = 3\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["dataset.alpha=2".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["dataset.alpha".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["output_dir.x=1".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::from_toml_str("", &["region.bandwidth=0.5".into()]).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(c, again);
    }
}
