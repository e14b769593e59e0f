//! Experiment configuration files.
//!
//! A config is a TOML document with one table per module. Every key is
//! optional and unknown keys are rejected. Command-line overrides use the
//! same dotted names (`train.lr=80`) and are applied to the parsed document
//! before it is checked, so they follow exactly the same rules.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::metrics::config_hash;
use crate::par::Execution;
use crate::policy::TeacherConfig;
use crate::runtime::{Algo, Mode, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub algo: Algo,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "run".into(),
            output_dir: PathBuf::from("runs/run"),
            algo: Algo::Opd,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Number of past turns in the student's key; absent means full history.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = RunConfig::default();
        TrainSection {
            lr: d.lr,
            batch_size: d.batch_size,
            temperature: d.train_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySection {
    pub capacity: usize,
    pub delta_max: u64,
}

impl Default for ReplaySection {
    fn default() -> Self {
        let d = RunConfig::default();
        ReplaySection {
            capacity: d.buffer_capacity,
            delta_max: d.delta_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    pub mode: Mode,
    pub actor_count: usize,
    /// Data-parallel rollout generation in sync mode. Results do not depend
    /// on it.
    pub parallel: bool,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        RuntimeSection {
            mode: Mode::Sync,
            actor_count: RunConfig::default().actor_count,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub every: usize,
    pub episodes: usize,
    pub temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = RunConfig::default();
        EvalSection {
            every: d.eval_every,
            episodes: d.eval_episodes,
            temperature: d.eval_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub pass_m: usize,
    pub temperature: f64,
    /// Teacher trajectory file written by `collect` and read by B2F and SFT.
    pub store: PathBuf,
}

impl Default for CollectSection {
    fn default() -> Self {
        let d = RunConfig::default();
        CollectSection {
            pass_m: d.pass_m,
            temperature: d.collect_temperature,
            store: PathBuf::from("runs/teacher_store.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub teacher: TeacherConfig,
    pub policy: PolicySection,
    pub curriculum: CurriculumSchedule,
    pub train: TrainSection,
    pub replay: ReplaySection,
    pub runtime: RuntimeSection,
    pub eval: EvalSection,
    pub collect: CollectSection,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from the defaults when `None`) and applies
    /// `section.key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, origin) = match path {
            Some(p) => (
                fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                p.display().to_string(),
            ),
            None => (String::new(), "<defaults>".to_string()),
        };
        Self::from_str_with(&text, &origin, overrides)
    }

    pub fn from_str_with(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("{origin}: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{origin}: {e}")))?;
        config.to_run_config().validate()?;
        Ok(config)
    }

    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            algo: self.run.algo,
            schedule: self.curriculum,
            env: self.env.clone(),
            teacher: self.teacher,
            window: self.policy.window,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            actor_count: self.runtime.actor_count,
            delta_max: self.replay.delta_max,
            buffer_capacity: self.replay.capacity,
            eval_every: self.eval.every,
            eval_episodes: self.eval.episodes,
            eval_temperature: self.eval.temperature,
            train_temperature: self.train.temperature,
            seed: self.run.seed,
            mode: self.runtime.mode,
            pass_m: self.collect.pass_m,
            collect_temperature: self.collect.temperature,
            execution: if self.runtime.parallel {
                Execution::Parallel
            } else {
                Execution::Sequential
            },
        }
    }

    /// Fully resolved config as TOML; written next to every run.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.echo())
    }
}

/// Sets `section.key` in `doc` from a `section.key=value` string. The value
/// is read as a TOML value when it parses as one and as a bare string
/// otherwise, so `run.algo=f2b` and `run.name="x"` both work.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form section.key=value")))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!(
            "override key `{path}` must be section.key"
        )));
    }
    let value = parse_value(raw.trim());
    let section = doc
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let table = section
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("`{}` is not a section", parts[0])))?;
    table.insert(parts[1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_str_with("", "t", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.to_run_config().lr, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_str_with("[train]\nlearning_rate = 1.0\n", "t", &[]);
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("learning_rate")));
        let err = ExperimentConfig::from_str_with("[bogus]\nx = 1\n", "t", &[]);
        assert!(err.is_err());
        let err = ExperimentConfig::from_str_with("", "t", &["train.nope=1".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = ExperimentConfig::from_str_with(
            "[train]\nlr = 2.0\n",
            "t",
            &[
                "train.lr=5".into(),
                "run.algo=b2f".into(),
                "curriculum.eta=4".into(),
                "policy.window=2".into(),
                "run.output_dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.lr, 5.0);
        assert_eq!(c.run.algo, Algo::B2f);
        assert_eq!(c.curriculum.eta, 4);
        assert_eq!(c.policy.window, Some(2));
        assert_eq!(c.run.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn invalid_values_fail_before_running() {
        for o in ["eval.episodes=0", "collect.pass_m=0", "curriculum.eta=0", "train.lr=-1"] {
            assert!(
                ExperimentConfig::from_str_with("", "t", &[o.into()]).is_err(),
                "{o} accepted"
            );
        }
    }

    #[test]
    fn echo_round_trips_and_hash_is_stable() {
        let c = ExperimentConfig::from_str_with("", "t", &["policy.window=3".into()]).unwrap();
        let back = ExperimentConfig::from_str_with(&c.echo(), "echo", &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(ExperimentConfig::default().hash(), c.hash());
    }
}
