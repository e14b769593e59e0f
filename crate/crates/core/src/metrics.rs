//! Logged quantities and their on-disk forms.
//!
//! A metrics log is line-delimited JSON: a header object carrying the schema
//! version and a hash of the run configuration, then one record per line.
//! All floats are rounded to 9 significant digits when a record is built, so
//! a written log reads back to equal records.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{ExecutedBy, Trajectory};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Rounds to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Eval,
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub success_rate: f64,
    pub avg_rounds: f64,
    /// Mean over episodes of the per-episode KL sum.
    pub traj_kl_mean: f64,
    /// Mean over episodes of the per-episode mean turn KL.
    pub turn_kl_mean: f64,
    pub per_turn_kl: Vec<f64>,
    pub active_k: usize,
    pub split: Split,
    pub episodes: usize,
    /// Longest replayed teacher prefix among the episodes.
    pub max_prefix_len: usize,
}

impl EvalRecord {
    pub fn from_trajectories(
        step: usize,
        split: Split,
        active_k: usize,
        trajectories: &[Trajectory],
    ) -> Self {
        let n = trajectories.len().max(1) as f64;
        let successes = trajectories.iter().filter(|t| t.success).count();
        let rounds: usize = trajectories.iter().map(|t| t.rounds).sum();
        let kl_sum: f64 = trajectories.iter().map(|t| t.kl_sum()).sum();
        let kl_turn_mean: f64 = trajectories
            .iter()
            .map(|t| {
                if t.rounds == 0 {
                    0.0
                } else {
                    t.kl_sum() / t.rounds as f64
                }
            })
            .sum();
        EvalRecord {
            step,
            success_rate: sig9(successes as f64 / n),
            avg_rounds: sig9(rounds as f64 / n),
            traj_kl_mean: sig9(kl_sum / n),
            turn_kl_mean: sig9(kl_turn_mean / n),
            per_turn_kl: per_turn_kl_profile(trajectories).into_iter().map(sig9).collect(),
            active_k,
            split,
            episodes: trajectories.len(),
            max_prefix_len: trajectories.iter().map(|t| t.prefix_len()).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub buffer_size: usize,
    /// Cumulative count of entries dropped for staleness.
    pub discarded_stale: u64,
    pub active_k: usize,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub batch_len: usize,
    /// Buffer occupancy by staleness at sampling time.
    pub staleness_histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Train(TrainRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub config_hash: String,
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub fn new(config_hash: impl Into<String>) -> Self {
        MetricsLog {
            config_hash: config_hash.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn train(&self) -> impl Iterator<Item = &TrainRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Train(t) => Some(t),
            _ => None,
        })
    }

    pub fn evals(&self, split: Split) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(move |r| match r {
            Record::Eval(e) if e.split == split => Some(e),
            _ => None,
        })
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals(Split::Eval).last()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            schema_version: SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
        })
        .expect("serializable");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_records(self, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty metrics log"))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.into(),
                found: header.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let mut log = MetricsLog::new(header.config_hash);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
            log.records.push(record);
        }
        Ok(log)
    }

    /// One row per evaluation/rollout record with `per_turn_kl` spread over
    /// `kl_t0..kl_tK`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let evals: Vec<&EvalRecord> = self
            .records
            .iter()
            .filter_map(|r| match r {
                Record::Eval(e) => Some(e),
                _ => None,
            })
            .collect();
        let width = evals.iter().map(|e| e.per_turn_kl.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut header: Vec<String> = [
            "step",
            "split",
            "success_rate",
            "avg_rounds",
            "traj_kl_mean",
            "turn_kl_mean",
            "active_k",
            "episodes",
            "max_prefix_len",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..width).map(|t| format!("kl_t{t}")));
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(&header).map_err(csv_err)?;
        for e in evals {
            let split = match e.split {
                Split::Eval => "eval",
                Split::Rollout => "rollout",
            };
            let mut row = vec![
                e.step.to_string(),
                split.to_string(),
                e.success_rate.to_string(),
                e.avg_rounds.to_string(),
                e.traj_kl_mean.to_string(),
                e.turn_kl_mean.to_string(),
                e.active_k.to_string(),
                e.episodes.to_string(),
                e.max_prefix_len.to_string(),
            ];
            row.extend((0..width).map(|t| {
                e.per_turn_kl
                    .get(t)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            }));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn write_records(log: &MetricsLog, path: &Path) -> Result<()> {
    fs::write(path, log.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Mean student-turn KL at each absolute turn index. Teacher prefix turns
/// are skipped but still occupy their index, so backward-curriculum
/// profiles keep prefix and student regions apart. Indices without any
/// student turn read 0.
pub fn per_turn_kl_profile(trajectories: &[Trajectory]) -> Vec<f64> {
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for traj in trajectories {
        for turn in &traj.turns {
            if turn.executed_by != ExecutedBy::Student {
                continue;
            }
            let t = turn.turn_index;
            if sums.len() <= t {
                sums.resize(t + 1, 0.0);
                counts.resize(t + 1, 0);
            }
            sums[t] += turn.turn_kl;
            counts[t] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
