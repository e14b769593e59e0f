//! Tabular softmax policies over history keys, the fixed teacher, and the
//! exact forward-KL machinery used by every distillation loss.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EnvState};
use crate::error::{Error, Result};

/// Floor applied to student probabilities inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;

/// The interaction prefix `(o_0, a_0, o_1, ..., o_t)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct History {
    initial: u32,
    steps: Vec<(Action, u32)>,
}

impl History {
    pub fn new(initial: u32) -> Self {
        History {
            initial,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, action: Action, observation: u32) {
        self.steps.push((action, observation));
    }

    /// Number of actions taken so far, i.e. the current turn index.
    pub fn turn(&self) -> usize {
        self.steps.len()
    }

    pub fn initial(&self) -> u32 {
        self.initial
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.steps.iter().map(|&(a, _)| a)
    }

    fn observation(&self, i: usize) -> u32 {
        if i == 0 {
            self.initial
        } else {
            self.steps[i - 1].1
        }
    }

    /// Canonical key over the last `window` (observation, action) pairs plus
    /// `o_0` and the current observation. `None` keeps the full history.
    pub fn key(&self, window: Option<usize>) -> HistoryKey {
        let t = self.turn();
        let start = window.map_or(0, |w| t.saturating_sub(w));
        let mut tokens = Vec::with_capacity(2 + 2 * (t - start));
        tokens.push(self.initial);
        for i in start..t {
            tokens.push(self.observation(i));
            tokens.push(u32::from(self.steps[i].0 .0));
        }
        tokens.push(self.observation(t));
        HistoryKey(tokens)
    }
}

/// Table key derived from a [`History`]. Two histories with the same
/// windowed token sequence share a key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HistoryKey(Vec<u32>);

impl HistoryKey {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for HistoryKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let tokens = s
            .split('.')
            .map(|t| t.parse::<u32>().map_err(|e| format!("bad key token {t:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if tokens.len() < 2 {
            return Err(format!("key {s:?} is too short"));
        }
        Ok(HistoryKey(tokens))
    }
}

/// A probability vector over the action set.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    /// Normalizes `weights`, which must be non-negative with a positive sum.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(Error::usage("distribution weights must be non-negative with positive sum"));
        }
        Ok(CategoricalDistribution {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        CategoricalDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        CategoricalDistribution { probs }
    }

    pub fn softmax(logits: &[f64], temperature: f64) -> Self {
        debug_assert!(temperature > 0.0);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits
            .iter()
            .map(|&z| ((z - max) / temperature).exp())
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        CategoricalDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Log-probabilities with zero entries mapped to `ln(KL_FLOOR)`.
    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|&p| p.max(KL_FLOOR).ln()).collect()
    }

    /// Re-tempers the distribution: `softmax(ln p / temperature)`.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        if temperature == 1.0 {
            return self.clone();
        }
        Self::softmax(&self.log_probs(), temperature)
    }
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)`, with `0 ln 0 = 0` and `q` floored at
/// [`KL_FLOOR`].
pub fn forward_kl(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    check_dims(p, q)?;
    let kl: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Gradient of `KL(p || softmax(z))` with respect to the student logits `z`
/// at `q = softmax(z)`: simply `q - p`.
pub fn kl_logit_gradient(
    p_teacher: &CategoricalDistribution,
    q_student: &CategoricalDistribution,
) -> Result<Vec<f64>> {
    check_dims(p_teacher, q_student)?;
    Ok(q_student
        .probs
        .iter()
        .zip(&p_teacher.probs)
        .map(|(q, p)| q - p)
        .collect())
}

fn check_dims(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::usage(format!(
            "distribution dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Inverse-CDF sampling, scanning actions in ascending index order.
pub fn sample_action<R: Rng + ?Sized>(dist: &CategoricalDistribution, rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cumulative += p;
            if u < cumulative {
                return Action(i as u8);
            }
        }
    }
    Action(last_positive as u8)
}

/// Anything that can act in an environment.
///
/// The environment state is passed alongside the history only so that the
/// privileged teacher can look up where it is; learned policies must depend
/// on the history alone.
pub trait Policy: Sync {
    fn num_actions(&self) -> usize;
    fn action_dist(&self, history: &History, state: &EnvState, temperature: f64)
        -> CategoricalDistribution;
}

/// Student parameters: a logit table keyed by history.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    num_actions: usize,
    window: Option<usize>,
    logits: BTreeMap<HistoryKey, Vec<f64>>,
    default_logits: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// Uniform policy: every key starts at zero logits.
    pub fn uniform(num_actions: usize, window: Option<usize>) -> Self {
        PolicyParams {
            num_actions,
            window,
            logits: BTreeMap::new(),
            default_logits: vec![0.0; num_actions],
            version: 0,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn key_for(&self, history: &History) -> HistoryKey {
        history.key(self.window)
    }

    pub fn logits(&self, key: &HistoryKey) -> &[f64] {
        self.logits.get(key).unwrap_or(&self.default_logits)
    }

    pub fn logits_mut(&mut self, key: &HistoryKey) -> &mut Vec<f64> {
        let default = &self.default_logits;
        self.logits.entry(key.clone()).or_insert_with(|| default.clone())
    }

    pub fn set_logits(&mut self, key: HistoryKey, logits: Vec<f64>) {
        assert_eq!(logits.len(), self.num_actions);
        self.logits.insert(key, logits);
    }

    pub fn table(&self) -> &BTreeMap<HistoryKey, Vec<f64>> {
        &self.logits
    }

    pub fn dist(&self, key: &HistoryKey, temperature: f64) -> CategoricalDistribution {
        action_dist(self, key, temperature)
    }
}

/// `softmax(logits[key] / temperature)`, falling back to the default logits
/// for unseen keys.
pub fn action_dist(
    params: &PolicyParams,
    key: &HistoryKey,
    temperature: f64,
) -> CategoricalDistribution {
    CategoricalDistribution::softmax(params.logits(key), temperature)
}

impl Policy for PolicyParams {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn action_dist(&self, history: &History, _state: &EnvState, temperature: f64) -> CategoricalDistribution {
        self.dist(&self.key_for(history), temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub on_support_temperature: f64,
    /// Fraction of uniform mass mixed in off-support; 1 means fully uniform.
    pub off_support_floor: f64,
    /// Per-turn growth of the teacher's target logit.
    pub confidence_growth: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            on_support_temperature: 0.5,
            off_support_floor: 0.1,
            confidence_growth: 0.25,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.on_support_temperature > 0.0) {
            return Err(Error::config("teacher.on_support_temperature must be > 0"));
        }
        if !(self.off_support_floor > 0.0 && self.off_support_floor <= 1.0) {
            return Err(Error::config("teacher.off_support_floor must be in (0, 1]"));
        }
        if !(self.confidence_growth >= 0.0) {
            return Err(Error::config("teacher.confidence_growth must be >= 0"));
        }
        Ok(())
    }
}

/// The fixed teacher. It reads the true environment state: on the chain it
/// favours the correct action with a softmax whose target logit is
/// `1 + confidence_growth * turn` at `on_support_temperature`; off the chain
/// it mixes the same shape centred on the recovery action with a uniform
/// floor.
#[derive(Debug, Clone)]
pub struct TeacherPolicy {
    env: Env,
    config: TeacherConfig,
}

impl TeacherPolicy {
    pub fn new(env: Env, config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        Ok(TeacherPolicy { env, config })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    /// The teacher's distribution at temperature 1.
    pub fn dist_at(&self, state: &EnvState) -> CategoricalDistribution {
        let n = self.env.num_actions();
        let target = self.env.correct_action(state).index();
        let margin = (1.0 + self.config.confidence_growth * state.turn() as f64)
            / self.config.on_support_temperature;
        let mut logits = vec![0.0; n];
        logits[target] = margin;
        let sharp = CategoricalDistribution::softmax(&logits, 1.0);
        if state.on_support() {
            return sharp;
        }
        let floor = self.config.off_support_floor;
        let probs = sharp
            .probs
            .iter()
            .map(|&p| floor / n as f64 + (1.0 - floor) * p)
            .collect();
        CategoricalDistribution { probs }
    }

    /// Reconstructs the state from the history and queries the teacher.
    pub fn dist_for_history(&self, history: &History) -> Result<CategoricalDistribution> {
        let task = self
            .env
            .task_of_initial(history.initial())
            .ok_or_else(|| Error::usage("history does not start with a task observation"))?;
        let actions: Vec<Action> = history.actions().collect();
        let state = self.env.replay(task, &actions)?;
        Ok(self.dist_at(&state))
    }
}

impl Policy for TeacherPolicy {
    fn num_actions(&self) -> usize {
        self.env.num_actions()
    }

    fn action_dist(&self, _history: &History, state: &EnvState, temperature: f64) -> CategoricalDistribution {
        self.dist_at(state).with_temperature(temperature)
    }
}

const SNAPSHOT_FORMAT: u32 = 1;

/// A policy checkpoint on disk.
///
/// Text format, one `name=value` header per line followed by the table:
///
/// ```text
/// opdlab-policy format=1
/// kind=student
/// num_actions=6
/// window=full
/// version=400
/// default=0 0 0 0 0 0
/// key=<dot-separated tokens> <logit> <logit> ...
/// ```
///
/// Keys are written in ascending token order and floats in shortest
/// round-trip form, so equal parameters give byte-identical files. A teacher
/// checkpoint (`kind=teacher`) stores the teacher's construction parameters
/// instead of a table; it is rebuilt against the environment at load time.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Student(PolicyParams),
    Teacher {
        num_actions: usize,
        config: TeacherConfig,
    },
}

impl Checkpoint {
    pub fn num_actions(&self) -> usize {
        match self {
            Checkpoint::Student(p) => p.num_actions,
            Checkpoint::Teacher { num_actions, .. } => *num_actions,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("opdlab-policy format={SNAPSHOT_FORMAT}\n"));
        match self {
            Checkpoint::Student(p) => {
                out.push_str("kind=student\n");
                out.push_str(&format!("num_actions={}\n", p.num_actions));
                match p.window {
                    Some(w) => out.push_str(&format!("window={w}\n")),
                    None => out.push_str("window=full\n"),
                }
                out.push_str(&format!("version={}\n", p.version));
                out.push_str(&format!("default={}\n", join_floats(&p.default_logits)));
                for (key, logits) in &p.logits {
                    out.push_str(&format!("key={key} {}\n", join_floats(logits)));
                }
            }
            Checkpoint::Teacher {
                num_actions,
                config,
            } => {
                out.push_str("kind=teacher\n");
                out.push_str(&format!("num_actions={num_actions}\n"));
                out.push_str(&format!(
                    "on_support_temperature={}\n",
                    config.on_support_temperature
                ));
                out.push_str(&format!("off_support_floor={}\n", config.off_support_floor));
                out.push_str(&format!("confidence_growth={}\n", config.confidence_growth));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::parse(path, i + 1, e.to_string())),
                None => Err(Error::parse(path, 0, format!("missing {what}"))),
            }
        };
        let (ln, header) = next("header")?;
        let format = header
            .strip_prefix("opdlab-policy format=")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::parse(path, ln, "not a policy snapshot"))?;
        if format != SNAPSHOT_FORMAT {
            return Err(Error::SchemaVersion {
                path: path.into(),
                found: format,
                expected: SNAPSHOT_FORMAT,
            });
        }
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (ln, line) = next(name)?;
            let value = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::parse(path, ln, format!("expected {name}=...")))?;
            Ok((ln, value.to_string()))
        };
        let parse_num = |ln: usize, v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|e| Error::parse(path, ln, format!("bad number {v:?}: {e}")))
        };
        let (_, kind) = field("kind")?;
        let (ln, n) = field("num_actions")?;
        let num_actions: usize = n
            .parse()
            .map_err(|_| Error::parse(path, ln, "bad num_actions"))?;
        match kind.as_str() {
            "teacher" => {
                let (ln, t) = field("on_support_temperature")?;
                let on_support_temperature = parse_num(ln, &t)?;
                let (ln, f) = field("off_support_floor")?;
                let off_support_floor = parse_num(ln, &f)?;
                let (ln, g) = field("confidence_growth")?;
                let confidence_growth = parse_num(ln, &g)?;
                Ok(Checkpoint::Teacher {
                    num_actions,
                    config: TeacherConfig {
                        on_support_temperature,
                        off_support_floor,
                        confidence_growth,
                    },
                })
            }
            "student" => {
                let (ln, w) = field("window")?;
                let window = match w.as_str() {
                    "full" => None,
                    v => Some(v.parse().map_err(|_| Error::parse(path, ln, "bad window"))?),
                };
                let (ln, v) = field("version")?;
                let version = v.parse().map_err(|_| Error::parse(path, ln, "bad version"))?;
                let (ln, d) = field("default")?;
                let default_logits = parse_floats(&d, num_actions)
                    .map_err(|m| Error::parse(path, ln, m))?;
                let mut params = PolicyParams {
                    num_actions,
                    window,
                    logits: BTreeMap::new(),
                    default_logits,
                    version,
                };
                while let Ok((ln, line)) = next("key") {
                    if line.is_empty() {
                        continue;
                    }
                    let rest = line
                        .strip_prefix("key=")
                        .ok_or_else(|| Error::parse(path, ln, "expected key=..."))?;
                    let (key, values) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(path, ln, "missing logits"))?;
                    let key: HistoryKey = key.parse().map_err(|m| Error::parse(path, ln, m))?;
                    let logits =
                        parse_floats(values, num_actions).map_err(|m| Error::parse(path, ln, m))?;
                    params.logits.insert(key, logits);
                }
                Ok(Checkpoint::Student(params))
            }
            other => Err(Error::parse(path, 2, format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

pub(crate) fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_floats(s: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let values = s
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|e| format!("bad number {v:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if values.len() != expected {
        return Err(format!("expected {expected} values, found {}", values.len()));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::seed::stream;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn dist(p: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::from_weights(p.to_vec()).unwrap()
    }

    #[test]
    fn softmax_values() {
        let u = CategoricalDistribution::softmax(&[0.0, 0.0, 0.0], 1.0);
        for p in u.probs() {
            assert_close!(*p, 1.0 / 3.0, 1e-15);
        }
        let e = std::f64::consts::E;
        let d = CategoricalDistribution::softmax(&[1.0, 0.0], 1.0);
        assert_close!(d.probs()[0], e / (e + 1.0), 1e-15);
        assert_close!(d.probs()[0], 0.7311, 1e-4);
        assert_close!(d.probs()[1], 0.2689, 1e-4);
    }

    #[test]
    fn unseen_key_uses_default() {
        let params = PolicyParams::uniform(4, None);
        let key = History::new(3).key(None);
        assert_eq!(action_dist(&params, &key, 1.0), CategoricalDistribution::uniform(4));
    }

    #[test]
    fn kl_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert_close!(forward_kl(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap(), ln2, 1e-15);
        assert_close!(
            forward_kl(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap(),
            0.5 * ln2 + 0.5 * (2.0f64 / 3.0).ln(),
            1e-15
        );
        assert_close!(
            forward_kl(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap(),
            0.143841,
            1e-6
        );
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(forward_kl(&p, &p).unwrap(), 0.0);
        assert!(matches!(
            forward_kl(&dist(&[1.0]), &dist(&[0.5, 0.5])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn kl_gradient_closed_form() {
        let g = kl_logit_gradient(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
        let p = dist(&[0.1, 0.9]);
        assert_eq!(kl_logit_gradient(&p, &p).unwrap(), vec![0.0, 0.0]);
        assert!(kl_logit_gradient(&dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = stream(1, &[]);
        for _ in 0..100 {
            assert_eq!(sample_action(&dist(&[1.0, 0.0, 0.0]), &mut rng), Action(0));
            assert_eq!(sample_action(&dist(&[0.0, 1.0]), &mut rng), Action(1));
        }
    }

    #[test]
    fn fair_coin_frequency() {
        // 99% binomial interval for n = 10000, p = 0.5 is about ±0.0129.
        let mut rng = stream(42, &[]);
        let d = dist(&[0.5, 0.5]);
        let zeros = (0..10_000)
            .filter(|_| sample_action(&d, &mut rng) == Action(0))
            .count();
        let freq = zeros as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }

    #[test]
    fn history_keys_window() {
        let mut h = History::new(5);
        h.push(Action(1), 40);
        h.push(Action(2), 41);
        h.push(Action(3), 40);
        assert_eq!(h.key(None).tokens(), &[5, 5, 1, 40, 2, 41, 3, 40]);
        assert_eq!(h.key(Some(1)).tokens(), &[5, 41, 3, 40]);
        assert_eq!(h.key(Some(0)).tokens(), &[5, 40]);
        let mut g = History::new(5);
        g.push(Action(0), 41);
        g.push(Action(3), 40);
        assert_eq!(h.key(Some(1)), g.key(Some(1)));
        assert_ne!(h.key(None), g.key(None));
        let key = h.key(None);
        assert_eq!(key.to_string().parse::<HistoryKey>().unwrap(), key);
    }

    #[test]
    fn teacher_on_support_closed_form() {
        let env = Env::new(EnvConfig {
            num_actions: 4,
            ..Default::default()
        })
        .unwrap();
        let teacher = TeacherPolicy::new(
            env.clone(),
            TeacherConfig {
                on_support_temperature: 0.5,
                off_support_floor: 0.2,
                confidence_growth: 0.0,
            },
        )
        .unwrap();
        let (s, _) = env.reset(0).unwrap();
        let d = teacher.dist_at(&s);
        let e2 = 2.0f64.exp();
        let correct = env.correct_action(&s).index();
        assert_close!(d.probs()[correct], e2 / (e2 + 3.0), 1e-15);
        assert_close!(d.probs()[correct], 0.7112, 1e-4);

        let sharp = TeacherPolicy::new(
            env.clone(),
            TeacherConfig {
                on_support_temperature: 1e-3,
                ..teacher.config
            },
        )
        .unwrap();
        assert_close!(sharp.dist_at(&s).probs()[correct], 1.0, 1e-12);
    }

    #[test]
    fn teacher_off_support_floor_one_is_uniform() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let teacher = TeacherPolicy::new(
            env.clone(),
            TeacherConfig {
                off_support_floor: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let (mut s, _) = env.reset(0).unwrap();
        let wrong = Action((env.optimal_actions(0)[0] + 1) % 6);
        env.step(&mut s, wrong).unwrap();
        assert!(!s.on_support());
        for p in teacher.dist_at(&s).probs() {
            assert_close!(*p, 1.0 / 6.0, 1e-15);
        }
    }

    #[test]
    fn teacher_off_support_mass_floor() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let teacher = env.make_teacher(0.5, 0.3).unwrap();
        let (mut s, _) = env.reset(2).unwrap();
        let wrong = Action((env.optimal_actions(2)[0] + 1) % 6);
        env.step(&mut s, wrong).unwrap();
        for p in teacher.dist_at(&s).probs() {
            assert!(*p >= 0.3 / 6.0 - 1e-15);
        }
    }

    #[test]
    fn teacher_history_query_matches_state_query() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let teacher = env.make_teacher(0.5, 0.1).unwrap();
        let (mut s, o0) = env.reset(4).unwrap();
        let mut h = History::new(o0.token_id);
        for a in [Action(0), Action(3), Action(3), Action(1)] {
            let r = env.step(&mut s, a).unwrap();
            h.push(a, r.observation.token_id);
        }
        assert_eq!(teacher.dist_for_history(&h).unwrap(), teacher.dist_at(&s));
    }

    #[test]
    fn student_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.snap");
        let mut params = PolicyParams::uniform(3, Some(2));
        let mut h = History::new(1);
        params.set_logits(h.key(Some(2)), vec![0.1, -2.5e-7, 1.0 / 3.0]);
        h.push(Action(2), 9);
        params.set_logits(h.key(Some(2)), vec![0.0, 7.0, -1.0]);
        params.version = 12;
        let ckpt = Checkpoint::Student(params);
        ckpt.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), ckpt);
        let teacher = Checkpoint::Teacher {
            num_actions: 6,
            config: TeacherConfig::default(),
        };
        teacher.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), teacher);
    }

    #[test]
    fn checkpoint_format_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.snap");
        fs::write(&path, "opdlab-policy format=9\nkind=student\n").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::SchemaVersion { found: 9, .. })));
    }
}
