//! Rollouts for vanilla on-policy distillation and the two temporal
//! curricula, the per-trajectory KL loss, teacher trajectory collection,
//! the NLL baseline and the learner update.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::b2f_prefix_len;
use crate::env::{Action, Env};
use crate::error::{Error, Result};
use crate::policy::{
    forward_kl, kl_logit_gradient, sample_action, CategoricalDistribution, History, HistoryKey,
    Policy, PolicyParams, TeacherPolicy,
};
use crate::replay::ExperienceEntry;
use crate::seed::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutedBy {
    Student,
    TeacherPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryAlgo {
    Opd,
    F2b,
    B2f,
    SftCollect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub history_key: HistoryKey,
    pub action: Action,
    pub student_dist: Option<CategoricalDistribution>,
    pub teacher_dist: Option<CategoricalDistribution>,
    pub turn_index: usize,
    pub executed_by: ExecutedBy,
    /// `KL(teacher || student)` at this turn; zero when either side is
    /// missing.
    pub turn_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    pub turns: Vec<TurnRecord>,
    pub success: bool,
    /// Number of student-executed turns.
    pub rounds: usize,
    pub policy_version: u64,
    pub algo: TrajectoryAlgo,
}

impl Trajectory {
    pub fn prefix_len(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.executed_by == ExecutedBy::TeacherPrefix)
            .count()
    }

    pub fn student_turns(&self) -> impl Iterator<Item = &TurnRecord> {
        self.turns
            .iter()
            .filter(|t| t.executed_by == ExecutedBy::Student)
    }

    /// Sum of per-turn KL over student turns.
    pub fn kl_sum(&self) -> f64 {
        self.student_turns().map(|t| t.turn_kl).sum()
    }

    /// Recomputes every student distribution and turn KL under `params`,
    /// keeping the realized actions. Used to probe what the loss would be
    /// for different parameters on the same trajectory.
    pub fn rescore(&self, params: &PolicyParams) -> Trajectory {
        let mut out = self.clone();
        for turn in &mut out.turns {
            let q = params.dist(&turn.history_key, 1.0);
            turn.turn_kl = match (&turn.teacher_dist, turn.executed_by) {
                (Some(p), ExecutedBy::Student) => forward_kl(p, &q).unwrap_or(0.0),
                _ => 0.0,
            };
            turn.student_dist = Some(q);
        }
        out
    }
}

/// How a rollout is split between a replayed teacher prefix and the student.
#[derive(Debug, Clone, Copy)]
struct RolloutPlan<'a> {
    prefix: &'a [Action],
    student_turn_limit: Option<usize>,
    algo: TrajectoryAlgo,
}

/// Shared rollout body. `temperature` is the student's sampling temperature;
/// the recorded student distribution is always at temperature 1.
#[allow(clippy::too_many_arguments)]
fn rollout<R: Rng + ?Sized>(
    env: &Env,
    student: &PolicyParams,
    teacher: &TeacherPolicy,
    task_id: usize,
    plan: RolloutPlan<'_>,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if student.num_actions() != env.num_actions() || teacher.num_actions() != env.num_actions() {
        return Err(Error::usage("policy and environment action counts differ"));
    }
    let (mut state, o0) = env.reset(task_id)?;
    let mut history = History::new(o0.token_id);
    let mut turns = Vec::new();
    let mut rounds = 0;
    let limit = plan.student_turn_limit.unwrap_or(usize::MAX);
    while !state.is_done() && rounds < limit {
        let turn_index = history.turn();
        let key = student.key_for(&history);
        let q = student.dist(&key, 1.0);
        let p = teacher.dist_at(&state);
        let (action, executed_by) = match plan.prefix.get(turn_index) {
            Some(&a) => (a, ExecutedBy::TeacherPrefix),
            None => {
                let action = if temperature == 1.0 {
                    sample_action(&q, rng)
                } else {
                    sample_action(&student.dist(&key, temperature), rng)
                };
                rounds += 1;
                (action, ExecutedBy::Student)
            }
        };
        let turn_kl = match executed_by {
            ExecutedBy::Student => forward_kl(&p, &q)?,
            ExecutedBy::TeacherPrefix => 0.0,
        };
        let result = env.step(&mut state, action)?;
        history.push(action, result.observation.token_id);
        turns.push(TurnRecord {
            history_key: key,
            action,
            student_dist: Some(q),
            teacher_dist: Some(p),
            turn_index,
            executed_by,
            turn_kl,
        });
    }
    Ok(Trajectory {
        task_id,
        turns,
        success: state.is_success(),
        rounds,
        policy_version: student.version(),
        algo: plan.algo,
    })
}

/// Vanilla on-policy distillation rollout: the student acts every turn.
pub fn rollout_opd<R: Rng + ?Sized>(
    env: &Env,
    student: &PolicyParams,
    teacher: &TeacherPolicy,
    task_id: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let plan = RolloutPlan {
        prefix: &[],
        student_turn_limit: None,
        algo: TrajectoryAlgo::Opd,
    };
    rollout(env, student, teacher, task_id, plan, temperature, rng)
}

/// Forward curriculum rollout: the episode is cut after `k` student turns.
/// A cut episode counts as a failure unless the goal was reached in time.
pub fn rollout_f2b<R: Rng + ?Sized>(
    env: &Env,
    student: &PolicyParams,
    teacher: &TeacherPolicy,
    task_id: usize,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if k == 0 {
        return Err(Error::usage("forward curriculum horizon must be >= 1"));
    }
    let plan = RolloutPlan {
        prefix: &[],
        student_turn_limit: Some(k),
        algo: TrajectoryAlgo::F2b,
    };
    rollout(env, student, teacher, task_id, plan, temperature, rng)
}

/// Backward curriculum rollout: replays the first `L - k` actions of the
/// stored teacher trajectory, then hands control to the student until the
/// episode ends.
#[allow(clippy::too_many_arguments)]
pub fn rollout_b2f<R: Rng + ?Sized>(
    env: &Env,
    store: &TeacherTrajectoryStore,
    student: &PolicyParams,
    teacher: &TeacherPolicy,
    task_id: usize,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let stored = store
        .get(task_id)
        .ok_or_else(|| Error::config(format!("task {task_id} has no stored teacher trajectory")))?;
    let prefix = &stored.actions[..b2f_prefix_len(stored.actions.len(), k)];
    let plan = RolloutPlan {
        prefix,
        student_turn_limit: None,
        algo: TrajectoryAlgo::B2f,
    };
    rollout(env, student, teacher, task_id, plan, temperature, rng)
}

/// Sparse gradient over history keys.
pub type Gradient = BTreeMap<HistoryKey, Vec<f64>>;

/// Sum of per-turn forward KL over student turns and its logit gradient.
/// Teacher prefix turns contribute nothing.
pub fn trajectory_loss(traj: &Trajectory) -> Result<(f64, Gradient)> {
    let mut loss = 0.0;
    let mut grad = Gradient::new();
    for turn in traj.student_turns() {
        let (Some(p), Some(q)) = (&turn.teacher_dist, &turn.student_dist) else {
            return Err(Error::usage(format!(
                "student turn {} lacks a recorded distribution",
                turn.turn_index
            )));
        };
        loss += forward_kl(p, q)?;
        let g = kl_logit_gradient(p, q)?;
        let slot = grad
            .entry(turn.history_key.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
    }
    Ok((loss, grad))
}

/// Gradient of `-ln softmax(z)[target]` with respect to `z`.
pub fn nll_logit_gradient(logits: &[f64], target: Action) -> Vec<f64> {
    let mut g = CategoricalDistribution::softmax(logits, 1.0).probs().to_vec();
    g[target.index()] -= 1.0;
    g
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredTrajectory {
    pub task_id: usize,
    pub len: usize,
    pub actions: Vec<Action>,
    /// Seed of the attempt that produced this trajectory.
    pub seed: u64,
}

/// Successful teacher trajectories, at most one per task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherTrajectoryStore {
    trajectories: BTreeMap<usize, StoredTrajectory>,
    /// Tasks for which collection found no success.
    pub missing: Vec<usize>,
}

impl TeacherTrajectoryStore {
    pub fn get(&self, task_id: usize) -> Option<&StoredTrajectory> {
        self.trajectories.get(&task_id)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.trajectories.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredTrajectory> {
        self.trajectories.values()
    }

    pub fn max_len(&self) -> usize {
        self.iter().map(|t| t.len).max().unwrap_or(0)
    }

    pub fn mean_len(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.iter().map(|t| t.len as f64).sum::<f64>() / self.len() as f64
    }

    /// Adds a trajectory after checking that it succeeds in `env`.
    pub fn insert(&mut self, env: &Env, traj: StoredTrajectory) -> Result<()> {
        validate_stored(env, &traj)?;
        self.missing.retain(|&t| t != traj.task_id);
        self.trajectories.insert(traj.task_id, traj);
        Ok(())
    }

    pub fn require_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::config(
                "teacher trajectory store is empty: no task was solved during collection",
            ));
        }
        Ok(())
    }

    /// One JSON object per line, in ascending task order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in self.iter() {
            out.push_str(&serde_json::to_string(t).expect("serializable"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a store and replays every trajectory against `env`.
    pub fn read(path: &Path, env: &Env) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = TeacherTrajectoryStore::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let traj: StoredTrajectory =
                serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            store
                .insert(env, traj)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(store)
    }
}

fn validate_stored(env: &Env, traj: &StoredTrajectory) -> Result<()> {
    if traj.len != traj.actions.len() {
        return Err(Error::config(format!(
            "task {}: declared length {} but {} actions",
            traj.task_id,
            traj.len,
            traj.actions.len()
        )));
    }
    let (mut state, _) = env.reset(traj.task_id)?;
    for (i, &a) in traj.actions.iter().enumerate() {
        let r = env.step(&mut state, a)?;
        if r.done && i + 1 != traj.actions.len() {
            return Err(Error::config(format!(
                "task {}: episode ends after {} of {} actions",
                traj.task_id,
                i + 1,
                traj.actions.len()
            )));
        }
    }
    if !state.is_success() {
        return Err(Error::config(format!(
            "task {}: stored trajectory does not reach the goal",
            traj.task_id
        )));
    }
    Ok(())
}

/// Samples up to `pass_m` teacher episodes per task at `temperature` and
/// keeps the first success. Attempt `j` of task `t` uses the stream
/// `(seed, t, j)`, so the result does not depend on collection order.
pub fn collect_teacher_trajectories(
    env: &Env,
    teacher: &TeacherPolicy,
    pass_m: usize,
    temperature: f64,
    seed: u64,
) -> Result<TeacherTrajectoryStore> {
    if pass_m == 0 {
        return Err(Error::config("pass_m must be >= 1"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("collection temperature must be > 0"));
    }
    let results = crate::par::map_indices(env.config().task_count, |task_id| {
        for attempt in 0..pass_m {
            let attempt_seed = crate::seed::mix_seed(seed, &[0xc011, task_id as u64, attempt as u64]);
            let mut rng = stream(attempt_seed, &[]);
            let (mut state, o0) = env.reset(task_id)?;
            let mut history = History::new(o0.token_id);
            let mut actions = Vec::new();
            while !state.is_done() {
                let dist = teacher.action_dist(&history, &state, temperature);
                let a = sample_action(&dist, &mut rng);
                let r = env.step(&mut state, a)?;
                history.push(a, r.observation.token_id);
                actions.push(a);
            }
            if state.is_success() {
                return Ok(Some(StoredTrajectory {
                    task_id,
                    len: actions.len(),
                    actions,
                    seed: attempt_seed,
                }));
            }
        }
        Ok(None)
    });
    let mut store = TeacherTrajectoryStore::default();
    for (task_id, r) in results.into_iter().enumerate() {
        match r? {
            Some(t) => store.insert(env, t)?,
            None => store.missing.push(task_id),
        }
    }
    Ok(store)
}

/// One epoch of NLL gradient descent on the stored teacher actions, one
/// update per stored trajectory in ascending task order.
pub fn sft_update(
    store: &TeacherTrajectoryStore,
    env: &Env,
    student: &PolicyParams,
    lr: f64,
) -> Result<PolicyParams> {
    store.require_non_empty()?;
    let mut params = student.clone();
    for traj in store.iter() {
        let (mut state, o0) = env.reset(traj.task_id)?;
        let mut history = History::new(o0.token_id);
        let mut grad = Gradient::new();
        for &a in &traj.actions {
            let key = params.key_for(&history);
            let g = nll_logit_gradient(params.logits(&key), a);
            let slot = grad.entry(key).or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
            let r = env.step(&mut state, a)?;
            history.push(a, r.observation.token_id);
        }
        apply_gradient(&mut params, &grad, lr);
    }
    params.bump_version();
    Ok(params)
}

fn apply_gradient(params: &mut PolicyParams, grad: &Gradient, lr: f64) {
    for (key, g) in grad {
        let logits = params.logits_mut(key);
        logits.iter_mut().zip(g).for_each(|(z, gi)| *z -= lr * gi);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerStats {
    /// Mean forward KL over the batch at the pre-update parameters.
    pub loss: f64,
    /// Euclidean norm of the applied (mean) gradient.
    pub grad_norm: f64,
}

/// One learner update. The gradient at each entry is re-evaluated under the
/// current parameters (`softmax(z[key]) - p_teacher`) and the batch gradient
/// is the mean over entries, so a key seen `c` times in a batch of `B`
/// moves by `lr * c / B` times its average per-entry gradient.
pub fn learner_step(
    params: &mut PolicyParams,
    batch: &[ExperienceEntry],
    lr: f64,
) -> Result<LearnerStats> {
    if batch.is_empty() {
        return Err(Error::usage("learner_step needs a non-empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = Gradient::new();
    let mut loss = 0.0;
    for entry in batch {
        let q = params.dist(&entry.history_key, 1.0);
        loss += forward_kl(&entry.teacher_dist, &q)?;
        let g = kl_logit_gradient(&entry.teacher_dist, &q)?;
        let slot = grad
            .entry(entry.history_key.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        slot.iter_mut().zip(&g).for_each(|(s, v)| *s += scale * v);
    }
    let grad_norm = grad
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    apply_gradient(params, &grad, lr);
    params.bump_version();
    Ok(LearnerStats {
        loss: loss * scale,
        grad_norm,
    })
}
