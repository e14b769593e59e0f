//! Training orchestration: actors roll out against the latest published
//! snapshot, a single learner consumes fresh sub-trajectory entries and
//! publishes a new snapshot after every update.
//!
//! `Mode::Sync` runs the same logic on one thread of control. Per learner
//! step, actors are visited round-robin, one trajectory each, until at least
//! `batch_size` new entries have been produced. Trajectory `i` of step `n`
//! draws from its own seeded stream, so batches may be generated in parallel
//! and the run is still bit-reproducible. `Mode::Async` uses real threads
//! and is only statistically reproducible.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::distill::{
    collect_teacher_trajectories, learner_step, nll_logit_gradient, rollout_b2f, rollout_f2b,
    rollout_opd, sft_update, ExecutedBy, TeacherTrajectoryStore, Trajectory, TrajectoryAlgo,
    TurnRecord,
};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::metrics::{sig9, EvalRecord, MetricsLog, Record, Split, TrainRecord};
use crate::par::{map_indices_with, Execution};
use crate::policy::{forward_kl, sample_action, History, Policy, PolicyParams, TeacherConfig, TeacherPolicy};
use crate::replay::{decompose, ExperienceEntry, RingBuffer, SharedInbox};
use crate::seed::{mix_seed, stream};

const STREAM_ROLLOUT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_COLLECT: u64 = 4;
const STREAM_ACTOR: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Opd,
    F2b,
    B2f,
    Sft,
}

impl Algo {
    pub fn needs_store(self) -> bool {
        matches!(self, Algo::B2f | Algo::Sft)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algo,
    pub schedule: CurriculumSchedule,
    pub env: EnvConfig,
    pub teacher: TeacherConfig,
    /// History window of the student's keys; `None` is the full history.
    pub window: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub actor_count: usize,
    pub delta_max: u64,
    pub buffer_capacity: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_temperature: f64,
    pub train_temperature: f64,
    pub seed: u64,
    pub mode: Mode,
    pub pass_m: usize,
    /// Teacher sampling temperature when collecting stored trajectories.
    pub collect_temperature: f64,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algo: Algo::Opd,
            schedule: CurriculumSchedule::default(),
            env: EnvConfig::default(),
            teacher: TeacherConfig::default(),
            window: None,
            lr: 0.1,
            batch_size: 32,
            actor_count: 4,
            delta_max: 2,
            buffer_capacity: 4096,
            eval_every: 5,
            eval_episodes: 64,
            eval_temperature: 0.4,
            train_temperature: 1.0,
            seed: 0,
            mode: Mode::Sync,
            pass_m: 10,
            collect_temperature: 0.4,
            execution: Execution::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.teacher.validate()?;
        self.schedule.validate()?;
        let positive = [
            ("train.batch_size", self.batch_size),
            ("runtime.actor_count", self.actor_count),
            ("replay.capacity", self.buffer_capacity),
            ("eval.every", self.eval_every),
            ("eval.episodes", self.eval_episodes),
            ("collect.pass_m", self.pass_m),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr must be > 0"));
        }
        if !(self.eval_temperature > 0.0)
            || !(self.train_temperature > 0.0)
            || !(self.collect_temperature > 0.0)
        {
            return Err(Error::config("temperatures must be > 0"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::config("replay.capacity must be >= train.batch_size"));
        }
        Ok(())
    }

    /// Curriculum horizon used by actors holding snapshot `version`, i.e.
    /// for learner step `version + 1`.
    fn horizon_for_version(&self, version: u64, longest: usize) -> usize {
        let n = version as usize + 1;
        match self.algo {
            Algo::F2b => self.schedule.horizon_at(n),
            Algo::B2f => self.schedule.horizon_capped(n, longest),
            Algo::Opd | Algo::Sft => self.env.horizon_cap,
        }
    }
}

/// Latest published parameters. Versions only ever increase.
pub struct SnapshotBoard {
    latest: RwLock<Arc<PolicyParams>>,
    version: AtomicU64,
}

impl SnapshotBoard {
    pub fn new(params: PolicyParams) -> Self {
        let version = params.version();
        SnapshotBoard {
            latest: RwLock::new(Arc::new(params)),
            version: AtomicU64::new(version),
        }
    }

    pub fn latest(&self) -> Arc<PolicyParams> {
        Arc::clone(&self.latest.read().expect("snapshot lock"))
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    pub fn publish(&self, params: PolicyParams) -> Result<()> {
        let v = params.version();
        let mut slot = self.latest.write().expect("snapshot lock");
        if v <= slot.version() {
            return Err(Error::usage(format!(
                "published version {v} does not exceed {}",
                slot.version()
            )));
        }
        *slot = Arc::new(params);
        self.version.store(v, Ordering::Release);
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub log: MetricsLog,
    pub params: PolicyParams,
    /// Teacher trajectories used by the run, when the algorithm needs them.
    pub store: Option<TeacherTrajectoryStore>,
    pub warnings: Vec<String>,
    /// Consumed entries whose staleness exceeded `delta_max`. Always zero
    /// unless the replay filter is broken.
    pub staleness_violations: u64,
}

/// Runs `schedule.total_steps` learner steps.
///
/// Algorithms that replay teacher trajectories use `store` when given and
/// otherwise collect one with pass@`pass_m` sampling.
pub fn run_training(
    config: &RunConfig,
    store: Option<TeacherTrajectoryStore>,
    config_hash: &str,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let env = Env::new(config.env.clone())?;
    let teacher = TeacherPolicy::new(env.clone(), config.teacher)?;
    let mut warnings = Vec::new();

    let store = if config.algo.needs_store() {
        let store = match store {
            Some(s) => s,
            None => collect_teacher_trajectories(
                &env,
                &teacher,
                config.pass_m,
                config.collect_temperature,
                mix_seed(config.seed, &[STREAM_COLLECT]),
            )?,
        };
        store.require_non_empty()?;
        if !store.missing.is_empty() {
            warnings.push(format!(
                "{} task(s) without a teacher trajectory are excluded: {:?}",
                store.missing.len(),
                store.missing
            ));
        }
        if config.algo == Algo::B2f {
            let needed = config.schedule.step_reaching(store.max_len());
            if needed > config.schedule.total_steps {
                warnings.push(format!(
                    "total_steps {} is too small for the teacher prefix to vanish (needs {needed})",
                    config.schedule.total_steps
                ));
            }
        }
        Some(store)
    } else {
        None
    };

    let ctx = Context {
        config,
        env: &env,
        teacher: &teacher,
        store: store.as_ref(),
    };
    let mut log = MetricsLog::new(config_hash);
    let (params, violations) = match (config.algo, config.mode) {
        (Algo::Sft, _) => (ctx.run_sft(&mut log)?, 0),
        (_, Mode::Sync) => ctx.run_sync(&mut log)?,
        (_, Mode::Async) => ctx.run_async(&mut log)?,
    };
    if violations > 0 {
        return Err(Error::usage(format!(
            "{violations} consumed entries exceeded the staleness bound"
        )));
    }
    Ok(TrainingOutcome {
        log,
        params,
        store,
        warnings,
        staleness_violations: violations,
    })
}

struct Context<'a> {
    config: &'a RunConfig,
    env: &'a Env,
    teacher: &'a TeacherPolicy,
    store: Option<&'a TeacherTrajectoryStore>,
}

impl Context<'_> {
    fn longest(&self) -> usize {
        self.store.map_or(self.env.horizon_cap(), |s| s.max_len())
    }

    fn task_pool(&self) -> Vec<usize> {
        match (self.config.algo, self.store) {
            (Algo::B2f, Some(store)) => store.task_ids(),
            _ => (0..self.env.config().task_count).collect(),
        }
    }

    /// One training rollout. The task is the first draw of `rng`.
    fn rollout<R: Rng>(&self, params: &PolicyParams, pool: &[usize], rng: &mut R) -> Result<Trajectory> {
        let task = pool[rng.random_range(0..pool.len())];
        let temp = self.config.train_temperature;
        let k = self.config.horizon_for_version(params.version(), self.longest());
        match self.config.algo {
            Algo::Opd => rollout_opd(self.env, params, self.teacher, task, temp, rng),
            Algo::F2b => rollout_f2b(self.env, params, self.teacher, task, k, temp, rng),
            Algo::B2f => {
                let store = self.store.expect("store checked at startup");
                let len = store.get(task).map_or(0, |t| t.len);
                let k = self.config.schedule.horizon_capped(params.version() as usize + 1, len);
                rollout_b2f(self.env, store, params, self.teacher, task, k, temp, rng)
            }
            Algo::Sft => unreachable!("SFT does not roll out"),
        }
    }

    fn active_k(&self, step: usize) -> usize {
        self.config.horizon_for_version(step as u64 - 1, self.longest())
    }

    fn maybe_eval(&self, log: &mut MetricsLog, params: &PolicyParams, step: usize) {
        let n = self.config.schedule.total_steps;
        if step.is_multiple_of(self.config.eval_every) || step == n {
            let mut record = evaluate_with(
                self.config.execution,
                params,
                self.env,
                self.teacher,
                self.config.eval_episodes,
                self.config.eval_temperature,
                mix_seed(self.config.seed, &[STREAM_EVAL, step as u64]),
            );
            record.step = step;
            record.active_k = self.active_k(step);
            debug_assert_eq!(record.max_prefix_len, 0);
            log.push(Record::Eval(record));
        }
    }

    fn run_sync(&self, log: &mut MetricsLog) -> Result<(PolicyParams, u64)> {
        let cfg = self.config;
        let pool = self.task_pool();
        let mut params = PolicyParams::uniform(self.env.num_actions(), cfg.window);
        let mut ring = RingBuffer::new(cfg.buffer_capacity);
        let mut traj_counter = 0u64;
        let mut violations = 0;
        // Rollouts finished by the actors but not yet handed to the learner.
        let mut queued: VecDeque<Trajectory> = VecDeque::new();
        for step in 1..=cfg.schedule.total_steps {
            let mut produced = 0;
            let mut trajectories = Vec::new();
            // Each refill runs one rollout per actor against the current
            // snapshot. The learner takes finished rollouts in order until the
            // batch is covered; the rest wait for the next step, one version
            // staler, as they would with free-running actors.
            while produced < cfg.batch_size {
                if queued.is_empty() {
                    let base = traj_counter + trajectories.len() as u64;
                    let chunk = map_indices_with(cfg.execution, cfg.actor_count, |a| {
                        let mut rng = stream(cfg.seed, &[STREAM_ROLLOUT, base + a as u64]);
                        self.rollout(&params, &pool, &mut rng)
                    });
                    for traj in chunk {
                        queued.push_back(traj?);
                    }
                    if base > 10_000_000 {
                        return Err(Error::usage("actors produce no student turns"));
                    }
                }
                let traj = queued.pop_front().expect("refilled above");
                let entries = decompose(&traj, traj_counter + trajectories.len() as u64);
                produced += entries.len();
                ring.push(entries);
                trajectories.push(traj);
            }
            traj_counter += trajectories.len() as u64;
            let active_k = self.active_k(step);
            log.push(Record::Eval(EvalRecord::from_trajectories(
                step,
                Split::Rollout,
                active_k,
                &trajectories,
            )));
            let mut rng = stream(cfg.seed, &[STREAM_SAMPLE, step as u64]);
            let version = params.version();
            let histogram = ring.staleness_histogram(version);
            let (batch, stats) = ring.sample_batch(version, cfg.delta_max, cfg.batch_size, &mut rng);
            violations += count_violations(&batch, version, cfg.delta_max);
            let learn = learner_step(&mut params, &batch, cfg.lr)?;
            log.push(Record::Train(TrainRecord {
                step,
                loss: sig9(learn.loss),
                grad_norm: sig9(learn.grad_norm),
                buffer_size: ring.len(),
                discarded_stale: ring.discarded_stale(),
                active_k,
                mean_staleness: sig9(stats.mean_staleness),
                max_staleness: stats.max_staleness,
                batch_len: batch.len(),
                staleness_histogram: histogram,
            }));
            self.maybe_eval(log, &params, step);
        }
        Ok((params, violations))
    }

    fn run_async(&self, log: &mut MetricsLog) -> Result<(PolicyParams, u64)> {
        let cfg = self.config;
        let pool = self.task_pool();
        let mut params = PolicyParams::uniform(self.env.num_actions(), cfg.window);
        let board = SnapshotBoard::new(params.clone());
        let inbox = SharedInbox::new(cfg.buffer_capacity);
        let stop = AtomicBool::new(false);
        let pending = AtomicU64::new(0);
        let traj_ids = AtomicU64::new(0);
        let (traj_tx, traj_rx) = crossbeam::channel::unbounded::<Trajectory>();
        // Actors stop producing once this many entries wait for the learner.
        let backlog = (4 * cfg.batch_size) as u64;

        let result = thread::scope(|scope| -> Result<(PolicyParams, u64)> {
            let mut handles = Vec::new();
            for actor in 0..cfg.actor_count {
                let (board, inbox, stop, pending, traj_ids, pool) =
                    (&board, &inbox, &stop, &pending, &traj_ids, &pool);
                let tx = traj_tx.clone();
                handles.push(scope.spawn(move || -> Result<()> {
                    let mut counter = 0u64;
                    while !stop.load(Ordering::Acquire) {
                        if pending.load(Ordering::Acquire) >= backlog {
                            thread::sleep(Duration::from_micros(50));
                            continue;
                        }
                        let snapshot = board.latest();
                        let mut rng = stream(cfg.seed, &[STREAM_ACTOR, actor as u64, counter]);
                        counter += 1;
                        let traj = self.rollout(&snapshot, pool, &mut rng)?;
                        let id = traj_ids.fetch_add(1, Ordering::Relaxed);
                        let entries = decompose(&traj, id);
                        pending.fetch_add(entries.len() as u64, Ordering::AcqRel);
                        inbox.push(entries);
                        if tx.send(traj).is_err() {
                            break;
                        }
                    }
                    Ok(())
                }));
            }
            drop(traj_tx);

            let mut learner = || -> Result<(PolicyParams, u64)> {
                let mut ring = RingBuffer::new(cfg.buffer_capacity);
                let mut violations = 0;
                let mut trajectories: Vec<Trajectory> = Vec::new();
                for step in 1..=cfg.schedule.total_steps {
                    let mut fresh = 0;
                    while fresh < cfg.batch_size {
                        let moved = inbox.drain_into(&mut ring);
                        if moved == 0 {
                            if handles.iter().all(|h| h.is_finished()) {
                                return Err(Error::usage("all actors exited"));
                            }
                            thread::sleep(Duration::from_micros(20));
                            continue;
                        }
                        pending.fetch_sub(moved as u64, Ordering::AcqRel);
                        fresh += moved;
                    }
                    trajectories.extend(traj_rx.try_iter());
                    let active_k = self.active_k(step);
                    log.push(Record::Eval(EvalRecord::from_trajectories(
                        step,
                        Split::Rollout,
                        active_k,
                        &trajectories,
                    )));
                    trajectories.clear();
                    let version = params.version();
                    let histogram = ring.staleness_histogram(version);
                    let mut rng = stream(cfg.seed, &[STREAM_SAMPLE, step as u64]);
                    let (batch, stats) =
                        ring.sample_batch(version, cfg.delta_max, cfg.batch_size, &mut rng);
                    violations += count_violations(&batch, version, cfg.delta_max);
                    if batch.is_empty() {
                        return Err(Error::usage("no fresh entries to learn from"));
                    }
                    let learn = learner_step(&mut params, &batch, cfg.lr)?;
                    board.publish(params.clone())?;
                    log.push(Record::Train(TrainRecord {
                        step,
                        loss: sig9(learn.loss),
                        grad_norm: sig9(learn.grad_norm),
                        buffer_size: ring.len(),
                        discarded_stale: ring.discarded_stale(),
                        active_k,
                        mean_staleness: sig9(stats.mean_staleness),
                        max_staleness: stats.max_staleness,
                        batch_len: batch.len(),
                        staleness_histogram: histogram,
                    }));
                    self.maybe_eval(log, &params, step);
                }
                Ok((params.clone(), violations))
            };
            let out = learner();
            stop.store(true, Ordering::Release);
            drop(traj_rx);
            for h in handles {
                h.join().expect("actor thread panicked")?;
            }
            out
        });
        result
    }

    fn run_sft(&self, log: &mut MetricsLog) -> Result<PolicyParams> {
        let store = self.store.expect("store checked at startup");
        let mut params = PolicyParams::uniform(self.env.num_actions(), self.config.window);
        for step in 1..=self.config.schedule.total_steps {
            let loss = sft_loss(store, self.env, &params)?;
            let before = params.clone();
            params = sft_update(store, self.env, &params, self.config.lr)?;
            let grad_norm = before
                .table()
                .keys()
                .chain(params.table().keys())
                .map(|k| {
                    before
                        .logits(k)
                        .iter()
                        .zip(params.logits(k))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
                / self.config.lr;
            log.push(Record::Train(TrainRecord {
                step,
                loss: sig9(loss),
                grad_norm: sig9(grad_norm),
                buffer_size: 0,
                discarded_stale: 0,
                active_k: self.env.horizon_cap(),
                mean_staleness: 0.0,
                max_staleness: 0,
                batch_len: store.iter().map(|t| t.len).sum(),
                staleness_histogram: Vec::new(),
            }));
            self.maybe_eval(log, &params, step);
        }
        Ok(params)
    }
}

fn count_violations(batch: &[ExperienceEntry], version: u64, delta_max: u64) -> u64 {
    batch
        .iter()
        .filter(|e| e.staleness(version) > delta_max)
        .count() as u64
}

/// Mean NLL of the stored teacher actions under `params`.
fn sft_loss(store: &TeacherTrajectoryStore, env: &Env, params: &PolicyParams) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in store.iter() {
        let (mut state, o0) = env.reset(traj.task_id)?;
        let mut history = History::new(o0.token_id);
        for &a in &traj.actions {
            let g = nll_logit_gradient(params.logits(&params.key_for(&history)), a);
            // g[a] = p[a] - 1
            total -= (g[a.index()] + 1.0).max(1e-300).ln();
            count += 1;
            let r = env.step(&mut state, a)?;
            history.push(a, r.observation.token_id);
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Plays one full-horizon episode with no prefix and no truncation,
/// recording the teacher/policy KL at temperature 1 on every visited
/// history while acting at `temperature`.
pub fn eval_episode<P: Policy + ?Sized, R: Rng>(
    policy: &P,
    env: &Env,
    teacher: &TeacherPolicy,
    task_id: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let (mut state, o0) = env.reset(task_id)?;
    let mut history = History::new(o0.token_id);
    let mut turns = Vec::new();
    while !state.is_done() {
        let q = policy.action_dist(&history, &state, 1.0);
        let p = teacher.dist_at(&state);
        let acting = if temperature == 1.0 {
            q.clone()
        } else {
            policy.action_dist(&history, &state, temperature)
        };
        let action = sample_action(&acting, rng);
        let turn_kl = forward_kl(&p, &q)?;
        let turn_index = history.turn();
        let key = history.key(None);
        let r = env.step(&mut state, action)?;
        history.push(action, r.observation.token_id);
        turns.push(TurnRecord {
            history_key: key,
            action,
            student_dist: Some(q),
            teacher_dist: Some(p),
            turn_index,
            executed_by: ExecutedBy::Student,
            turn_kl,
        });
    }
    Ok(Trajectory {
        task_id,
        rounds: turns.len(),
        turns,
        success: state.is_success(),
        policy_version: 0,
        algo: TrajectoryAlgo::Opd,
    })
}

/// End-to-end evaluation: `episodes` episodes cycling through the tasks,
/// episode `i` seeded from `(seed, i)`.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    env: &Env,
    teacher: &TeacherPolicy,
    episodes: usize,
    temperature: f64,
    seed: u64,
) -> EvalRecord {
    evaluate_with(Execution::default(), policy, env, teacher, episodes, temperature, seed)
}

pub fn evaluate_with<P: Policy + ?Sized>(
    exec: Execution,
    policy: &P,
    env: &Env,
    teacher: &TeacherPolicy,
    episodes: usize,
    temperature: f64,
    seed: u64,
) -> EvalRecord {
    let tasks = env.config().task_count;
    let trajectories: Vec<Trajectory> = map_indices_with(exec, episodes, |i| {
        let mut rng = stream(seed, &[i as u64]);
        eval_episode(policy, env, teacher, i % tasks, temperature, &mut rng)
            .expect("evaluation uses valid tasks")
    });
    EvalRecord::from_trajectories(0, Split::Eval, env.horizon_cap(), &trajectories)
}
