//! Seedable multi-turn toy environments.
//!
//! Both environments walk a task-specific chain of `chain_length` correct
//! actions. A wrong action while on the chain knocks the agent off-support:
//! it must then play the task's recovery action `off_support_depth` times in
//! a row before the chain resumes, and every further wrong action adds one
//! more required recovery. The observation stream only reports whether the
//! last action advanced, stalled or reached the goal, so an agent has to
//! reason over its own history to know where it stands.
//!
//! `MemoryLock` replaces the final chain action by a key symbol that is only
//! revealed in the very first observation.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TeacherPolicy;
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    CompoundingChain,
    MemoryLock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Maximum number of turns per episode.
    pub horizon_cap: usize,
    pub num_actions: usize,
    /// Number of correct actions separating the start from the goal.
    pub chain_length: usize,
    /// Recovery actions needed after the first mistake.
    pub off_support_depth: usize,
    pub seed: u64,
    pub task_count: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            kind: EnvKind::CompoundingChain,
            horizon_cap: 12,
            num_actions: 6,
            chain_length: 8,
            off_support_depth: 2,
            seed: 0,
            task_count: 32,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_cap == 0 {
            return Err(Error::config("env.horizon_cap must be >= 1"));
        }
        if self.num_actions < 2 {
            return Err(Error::config("env.num_actions must be >= 2"));
        }
        if self.num_actions > u8::MAX as usize {
            return Err(Error::config("env.num_actions must be <= 255"));
        }
        if self.chain_length == 0 {
            return Err(Error::config("env.chain_length must be >= 1"));
        }
        if self.task_count == 0 {
            return Err(Error::config("env.task_count must be >= 1"));
        }
        if self.chain_length > self.horizon_cap {
            return Err(Error::config(format!(
                "env.chain_length ({}) exceeds env.horizon_cap ({}); no task is solvable",
                self.chain_length, self.horizon_cap
            )));
        }
        Ok(())
    }

    /// Number of distinct first-observation tokens.
    pub fn initial_alphabet(&self) -> u32 {
        match self.kind {
            EnvKind::CompoundingChain => self.task_count as u32,
            EnvKind::MemoryLock => (self.task_count * self.num_actions) as u32,
        }
    }

    /// Size of the full observation alphabet.
    pub fn observation_alphabet(&self) -> u32 {
        self.initial_alphabet() + Feedback::COUNT
    }
}

/// Feedback emitted after every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    Advanced,
    Stalled,
    Goal,
}

impl Feedback {
    const COUNT: u32 = 3;

    fn offset(self) -> u32 {
        match self {
            Feedback::Advanced => 0,
            Feedback::Stalled => 1,
            Feedback::Goal => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub token_id: u32,
    /// Diagnostic only. Never part of a history key.
    pub on_support: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub u8);

impl Action {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepResult {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    task_id: usize,
    position: usize,
    error_depth: usize,
    turn: usize,
    done: bool,
    success: bool,
}

impl EnvState {
    pub fn task_id(&self) -> usize {
        self.task_id
    }
    pub fn position(&self) -> usize {
        self.position
    }
    pub fn error_depth(&self) -> usize {
        self.error_depth
    }
    pub fn turn(&self) -> usize {
        self.turn
    }
    pub fn is_done(&self) -> bool {
        self.done
    }
    pub fn is_success(&self) -> bool {
        self.success
    }
    pub fn on_support(&self) -> bool {
        self.error_depth == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TaskLayout {
    chain: Vec<u8>,
    recovery: u8,
    /// Lock symbol, `MemoryLock` only. Equal to the last chain action.
    key: Option<u8>,
}

/// An environment family instantiated from an [`EnvConfig`].
///
/// Task layouts are derived from `(seed, task_id)` with ChaCha8, so they are
/// identical on every platform.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    tasks: Vec<TaskLayout>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let tasks = (0..config.task_count)
            .map(|task_id| build_task(&config, task_id))
            .collect();
        let env = Env { config, tasks };
        // Exhaustive reachability check over (position, error depth).
        for task_id in 0..env.config.task_count {
            if env.shortest_solution(task_id).is_none() {
                return Err(Error::config(format!(
                    "task {task_id} has no successful action sequence within the horizon"
                )));
            }
        }
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions
    }

    pub fn horizon_cap(&self) -> usize {
        self.config.horizon_cap
    }

    pub fn reset(&self, task_id: usize) -> Result<(EnvState, Observation)> {
        if task_id >= self.config.task_count {
            return Err(Error::config(format!(
                "task_id {task_id} out of range (task_count = {})",
                self.config.task_count
            )));
        }
        let state = EnvState {
            task_id,
            position: 0,
            error_depth: 0,
            turn: 0,
            done: false,
            success: false,
        };
        let token_id = match self.config.kind {
            EnvKind::CompoundingChain => task_id as u32,
            EnvKind::MemoryLock => {
                let key = self.tasks[task_id].key.expect("memory lock key") as usize;
                (key * self.config.task_count + task_id) as u32
            }
        };
        Ok((
            state,
            Observation {
                token_id,
                on_support: true,
            },
        ))
    }

    pub fn step(&self, state: &mut EnvState, action: Action) -> Result<StepResult> {
        if state.done {
            return Err(Error::usage("step called on a terminal state"));
        }
        if action.index() >= self.config.num_actions {
            return Err(Error::usage(format!(
                "action {} out of range (num_actions = {})",
                action.0, self.config.num_actions
            )));
        }
        let task = &self.tasks[state.task_id];
        let feedback = if state.error_depth == 0 {
            if action.0 == task.chain[state.position] {
                state.position += 1;
                if state.position == self.config.chain_length {
                    Feedback::Goal
                } else {
                    Feedback::Advanced
                }
            } else {
                state.error_depth = self.config.off_support_depth.max(1);
                Feedback::Stalled
            }
        } else {
            if action.0 == task.recovery {
                state.error_depth -= 1;
            } else {
                state.error_depth += 1;
            }
            Feedback::Stalled
        };
        state.turn += 1;
        state.success = feedback == Feedback::Goal;
        state.done = state.success || state.turn >= self.config.horizon_cap;
        Ok(StepResult {
            observation: Observation {
                token_id: self.config.initial_alphabet() + feedback.offset(),
                on_support: state.error_depth == 0,
            },
            done: state.done,
            success: state.success,
        })
    }

    /// The action a perfect agent takes in `state`.
    pub fn correct_action(&self, state: &EnvState) -> Action {
        let task = &self.tasks[state.task_id];
        if state.error_depth == 0 {
            Action(task.chain[state.position.min(task.chain.len() - 1)])
        } else {
            Action(task.recovery)
        }
    }

    pub fn optimal_actions(&self, task_id: usize) -> &[u8] {
        &self.tasks[task_id].chain
    }

    pub fn recovery_action(&self, task_id: usize) -> Action {
        Action(self.tasks[task_id].recovery)
    }

    pub fn key_symbol(&self, task_id: usize) -> Option<u8> {
        self.tasks[task_id].key
    }

    /// Decodes the task id from a first observation token.
    pub fn task_of_initial(&self, token_id: u32) -> Option<usize> {
        if token_id >= self.config.initial_alphabet() {
            return None;
        }
        Some(token_id as usize % self.config.task_count)
    }

    /// Breadth-first search for the shortest successful action sequence.
    pub fn shortest_solution(&self, task_id: usize) -> Option<Vec<Action>> {
        let (start, _) = self.reset(task_id).ok()?;
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert((start.position, start.error_depth));
        queue.push_back((start, Vec::new()));
        while let Some((state, path)) = queue.pop_front() {
            for a in 0..self.config.num_actions {
                let mut next = state.clone();
                let action = Action(a as u8);
                let result = self.step(&mut next, action).ok()?;
                let mut next_path = path.clone();
                next_path.push(action);
                if result.success {
                    return Some(next_path);
                }
                if !result.done && seen.insert((next.position, next.error_depth)) {
                    queue.push_back((next, next_path));
                }
            }
        }
        None
    }

    /// Replays `actions` from the start of `task_id`.
    pub fn replay(&self, task_id: usize, actions: &[Action]) -> Result<EnvState> {
        let (mut state, _) = self.reset(task_id)?;
        for &a in actions {
            self.step(&mut state, a)?;
        }
        Ok(state)
    }

    /// Builds the fixed teacher for this environment.
    pub fn make_teacher(
        &self,
        on_support_temperature: f64,
        off_support_floor: f64,
    ) -> Result<TeacherPolicy> {
        TeacherPolicy::new(
            self.clone(),
            crate::policy::TeacherConfig {
                on_support_temperature,
                off_support_floor,
                ..Default::default()
            },
        )
    }
}

fn build_task(config: &EnvConfig, task_id: usize) -> TaskLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[0x7a5c, task_id as u64]));
    let a = config.num_actions as u8;
    let mut chain: Vec<u8> = (0..config.chain_length)
        .map(|_| rng.random_range(0..a))
        .collect();
    let recovery = rng.random_range(0..a);
    let key = match config.kind {
        EnvKind::CompoundingChain => None,
        EnvKind::MemoryLock => {
            let key = rng.random_range(0..a);
            *chain.last_mut().expect("non-empty chain") = key;
            Some(key)
        }
    };
    TaskLayout {
        chain,
        recovery,
        key,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_env() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let env = chain_env();
        let a = env.reset(0).unwrap();
        let b = env.reset(0).unwrap();
        assert_eq!(a, b);
        // A fresh instance from the same config builds the same tasks.
        let other = chain_env();
        assert_eq!(env.optimal_actions(5), other.optimal_actions(5));
    }

    #[test]
    fn reset_rejects_out_of_range_task() {
        let env = chain_env();
        assert!(matches!(env.reset(32), Err(Error::Config(_))));
    }

    #[test]
    fn optimal_path_succeeds() {
        let env = chain_env();
        for task in 0..32 {
            let chain: Vec<Action> = env.optimal_actions(task).iter().map(|&a| Action(a)).collect();
            let (mut s, _) = env.reset(task).unwrap();
            for (i, &a) in chain.iter().enumerate() {
                let r = env.step(&mut s, a).unwrap();
                assert_eq!(r.done, i + 1 == chain.len());
                assert!(r.observation.on_support);
            }
            assert!(s.is_success());
            assert_eq!(s.turn(), 8);
        }
    }

    #[test]
    fn truncation_at_horizon() {
        let env = chain_env();
        let (mut s, _) = env.reset(0).unwrap();
        let wrong = Action((env.optimal_actions(0)[0] + 1) % 6);
        let mut last = None;
        for _ in 0..12 {
            // Keep playing a non-recovery, non-chain action where possible.
            let a = if env.correct_action(&s) == wrong {
                Action((wrong.0 + 1) % 6)
            } else {
                wrong
            };
            last = Some(env.step(&mut s, a).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert!(!last.success);
        assert!(matches!(env.step(&mut s, wrong), Err(Error::Usage(_))));
    }

    #[test]
    fn one_error_costs_the_recovery_depth() {
        // Brute force over every task and every error position: one wrong
        // action followed by the shortest continuation takes exactly
        // chain_length + 1 + off_support_depth turns.
        let env = chain_env();
        for task in 0..32 {
            let chain = env.optimal_actions(task).to_vec();
            for err_at in 0..chain.len() {
                for wrong in (0..6u8).filter(|&w| w != chain[err_at]) {
                    let (mut s, _) = env.reset(task).unwrap();
                    for &a in &chain[..err_at] {
                        env.step(&mut s, Action(a)).unwrap();
                    }
                    env.step(&mut s, Action(wrong)).unwrap();
                    assert_eq!(s.error_depth(), 2);
                    let mut turns = err_at + 1;
                    while !s.is_done() {
                        let a = env.correct_action(&s);
                        env.step(&mut s, a).unwrap();
                        turns += 1;
                    }
                    assert!(s.is_success());
                    assert_eq!(turns, 8 + 1 + 2);
                }
            }
        }
    }

    #[test]
    fn every_task_is_reachable() {
        for kind in [EnvKind::CompoundingChain, EnvKind::MemoryLock] {
            let env = Env::new(EnvConfig {
                kind,
                seed: 7,
                ..Default::default()
            })
            .unwrap();
            for task in 0..32 {
                let path = env.shortest_solution(task).unwrap();
                assert_eq!(path.len(), 8);
            }
        }
    }

    #[test]
    fn memory_lock_first_observation_carries_key() {
        let env = Env::new(EnvConfig {
            kind: EnvKind::MemoryLock,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let (_, o0) = env.reset(3).unwrap();
        let key = env.key_symbol(3).unwrap();
        assert_eq!(o0.token_id as usize, key as usize * 32 + 3);
        assert_eq!(env.task_of_initial(o0.token_id), Some(3));
        assert_eq!(*env.optimal_actions(3).last().unwrap(), key);
        // Golden value for this seed.
        assert_eq!((key, o0.token_id), GOLDEN_LOCK_SEED7_TASK3);
    }

    const GOLDEN_LOCK_SEED7_TASK3: (u8, u32) = (2, 67);

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            EnvConfig {
                num_actions: 1,
                ..Default::default()
            },
            EnvConfig {
                horizon_cap: 0,
                ..Default::default()
            },
            EnvConfig {
                chain_length: 13,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(Env::new(cfg).is_err());
        }
    }
}
