//! Sub-trajectory experience replay with version-based staleness filtering.
//!
//! Every student turn of a finished trajectory becomes one self-contained
//! entry: the history key of its prefix plus both distributions, tagged with
//! the policy version that produced it. The learner samples only entries
//! whose version is within `delta_max` of its own and drops the rest.
//!
//! Producers in the asynchronous runtime append through [`SharedInbox`], a
//! bounded lock-free queue that evicts its oldest entry when full; the
//! learner drains it into its private [`RingBuffer`]. Synchronous runs push
//! straight into the ring.

use std::collections::VecDeque;

use crossbeam::queue::ArrayQueue;
use rand::seq::index::sample;
use rand::Rng;

use crate::distill::{ExecutedBy, Trajectory};
use crate::env::Action;
use crate::policy::{CategoricalDistribution, HistoryKey};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceEntry {
    pub history_key: HistoryKey,
    pub teacher_dist: CategoricalDistribution,
    pub student_dist_at_collection: CategoricalDistribution,
    pub action: Action,
    pub policy_version: u64,
    pub traj_id: u64,
    pub turn_index: usize,
}

impl ExperienceEntry {
    pub fn staleness(&self, current_version: u64) -> u64 {
        current_version.saturating_sub(self.policy_version)
    }
}

/// One entry per student-executed turn, in turn order.
pub fn decompose(traj: &Trajectory, traj_id: u64) -> Vec<ExperienceEntry> {
    traj.turns
        .iter()
        .filter(|t| t.executed_by == ExecutedBy::Student)
        .filter_map(|t| {
            Some(ExperienceEntry {
                history_key: t.history_key.clone(),
                teacher_dist: t.teacher_dist.clone()?,
                student_dist_at_collection: t.student_dist.clone()?,
                action: t.action,
                policy_version: traj.policy_version,
                traj_id,
                turn_index: t.turn_index,
            })
        })
        .collect()
}

/// Bounded FIFO store; the oldest entries are overwritten first.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    capacity: usize,
    entries: VecDeque<ExperienceEntry>,
    pushed_total: u64,
    evicted_total: u64,
    discarded_stale: u64,
}

/// What a call to [`RingBuffer::sample_batch`] saw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub discarded: u64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        RingBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            pushed_total: 0,
            evicted_total: 0,
            discarded_stale: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pushed_total(&self) -> u64 {
        self.pushed_total
    }

    pub fn evicted_total(&self) -> u64 {
        self.evicted_total
    }

    /// Cumulative number of entries dropped for staleness.
    pub fn discarded_stale(&self) -> u64 {
        self.discarded_stale
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperienceEntry> {
        self.entries.iter()
    }

    pub fn push_one(&mut self, entry: ExperienceEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
            self.evicted_total += 1;
        }
        self.entries.push_back(entry);
        self.pushed_total += 1;
    }

    pub fn push<I: IntoIterator<Item = ExperienceEntry>>(&mut self, entries: I) {
        for e in entries {
            self.push_one(e);
        }
    }

    /// Removes entries with `current_version - version > delta_max`, then
    /// draws up to `batch_size` of the survivors uniformly without
    /// replacement. Returned entries stay in the buffer.
    pub fn sample_batch<R: Rng + ?Sized>(
        &mut self,
        current_version: u64,
        delta_max: u64,
        batch_size: usize,
        rng: &mut R,
    ) -> (Vec<ExperienceEntry>, SampleStats) {
        let before = self.entries.len();
        self.entries
            .retain(|e| e.staleness(current_version) <= delta_max);
        let discarded = (before - self.entries.len()) as u64;
        self.discarded_stale += discarded;

        let n = batch_size.min(self.entries.len());
        let mut picked: Vec<usize> = sample(rng, self.entries.len(), n).into_vec();
        picked.sort_unstable();
        let batch: Vec<ExperienceEntry> = picked.iter().map(|&i| self.entries[i].clone()).collect();
        debug_assert!(batch
            .iter()
            .all(|e| e.staleness(current_version) <= delta_max));
        let (sum, max) = batch.iter().fold((0u64, 0u64), |(s, m), e| {
            let st = e.staleness(current_version);
            (s + st, m.max(st))
        });
        let stats = SampleStats {
            discarded,
            mean_staleness: if batch.is_empty() {
                0.0
            } else {
                sum as f64 / batch.len() as f64
            },
            max_staleness: max,
        };
        (batch, stats)
    }

    /// Counts of entries by staleness, index = `current_version - version`.
    pub fn staleness_histogram(&self, current_version: u64) -> Vec<u64> {
        let mut hist = Vec::new();
        for e in &self.entries {
            let s = e.staleness(current_version) as usize;
            if hist.len() <= s {
                hist.resize(s + 1, 0);
            }
            hist[s] += 1;
        }
        hist
    }
}

/// Multi-producer append path for the asynchronous runtime.
pub struct SharedInbox {
    queue: ArrayQueue<ExperienceEntry>,
}

impl SharedInbox {
    pub fn new(capacity: usize) -> Self {
        SharedInbox {
            queue: ArrayQueue::new(capacity),
        }
    }

    /// Lock-free append; overwrites the oldest queued entry when full.
    pub fn push<I: IntoIterator<Item = ExperienceEntry>>(&self, entries: I) {
        for e in entries {
            let _ = self.queue.force_push(e);
        }
    }

    /// Moves everything queued so far into `ring`, in arrival order.
    pub fn drain_into(&self, ring: &mut RingBuffer) -> usize {
        let mut moved = 0;
        while let Some(e) = self.queue.pop() {
            ring.push_one(e);
            moved += 1;
        }
        moved
    }
}
