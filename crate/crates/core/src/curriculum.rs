//! Linear temporal pacing shared by the forward and backward curricula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub k_start: usize,
    /// Growth divisor: the horizon grows by one every `eta` learner steps.
    pub eta: usize,
    /// Saturation value: the episode horizon for forward pacing.
    pub cap: usize,
    pub total_steps: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            k_start: 1,
            eta: 2,
            cap: 12,
            total_steps: 400,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.k_start == 0 {
            return Err(Error::config("curriculum.k_start must be >= 1"));
        }
        if self.eta == 0 {
            return Err(Error::config("curriculum.eta must be >= 1"));
        }
        if self.cap < self.k_start {
            return Err(Error::config(format!(
                "curriculum.cap ({}) must be >= curriculum.k_start ({})",
                self.cap, self.k_start
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("curriculum.total_steps must be >= 1"));
        }
        Ok(())
    }

    /// `min(k_start + floor(n / eta), cap)`.
    pub fn horizon_at(&self, n: usize) -> usize {
        horizon_at(self, n)
    }

    /// Like [`horizon_at`] but saturating at `limit` instead of `cap`; the
    /// backward curriculum saturates at each trajectory's own length.
    pub fn horizon_capped(&self, n: usize, limit: usize) -> usize {
        (self.k_start + n / self.eta).min(limit)
    }

    /// First learner step at which the unsaturated horizon reaches `target`.
    pub fn step_reaching(&self, target: usize) -> usize {
        target.saturating_sub(self.k_start) * self.eta
    }
}

pub fn horizon_at(schedule: &CurriculumSchedule, n: usize) -> usize {
    schedule.horizon_capped(n, schedule.cap)
}

/// Number of stored teacher actions replayed before the student takes over
/// a trajectory of length `len` at curriculum horizon `k`.
pub fn b2f_prefix_len(len: usize, k: usize) -> usize {
    len.saturating_sub(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(k_start: usize, eta: usize, cap: usize) -> CurriculumSchedule {
        CurriculumSchedule {
            k_start,
            eta,
            cap,
            total_steps: 1000,
        }
    }

    #[test]
    fn published_pairs() {
        assert_eq!(sched(1, 2, 30).horizon_at(1), 1);
        assert_eq!(sched(1, 2, 30).horizon_at(4), 3);
        assert_eq!(sched(1, 2, 12).horizon_at(100), 12);
    }

    #[test]
    fn prefix_lengths() {
        assert_eq!(b2f_prefix_len(10, 4), 6);
        assert_eq!(b2f_prefix_len(10, 10), 0);
        assert_eq!(b2f_prefix_len(5, 9), 0);
    }

    #[test]
    fn validation() {
        assert!(sched(0, 2, 12).validate().is_err());
        assert!(sched(1, 0, 12).validate().is_err());
        assert!(sched(5, 2, 4).validate().is_err());
        assert!(sched(1, 2, 12).validate().is_ok());
    }

    #[test]
    fn step_reaching_is_first_saturating_step() {
        let s = sched(1, 2, 30);
        for target in 1..20 {
            let n = s.step_reaching(target);
            assert!(s.horizon_at(n) >= target);
            if n > 0 {
                assert!(s.horizon_at(n - 1) < target);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn horizon_monotone_and_bounded(k in 1usize..6, eta in 1usize..8, extra in 0usize..20, n in 0usize..500) {
                let s = sched(k, eta, k + extra);
                prop_assert!(s.horizon_at(n) <= s.horizon_at(n + 1));
                prop_assert!(s.horizon_at(n) <= s.cap);
                prop_assert!(s.horizon_at(n) >= s.k_start);
            }

            #[test]
            fn prefix_monotone_non_increasing(len in 1usize..40, k in 1usize..50) {
                prop_assert!(b2f_prefix_len(len, k + 1) <= b2f_prefix_len(len, k));
                prop_assert!(b2f_prefix_len(len, k) < len);
            }
        }
    }
}
