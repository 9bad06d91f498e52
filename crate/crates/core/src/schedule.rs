//! Stage ordering for interleaved and blocked training, and the
//! predecessor relation that drives the proximal chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (round, learner) slot. Both indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageId {
    pub round: usize,
    pub learner: usize,
}

impl StageId {
    /// Log token, e.g. `2.1` for round 2, learner 1.
    pub fn token(&self) -> String {
        format!("{}.{}", self.round, self.learner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    Interleaved,
    Blocked,
}

/// Ordered stage sequence. The proximal predecessor of a stage is simply
/// the previous stage in the sequence, for either policy; only the very
/// first stage has none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    stages: Vec<StageId>,
    policy: SchedulePolicy,
}

fn check_order(learners: usize, rounds: usize, task_order: &[usize]) -> Result<()> {
    if learners == 0 || rounds == 0 {
        return Err(Error::InvalidSchedule(format!(
            "need positive learners and rounds, got K={learners}, M={rounds}"
        )));
    }
    let mut seen = vec![false; learners + 1];
    if task_order.len() != learners {
        return Err(Error::InvalidSchedule(format!(
            "task order has {} entries for {learners} learners",
            task_order.len()
        )));
    }
    for &k in task_order {
        if k == 0 || k > learners || seen[k] {
            return Err(Error::InvalidSchedule(format!(
                "task order {task_order:?} is not a permutation of 1..={learners}"
            )));
        }
        seen[k] = true;
    }
    Ok(())
}

/// Interleaved order: all learners once per round, in `task_order`,
/// repeated for every round.
pub fn build_interleaved(
    learners: usize,
    rounds: usize,
    task_order: &[usize],
) -> Result<Schedule> {
    check_order(learners, rounds, task_order)?;
    let mut stages = Vec::with_capacity(learners * rounds);
    for m in 1..=rounds {
        for &k in task_order {
            stages.push(StageId { round: m, learner: k });
        }
    }
    Ok(Schedule {
        stages,
        policy: SchedulePolicy::Interleaved,
    })
}

/// Blocked order: every round of one learner before the next learner
/// starts, learners taken in `task_order`.
pub fn build_blocked(learners: usize, rounds: usize, task_order: &[usize]) -> Result<Schedule> {
    check_order(learners, rounds, task_order)?;
    let mut stages = Vec::with_capacity(learners * rounds);
    for &k in task_order {
        for m in 1..=rounds {
            stages.push(StageId { round: m, learner: k });
        }
    }
    Ok(Schedule {
        stages,
        policy: SchedulePolicy::Blocked,
    })
}

impl Schedule {
    pub fn stages(&self) -> &[StageId] {
        &self.stages
    }

    pub fn policy(&self) -> SchedulePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// The stage immediately before `s`; `None` for the first stage,
    /// which has no proximal reference.
    pub fn predecessor(&self, s: StageId) -> Result<Option<StageId>> {
        match self.stages.iter().position(|&t| t == s) {
            Some(0) => Ok(None),
            Some(i) => Ok(Some(self.stages[i - 1])),
            None => Err(Error::InvalidSchedule(format!(
                "stage {} not in schedule",
                s.token()
            ))),
        }
    }

    /// Render as log tokens, e.g. `1.1 1.2 2.1 2.2`.
    pub fn render(&self) -> String {
        self.stages
            .iter()
            .map(StageId::token)
            .collect::<Vec<_>>()
            .join(" ")
    }
}
