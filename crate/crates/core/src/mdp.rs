//! Tabular multi-task MDPs over grid maps.
//!
//! A [`TabularMdp`] bundles a family of tasks that share states and actions
//! but differ in which state is terminal. Transitions are stored as explicit
//! outcome lists per `(task, state, action)`, so stochastic environments and
//! hand-built fixtures use the same representation as grid worlds.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, GridSpec};
use crate::sample;

pub type StateId = usize;
pub type ActionId = usize;
pub type TaskId = usize;

/// Movement deltas for the four grid actions, indexed by [`ActionId`]:
/// 0 = up, 1 = down, 2 = left, 3 = right (row, column offsets).
pub const GRID_DELTAS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Which family of goal cells defines the task set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// One task per `G` cell.
    TrainTasks,
    /// One task per `B` cell.
    TestTasks,
}

impl TaskMode {
    pub fn goal_cell(self) -> Cell {
        match self {
            TaskMode::TrainTasks => Cell::TrainGoal,
            TaskMode::TestTasks => Cell::TestGoal,
        }
    }
}

/// One possible result of taking an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next: StateId,
    pub reward: f64,
    pub prob: f64,
}

/// Result of a sampled environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateId,
    pub reward: f64,
    /// True when `next_state` is terminal for the current task.
    pub terminated: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("grid has no goal cells for {mode:?}")]
    NoGoalsForMode { mode: TaskMode },
    #[error("{kind} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid probability distribution: {context}")]
    InvalidDistribution { context: String },
}

/// A finite family of tasks over shared states and actions.
///
/// Transition lists are flat-indexed by `(task * num_states + state) *
/// num_actions + action`; terminal flags by `task * num_states + state`.
/// The initial-state distribution is shared across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub task_count: usize,
    pub transition: Vec<Vec<Outcome>>,
    pub terminal: Vec<bool>,
    pub initial_dist: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    #[inline]
    pub fn is_terminal(&self, task: TaskId, state: StateId) -> bool {
        self.terminal[task * self.num_states + state]
    }

    #[inline]
    pub fn outcomes(&self, task: TaskId, state: StateId, action: ActionId) -> &[Outcome] {
        &self.transition[(task * self.num_states + state) * self.num_actions + action]
    }

    /// Sample an environment transition.
    ///
    /// Deterministic transitions (a single outcome) consume no randomness;
    /// stochastic ones consume one draw.
    pub fn step<R: Rng>(
        &self,
        rng: &mut R,
        task: TaskId,
        state: StateId,
        action: ActionId,
    ) -> Result<StepOutcome, MdpError> {
        self.check_index("task", task, self.task_count)?;
        self.check_index("state", state, self.num_states)?;
        self.check_index("action", action, self.num_actions)?;
        let outcomes = self.outcomes(task, state, action);
        let chosen = if outcomes.len() == 1 {
            &outcomes[0]
        } else {
            let mut probs_buf = [0.0f64; 8];
            let chosen_idx = if outcomes.len() <= probs_buf.len() {
                for (slot, o) in probs_buf.iter_mut().zip(outcomes) {
                    *slot = o.prob;
                }
                sample::categorical(rng, &probs_buf[..outcomes.len()])
            } else {
                let probs: Vec<f64> = outcomes.iter().map(|o| o.prob).collect();
                sample::categorical(rng, &probs)
            };
            &outcomes[chosen_idx]
        };
        Ok(StepOutcome {
            next_state: chosen.next,
            reward: chosen.reward,
            terminated: self.is_terminal(task, chosen.next),
        })
    }

    /// Sample a start state from the shared initial distribution (one draw).
    pub fn sample_initial<R: Rng>(&self, rng: &mut R) -> StateId {
        sample::categorical(rng, &self.initial_dist)
    }

    /// Sample a task uniformly (one draw).
    pub fn sample_task<R: Rng>(&self, rng: &mut R) -> TaskId {
        sample::uniform_index(rng, self.task_count)
    }

    fn check_index(&self, kind: &'static str, index: usize, bound: usize) -> Result<(), MdpError> {
        if index >= bound {
            Err(MdpError::IndexOutOfRange { kind, index, bound })
        } else {
            Ok(())
        }
    }

    /// Check structural invariants: outcome lists normalized and in range,
    /// terminal states self-looping with zero reward, initial distribution
    /// normalized.
    pub fn validate(&self) -> Result<(), MdpError> {
        let expected = self.task_count * self.num_states * self.num_actions;
        if self.transition.len() != expected {
            return Err(MdpError::IndexOutOfRange {
                kind: "transition table",
                index: self.transition.len(),
                bound: expected,
            });
        }
        for n in 0..self.task_count {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let outcomes = self.outcomes(n, s, a);
                    let mut total = 0.0;
                    for o in outcomes {
                        if o.next >= self.num_states {
                            return Err(MdpError::IndexOutOfRange {
                                kind: "outcome state",
                                index: o.next,
                                bound: self.num_states,
                            });
                        }
                        if o.prob < 0.0 {
                            return Err(MdpError::InvalidDistribution {
                                context: format!("negative probability at task {n} state {s} action {a}"),
                            });
                        }
                        total += o.prob;
                    }
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(MdpError::InvalidDistribution {
                            context: format!(
                                "outcomes at task {n} state {s} action {a} sum to {total}"
                            ),
                        });
                    }
                    if self.is_terminal(n, s) {
                        let ok = outcomes.len() == 1
                            && outcomes[0].next == s
                            && outcomes[0].reward == 0.0;
                        if !ok {
                            return Err(MdpError::InvalidDistribution {
                                context: format!(
                                    "terminal state {s} of task {n} must self-loop with zero reward"
                                ),
                            });
                        }
                    }
                }
            }
        }
        if self.initial_dist.len() != self.num_states {
            return Err(MdpError::InvalidDistribution {
                context: format!(
                    "initial distribution has {} entries for {} states",
                    self.initial_dist.len(),
                    self.num_states
                ),
            });
        }
        let total: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(MdpError::InvalidDistribution {
                context: format!("initial distribution sums to {total}"),
            });
        }
        Ok(())
    }
}

/// Build the multi-task grid MDP for one goal family.
///
/// Actions move one cell (up/down/left/right); moves into walls leave the
/// state unchanged. Every step costs -1 reward, including the step that
/// reaches the goal. Each goal cell defines one task in which that cell is
/// terminal (absorbing, zero reward). Episodes start uniformly over all
/// open cells.
pub fn build_mdp(grid: &GridSpec, mode: TaskMode, gamma: f64) -> Result<TabularMdp, MdpError> {
    let goals = grid.states_of_kind(mode.goal_cell());
    if goals.is_empty() {
        return Err(MdpError::NoGoalsForMode { mode });
    }
    let num_states = grid.num_states();
    let num_actions = GRID_DELTAS.len();

    // Task-independent movement: where each action lands from each state.
    let mut moves = vec![0 as StateId; num_states * num_actions];
    for s in 0..num_states {
        let (r, c) = grid.coords_of(s);
        for (a, (dr, dc)) in GRID_DELTAS.iter().enumerate() {
            let nr = (r as isize + dr) as usize;
            let nc = (c as isize + dc) as usize;
            moves[s * num_actions + a] = grid.state_at(nr, nc).unwrap_or(s);
        }
    }

    let task_count = goals.len();
    let mut transition = Vec::with_capacity(task_count * num_states * num_actions);
    let mut terminal = vec![false; task_count * num_states];
    for (n, &goal) in goals.iter().enumerate() {
        terminal[n * num_states + goal] = true;
        for s in 0..num_states {
            for a in 0..num_actions {
                let outcome = if s == goal {
                    Outcome { next: s, reward: 0.0, prob: 1.0 }
                } else {
                    Outcome {
                        next: moves[s * num_actions + a],
                        reward: -1.0,
                        prob: 1.0,
                    }
                };
                transition.push(vec![outcome]);
            }
        }
    }

    let p = 1.0 / num_states as f64;
    Ok(TabularMdp {
        num_states,
        num_actions,
        task_count,
        transition,
        terminal,
        initial_dist: vec![p; num_states],
        gamma,
    })
}
