//! Call-and-return execution of an option set on one task.
//!
//! An episode alternates between decision points — where an initiation set
//! is sampled from the interest functions and an option is chosen ε-greedily
//! from the task's option values — and stretches of option execution, which
//! end when the sampled termination fires. Every decision charges a cost
//! proportional to the number of options considered; [`compound_return`]
//! folds those costs into the return.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{ActionId, MdpError, StateId, TabularMdp, TaskId};
use crate::options::ParamTables;
use crate::sample;

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("initiation set is empty")]
    EmptyInitiationSet,
    #[error("maxSteps must be positive")]
    InvalidMaxSteps,
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// A sampled initiation set: the options available at one decision point,
/// stored as a bitmask over option indices. Always contains the primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitiationSample {
    pub mask: u64,
    pub len: u32,
}

impl InitiationSample {
    pub fn from_mask(mask: u64) -> Self {
        InitiationSample { mask, len: mask.count_ones() }
    }

    #[inline]
    pub fn contains(&self, h: usize) -> bool {
        self.mask >> h & 1 == 1
    }

    /// |Ω|: the number of options the agent considers at this decision.
    #[inline]
    pub fn size(&self) -> usize {
        self.len as usize
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(|&h| self.contains(h))
    }
}

/// Sample Ω at state `s`: each adjustable option joins independently with
/// its interest probability (one draw each, in index order); primitives are
/// always members.
pub fn sample_initiation_set<R: Rng>(
    tables: &ParamTables,
    s: StateId,
    rng: &mut R,
) -> InitiationSample {
    let set = tables.set;
    assert!(set.num_options() <= 64, "option sets are limited to 64 members");
    let mut mask = ((1u64 << set.num_actions) - 1) << set.k;
    for h in 0..set.k {
        let i = crate::options::sigmoid(tables.w_i[tables.sh_index(s, h)]);
        if sample::bernoulli(rng, i) {
            mask |= 1 << h;
        }
    }
    InitiationSample::from_mask(mask)
}

/// ε-greedy meta-policy over an initiation set.
///
/// Returns the distribution over all option indices: 0 outside Ω; maximizers
/// of the option values within Ω share the greedy mass `(1-ε)` and every
/// member receives `ε/|Ω|`.
pub fn meta_policy(
    q_row: &[f64],
    omega: InitiationSample,
    epsilon: f64,
) -> Result<Vec<f64>, ExecError> {
    let mut out = vec![0.0; q_row.len()];
    meta_policy_into(q_row, omega, epsilon, &mut out)?;
    Ok(out)
}

/// Allocation-free form of [`meta_policy`]; `out` must have one entry per
/// option index.
pub fn meta_policy_into(
    q_row: &[f64],
    omega: InitiationSample,
    epsilon: f64,
    out: &mut [f64],
) -> Result<(), ExecError> {
    if omega.size() == 0 {
        return Err(ExecError::EmptyInitiationSet);
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_count = 0usize;
    for h in 0..q_row.len() {
        if !omega.contains(h) {
            continue;
        }
        if q_row[h] > best {
            best = q_row[h];
            best_count = 1;
        } else if q_row[h] == best {
            best_count += 1;
        }
    }
    let explore = epsilon / omega.size() as f64;
    let greedy = (1.0 - epsilon) / best_count as f64;
    for h in 0..q_row.len() {
        out[h] = if omega.contains(h) {
            explore + if q_row[h] == best { greedy } else { 0.0 }
        } else {
            0.0
        };
    }
    Ok(())
}

/// How options are selected during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    /// ε-greedy selection with the given ε.
    Learn,
    /// Greedy selection (ε forced to 0); initiation sets stay stochastic.
    Greedy,
}

/// One environment transition within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub state: StateId,
    /// The initiation set sampled here, if this step began a decision point.
    pub omega: Option<InitiationSample>,
    pub option: usize,
    pub action: ActionId,
    pub reward: f64,
    pub terminated: bool,
}

/// The record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskId,
    pub steps: Vec<TraceStep>,
    /// Discounted return (sum of γ^t rewards).
    pub g: f64,
    /// |Ω| at each decision point, in order.
    pub decision_costs: Vec<u32>,
    /// Σ γ^t |Ω_t| over decision points; equals the plain sum when γ=1.
    pub discounted_decision_cost: f64,
    pub step_limit_exceeded: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Run one call-and-return episode of the option set on task `n`.
///
/// `q_task` is the task's option-value block, row-major `[state][option]`.
/// The start state is sampled from the MDP's initial distribution; an
/// episode that starts on the task's terminal ends immediately with an
/// empty trace. Decision points occur at the start and whenever the sampled
/// termination of the running option fires; `mode` only affects how greedy
/// option selection is.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng>(
    mdp: &TabularMdp,
    task: TaskId,
    tables: &ParamTables,
    q_task: &[f64],
    epsilon: f64,
    mode: ExecMode,
    rng: &mut R,
    max_steps: usize,
) -> Result<EpisodeRecord, ExecError> {
    if max_steps == 0 {
        return Err(ExecError::InvalidMaxSteps);
    }
    let num_options = tables.set.num_options();
    debug_assert_eq!(q_task.len(), mdp.num_states * num_options);
    let eps = match mode {
        ExecMode::Learn => epsilon,
        ExecMode::Greedy => 0.0,
    };

    let mut record = EpisodeRecord {
        task,
        steps: Vec::new(),
        g: 0.0,
        decision_costs: Vec::new(),
        discounted_decision_cost: 0.0,
        step_limit_exceeded: false,
    };

    let mut state = mdp.sample_initial(rng);
    if mdp.is_terminal(task, state) {
        return Ok(record);
    }

    let mut discount = 1.0;
    let mut action_buf = vec![0.0; mdp.num_actions];
    let mut current_option = usize::MAX;

    for _ in 0..max_steps {
        // Decision point: at the start, and after each termination.
        let omega = if current_option == usize::MAX {
            let omega = sample_initiation_set(tables, state, rng);
            let q_row = &q_task[state * num_options..(state + 1) * num_options];
            let mu = meta_policy(q_row, omega, eps)?;
            current_option = sample::categorical(rng, &mu);
            record.decision_costs.push(omega.len);
            record.discounted_decision_cost += discount * omega.size() as f64;
            Some(omega)
        } else {
            None
        };

        let action = match tables.set.primitive_action(current_option) {
            Some(a) => a,
            None => {
                tables.policy_into(state, current_option, &mut action_buf);
                sample::categorical(rng, &action_buf)
            }
        };
        let out = mdp.step(rng, task, state, action)?;
        record.g += discount * out.reward;
        record.steps.push(TraceStep {
            state,
            omega,
            option: current_option,
            action,
            reward: out.reward,
            terminated: out.terminated,
        });
        if out.terminated {
            return Ok(record);
        }

        // Sampled termination of the running option at the arrival state
        // (always one draw; primitives have termination probability 1).
        let beta = match tables.set.primitive_action(current_option) {
            Some(_) => 1.0,
            None => crate::options::sigmoid(
                tables.w_beta[tables.sh_index(out.next_state, current_option)],
            ),
        };
        if sample::bernoulli(rng, beta) {
            current_option = usize::MAX;
        }
        state = out.next_state;
        discount *= mdp.gamma;
    }

    record.step_limit_exceeded = true;
    Ok(record)
}

/// Return minus decision costs: `G − c · Σ_t γ^t |Ω_t|` over the episode's
/// decision points. With all interests at 1 this is the familiar
/// `G − c · |H| · (number of decisions)`.
pub fn compound_return(record: &EpisodeRecord, c: f64) -> f64 {
    record.g - c * record.discounted_decision_cost
}
