//! Planning with learned or exact option models: intra-option model
//! learning, option-value iteration over per-state option sets, and exact
//! accounting of the elementary operations spent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;

use crate::exec::{sample_initiation_set, InitiationSample};
use crate::mdp::{MdpError, StateId, TabularMdp, TaskId};
use crate::options::{OptionError, ParamTables, TabulatedOption};
use crate::oracle::{exact_option_model, OracleError};
use crate::sample;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("value iteration did not converge in {iterations} sweeps (sup change {sup_change:.3e})")]
    NonConvergent { iterations: usize, sup_change: f64 },
    #[error("plan sets must cover every state and stay nonempty: {context}")]
    BadPlanSets { context: String },
    #[error("model shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Option(#[from] OptionError),
}

/// Whether a model came out of a learning run or a closed-form solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSource {
    Learned,
    Exact,
}

/// Per-task option model: expected reward until the option stops and the
/// discounted arrival distribution over stop states.
///
/// `r` is flat-indexed by `(task * num_states + state) * num_options +
/// option`; `p` appends the arrival state as the innermost axis. Arrival
/// mass at time `t` carries weight `γ^t`, so the planning backup needs no
/// further discounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionModel {
    pub num_states: usize,
    pub num_options: usize,
    pub task_count: usize,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub source: ModelSource,
    /// Largest one-step reward magnitude of the environment the model
    /// describes; pessimistic initialization scales with it.
    pub reward_bound: f64,
}

impl OptionModel {
    pub fn zeros(
        num_states: usize,
        num_options: usize,
        task_count: usize,
        source: ModelSource,
        reward_bound: f64,
    ) -> Self {
        OptionModel {
            num_states,
            num_options,
            task_count,
            r: vec![0.0; task_count * num_states * num_options],
            p: vec![0.0; task_count * num_states * num_options * num_states],
            source,
            reward_bound,
        }
    }

    /// Closed-form models for every option on every task of `mdp`.
    pub fn exact(mdp: &TabularMdp, options: &[TabulatedOption]) -> Result<Self, PlannerError> {
        let mut model = OptionModel::zeros(
            mdp.num_states,
            options.len(),
            mdp.task_count,
            ModelSource::Exact,
            reward_bound(mdp),
        );
        for n in 0..mdp.task_count {
            for (h, option) in options.iter().enumerate() {
                let (r, p) = exact_option_model(mdp, option, n, mdp.gamma)?;
                for s in 0..mdp.num_states {
                    let r_idx = model.r_index(n, s, h);
                    model.r[r_idx] = r[s];
                    let base = model.p_index(n, s, h);
                    model.p[base..base + mdp.num_states]
                        .copy_from_slice(&p[s * mdp.num_states..(s + 1) * mdp.num_states]);
                }
            }
        }
        Ok(model)
    }

    #[inline]
    pub fn r_index(&self, n: TaskId, s: StateId, o: usize) -> usize {
        (n * self.num_states + s) * self.num_options + o
    }

    #[inline]
    pub fn p_index(&self, n: TaskId, s: StateId, o: usize) -> usize {
        self.r_index(n, s, o) * self.num_states
    }

    #[inline]
    pub fn reward(&self, n: TaskId, s: StateId, o: usize) -> f64 {
        self.r[self.r_index(n, s, o)]
    }

    #[inline]
    pub fn arrival_row(&self, n: TaskId, s: StateId, o: usize) -> &[f64] {
        let base = self.p_index(n, s, o);
        &self.p[base..base + self.num_states]
    }
}

/// Largest one-step reward magnitude over all tasks and transitions.
pub fn reward_bound(mdp: &TabularMdp) -> f64 {
    mdp.transition
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0, |acc: f64, o| acc.max(o.reward.abs()))
}

/// Per-task optimal state values under primitive actions, by synchronous
/// value iteration to sup-norm change below `tol`.
pub fn flat_value_iteration(
    mdp: &TabularMdp,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<Vec<f64>>, PlannerError> {
    let mut values = vec![vec![0.0; mdp.num_states]; mdp.task_count];
    let mut next = vec![0.0; mdp.num_states];
    for (n, v) in values.iter_mut().enumerate() {
        let mut sup_change = f64::INFINITY;
        let mut iterations = 0;
        while sup_change >= tol {
            if iterations == max_iters {
                return Err(PlannerError::NonConvergent { iterations, sup_change });
            }
            sup_change = 0.0;
            for s in 0..mdp.num_states {
                if mdp.is_terminal(n, s) {
                    next[s] = 0.0;
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for a in 0..mdp.num_actions {
                    let mut q = 0.0;
                    for o in mdp.outcomes(n, s, a) {
                        q += o.prob * (o.reward + mdp.gamma * v[o.next]);
                    }
                    best = best.max(q);
                }
                next[s] = best;
                sup_change = sup_change.max((best - v[s]).abs());
            }
            v.copy_from_slice(&next);
            iterations += 1;
        }
    }
    Ok(values)
}

/// Learn option models from experience under a uniform-random behavior
/// policy, with intra-option off-policy updates: every option whose policy
/// could have taken the observed action is corrected by
/// `π(A|S,h) / (1/|A|)` and updated toward its stop-or-continue target.
///
/// The stage spends `steps` interactions on every task in turn, so each
/// task's model sees the same budget. `steps = 0` returns the
/// zero-initialized model untouched.
pub fn learn_option_model<R: Rng>(
    mdp: &TabularMdp,
    options: &[TabulatedOption],
    steps: u64,
    alpha: f64,
    rng: &mut R,
) -> Result<OptionModel, PlannerError> {
    let mut model = OptionModel::zeros(
        mdp.num_states,
        options.len(),
        mdp.task_count,
        ModelSource::Learned,
        reward_bound(mdp),
    );
    let num_states = mdp.num_states;
    let behavior_prob = 1.0 / mdp.num_actions as f64;
    // Arrival row of the successor state, snapshotted so that a self-loop
    // transition does not read its own partial update.
    let mut bootstrap = vec![0.0; num_states];

    for task in 0..mdp.task_count {
        let mut state = mdp.sample_initial(rng);
        for _ in 0..steps {
            if mdp.is_terminal(task, state) {
                state = mdp.sample_initial(rng);
                continue;
            }
            let action = sample::uniform_index(rng, mdp.num_actions);
            let out = mdp.step(rng, task, state, action)?;
            for (h, option) in options.iter().enumerate() {
                let pi_a = option.policy_row(state)[action];
                if pi_a == 0.0 {
                    continue;
                }
                let rho = pi_a / behavior_prob;
                let stop = if out.terminated { 1.0 } else { option.beta[out.next_state] };
                let gamma = mdp.gamma;

                let r_next = model.reward(task, out.next_state, h);
                let r_idx = model.r_index(task, state, h);
                let r_target = out.reward + gamma * (1.0 - stop) * r_next;
                model.r[r_idx] += alpha * rho * (r_target - model.r[r_idx]);

                bootstrap.copy_from_slice(model.arrival_row(task, out.next_state, h));
                let base = model.p_index(task, state, h);
                let row = &mut model.p[base..base + num_states];
                for (x, px) in row.iter_mut().enumerate() {
                    let arrived = if x == out.next_state { stop } else { 0.0 };
                    let target = gamma * (arrived + (1.0 - stop) * bootstrap[x]);
                    *px += alpha * rho * (target - *px);
                }
            }
            state = if out.terminated { mdp.sample_initial(rng) } else { out.next_state };
        }
    }
    Ok(model)
}

/// Draw the per-state option sets a planning run will use: each adjustable
/// option joins with its interest probability, primitives always join. The
/// sample is frozen for the whole run.
pub fn sample_plan_sets<R: Rng>(tables: &ParamTables, rng: &mut R) -> Vec<InitiationSample> {
    (0..tables.num_states)
        .map(|s| sample_initiation_set(tables, s, rng))
        .collect()
}

/// `iterations · Σ_s |Ω(s)| · |S| · |N|`: one elementary operation per
/// (sweep, represented option, arrival state, task) tuple.
pub fn operation_count(
    iterations: usize,
    omega_sizes: &[usize],
    num_states: usize,
    task_count: usize,
) -> u64 {
    let set_total: u64 = omega_sizes.iter().map(|&k| k as u64).sum();
    iterations as u64 * set_total * num_states as u64 * task_count as u64
}

/// What a planning run did and what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    /// Sweeps performed (the last one is the sweep that met the tolerance).
    pub iterations: usize,
    /// |Ω(s)| per state for the frozen sample this run used.
    pub omega_sizes: Vec<usize>,
    /// `iterations · Σ_s |Ω(s)| · |S| · |N|`, exact.
    pub total_operations: u64,
    /// Mean value error after each sweep.
    pub mean_value_error: Vec<f64>,
    pub converged: bool,
}

/// Synchronous option-value iteration over frozen per-state option sets.
///
/// Non-terminal `(state, option)` values start at the pessimistic floor
/// `−|S|·reward_bound`; terminal rows stay at zero. After each sweep the
/// mean gap to `v_star` (averaged over every task and state) is recorded,
/// and iteration stops once the gap drops below `err_tol`. Hitting
/// `max_iters` first is reported as `converged = false`, not an error.
pub fn option_value_iteration(
    model: &OptionModel,
    plan_sets: &[InitiationSample],
    mdp: &TabularMdp,
    v_star: &[Vec<f64>],
    err_tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, PlanReport), PlannerError> {
    let (num_states, num_options, task_count) =
        (model.num_states, model.num_options, model.task_count);
    if plan_sets.len() != num_states {
        return Err(PlannerError::BadPlanSets {
            context: format!("{} sets for {} states", plan_sets.len(), num_states),
        });
    }
    if plan_sets.iter().any(|set| set.size() == 0) {
        return Err(PlannerError::BadPlanSets { context: "empty set".to_string() });
    }
    if plan_sets.iter().any(|set| set.indices().any(|h| h >= num_options)) {
        return Err(PlannerError::BadPlanSets {
            context: format!("option index beyond the model's {} options", num_options),
        });
    }
    if mdp.num_states != num_states || mdp.task_count != task_count {
        return Err(PlannerError::ShapeMismatch {
            context: format!(
                "model is {} states x {} tasks, environment is {} x {}",
                num_states, task_count, mdp.num_states, mdp.task_count
            ),
        });
    }
    if v_star.len() != task_count || v_star.iter().any(|v| v.len() != num_states) {
        return Err(PlannerError::ShapeMismatch {
            context: "reference values do not match the task/state shape".to_string(),
        });
    }

    let floor = -(num_states as f64) * model.reward_bound;
    let mut q = vec![0.0; task_count * num_states * num_options];
    for n in 0..task_count {
        for s in 0..num_states {
            if mdp.is_terminal(n, s) {
                continue;
            }
            let base = (n * num_states + s) * num_options;
            for slot in &mut q[base..base + num_options] {
                *slot = floor;
            }
        }
    }

    // Greedy set values per (task, state), refreshed after every sweep.
    let set_max = |q: &[f64], n: TaskId, s: StateId| -> f64 {
        if mdp.is_terminal(n, s) {
            return 0.0;
        }
        let base = (n * num_states + s) * num_options;
        plan_sets[s]
            .indices()
            .map(|o| q[base + o])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best = vec![0.0; task_count * num_states];
    for n in 0..task_count {
        for s in 0..num_states {
            best[n * num_states + s] = set_max(&q, n, s);
        }
    }

    let mut report = PlanReport {
        iterations: 0,
        omega_sizes: plan_sets.iter().map(|set| set.size()).collect(),
        total_operations: 0,
        mean_value_error: Vec::new(),
        converged: false,
    };

    for _ in 0..max_iters {
        for n in 0..task_count {
            let best_task = &best[n * num_states..(n + 1) * num_states];
            for s in 0..num_states {
                if mdp.is_terminal(n, s) {
                    continue;
                }
                let base = (n * num_states + s) * num_options;
                for o in plan_sets[s].indices() {
                    let mut value = model.reward(n, s, o);
                    for (x, px) in model.arrival_row(n, s, o).iter().enumerate() {
                        value += px * best_task[x];
                    }
                    q[base + o] = value;
                }
            }
        }
        report.iterations += 1;
        let mut error = 0.0;
        for n in 0..task_count {
            for s in 0..num_states {
                let m = set_max(&q, n, s);
                best[n * num_states + s] = m;
                error += v_star[n][s] - m;
            }
        }
        error /= (task_count * num_states) as f64;
        report.mean_value_error.push(error);
        if error < err_tol {
            report.converged = true;
            break;
        }
    }
    report.total_operations =
        operation_count(report.iterations, &report.omega_sizes, num_states, task_count);
    Ok((q, report))
}
