//! Exact, brute-force computations on small problems.
//!
//! Everything here trades scalability for certainty: option models, the
//! planning-speed-aware objective, and its gradient are computed by
//! enumerating initiation sets and solving dense linear systems, so the
//! sampling-based learner and the planner can be tested against ground
//! truth.
//!
//! The differentiable meta-policy used throughout normalizes nonnegative
//! preferences over the sampled set's members; gradients with respect to
//! those preferences are taken in log scale (equivalently, the preferences
//! are exponentials of the underlying parameters).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{meta_policy, InitiationSample};
use crate::mdp::{Outcome, StateId, TabularMdp, TaskId};
use crate::options::{sigmoid, OptionSet, ParamTables, TabulatedOption};
use crate::sample;

/// Enumerating initiation sets is exponential in the adjustable option
/// count; refuse beyond this.
pub const MAX_ADJUSTABLE: usize = 12;
/// Dense linear solves are capped at this many unknowns.
pub const MAX_UNKNOWNS: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("cannot enumerate initiation sets for {k} adjustable options (limit {MAX_ADJUSTABLE})")]
    PowerSetTooLarge { k: usize },
    #[error("linear system with {unknowns} unknowns exceeds the dense-solve limit {MAX_UNKNOWNS}")]
    SystemTooLarge { unknowns: usize },
    #[error("singular linear system: {context}")]
    SingularSystem { context: String },
    #[error("bad fixture: {context}")]
    BadFixture { context: String },
}

/// Per-task selection preferences over option indices.
///
/// Entry `(n, s, h)` is the nonnegative weight with which task `n` favors
/// option `h` at state `s`; a decision normalizes the weights of the
/// sampled set's members. Gradients treat the log of each entry as the
/// underlying parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPreference {
    pub task_count: usize,
    pub num_states: usize,
    pub num_options: usize,
    pub f: Vec<f64>,
}

impl MetaPreference {
    /// All-ones preferences: every decision is uniform over its set.
    pub fn uniform(task_count: usize, num_states: usize, num_options: usize) -> Self {
        MetaPreference {
            task_count,
            num_states,
            num_options,
            f: vec![1.0; task_count * num_states * num_options],
        }
    }

    #[inline]
    pub fn index(&self, n: TaskId, s: StateId, h: usize) -> usize {
        (n * self.num_states + s) * self.num_options + h
    }

    #[inline]
    pub fn pref(&self, n: TaskId, s: StateId, h: usize) -> f64 {
        self.f[self.index(n, s, h)]
    }

    /// Check shape and the normalizability invariant: weights nonnegative
    /// and, for every `(n, s)`, positive total over the always-available
    /// primitive options.
    pub fn validate(&self, set: OptionSet) -> Result<(), OracleError> {
        if self.num_options != set.num_options()
            || self.f.len() != self.task_count * self.num_states * self.num_options
        {
            return Err(OracleError::BadFixture {
                context: "preference table shape mismatch".to_string(),
            });
        }
        for (idx, &v) in self.f.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(OracleError::BadFixture {
                    context: format!("preference {v} at flat index {idx}"),
                });
            }
        }
        for n in 0..self.task_count {
            for s in 0..self.num_states {
                let total: f64 = (set.k..set.num_options()).map(|h| self.pref(n, s, h)).sum();
                if total <= 0.0 {
                    return Err(OracleError::BadFixture {
                        context: format!("no positive primitive preference at task {n} state {s}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Exact value decomposition: reward values `v_reward`/`q_reward` and
/// (negative) decision-cost values `v_cost`/`q_cost`, plus the composed
/// objective `j = Σ_n Σ_s d0(s) (v_reward + c·v_cost)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactValues {
    pub task_count: usize,
    pub num_states: usize,
    pub num_options: usize,
    /// `[task][state][option]` expected return for committing to an option.
    pub q_bar: Vec<f64>,
    /// `[task][state][option]` expected future decision cost (negative).
    pub q_tilde: Vec<f64>,
    /// `[task][state]` expected return from a fresh decision.
    pub v_bar: Vec<f64>,
    /// `[task][state]` expected total decision cost including the decision
    /// at the state itself (negative).
    pub v_tilde: Vec<f64>,
    pub j: f64,
}

impl ExactValues {
    #[inline]
    pub fn sh(&self, n: TaskId, s: StateId, h: usize) -> usize {
        (n * self.num_states + s) * self.num_options + h
    }

    /// Combined option value `q_bar + c·q_tilde`.
    pub fn q(&self, n: TaskId, s: StateId, h: usize, c: f64) -> f64 {
        self.q_bar[self.sh(n, s, h)] + c * self.q_tilde[self.sh(n, s, h)]
    }

    /// Combined state value `v_bar + c·v_tilde`.
    pub fn v(&self, n: TaskId, s: StateId, c: f64) -> f64 {
        self.v_bar[n * self.num_states + s] + c * self.v_tilde[n * self.num_states + s]
    }
}

/// Gradient of the objective with respect to every adjustable parameter.
///
/// Layouts mirror [`ParamTables`]; `f` holds the per-task selection
/// preference gradients (log scale), `[task][state][option]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTables {
    pub set: OptionSet,
    pub num_states: usize,
    pub task_count: usize,
    pub w_pi: Vec<f64>,
    pub w_beta: Vec<f64>,
    pub w_i: Vec<f64>,
    pub f: Vec<f64>,
}

impl GradientTables {
    pub fn zeros(num_states: usize, task_count: usize, set: OptionSet) -> Self {
        GradientTables {
            set,
            num_states,
            task_count,
            w_pi: vec![0.0; num_states * set.k * set.num_actions],
            w_beta: vec![0.0; num_states * set.k],
            w_i: vec![0.0; num_states * set.k],
            f: vec![0.0; task_count * num_states * set.num_options()],
        }
    }

    /// All components in one flat view (for comparisons).
    pub fn flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.w_pi.len() + self.w_beta.len() + self.w_i.len() + self.f.len());
        out.extend_from_slice(&self.w_pi);
        out.extend_from_slice(&self.w_beta);
        out.extend_from_slice(&self.w_i);
        out.extend_from_slice(&self.f);
        out
    }
}

/// Every initiation set a state can produce, with its probability: the
/// always-included primitives plus each subset of the adjustable options.
/// Returned as (bitmask, probability) pairs.
pub fn initiation_set_distribution(
    tables: &ParamTables,
    s: StateId,
) -> Result<Vec<(u64, f64)>, OracleError> {
    let k = tables.set.k;
    if k > MAX_ADJUSTABLE {
        return Err(OracleError::PowerSetTooLarge { k });
    }
    let primitives = ((1u64 << tables.set.num_actions) - 1) << k;
    let interests: Vec<f64> =
        (0..k).map(|h| sigmoid(tables.w_i[tables.sh_index(s, h)])).collect();
    let mut out = Vec::with_capacity(1 << k);
    for mask in 0u64..(1 << k) {
        let mut prob = 1.0;
        for (x, &i) in interests.iter().enumerate() {
            prob *= if mask >> x & 1 == 1 { i } else { 1.0 - i };
        }
        out.push((mask | primitives, prob));
    }
    Ok(out)
}

/// Everything about one task that the exact computations share: materialized
/// probabilities, the marginal decision policy, and the solved value tables.
struct TaskSolution {
    n: TaskId,
    num_states: usize,
    num_options: usize,
    /// `[s][h][a]`
    pi: Vec<f64>,
    /// `[s][h]`, 1 for primitives
    beta: Vec<f64>,
    /// `[s][h]`, 1 for primitives
    interest: Vec<f64>,
    /// `[s][h]` marginal probability that a fresh decision at `s` picks `h`
    mu: Vec<f64>,
    q_bar: Vec<f64>,
    q_tilde: Vec<f64>,
    v_bar: Vec<f64>,
    v_tilde: Vec<f64>,
}

impl TaskSolution {
    #[inline]
    fn sh(&self, s: StateId, h: usize) -> usize {
        s * self.num_options + h
    }

    fn q(&self, s: StateId, h: usize, c: f64) -> f64 {
        self.q_bar[self.sh(s, h)] + c * self.q_tilde[self.sh(s, h)]
    }

    fn v(&self, s: StateId, c: f64) -> f64 {
        self.v_bar[s] + c * self.v_tilde[s]
    }

    /// Combined action value: expected reward plus discounted continuation,
    /// where termination hands control to a fresh decision at the next
    /// state.
    fn q_action(&self, mdp: &TabularMdp, s: StateId, h: usize, a: usize, c: f64) -> f64 {
        let mut total = 0.0;
        for o in mdp.outcomes(self.n, s, a) {
            let mut value = o.reward;
            if !mdp.is_terminal(self.n, o.next) {
                let beta = self.beta[self.sh(o.next, h)];
                value += mdp.gamma * ((1.0 - beta) * self.q(o.next, h, c) + beta * self.v(o.next, c));
            }
            total += o.prob * value;
        }
        total
    }
}

fn solve_task(
    mdp: &TabularMdp,
    tables: &ParamTables,
    meta: &MetaPreference,
    n: TaskId,
) -> Result<(TaskSolution, DMatrix<f64>), OracleError> {
    let set = tables.set;
    let num_states = mdp.num_states;
    let num_options = set.num_options();
    let unknowns = num_states * num_options;
    if unknowns > MAX_UNKNOWNS {
        return Err(OracleError::SystemTooLarge { unknowns });
    }
    meta.validate(set)?;

    // Materialize probabilities.
    let mut pi = vec![0.0; num_states * num_options * set.num_actions];
    let mut beta = vec![1.0; num_states * num_options];
    let mut interest = vec![1.0; num_states * num_options];
    for s in 0..num_states {
        for h in 0..num_options {
            tables.policy_into(
                s,
                h,
                &mut pi[(s * num_options + h) * set.num_actions..][..set.num_actions],
            );
            if set.is_adjustable(h) {
                beta[s * num_options + h] = sigmoid(tables.w_beta[tables.sh_index(s, h)]);
                interest[s * num_options + h] = sigmoid(tables.w_i[tables.sh_index(s, h)]);
            }
        }
    }

    // Marginal decision policy and expected set size per state.
    let mut mu = vec![0.0; num_states * num_options];
    let mut set_size = vec![0.0; num_states];
    for s in 0..num_states {
        set_size[s] = (0..num_options).map(|h| interest[s * num_options + h]).sum();
        for (mask, prob) in initiation_set_distribution(tables, s)? {
            if prob == 0.0 {
                continue;
            }
            let omega = InitiationSample::from_mask(mask);
            let denom: f64 = omega.indices().map(|h| meta.pref(n, s, h)).sum();
            if denom <= 0.0 {
                return Err(OracleError::BadFixture {
                    context: format!("zero total preference over a possible set at state {s}"),
                });
            }
            for h in omega.indices() {
                mu[s * num_options + h] += prob * meta.pref(n, s, h) / denom;
            }
        }
    }

    // One-step Bellman system on (state, option) pairs: committing to an
    // option either keeps running it or terminates into a fresh decision.
    let gamma = mdp.gamma;
    let mut a_mat = DMatrix::<f64>::identity(unknowns, unknowns);
    let mut rhs = DMatrix::<f64>::zeros(unknowns, 2);
    for s in 0..num_states {
        if mdp.is_terminal(n, s) {
            continue;
        }
        for h in 0..num_options {
            let row = s * num_options + h;
            for a in 0..set.num_actions {
                let pa = pi[(s * num_options + h) * set.num_actions + a];
                if pa == 0.0 {
                    continue;
                }
                for o in mdp.outcomes(n, s, a) {
                    rhs[(row, 0)] += pa * o.prob * o.reward;
                    if mdp.is_terminal(n, o.next) || o.prob == 0.0 {
                        continue;
                    }
                    let w = gamma * pa * o.prob;
                    let b = beta[o.next * num_options + h];
                    a_mat[(row, o.next * num_options + h)] -= w * (1.0 - b);
                    if b > 0.0 {
                        for h2 in 0..num_options {
                            let m = mu[o.next * num_options + h2];
                            if m > 0.0 {
                                a_mat[(row, o.next * num_options + h2)] -= w * b * m;
                            }
                        }
                        // Terminating at the next state opens a decision
                        // there, charging its expected set size.
                        rhs[(row, 1)] -= w * b * set_size[o.next];
                    }
                }
            }
        }
    }

    let lu = a_mat.clone().lu();
    let solution = lu.solve(&rhs).ok_or_else(|| OracleError::SingularSystem {
        context: format!("value system for task {n}"),
    })?;
    let residual = (&a_mat * &solution - &rhs).abs().max();
    if !residual.is_finite() || residual > 1e-8 {
        return Err(OracleError::SingularSystem {
            context: format!("value system for task {n} (residual {residual})"),
        });
    }

    let q_bar: Vec<f64> = solution.column(0).iter().cloned().collect();
    let q_tilde: Vec<f64> = solution.column(1).iter().cloned().collect();
    let mut v_bar = vec![0.0; num_states];
    let mut v_tilde = vec![0.0; num_states];
    for s in 0..num_states {
        if mdp.is_terminal(n, s) {
            continue;
        }
        for h in 0..num_options {
            let m = mu[s * num_options + h];
            v_bar[s] += m * q_bar[s * num_options + h];
            v_tilde[s] += m * q_tilde[s * num_options + h];
        }
        v_tilde[s] -= set_size[s];
    }

    Ok((
        TaskSolution {
            n,
            num_states,
            num_options,
            pi,
            beta,
            interest,
            mu,
            q_bar,
            q_tilde,
            v_bar,
            v_tilde,
        },
        a_mat,
    ))
}

/// Exact objective and value tables for the current options and selection
/// preferences; `c` weighs decision costs against reward.
pub fn exact_objective(
    mdp: &TabularMdp,
    tables: &ParamTables,
    meta: &MetaPreference,
    c: f64,
) -> Result<ExactValues, OracleError> {
    let num_options = tables.set.num_options();
    let mut values = ExactValues {
        task_count: mdp.task_count,
        num_states: mdp.num_states,
        num_options,
        q_bar: vec![0.0; mdp.task_count * mdp.num_states * num_options],
        q_tilde: vec![0.0; mdp.task_count * mdp.num_states * num_options],
        v_bar: vec![0.0; mdp.task_count * mdp.num_states],
        v_tilde: vec![0.0; mdp.task_count * mdp.num_states],
        j: 0.0,
    };
    for n in 0..mdp.task_count {
        let (sol, _) = solve_task(mdp, tables, meta, n)?;
        let base_sh = n * mdp.num_states * num_options;
        values.q_bar[base_sh..base_sh + sol.q_bar.len()].copy_from_slice(&sol.q_bar);
        values.q_tilde[base_sh..base_sh + sol.q_tilde.len()].copy_from_slice(&sol.q_tilde);
        let base_s = n * mdp.num_states;
        values.v_bar[base_s..base_s + sol.v_bar.len()].copy_from_slice(&sol.v_bar);
        values.v_tilde[base_s..base_s + sol.v_tilde.len()].copy_from_slice(&sol.v_tilde);
        for s in 0..mdp.num_states {
            values.j += mdp.initial_dist[s] * (sol.v_bar[s] + c * sol.v_tilde[s]);
        }
    }
    Ok(values)
}

/// Discounted visitation of (state, option) pairs for one task: how often,
/// discounted, the task runs option `h` while at state `s` over an episode.
pub fn exact_occupancy(
    mdp: &TabularMdp,
    tables: &ParamTables,
    meta: &MetaPreference,
    n: TaskId,
) -> Result<Vec<f64>, OracleError> {
    let (sol, a_mat) = solve_task(mdp, tables, meta, n)?;
    occupancy_from(mdp, &sol, &a_mat)
}

fn occupancy_from(
    mdp: &TabularMdp,
    sol: &TaskSolution,
    a_mat: &DMatrix<f64>,
) -> Result<Vec<f64>, OracleError> {
    let unknowns = sol.num_states * sol.num_options;
    let mut alpha = DVector::<f64>::zeros(unknowns);
    for s in 0..sol.num_states {
        if mdp.is_terminal(sol.n, s) {
            continue;
        }
        for h in 0..sol.num_options {
            alpha[s * sol.num_options + h] = mdp.initial_dist[s] * sol.mu[sol.sh(s, h)];
        }
    }
    let lu = a_mat.transpose().lu();
    let d = lu.solve(&alpha).ok_or_else(|| OracleError::SingularSystem {
        context: format!("occupancy system for task {}", sol.n),
    })?;
    Ok(d.iter().cloned().collect())
}

/// Per-state decision-gradient pieces shared by the start-state and
/// termination terms: interest components (per adjustable option) and
/// selection-preference components (per option, log scale).
fn decision_components(
    tables: &ParamTables,
    meta: &MetaPreference,
    sol: &TaskSolution,
    c: f64,
    s: StateId,
) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let set = tables.set;
    let num_options = sol.num_options;
    let mut m_interest = vec![0.0; set.k];
    let mut m_pref = vec![0.0; num_options];
    for (mask, prob) in initiation_set_distribution(tables, s)? {
        if prob == 0.0 {
            continue;
        }
        let omega = InitiationSample::from_mask(mask);
        let denom: f64 = omega.indices().map(|h| meta.pref(sol.n, s, h)).sum();
        let mut set_value = 0.0;
        for h in omega.indices() {
            set_value += meta.pref(sol.n, s, h) / denom * sol.q(s, h, c);
        }
        for (x, slot) in m_interest.iter_mut().enumerate() {
            let member = if omega.contains(x) { 1.0 } else { 0.0 };
            *slot += prob * (member - sol.interest[sol.sh(s, x)]) * set_value;
        }
        for y in omega.indices() {
            let mu_y = meta.pref(sol.n, s, y) / denom;
            m_pref[y] += prob * mu_y * (sol.q(s, y, c) - set_value);
        }
    }
    for (x, slot) in m_interest.iter_mut().enumerate() {
        let i = sol.interest[sol.sh(s, x)];
        *slot -= c * i * (1.0 - i);
    }
    Ok((m_interest, m_pref))
}

/// Exact gradient of the objective with respect to all policy, termination,
/// interest, and selection-preference parameters.
pub fn exact_gradient(
    mdp: &TabularMdp,
    tables: &ParamTables,
    meta: &MetaPreference,
    c: f64,
) -> Result<GradientTables, OracleError> {
    let set = tables.set;
    let num_states = mdp.num_states;
    let num_options = set.num_options();
    let mut grad = GradientTables::zeros(num_states, mdp.task_count, set);

    for n in 0..mdp.task_count {
        let (sol, a_mat) = solve_task(mdp, tables, meta, n)?;
        let d = occupancy_from(mdp, &sol, &a_mat)?;

        // Decision components and their accumulated weights per state: the
        // start-state distribution plus discounted termination traffic.
        let mut decision_weight = vec![0.0; num_states];
        for s in 0..num_states {
            if !mdp.is_terminal(n, s) {
                decision_weight[s] += mdp.initial_dist[s];
            }
        }

        let mut q_actions = vec![0.0; set.num_actions];
        for s in 0..num_states {
            if mdp.is_terminal(n, s) {
                continue;
            }
            for h in 0..num_options {
                let occ = d[s * num_options + h];
                if occ == 0.0 {
                    continue;
                }
                for (a, slot) in q_actions.iter_mut().enumerate() {
                    *slot = sol.q_action(mdp, s, h, a, c);
                }
                let pi_row = &sol.pi[(s * num_options + h) * set.num_actions..][..set.num_actions];

                // Policy term: the softmax score times the action's
                // advantage over the option's value.
                if set.is_adjustable(h) {
                    let baseline: f64 =
                        pi_row.iter().zip(&q_actions).map(|(p, q)| p * q).sum();
                    for a in 0..set.num_actions {
                        grad.w_pi[tables.pi_index(s, h, a)] +=
                            occ * pi_row[a] * (q_actions[a] - baseline);
                    }
                }

                // Termination term and decision traffic at successor states.
                for a in 0..set.num_actions {
                    let pa = pi_row[a];
                    if pa == 0.0 {
                        continue;
                    }
                    for o in mdp.outcomes(n, s, a) {
                        if o.prob == 0.0 || mdp.is_terminal(n, o.next) {
                            continue;
                        }
                        let coef = occ * mdp.gamma * pa * o.prob;
                        let b = sol.beta[sol.sh(o.next, h)];
                        if set.is_adjustable(h) {
                            grad.w_beta[tables.sh_index(o.next, h)] -=
                                coef * b * (1.0 - b) * (sol.q(o.next, h, c) - sol.v(o.next, c));
                        }
                        decision_weight[o.next] += coef * b;
                    }
                }
            }
        }

        for s in 0..num_states {
            if decision_weight[s] == 0.0 || mdp.is_terminal(n, s) {
                continue;
            }
            let (m_interest, m_pref) = decision_components(tables, meta, &sol, c, s)?;
            for x in 0..set.k {
                grad.w_i[tables.sh_index(s, x)] += decision_weight[s] * m_interest[x];
            }
            for h in 0..num_options {
                grad.f[(n * num_states + s) * num_options + h] +=
                    decision_weight[s] * m_pref[h];
            }
        }
    }
    Ok(grad)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient of the exact objective by central differences over every
/// parameter (selection preferences are perturbed in log scale). Slow;
/// meant to validate [`exact_gradient`] on small fixtures.
pub fn finite_diff_gradient(
    mdp: &TabularMdp,
    tables: &ParamTables,
    meta: &MetaPreference,
    c: f64,
    step: f64,
) -> Result<GradientTables, OracleError> {
    assert!(step > 0.0, "step size must be positive");
    let mut grad = GradientTables::zeros(mdp.num_states, mdp.task_count, tables.set);
    let j_of_tables = |t: &ParamTables| -> Result<f64, OracleError> {
        Ok(exact_objective(mdp, t, meta, c)?.j)
    };

    let mut work = tables.clone();
    for idx in 0..tables.w_pi.len() {
        work.w_pi[idx] = tables.w_pi[idx] + step;
        let plus = j_of_tables(&work)?;
        work.w_pi[idx] = tables.w_pi[idx] - step;
        let minus = j_of_tables(&work)?;
        work.w_pi[idx] = tables.w_pi[idx];
        grad.w_pi[idx] = (plus - minus) / (2.0 * step);
    }
    for idx in 0..tables.w_beta.len() {
        work.w_beta[idx] = tables.w_beta[idx] + step;
        let plus = j_of_tables(&work)?;
        work.w_beta[idx] = tables.w_beta[idx] - step;
        let minus = j_of_tables(&work)?;
        work.w_beta[idx] = tables.w_beta[idx];
        grad.w_beta[idx] = (plus - minus) / (2.0 * step);
    }
    for idx in 0..tables.w_i.len() {
        work.w_i[idx] = tables.w_i[idx] + step;
        let plus = j_of_tables(&work)?;
        work.w_i[idx] = tables.w_i[idx] - step;
        let minus = j_of_tables(&work)?;
        work.w_i[idx] = tables.w_i[idx];
        grad.w_i[idx] = (plus - minus) / (2.0 * step);
    }

    let mut meta_work = meta.clone();
    for idx in 0..meta.f.len() {
        meta_work.f[idx] = meta.f[idx] * step.exp();
        let plus = exact_objective(mdp, tables, &meta_work, c)?.j;
        meta_work.f[idx] = meta.f[idx] * (-step).exp();
        let minus = exact_objective(mdp, tables, &meta_work, c)?.j;
        meta_work.f[idx] = meta.f[idx];
        grad.f[idx] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Closed-form model of one option on one task: expected discounted reward
/// until the option stops, and the discounted arrival distribution
/// (`[state]` and row-major `[state][state]`).
///
/// An option stops where its termination fires or the task ends; arrivals
/// at time `t` carry weight `γ^t`.
pub fn exact_option_model(
    mdp: &TabularMdp,
    option: &TabulatedOption,
    n: TaskId,
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let num_states = mdp.num_states;
    if num_states > MAX_UNKNOWNS {
        return Err(OracleError::SystemTooLarge { unknowns: num_states });
    }

    // continue_mat(s, s') = P(move to s' and keep running); reward and
    // arrival mass follow the same continuation structure.
    let mut continue_mat = DMatrix::<f64>::zeros(num_states, num_states);
    let mut one_step_reward = DVector::<f64>::zeros(num_states);
    let mut arrive = DMatrix::<f64>::zeros(num_states, num_states);
    for s in 0..num_states {
        if mdp.is_terminal(n, s) {
            continue;
        }
        let pi_row = option.policy_row(s);
        for (a, &pa) in pi_row.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for o in mdp.outcomes(n, s, a) {
                if o.prob == 0.0 {
                    continue;
                }
                let w = pa * o.prob;
                one_step_reward[s] += w * o.reward;
                let stop = if mdp.is_terminal(n, o.next) { 1.0 } else { option.beta[o.next] };
                arrive[(s, o.next)] += gamma * w * stop;
                if stop < 1.0 {
                    continue_mat[(s, o.next)] += gamma * w * (1.0 - stop);
                }
            }
        }
    }

    let a_mat = DMatrix::<f64>::identity(num_states, num_states) - continue_mat;
    let lu = a_mat.clone().lu();
    let singular = |what: &str| OracleError::SingularSystem {
        context: format!("{what} for option {:?} on task {n}", option.name),
    };
    let r = lu.solve(&one_step_reward).ok_or_else(|| singular("reward model"))?;
    let p = lu.solve(&arrive).ok_or_else(|| singular("transition model"))?;
    let residual = (&a_mat * &r - &one_step_reward).abs().max();
    if !residual.is_finite() || residual > 1e-8 {
        return Err(singular("reward model"));
    }
    let mut p_rows = Vec::with_capacity(num_states * num_states);
    for s in 0..num_states {
        for x in 0..num_states {
            p_rows.push(p[(s, x)]);
        }
    }
    Ok((r.iter().cloned().collect(), p_rows))
}

/// One-sample estimate of the interest-gradient signal from a single
/// sampled initiation set: component `x` is
/// `(1[x ∈ Ω] − i(s,x)) · V_Ω − c̄·i(s,x)(1 − i(s,x))`, where `V_Ω` is the
/// ε-greedy value of the sampled set under the given option values.
pub fn naive_m(
    q_row: &[f64],
    tables: &ParamTables,
    s: StateId,
    omega: InitiationSample,
    c_bar: f64,
    epsilon: f64,
) -> Vec<f64> {
    let mu = meta_policy(q_row, omega, epsilon).expect("initiation sets contain the primitives");
    let set_value: f64 = mu.iter().zip(q_row).map(|(m, q)| m * q).sum();
    (0..tables.set.k)
        .map(|x| {
            let i = sigmoid(tables.w_i[tables.sh_index(s, x)]);
            let member = if omega.contains(x) { 1.0 } else { 0.0 };
            (member - i) * set_value - c_bar * i * (1.0 - i)
        })
        .collect()
}

/// Exact expectations, over the initiation-set distribution at `s`, of the
/// learner's state-value and interest-gradient estimates: the mean set
/// value minus the expected set cost, and the per-option mean of
/// [`naive_m`].
pub fn exact_estimator_means(
    q_row: &[f64],
    tables: &ParamTables,
    s: StateId,
    c_bar: f64,
    epsilon: f64,
) -> Result<(f64, Vec<f64>), OracleError> {
    let k = tables.set.k;
    let mut v_mean = 0.0;
    let mut m_mean = vec![0.0; k];
    for (mask, prob) in initiation_set_distribution(tables, s)? {
        if prob == 0.0 {
            continue;
        }
        let omega = InitiationSample::from_mask(mask);
        let mu = meta_policy(q_row, omega, epsilon).expect("sets contain the primitives");
        let set_value: f64 = mu.iter().zip(q_row).map(|(m, q)| m * q).sum();
        v_mean += prob * set_value;
        for (x, slot) in m_mean.iter_mut().enumerate() {
            let i = sigmoid(tables.w_i[tables.sh_index(s, x)]);
            let member = if omega.contains(x) { 1.0 } else { 0.0 };
            *slot += prob * (member - i) * set_value;
        }
    }
    for x in 0..k {
        let i = sigmoid(tables.w_i[tables.sh_index(s, x)]);
        v_mean -= c_bar * i;
        m_mean[x] -= c_bar * i * (1.0 - i);
    }
    Ok((v_mean, m_mean))
}

/// Load a fixture MDP from its JSON serialization and validate it.
pub fn fixture_mdp_from_json(json: &str) -> Result<TabularMdp, OracleError> {
    let mdp: TabularMdp = serde_json::from_str(json)
        .map_err(|e| OracleError::BadFixture { context: e.to_string() })?;
    mdp.validate()
        .map_err(|e| OracleError::BadFixture { context: e.to_string() })?;
    Ok(mdp)
}

/// A random episodic multi-task fixture plus random parameters, for
/// gradient and estimator checks. Task `n` terminates at state `n`; every
/// non-terminal action reaches the task's terminal with probability at
/// least 0.1, so values exist even undiscounted. Parameters land in
/// `[-1, 1]` (preferences in `[e^-1, e]`), keeping all probabilities away
/// from their saturation points.
pub fn random_fixture<R: Rng>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
    task_count: usize,
    k: usize,
    gamma: f64,
) -> (TabularMdp, ParamTables, MetaPreference) {
    assert!(task_count <= num_states, "one terminal per task");
    let set = OptionSet::new(k, num_actions);
    let mut transition = Vec::with_capacity(task_count * num_states * num_actions);
    let mut terminal = vec![false; task_count * num_states];
    let unit = |rng: &mut R| sample::uniform_index(rng, 1 << 20) as f64 / (1 << 20) as f64;
    for n in 0..task_count {
        terminal[n * num_states + n] = true;
        for s in 0..num_states {
            for _a in 0..num_actions {
                if s == n {
                    transition.push(vec![Outcome { next: s, reward: 0.0, prob: 1.0 }]);
                    continue;
                }
                let p_terminal = 0.1 + 0.3 * unit(rng);
                let split = unit(rng);
                let rest = 1.0 - p_terminal;
                let mut outcomes = vec![Outcome {
                    next: n,
                    reward: 4.0 * unit(rng) - 2.0,
                    prob: p_terminal,
                }];
                for (target_prob, _) in [(rest * split, 0), (rest * (1.0 - split), 1)] {
                    outcomes.push(Outcome {
                        next: sample::uniform_index(rng, num_states),
                        reward: 4.0 * unit(rng) - 2.0,
                        prob: target_prob,
                    });
                }
                transition.push(outcomes);
            }
        }
    }
    let mdp = TabularMdp {
        num_states,
        num_actions,
        task_count,
        transition,
        terminal,
        initial_dist: vec![1.0 / num_states as f64; num_states],
        gamma,
    };
    debug_assert_eq!(mdp.validate(), Ok(()));

    let mut tables = ParamTables::zeros(num_states, set);
    for w in tables
        .w_pi
        .iter_mut()
        .chain(tables.w_beta.iter_mut())
        .chain(tables.w_i.iter_mut())
    {
        *w = 2.0 * unit(rng) - 1.0;
    }
    let mut meta = MetaPreference::uniform(task_count, num_states, set.num_options());
    for f in meta.f.iter_mut() {
        *f = (2.0 * unit(rng) - 1.0).exp();
    }
    (mdp, tables, meta)
}
