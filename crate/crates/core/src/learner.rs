//! The two tabular learners: an advantage option-critic over a fixed option
//! set (interests pinned to 1) and its extension that also learns where each
//! option should be considered (interests learned).
//!
//! One training step consumes random draws in a fixed order so that runs are
//! reproducible and reduction tests can mirror the stream exactly:
//! initiation set at `S` (`k` Bernoullis), option choice (1 categorical),
//! action (1 categorical, adjustable options only), environment transition
//! (1 draw for stochastic rows, none for deterministic ones), initiation set
//! at `S'` (`k` Bernoullis), termination branch (1 Bernoulli), and on episode
//! end a task and an initial state (1 draw each). Evaluation pauses use a
//! dedicated generator seeded by one extra draw from the training stream.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{
    compound_return, meta_policy_into, run_episode, ExecError, ExecMode, InitiationSample,
};
use crate::mdp::{MdpError, StateId, TabularMdp, TaskId};
use crate::options::{
    entropy, entropy_grad_binary_clamped, sigmoid, OptionSet, ParamTables, PROB_CLAMP,
};
use crate::sample;

/// Interest preference that saturates the sigmoid to exactly 1.0 in f64;
/// used to pin interests.
pub const PINNED_INTEREST: f64 = 500.0;

/// Step cap for evaluation episodes (greedy policies can cycle early in
/// training; capped episodes keep their truncated return).
pub const EVAL_MAX_STEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner configuration: {context}")]
    InvalidConfig { context: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Which learner to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Multi-task advantage option-critic: interests pinned to 1, never
    /// updated.
    Maoc,
    /// Fast-planning option-critic: interests learned.
    Fpoc,
}

/// How the importance ratio on value updates is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IsClip {
    /// `max(1, ratio)` — every option's value row is updated at full
    /// weight, and ratios above 1 amplify the step.
    AsPaper,
    /// `min(1, ratio)` — the conventional conservative clip: options that
    /// would rarely take the observed action receive little credit.
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    /// Number of adjustable options.
    pub k: usize,
    /// Step size α.
    pub alpha: f64,
    /// Exploration parameter ε for option choice.
    pub epsilon: f64,
    /// Per-option consideration cost c̄ used inside the V and M estimates.
    pub c_bar: f64,
    /// Entropy regularization weight η.
    pub eta: f64,
    pub gamma: f64,
    pub total_steps: u64,
    /// Evaluate every this many steps; 0 disables evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Decision-cost weight of the evaluation objective (fixed, not c̄).
    pub eval_c: f64,
    pub is_clip: IsClip,
}

impl LearnerConfig {
    /// Experiment defaults: α=0.01, ε=0.1, γ=1, 10⁷ steps, evaluation of
    /// 500 greedy episodes every 10⁵ steps at c=0.2.
    pub fn defaults(algorithm: Algorithm, k: usize) -> Self {
        LearnerConfig {
            algorithm,
            k,
            alpha: 0.01,
            epsilon: 0.1,
            c_bar: 0.2,
            eta: 0.0,
            gamma: 1.0,
            total_steps: 10_000_000,
            eval_every: 100_000,
            eval_episodes: 500,
            eval_c: 0.2,
            is_clip: IsClip::AsPaper,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |context: &str| {
            Err(LearnerError::InvalidConfig { context: context.to_string() })
        };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.c_bar < 0.0 || !self.c_bar.is_finite() {
            return bad("c_bar must be nonnegative");
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return bad("eta must be nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be positive when evaluation is enabled");
        }
        Ok(())
    }
}

/// Derived probability tables, refreshed incrementally as preferences
/// change, plus reusable step buffers.
#[derive(Debug, Clone, Default)]
struct Caches {
    ready: bool,
    /// `[s][h][a]` softmax rows for adjustable options.
    pi: Vec<f64>,
    /// `[s][h]` termination probabilities for adjustable options.
    beta: Vec<f64>,
    /// `[s][h]` interest probabilities for adjustable options.
    interest: Vec<f64>,
    mu_buf: Vec<f64>,
    delta_buf: Vec<f64>,
    rho_buf: Vec<f64>,
    m_buf: Vec<f64>,
    pi_row: Vec<f64>,
}

/// Everything one training run mutates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerState {
    pub set: OptionSet,
    pub num_states: usize,
    pub task_count: usize,
    /// Option values, `[task][state][option]`.
    pub q: Vec<f64>,
    pub tables: ParamTables,
    /// Termination probability observed on arrival at the current state.
    pub beta_prev: f64,
    pub task: TaskId,
    pub state: StateId,
    pub step_count: u64,
    #[serde(skip)]
    caches: Caches,
}

impl PartialEq for LearnerState {
    fn eq(&self, other: &Self) -> bool {
        self.set == other.set
            && self.num_states == other.num_states
            && self.task_count == other.task_count
            && self.q == other.q
            && self.tables == other.tables
            && self.beta_prev == other.beta_prev
            && self.task == other.task
            && self.state == other.state
            && self.step_count == other.step_count
    }
}

impl LearnerState {
    /// Fresh state: zero values and preferences (interests pinned when the
    /// algorithm fixes them), and a sampled initial task and state.
    pub fn new<R: Rng>(mdp: &TabularMdp, cfg: &LearnerConfig, rng: &mut R) -> Self {
        let set = OptionSet::new(cfg.k, mdp.num_actions);
        assert!(set.num_options() <= 64, "option sets are limited to 64 members");
        let mut tables = ParamTables::zeros(mdp.num_states, set);
        if cfg.algorithm == Algorithm::Maoc {
            tables.w_i.fill(PINNED_INTEREST);
        }
        let task = mdp.sample_task(rng);
        let state = mdp.sample_initial(rng);
        let mut out = LearnerState {
            set,
            num_states: mdp.num_states,
            task_count: mdp.task_count,
            q: vec![0.0; mdp.task_count * mdp.num_states * set.num_options()],
            tables,
            beta_prev: 1.0,
            task,
            state,
            step_count: 0,
            caches: Caches::default(),
        };
        out.rebuild_caches();
        out
    }

    /// One option-value row, `[option]` for the given task and state.
    #[inline]
    pub fn q_row(&self, n: TaskId, s: StateId) -> &[f64] {
        let base = (n * self.num_states + s) * self.set.num_options();
        &self.q[base..base + self.set.num_options()]
    }

    /// The task's full value table, `[state][option]`.
    #[inline]
    pub fn q_task(&self, n: TaskId) -> &[f64] {
        let per = self.num_states * self.set.num_options();
        &self.q[n * per..(n + 1) * per]
    }

    pub fn interest(&self, s: StateId, h: usize) -> f64 {
        if self.set.is_adjustable(h) {
            self.caches.interest[self.tables.sh_index(s, h)]
        } else {
            1.0
        }
    }

    pub fn termination(&self, s: StateId, h: usize) -> f64 {
        if self.set.is_adjustable(h) {
            self.caches.beta[self.tables.sh_index(s, h)]
        } else {
            1.0
        }
    }

    /// Recompute every derived probability table; needed after
    /// deserialization or direct edits to the preference tables.
    pub fn rebuild_caches(&mut self) {
        let set = self.set;
        let (k, num_a) = (set.k, set.num_actions);
        let c = &mut self.caches;
        c.pi.resize(self.num_states * k * num_a, 0.0);
        c.beta.resize(self.num_states * k, 0.0);
        c.interest.resize(self.num_states * k, 0.0);
        for s in 0..self.num_states {
            for h in 0..k {
                self.tables.policy_into(s, h, &mut c.pi[(s * k + h) * num_a..][..num_a]);
                c.beta[s * k + h] = sigmoid(self.tables.w_beta[s * k + h]);
                c.interest[s * k + h] = sigmoid(self.tables.w_i[s * k + h]);
            }
        }
        let num_h = set.num_options();
        c.mu_buf.resize(num_h, 0.0);
        c.delta_buf.resize(num_h, 0.0);
        c.rho_buf.resize(num_h, 0.0);
        c.m_buf.resize(k, 0.0);
        c.pi_row.resize(num_a, 0.0);
        c.ready = true;
    }

    fn ensure_caches(&mut self) {
        if !self.caches.ready {
            self.rebuild_caches();
        }
    }
}

/// ε-greedy value statistics of an option set: with ties sharing the greedy
/// mass, the set's value is `ε·mean + (1-ε)·max`, so membership tweaks only
/// need the sum, the count, the two largest values, and the max's
/// multiplicity.
#[derive(Debug, Clone, Copy)]
struct SetStats {
    count: usize,
    sum: f64,
    max1: f64,
    max1_count: usize,
    max2: f64,
}

impl SetStats {
    fn collect(q_row: &[f64], omega: InitiationSample) -> Self {
        let mut stats = SetStats {
            count: 0,
            sum: 0.0,
            max1: f64::NEG_INFINITY,
            max1_count: 0,
            max2: f64::NEG_INFINITY,
        };
        for (h, &q) in q_row.iter().enumerate() {
            if !omega.contains(h) {
                continue;
            }
            stats.count += 1;
            stats.sum += q;
            if q > stats.max1 {
                stats.max2 = stats.max1;
                stats.max1 = q;
                stats.max1_count = 1;
            } else if q == stats.max1 {
                stats.max1_count += 1;
            } else if q > stats.max2 {
                stats.max2 = q;
            }
        }
        stats
    }

    #[inline]
    fn value(&self, epsilon: f64) -> f64 {
        epsilon * (self.sum / self.count as f64) + (1.0 - epsilon) * self.max1
    }

    /// Set value after adding a non-member with value `q`.
    fn value_with(&self, q: f64, epsilon: f64) -> f64 {
        let max = if q > self.max1 { q } else { self.max1 };
        epsilon * ((self.sum + q) / (self.count + 1) as f64) + (1.0 - epsilon) * max
    }

    /// Set value after removing a member with value `q`; the set must keep
    /// at least one member.
    fn value_without(&self, q: f64, epsilon: f64) -> f64 {
        let max = if q == self.max1 && self.max1_count == 1 { self.max2 } else { self.max1 };
        epsilon * ((self.sum - q) / (self.count - 1) as f64) + (1.0 - epsilon) * max
    }
}

/// Interest-smoothed state-value estimate from one sampled initiation set:
/// the average over adjustable options of the interest-weighted values with
/// that option forced in or out, minus c̄ times the expected set size. With
/// no adjustable options this is simply the sampled set's ε-greedy value.
pub fn estimate_v(
    q_row: &[f64],
    tables: &ParamTables,
    s: StateId,
    omega: InitiationSample,
    epsilon: f64,
    c_bar: f64,
) -> f64 {
    let interests: Vec<f64> = (0..tables.set.k)
        .map(|h| sigmoid(tables.w_i[tables.sh_index(s, h)]))
        .collect();
    estimate_v_from(q_row, &interests, omega, epsilon, c_bar)
}

fn estimate_v_from(
    q_row: &[f64],
    interests: &[f64],
    omega: InitiationSample,
    epsilon: f64,
    c_bar: f64,
) -> f64 {
    let stats = SetStats::collect(q_row, omega);
    let k = interests.len();
    if k == 0 {
        return stats.value(epsilon);
    }
    let base = stats.value(epsilon);
    let mut total = 0.0;
    let mut cost = 0.0;
    for (x, &i) in interests.iter().enumerate() {
        let (v_in, v_out) = if omega.contains(x) {
            (base, stats.value_without(q_row[x], epsilon))
        } else {
            (stats.value_with(q_row[x], epsilon), base)
        };
        total += i * v_in + (1.0 - i) * v_out;
        cost += i;
    }
    total / k as f64 - c_bar * cost
}

/// Low-variance interest-gradient estimate from one sampled initiation set:
/// component `x` is `i(1-i)` times the advantage of considering option `x`,
/// `V(Ω∪{x}) - V(Ω∖{x}) - c̄`.
pub fn estimate_m(
    q_row: &[f64],
    tables: &ParamTables,
    s: StateId,
    omega: InitiationSample,
    epsilon: f64,
    c_bar: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; tables.set.k];
    let interests: Vec<f64> = (0..tables.set.k)
        .map(|h| sigmoid(tables.w_i[tables.sh_index(s, h)]))
        .collect();
    estimate_m_into(q_row, &interests, omega, epsilon, c_bar, &mut out);
    out
}

fn estimate_m_into(
    q_row: &[f64],
    interests: &[f64],
    omega: InitiationSample,
    epsilon: f64,
    c_bar: f64,
    out: &mut [f64],
) {
    let stats = SetStats::collect(q_row, omega);
    let base = stats.value(epsilon);
    for (x, &i) in interests.iter().enumerate() {
        let (v_in, v_out) = if omega.contains(x) {
            (base, stats.value_without(q_row[x], epsilon))
        } else {
            (stats.value_with(q_row[x], epsilon), base)
        };
        out[x] = i * (1.0 - i) * (v_in - v_out - c_bar);
    }
}

/// One-step TD errors for every option, sharing a single sampled
/// continuation branch: with probability `beta` the target bootstraps from
/// `v_next`, otherwise from the option's own value at the next state.
/// Returns whether the branch fired. Both targets are scaled by
/// `γ(1 - Z)`, so terminal transitions reduce to `R - Q(S, h)`.
pub fn td_errors<R: Rng>(
    reward: f64,
    q_row: &[f64],
    q_row_next: &[f64],
    v_next: f64,
    beta: f64,
    terminal: bool,
    gamma: f64,
    rng: &mut R,
    out: &mut [f64],
) -> bool {
    let branch = sample::bernoulli(rng, beta);
    let scale = if terminal { 0.0 } else { gamma };
    for h in 0..q_row.len() {
        let target = if branch { v_next } else { q_row_next[h] };
        out[h] = reward - q_row[h] + scale * target;
    }
    branch
}

fn sample_set_from_interests<R: Rng>(
    interests: &[f64],
    s: StateId,
    set: OptionSet,
    rng: &mut R,
) -> InitiationSample {
    let mut mask = ((1u64 << set.num_actions) - 1) << set.k;
    for h in 0..set.k {
        if sample::bernoulli(rng, interests[s * set.k + h]) {
            mask |= 1 << h;
        }
    }
    InitiationSample::from_mask(mask)
}

/// One full training step in the exact order of the update loop: sample a
/// set and an option at `S`, act, estimate `V` at `S'` from a fresh set,
/// form the shared-branch TD errors, and apply the policy, termination,
/// interest, and value updates.
pub fn fpoc_step<R: Rng>(
    state: &mut LearnerState,
    cfg: &LearnerConfig,
    mdp: &TabularMdp,
    rng: &mut R,
) -> Result<(), LearnerError> {
    state.ensure_caches();
    let set = state.set;
    let (k, num_a, num_h) = (set.k, set.num_actions, set.num_options());
    let (n, s) = (state.task, state.state);
    let q_base = (n * state.num_states + s) * num_h;

    // Decision at S.
    let omega = sample_set_from_interests(&state.caches.interest, s, set, rng);
    {
        let q_row = &state.q[q_base..q_base + num_h];
        meta_policy_into(q_row, omega, cfg.epsilon, &mut state.caches.mu_buf)?;
    }
    let chosen = sample::categorical(rng, &state.caches.mu_buf);
    let action = match set.primitive_action(chosen) {
        Some(a) => a,
        None => {
            let row = &state.caches.pi[(s * k + chosen) * num_a..][..num_a];
            sample::categorical(rng, row)
        }
    };

    // Environment transition.
    let out = mdp.step(rng, n, s, action)?;
    let (s_next, reward, terminal) = (out.next_state, out.reward, out.terminated);

    // Fresh set at S' for the value estimate.
    let omega_next = sample_set_from_interests(&state.caches.interest, s_next, set, rng);
    let q_next_base = (n * state.num_states + s_next) * num_h;
    let v_next = {
        let q_row_next = &state.q[q_next_base..q_next_base + num_h];
        estimate_v_from(
            q_row_next,
            &state.caches.interest[s_next * k..(s_next + 1) * k],
            omega_next,
            cfg.epsilon,
            cfg.c_bar,
        )
    };

    // Termination probability of the running option at S', and the TD
    // errors under one shared branch.
    let beta = if set.is_adjustable(chosen) {
        state.caches.beta[s_next * k + chosen]
    } else {
        1.0
    };
    {
        // Split borrows: both q rows are read while the delta buffer is
        // written; the rows coincide on self-transitions.
        let (q_row, q_row_next) = if q_base == q_next_base {
            let row = &state.q[q_base..q_base + num_h];
            (row, row)
        } else if q_base < q_next_base {
            let (a, b) = state.q.split_at(q_next_base);
            (&a[q_base..q_base + num_h], &b[..num_h])
        } else {
            let (a, b) = state.q.split_at(q_base);
            (&b[..num_h], &a[q_next_base..q_next_base + num_h])
        };
        td_errors(
            reward,
            q_row,
            q_row_next,
            v_next,
            beta,
            terminal,
            cfg.gamma,
            rng,
            &mut state.caches.delta_buf,
        );
    }

    // Probability of the taken action under the option that chose it, read
    // before any update so the importance ratios below refer to the same
    // policy the action was sampled from.
    let denom = if set.is_adjustable(chosen) {
        state.caches.pi[(s * k + chosen) * num_a + action]
    } else {
        1.0
    };

    // Actor updates for the chosen option.
    if set.is_adjustable(chosen) {
        let delta_h = state.caches.delta_buf[chosen];
        let pi_base = (s * k + chosen) * num_a;
        state.caches.pi_row.copy_from_slice(&state.caches.pi[pi_base..pi_base + num_a]);
        let ent = if cfg.eta > 0.0 { entropy(&state.caches.pi_row) } else { 0.0 };
        for a in 0..num_a {
            let pa = state.caches.pi_row[a];
            let score = if a == action { 1.0 - pa } else { -pa };
            let mut inc = score * delta_h;
            if cfg.eta > 0.0 {
                let ln_pa = pa.clamp(PROB_CLAMP, 1.0).ln();
                inc += cfg.eta * (-pa * (ln_pa + ent));
            }
            state.tables.w_pi[pi_base + a] += cfg.alpha * inc;
        }
        state.tables.policy_into(s, chosen, &mut state.caches.pi[pi_base..pi_base + num_a]);

        // Termination update at S': the TD part as written, with the
        // entropy term folded in through the identity
        // -β(1-β)·η·log((1-β)/β) · γ(Z-1) = γ(1-Z)·η·∂Ent/∂Wβ.
        let z = if terminal { 1.0 } else { 0.0 };
        let q_next_h = state.q[q_next_base + chosen];
        let mut inc = cfg.gamma * (z - 1.0) * beta * (1.0 - beta) * (q_next_h - v_next);
        if cfg.eta > 0.0 {
            inc += cfg.gamma * (1.0 - z) * cfg.eta * entropy_grad_binary_clamped(beta);
        }
        let sh = s_next * k + chosen;
        state.tables.w_beta[sh] += cfg.alpha * inc;
        state.caches.beta[sh] = sigmoid(state.tables.w_beta[sh]);
    }

    // Interest updates at S for every adjustable option, gated by the
    // termination probability observed on arrival (1 at episode starts).
    if cfg.algorithm == Algorithm::Fpoc && k > 0 {
        {
            let q_row = &state.q[q_base..q_base + num_h];
            let interests = &state.caches.interest[s * k..(s + 1) * k];
            let (m_buf, _) = state.caches.m_buf.split_at_mut(k);
            estimate_m_into(q_row, interests, omega, cfg.epsilon, cfg.c_bar, m_buf);
        }
        for h in 0..k {
            let i = state.caches.interest[s * k + h];
            let mut inc = state.caches.m_buf[h];
            if cfg.eta > 0.0 {
                inc += cfg.eta * entropy_grad_binary_clamped(i);
            }
            state.tables.w_i[s * k + h] += cfg.alpha * cfg.gamma * state.beta_prev * inc;
            state.caches.interest[s * k + h] = sigmoid(state.tables.w_i[s * k + h]);
        }
    }

    // Value updates for every option, weighted by the clipped importance
    // ratio of the taken action. All probabilities are sampling-time values:
    // the chosen option's own ratio is exactly 1, and the other rows were not
    // touched this step.
    for h in 0..num_h {
        let num = if h == chosen {
            denom
        } else {
            match set.primitive_action(h) {
                Some(a) => {
                    if a == action {
                        1.0
                    } else {
                        0.0
                    }
                }
                None => state.caches.pi[(s * k + h) * num_a + action],
            }
        };
        let rho = match cfg.is_clip {
            IsClip::AsPaper => (num / denom).max(1.0),
            IsClip::Min => (num / denom).min(1.0),
        };
        state.q[q_base + h] += cfg.alpha * rho * state.caches.delta_buf[h];
    }

    state.beta_prev = beta;
    state.step_count += 1;
    if terminal {
        state.task = mdp.sample_task(rng);
        state.state = mdp.sample_initial(rng);
        state.beta_prev = 1.0;
    } else {
        state.state = s_next;
    }
    Ok(())
}

/// One evaluation pause: greedy episodes with uniformly sampled tasks, no
/// parameter updates. Returns the mean compound return and its standard
/// error.
pub fn evaluate<R: Rng>(
    mdp: &TabularMdp,
    state: &LearnerState,
    episodes: usize,
    epsilon: f64,
    c: f64,
    rng: &mut R,
) -> Result<(f64, f64), LearnerError> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..episodes {
        let n = mdp.sample_task(rng);
        let record = run_episode(
            mdp,
            n,
            &state.tables,
            state.q_task(n),
            epsilon,
            ExecMode::Greedy,
            rng,
            EVAL_MAX_STEPS,
        )?;
        let g = compound_return(&record, c);
        sum += g;
        sum_sq += g * g;
    }
    let mean = sum / episodes as f64;
    let var = if episodes > 1 {
        ((sum_sq - sum * sum / episodes as f64) / (episodes - 1) as f64).max(0.0)
    } else {
        0.0
    };
    Ok((mean, (var / episodes as f64).sqrt()))
}

/// One point on a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_compound_return: f64,
    pub stderr: f64,
}

/// A finished training run: the final state and its learning curve.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: LearnerState,
    pub curve: Vec<EvalPoint>,
}

/// Train from scratch for `total_steps`, pausing every `eval_every` steps
/// to record a curve point from greedy evaluation episodes.
pub fn train<R: Rng>(
    cfg: &LearnerConfig,
    mdp: &TabularMdp,
    rng: &mut R,
) -> Result<TrainReport, LearnerError> {
    cfg.validate()?;
    let mut state = LearnerState::new(mdp, cfg, rng);
    let mut curve = Vec::new();
    for step in 1..=cfg.total_steps {
        fpoc_step(&mut state, cfg, mdp, rng)?;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            // A dedicated generator keeps evaluation from perturbing the
            // training stream by a data-dependent number of draws.
            let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let (mean, stderr) =
                evaluate(mdp, &state, cfg.eval_episodes, cfg.epsilon, cfg.eval_c, &mut eval_rng)?;
            curve.push(EvalPoint { step, mean_compound_return: mean, stderr });
        }
    }
    Ok(TrainReport { state, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::sample_initiation_set;
    use crate::grid::four_room;
    use crate::mdp::{build_mdp, Outcome, TaskMode};
    use crate::oracle::{exact_estimator_means, naive_m, random_fixture};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn config(algorithm: Algorithm, k: usize) -> LearnerConfig {
        LearnerConfig { eval_every: 0, ..LearnerConfig::defaults(algorithm, k) }
    }

    #[test]
    fn pinned_interest_saturates_exactly() {
        assert_eq!(sigmoid(PINNED_INTEREST), 1.0);
        assert_eq!(entropy_grad_binary_clamped(1.0), 0.0);
    }

    #[test]
    fn estimate_v_collapses_with_saturated_interest() {
        // One adjustable option always present: the estimate is the sampled
        // set's value minus the certain cost.
        let mut tables = ParamTables::zeros(1, OptionSet::new(1, 2));
        tables.w_i[0] = PINNED_INTEREST;
        let q_row = [1.0, -0.5, 0.25];
        let omega = InitiationSample::from_mask(0b111);
        let v = estimate_v(&q_row, &tables, 0, omega, 0.1, 0.3);
        let direct = 0.1 * ((1.0 - 0.5 + 0.25) / 3.0) + 0.9 * 1.0 - 0.3;
        assert_abs_diff_eq!(v, direct, epsilon = 1e-12);
    }

    #[test]
    fn estimate_v_of_constant_values_is_the_constant() {
        let tables = ParamTables::zeros(2, OptionSet::new(2, 3));
        let q_row = [0.75; 5];
        for mask in [0b11100u64, 0b11101, 0b11111] {
            let v = estimate_v(&q_row, &tables, 1, InitiationSample::from_mask(mask), 0.2, 0.0);
            assert_abs_diff_eq!(v, 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn estimate_m_vanishes_at_saturated_interest() {
        // +500 saturates the sigmoid to exactly 1.0; the zero side needs a
        // larger magnitude before the exponential underflows to exactly 0.
        let mut tables = ParamTables::zeros(1, OptionSet::new(2, 2));
        tables.w_i[0] = PINNED_INTEREST;
        tables.w_i[1] = -1000.0;
        let q_row = [5.0, -3.0, 1.0, 2.0];
        let m = estimate_m(&q_row, &tables, 0, InitiationSample::from_mask(0b1101), 0.1, 0.4);
        assert_eq!(m, vec![0.0, 0.0]);
    }

    #[test]
    fn estimate_m_of_never_selected_option_is_cost_pressure() {
        // Option 0's value is far below the rest, so it is never chosen and
        // its inclusion advantage is pure cost.
        let tables = ParamTables::zeros(1, OptionSet::new(1, 2));
        let q_row = [-100.0, 1.0, 2.0];
        let c_bar = 0.6;
        let m = estimate_m(&q_row, &tables, 0, InitiationSample::from_mask(0b111), 0.0, c_bar);
        // ε=0 removes even the exploration mass, making the cancellation
        // exact: i(1-i)(0 - c̄).
        assert_abs_diff_eq!(m[0], 0.25 * -c_bar, epsilon = 1e-12);
    }

    #[test]
    fn estimators_are_unbiased_on_a_random_fixture() {
        let mut r = rng(3);
        let (_, tables, _) = random_fixture(&mut r, 4, 3, 1, 2, 1.0);
        let s = 2;
        let q_row: Vec<f64> = (0..5).map(|h| (h as f64 * 1.3).sin()).collect();
        let (epsilon, c_bar) = (0.1, 0.2);
        let (v_exact, m_exact) = exact_estimator_means(&q_row, &tables, s, c_bar, epsilon).unwrap();

        let samples = 100_000;
        let mut v_stats = (0.0, 0.0);
        let mut m_stats = vec![(0.0, 0.0); 2];
        let mut naive_stats = vec![(0.0, 0.0); 2];
        for _ in 0..samples {
            let omega = sample_initiation_set(&tables, s, &mut r);
            let v = estimate_v(&q_row, &tables, s, omega, epsilon, c_bar);
            v_stats.0 += v;
            v_stats.1 += v * v;
            let m = estimate_m(&q_row, &tables, s, omega, epsilon, c_bar);
            let nm = naive_m(&q_row, &tables, s, omega, c_bar, epsilon);
            for x in 0..2 {
                m_stats[x].0 += m[x];
                m_stats[x].1 += m[x] * m[x];
                naive_stats[x].0 += nm[x];
                naive_stats[x].1 += nm[x] * nm[x];
            }
        }
        let band = |stats: (f64, f64)| {
            let mean = stats.0 / samples as f64;
            let var = (stats.1 / samples as f64 - mean * mean).max(0.0);
            (mean, 3.0 * (var / samples as f64).sqrt())
        };
        let (v_mean, v_band) = band(v_stats);
        assert!((v_mean - v_exact).abs() < v_band.max(1e-9), "{v_mean} vs {v_exact}");
        for x in 0..2 {
            let (m_mean, m_band) = band(m_stats[x]);
            assert!(
                (m_mean - m_exact[x]).abs() < m_band.max(1e-9),
                "component {x}: {m_mean} vs {}",
                m_exact[x]
            );
            let (n_mean, n_band) = band(naive_stats[x]);
            assert!(
                (n_mean - m_exact[x]).abs() < n_band.max(1e-9),
                "naive component {x}: {n_mean} vs {}",
                m_exact[x]
            );
        }
    }

    #[test]
    fn smoothed_estimators_have_lower_variance_than_naive() {
        // The motivating case: undecided interests and no cost, where the
        // naive estimate flips sign with membership.
        let tables = ParamTables::zeros(1, OptionSet::new(2, 2));
        let q_row = [1.5, -0.75, 0.25, 0.5];
        let (epsilon, c_bar) = (0.1, 0.0);
        let mut r = rng(7);
        let samples = 200_000;
        let mut smoothed = vec![Vec::new(); 2];
        let mut naive = vec![Vec::new(); 2];
        let mut v_smoothed = Vec::new();
        let mut v_naive = Vec::new();
        for _ in 0..samples {
            let omega = sample_initiation_set(&tables, 0, &mut r);
            let m = estimate_m(&q_row, &tables, 0, omega, epsilon, c_bar);
            let nm = naive_m(&q_row, &tables, 0, omega, c_bar, epsilon);
            for x in 0..2 {
                smoothed[x].push(m[x]);
                naive[x].push(nm[x]);
            }
            v_smoothed.push(estimate_v(&q_row, &tables, 0, omega, epsilon, c_bar));
            let mu = crate::exec::meta_policy(&q_row, omega, epsilon).unwrap();
            v_naive.push(mu.iter().zip(&q_row).map(|(p, q)| p * q).sum::<f64>());
        }
        let variance = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
        };
        for x in 0..2 {
            let (vs, vn) = (variance(&smoothed[x]), variance(&naive[x]));
            assert!(vs < vn, "component {x}: {vs} !< {vn}");
        }
        let (vs, vn) = (variance(&v_smoothed), variance(&v_naive));
        assert!(vs < vn, "value estimate: {vs} !< {vn}");
    }

    #[test]
    fn td_error_examples() {
        let mut r = rng(1);
        let mut out = vec![0.0; 2];
        // Terminal: the target is just the reward.
        td_errors(-1.0, &[-5.0, 2.0], &[9.0, 9.0], 9.0, 1.0, true, 1.0, &mut r, &mut out);
        assert_eq!(out, vec![4.0, -3.0]);
        // β=1 always bootstraps from the state value.
        let branch =
            td_errors(-1.0, &[0.0, 0.0], &[7.0, 8.0], 3.0, 1.0, false, 0.5, &mut r, &mut out);
        assert!(branch);
        assert_eq!(out, vec![0.5, 0.5]);
        // Consistent values cancel: R=-1, γ=1, Q(S)=-5, Q(S')=-4, no branch.
        let branch =
            td_errors(-1.0, &[-5.0], &[-4.0], 100.0, 0.0, false, 1.0, &mut r, &mut out[..1]);
        assert!(!branch);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn termination_update_matches_verbatim_rule() {
        // The implementation folds the entropy term through an algebraic
        // identity; at interior β both forms agree.
        let (gamma, eta) = (0.97, 0.3);
        for &(beta, q, v, z) in
            &[(0.3f64, 1.25, 0.5, 0.0), (0.8, -2.0, -1.0, 0.0), (0.5, 0.0, 4.0, 1.0)]
        {
            let verbatim: f64 =
                gamma * (z - 1.0) * beta * (1.0 - beta) * (q - v - eta * ((1.0 - beta) / beta).ln());
            let implemented = gamma * (z - 1.0) * beta * (1.0 - beta) * (q - v)
                + gamma * (1.0 - z) * eta * entropy_grad_binary_clamped(beta);
            assert_abs_diff_eq!(implemented, verbatim, epsilon = 1e-12);
        }
    }

    /// 3-state corridor: 0 -> 1 -> 2 (terminal), one action, reward -1.
    fn corridor() -> TabularMdp {
        TabularMdp {
            num_states: 3,
            num_actions: 1,
            task_count: 1,
            transition: vec![
                vec![Outcome { next: 1, reward: -1.0, prob: 1.0 }],
                vec![Outcome { next: 2, reward: -1.0, prob: 1.0 }],
                vec![Outcome { next: 2, reward: 0.0, prob: 1.0 }],
            ],
            terminal: vec![false, false, true],
            initial_dist: vec![1.0, 0.0, 0.0],
            gamma: 1.0,
        }
    }

    #[test]
    fn hand_stepped_trace_on_corridor() {
        // Single task, one adjustable option with pinned interest, single
        // action: every quantity in the first step is computable by hand up
        // to the sampled termination branch, which we recover by replaying
        // the draw sequence on a cloned generator.
        let mdp = corridor();
        let mut cfg = config(Algorithm::Fpoc, 1);
        cfg.epsilon = 0.0;
        cfg.c_bar = 0.3;
        cfg.eta = 0.0;
        cfg.alpha = 0.1;
        let mut r = rng(11);
        let mut state = LearnerState::new(&mdp, &cfg, &mut r);
        state.tables.w_i[0] = PINNED_INTEREST;
        state.tables.w_i[1] = PINNED_INTEREST;
        state.tables.w_i[2] = PINNED_INTEREST;
        state.rebuild_caches();
        // Seed values so the adjustable option is the strict greedy choice
        // at state 0 and the primitive leads at state 1.
        let h = state.set.num_options();
        assert_eq!(h, 2);
        state.q[0] = 0.5; // (task 0, state 0, option 0)
        state.q[1] = 0.0;
        state.q[2] = -0.2; // state 1, adjustable
        state.q[3] = -0.1; // state 1, primitive
        assert_eq!(state.state, 0);

        // Replay the draw order: Ω at S (1 draw), H (1), A (0: single
        // action still costs one categorical draw over [1.0]), env (0),
        // Ω' (1), branch (1).
        let mut probe = r.clone();
        let _omega = sample::bernoulli(&mut probe, 1.0);
        let _h = sample::categorical(&mut probe, &[1.0, 0.0]);
        let _a = sample::categorical(&mut probe, &[1.0]);
        let _omega_next = sample::bernoulli(&mut probe, 1.0);
        let beta0 = 0.5; // sigmoid(0) at (state 1, option 0)
        let branch = sample::bernoulli(&mut probe, beta0);

        fpoc_step(&mut state, &cfg, &mdp, &mut r).unwrap();

        // V(S'): both options present, ε=0 → max Q − c̄ = −0.1 − 0.3.
        let v_next = -0.1 - 0.3;
        let target = if branch { v_next } else { -0.2 };
        let delta0 = -1.0 - 0.5 + target;
        let delta1 = -1.0 - 0.0 + target;
        assert_abs_diff_eq!(state.q[0], 0.5 + 0.1 * delta0, epsilon = 1e-15);
        assert_abs_diff_eq!(state.q[1], 0.1 * delta1, epsilon = 1e-15);
        // Single action: the policy score is zero, so Wπ is untouched; the
        // termination update moves Wβ at (S'=1, option 0).
        assert_eq!(state.tables.w_pi, vec![0.0; 3]);
        let expected_beta_inc =
            0.1 * (1.0 * (0.0 - 1.0) * beta0 * (1.0 - beta0) * (-0.2 - v_next));
        assert_abs_diff_eq!(state.tables.w_beta[1], expected_beta_inc, epsilon = 1e-15);
        assert_eq!(state.tables.w_beta[0], 0.0);
        assert_eq!(state.tables.w_beta[2], 0.0);
        // Pinned interests stay exactly put even though this is the
        // interest-learning algorithm.
        assert_eq!(state.tables.w_i, vec![PINNED_INTEREST; 3]);
        assert_eq!(state.state, 1);
        assert_eq!(state.beta_prev, beta0);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn policy_increments_sum_to_zero() {
        // Across many steps, each policy row update must keep the softmax
        // score identity Σ_a (1{a=A} − π(a)) = 0, with or without entropy.
        for eta in [0.0, 0.4] {
            let mut r = rng(19);
            let (mdp, _, _) = random_fixture(&mut r, 5, 3, 2, 2, 1.0);
            let mut cfg = config(Algorithm::Fpoc, 2);
            cfg.eta = eta;
            let mut state = LearnerState::new(&mdp, &cfg, &mut r);
            for _ in 0..200 {
                let before = state.tables.w_pi.clone();
                fpoc_step(&mut state, &cfg, &mdp, &mut r).unwrap();
                for (s, h) in (0..5).flat_map(|s| (0..2).map(move |h| (s, h))) {
                    let base = state.tables.pi_index(s, h, 0);
                    let row_sum: f64 =
                        (0..3).map(|a| state.tables.w_pi[base + a] - before[base + a]).sum();
                    assert!(row_sum.abs() < 1e-12, "row ({s},{h}) drifted by {row_sum}");
                }
            }
        }
    }

    #[test]
    fn one_step_touches_only_its_own_rows() {
        let mut r = rng(23);
        let (mdp, _, _) = random_fixture(&mut r, 6, 3, 3, 2, 0.9);
        let cfg = config(Algorithm::Fpoc, 2);
        let mut state = LearnerState::new(&mdp, &cfg, &mut r);
        // Give values some texture so updates are nonzero.
        for (i, q) in state.q.iter_mut().enumerate() {
            *q = ((i * 31) % 17) as f64 * 0.01;
        }
        for _ in 0..100 {
            let (n, s) = (state.task, state.state);
            let before = state.clone();
            fpoc_step(&mut state, &cfg, &mdp, &mut r).unwrap();
            let num_h = state.set.num_options();
            for idx in 0..state.q.len() {
                if state.q[idx] != before.q[idx] {
                    assert_eq!(idx / (6 * num_h), n, "value update outside current task");
                    assert_eq!(idx % (6 * num_h) / num_h, s, "value update outside S");
                }
            }
            for idx in 0..state.tables.w_i.len() {
                if state.tables.w_i[idx] != before.tables.w_i[idx] {
                    assert_eq!(idx / 2, s, "interest update outside S");
                }
            }
        }
    }

    #[test]
    fn pinned_interest_run_equals_maoc_bitwise() {
        let grid = four_room();
        let mdp = build_mdp(&grid, TaskMode::TrainTasks, 1.0).unwrap();
        for eta in [0.0, 0.05] {
            let mut cfg_m = config(Algorithm::Maoc, 2);
            cfg_m.eta = eta;
            let mut cfg_f = cfg_m.clone();
            cfg_f.algorithm = Algorithm::Fpoc;

            let mut rng_m = rng(31);
            let mut rng_f = rng(31);
            let mut maoc = LearnerState::new(&mdp, &cfg_m, &mut rng_m);
            let mut fpoc = LearnerState::new(&mdp, &cfg_f, &mut rng_f);
            // Pin the interest-learning run at saturation by hand.
            fpoc.tables.w_i.fill(PINNED_INTEREST);
            fpoc.rebuild_caches();
            for _ in 0..1000 {
                fpoc_step(&mut maoc, &cfg_m, &mdp, &mut rng_m).unwrap();
                fpoc_step(&mut fpoc, &cfg_f, &mdp, &mut rng_f).unwrap();
            }
            assert!(maoc == fpoc, "diverged at eta={eta}");
            assert!(maoc.step_count == 1000);
        }
    }

    #[test]
    fn primitives_only_training_is_expected_target_td() {
        // With k=0 the learner degenerates to per-task TD over primitive
        // actions with an expected ε-greedy bootstrap; mirror it exactly,
        // including the draw order, and require bitwise-equal value tables.
        let mut r = rng(41);
        let (mdp, _, _) = random_fixture(&mut r, 5, 3, 2, 0, 0.95);
        let mut cfg = config(Algorithm::Fpoc, 0);
        cfg.alpha = 0.05;
        let mut learn_rng = rng(99);
        let mut state = LearnerState::new(&mdp, &cfg, &mut learn_rng);

        let mut ref_rng = rng(99);
        let na = mdp.num_actions;
        let mut q_ref = vec![0.0; mdp.task_count * mdp.num_states * na];
        let mut task = mdp.sample_task(&mut ref_rng);
        let mut s = mdp.sample_initial(&mut ref_rng);
        let mut mu = vec![0.0; na];
        for _ in 0..2000 {
            let row_base = (task * mdp.num_states + s) * na;
            let omega = InitiationSample::from_mask((1 << na) - 1);
            meta_policy_into(&q_ref[row_base..row_base + na], omega, cfg.epsilon, &mut mu)
                .unwrap();
            let h = sample::categorical(&mut ref_rng, &mu);
            let out = mdp.step(&mut ref_rng, task, s, h).unwrap();
            let next_base = (task * mdp.num_states + out.next_state) * na;
            let next_row = &q_ref[next_base..next_base + na];
            // estimate_v with k=0: the sampled set's ε-greedy value.
            let stats = SetStats::collect(next_row, omega);
            let v = stats.value(cfg.epsilon);
            let branch = sample::bernoulli(&mut ref_rng, 1.0);
            assert!(branch);
            let scale = if out.terminated { 0.0 } else { cfg.gamma };
            for h2 in 0..na {
                let delta = out.reward - q_ref[row_base + h2] + scale * v;
                q_ref[row_base + h2] += cfg.alpha * delta;
            }
            if out.terminated {
                task = mdp.sample_task(&mut ref_rng);
                s = mdp.sample_initial(&mut ref_rng);
            } else {
                s = out.next_state;
            }

            fpoc_step(&mut state, &cfg, &mdp, &mut learn_rng).unwrap();
        }
        assert_eq!(state.q, q_ref);
        assert_eq!(state.task, task);
        assert_eq!(state.state, s);
    }

    #[test]
    fn zero_steps_returns_untouched_state_and_empty_curve() {
        let mdp = corridor();
        let mut cfg = config(Algorithm::Maoc, 1);
        cfg.total_steps = 0;
        let report = train(&cfg, &mdp, &mut rng(5)).unwrap();
        assert!(report.curve.is_empty());
        assert_eq!(report.state.step_count, 0);
        assert_eq!(report.state.q, vec![0.0; 6]);
        let fresh = LearnerState::new(&mdp, &cfg, &mut rng(5));
        assert!(report.state == fresh);
    }

    #[test]
    fn training_is_deterministic_given_a_seed() {
        let grid = four_room();
        let mdp = build_mdp(&grid, TaskMode::TrainTasks, 1.0).unwrap();
        let mut cfg = LearnerConfig::defaults(Algorithm::Fpoc, 2);
        cfg.total_steps = 3000;
        cfg.eval_every = 1000;
        cfg.eval_episodes = 20;
        cfg.eta = 0.05;
        let a = train(&cfg, &mdp, &mut rng(77)).unwrap();
        let b = train(&cfg, &mdp, &mut rng(77)).unwrap();
        assert!(a.state == b.state);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 3);
        assert!(a.curve[0].step == 1000 && a.curve[2].step == 3000);
    }

    #[test]
    fn learning_on_corridor_converges_to_consistent_values() {
        // Sanity: a long run on the corridor drives the primitive's values
        // toward the true returns (-2 from state 0, -1 from state 1).
        let mdp = corridor();
        let mut cfg = config(Algorithm::Maoc, 0);
        cfg.alpha = 0.05;
        cfg.total_steps = 20_000;
        let report = train(&cfg, &mdp, &mut rng(13)).unwrap();
        assert_abs_diff_eq!(report.state.q[0], -2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(report.state.q[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = LearnerConfig::defaults(Algorithm::Maoc, 2);
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LearnerConfig::defaults(Algorithm::Maoc, 2);
        cfg.epsilon = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = LearnerConfig::defaults(Algorithm::Maoc, 2);
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LearnerConfig::defaults(Algorithm::Fpoc, 2);
        cfg.eta = -0.1;
        assert!(cfg.validate().is_err());
        assert!(LearnerConfig::defaults(Algorithm::Fpoc, 8).validate().is_ok());
    }

    #[test]
    fn state_roundtrips_through_serde_and_rebuilds_caches() {
        let mut r = rng(61);
        let (mdp, _, _) = random_fixture(&mut r, 4, 2, 2, 1, 1.0);
        let cfg = config(Algorithm::Fpoc, 1);
        let mut state = LearnerState::new(&mdp, &cfg, &mut r);
        for _ in 0..50 {
            fpoc_step(&mut state, &cfg, &mdp, &mut r).unwrap();
        }
        let json = serde_json::to_string(&state).unwrap();
        let mut back: LearnerState = serde_json::from_str(&json).unwrap();
        assert!(back == state);
        // The restored state must keep training identically.
        let mut r2 = r.clone();
        fpoc_step(&mut state, &cfg, &mdp, &mut r).unwrap();
        fpoc_step(&mut back, &cfg, &mdp, &mut r2).unwrap();
        assert!(back == state);
    }

    #[test]
    fn maoc_improves_on_the_four_room_quickly() {
        // Smoke run: a freshly initialized system random-walks (hundreds of
        // steps per episode, large decision costs), while 10⁶ training steps
        // must already cut the evaluation loss by well over half.
        let grid = four_room();
        let mdp = build_mdp(&grid, TaskMode::TrainTasks, 1.0).unwrap();
        let mut cfg = LearnerConfig::defaults(Algorithm::Maoc, 2);
        cfg.eta = 0.05;
        cfg.total_steps = 2_000_000;
        cfg.eval_every = 2_000_000;

        let mut r = rng(101);
        let fresh = LearnerState::new(&mdp, &cfg, &mut r);
        let (untrained, _) = evaluate(&mdp, &fresh, 200, 0.0, cfg.eval_c, &mut r).unwrap();

        let report = train(&cfg, &mdp, &mut rng(101)).unwrap();
        let trained = report.curve.last().unwrap().mean_compound_return;
        assert!(untrained < -600.0, "untrained baseline {untrained}");
        assert!(trained > -450.0, "trained evaluation {trained}");
        assert!(
            trained > untrained + 300.0,
            "trained {trained} vs untrained {untrained}"
        );
    }
}
