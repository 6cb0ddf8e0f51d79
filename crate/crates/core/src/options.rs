//! Option sets: adjustable options backed by preference tables, primitive
//! options, and the hand-designed hallway options for the four-room map.
//!
//! An option set contains `k` adjustable options followed by one primitive
//! option per action. Adjustable options derive their policy from softmaxed
//! preferences and their termination and interest probabilities from
//! sigmoided preferences; primitives execute one fixed action, always
//! terminate, and are available everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridSpec;
use crate::mdp::{ActionId, StateId, GRID_DELTAS};

/// Probabilities are pulled away from 0 and 1 by this margin before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OptionError {
    #[error("option index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("grid {name:?} does not have the four-room structure")]
    UnsupportedGrid { name: String },
    #[error("degenerate probability {value} (entropy derivative undefined)")]
    DegenerateDistribution { value: f64 },
    #[error("malformed option data: {context}")]
    MalformedData { context: String },
}

/// Index layout of an option set: adjustable options `0..k`, then one
/// primitive option per action at `k..k + num_actions`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSet {
    pub k: usize,
    pub num_actions: usize,
}

impl OptionSet {
    pub fn new(k: usize, num_actions: usize) -> Self {
        OptionSet { k, num_actions }
    }

    #[inline]
    pub fn num_options(&self) -> usize {
        self.k + self.num_actions
    }

    #[inline]
    pub fn is_adjustable(&self, h: usize) -> bool {
        h < self.k
    }

    /// The action a primitive option executes, or None for adjustable options.
    #[inline]
    pub fn primitive_action(&self, h: usize) -> Option<ActionId> {
        (h >= self.k && h < self.num_options()).then(|| h - self.k)
    }

    fn check(&self, h: usize) -> Result<(), OptionError> {
        if h >= self.num_options() {
            Err(OptionError::IndexOutOfRange { index: h, bound: self.num_options() })
        } else {
            Ok(())
        }
    }
}

/// Preference tables for the adjustable options of a set.
///
/// Layouts are row-major: policy preferences `[state][option][action]`,
/// termination and interest preferences `[state][option]`. All tables start
/// at zero, i.e. uniform policies and 0.5 termination/interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTables {
    pub set: OptionSet,
    pub num_states: usize,
    pub w_pi: Vec<f64>,
    pub w_beta: Vec<f64>,
    pub w_i: Vec<f64>,
}

impl ParamTables {
    pub fn zeros(num_states: usize, set: OptionSet) -> Self {
        ParamTables {
            set,
            num_states,
            w_pi: vec![0.0; num_states * set.k * set.num_actions],
            w_beta: vec![0.0; num_states * set.k],
            w_i: vec![0.0; num_states * set.k],
        }
    }

    #[inline]
    pub fn pi_index(&self, s: StateId, h: usize, a: ActionId) -> usize {
        (s * self.set.k + h) * self.set.num_actions + a
    }

    #[inline]
    pub fn sh_index(&self, s: StateId, h: usize) -> usize {
        s * self.set.k + h
    }

    /// Action distribution of option `h` at state `s`.
    pub fn policy_dist(&self, s: StateId, h: usize) -> Result<Vec<f64>, OptionError> {
        self.set.check(h)?;
        let mut out = vec![0.0; self.set.num_actions];
        self.policy_into(s, h, &mut out);
        Ok(out)
    }

    /// Allocation-free form of [`Self::policy_dist`]; `out` must have
    /// `num_actions` entries and `h` must be in range.
    pub fn policy_into(&self, s: StateId, h: usize, out: &mut [f64]) {
        if let Some(a) = self.set.primitive_action(h) {
            out.fill(0.0);
            out[a] = 1.0;
        } else {
            let base = self.pi_index(s, h, 0);
            out.copy_from_slice(&self.w_pi[base..base + self.set.num_actions]);
            softmax_in_place(out);
        }
    }

    /// Probability that option `h` terminates on arrival at state `s`.
    pub fn termination_prob(&self, s: StateId, h: usize) -> Result<f64, OptionError> {
        self.set.check(h)?;
        if self.set.is_adjustable(h) {
            Ok(sigmoid(self.w_beta[self.sh_index(s, h)]))
        } else {
            Ok(1.0)
        }
    }

    /// Probability that option `h` is available in the option set at `s`.
    pub fn interest_prob(&self, s: StateId, h: usize) -> Result<f64, OptionError> {
        self.set.check(h)?;
        if self.set.is_adjustable(h) {
            Ok(sigmoid(self.w_i[self.sh_index(s, h)]))
        } else {
            Ok(1.0)
        }
    }

    /// Freeze every option (adjustable, then primitives) into dense tables.
    pub fn tabulate(&self) -> Vec<TabulatedOption> {
        let mut out = Vec::with_capacity(self.set.num_options());
        for h in 0..self.set.k {
            let mut pi = vec![0.0; self.num_states * self.set.num_actions];
            let mut beta = vec![0.0; self.num_states];
            let mut init = vec![0.0; self.num_states];
            for s in 0..self.num_states {
                let row = self.policy_dist(s, h).expect("index in range");
                pi[s * self.set.num_actions..(s + 1) * self.set.num_actions]
                    .copy_from_slice(&row);
                beta[s] = sigmoid(self.w_beta[self.sh_index(s, h)]);
                init[s] = sigmoid(self.w_i[self.sh_index(s, h)]);
            }
            out.push(TabulatedOption {
                name: format!("option-{h}"),
                num_states: self.num_states,
                num_actions: self.set.num_actions,
                pi,
                beta,
                init,
            });
        }
        out.extend(primitive_options(self.num_states, self.set.num_actions));
        out
    }
}

/// A fully materialized option: dense policy, termination, and initiation
/// tables. This is the interchange format between learned options, built-in
/// options, and the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedOption {
    pub name: String,
    pub num_states: usize,
    pub num_actions: usize,
    /// Row-major `[state][action]` distribution.
    pub pi: Vec<f64>,
    /// Termination probability per state.
    pub beta: Vec<f64>,
    /// Initiation (interest) probability per state.
    pub init: Vec<f64>,
}

impl TabulatedOption {
    pub fn policy_row(&self, s: StateId) -> &[f64] {
        &self.pi[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn greedy_action(&self, s: StateId) -> ActionId {
        let row = self.policy_row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    /// The option that executes action `a` once: available everywhere,
    /// terminates immediately.
    pub fn primitive(num_states: usize, num_actions: usize, a: ActionId) -> Self {
        let mut pi = vec![0.0; num_states * num_actions];
        for s in 0..num_states {
            pi[s * num_actions + a] = 1.0;
        }
        TabulatedOption {
            name: format!("primitive-{a}"),
            num_states,
            num_actions,
            pi,
            beta: vec![1.0; num_states],
            init: vec![1.0; num_states],
        }
    }

    fn validate(&self) -> Result<(), OptionError> {
        let bad = |context: String| Err(OptionError::MalformedData { context });
        if self.pi.len() != self.num_states * self.num_actions
            || self.beta.len() != self.num_states
            || self.init.len() != self.num_states
        {
            return bad(format!("table sizes inconsistent in option {:?}", self.name));
        }
        for s in 0..self.num_states {
            let row = self.policy_row(s);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
                return bad(format!("policy row {s} of option {:?} is not a distribution", self.name));
            }
            if !(0.0..=1.0).contains(&self.beta[s]) || !(0.0..=1.0).contains(&self.init[s]) {
                return bad(format!("termination/initiation out of range at state {s} in {:?}", self.name));
            }
        }
        Ok(())
    }
}

/// One primitive option per action.
pub fn primitive_options(num_states: usize, num_actions: usize) -> Vec<TabulatedOption> {
    (0..num_actions)
        .map(|a| TabulatedOption::primitive(num_states, num_actions, a))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct OptionRecord {
    name: String,
    num_states: usize,
    num_actions: usize,
    greedy_actions: Vec<ActionId>,
    policy: Vec<f64>,
    termination: Vec<f64>,
    interest: Vec<f64>,
}

/// Serialize options to JSON, including each option's greedy action map for
/// quick inspection alongside the full distributions.
pub fn export_options(options: &[TabulatedOption]) -> String {
    let records: Vec<OptionRecord> = options
        .iter()
        .map(|o| OptionRecord {
            name: o.name.clone(),
            num_states: o.num_states,
            num_actions: o.num_actions,
            greedy_actions: (0..o.num_states).map(|s| o.greedy_action(s)).collect(),
            policy: o.pi.clone(),
            termination: o.beta.clone(),
            interest: o.init.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("plain data serializes")
}

/// Inverse of [`export_options`]; validates every table.
pub fn import_options(json: &str) -> Result<Vec<TabulatedOption>, OptionError> {
    let records: Vec<OptionRecord> = serde_json::from_str(json)
        .map_err(|e| OptionError::MalformedData { context: e.to_string() })?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let option = TabulatedOption {
            name: r.name,
            num_states: r.num_states,
            num_actions: r.num_actions,
            pi: r.policy,
            beta: r.termination,
            init: r.interest,
        };
        option.validate()?;
        out.push(option);
    }
    Ok(out)
}

/// The two hand-designed options that circulate the four-room map, one per
/// direction. Each follows shortest paths to the next room and terminates
/// exactly on the first cell inside it (the "entrance" cell past the
/// hallway).
#[derive(Debug, Clone, PartialEq)]
pub struct HallwayOptions {
    pub clockwise: TabulatedOption,
    pub counter_clockwise: TabulatedOption,
}

impl HallwayOptions {
    pub fn into_vec(self) -> Vec<TabulatedOption> {
        vec![self.clockwise, self.counter_clockwise]
    }
}

/// Build the circulating hallway options for the bundled four-room map.
pub fn make_hallway_options(grid: &GridSpec) -> Result<HallwayOptions, OptionError> {
    let unsupported = || OptionError::UnsupportedGrid { name: grid.name.clone() };
    let hallways = grid.hallway_cells();
    if grid.width != 13 || grid.height != 13 || grid.num_states() != 104 {
        return Err(unsupported());
    }
    if hallways != vec![(3, 6), (6, 2), (7, 9), (10, 6)] {
        return Err(unsupported());
    }

    // Direction of travel across each hallway cell, as an action index
    // (0 up, 1 down, 2 left, 3 right). Clockwise traffic crosses the top
    // hallway rightward, the right one downward, and so on.
    let clockwise_transit = [(3usize, 6usize, 3usize), (6, 2, 0), (7, 9, 1), (10, 6, 2)];
    let counter_transit = [(3usize, 6usize, 2usize), (6, 2, 1), (7, 9, 0), (10, 6, 3)];

    Ok(HallwayOptions {
        clockwise: circulate(grid, &clockwise_transit, "hallway-clockwise")?,
        counter_clockwise: circulate(grid, &counter_transit, "hallway-counter-clockwise")?,
    })
}

/// Assemble one circulating option from per-hallway transit actions.
fn circulate(
    grid: &GridSpec,
    transit: &[(usize, usize, usize); 4],
    name: &str,
) -> Result<TabulatedOption, OptionError> {
    let num_states = grid.num_states();
    let num_actions = GRID_DELTAS.len();
    let unsupported = || OptionError::UnsupportedGrid { name: grid.name.clone() };

    let hallway_states: Vec<StateId> = transit
        .iter()
        .map(|&(r, c, _)| grid.state_at(r, c).ok_or_else(unsupported))
        .collect::<Result<_, _>>()?;

    // Rooms are the connected components of open cells minus hallways.
    let mut room_of = vec![usize::MAX; num_states];
    let mut room_count = 0;
    for seed in 0..num_states {
        if room_of[seed] != usize::MAX || hallway_states.contains(&seed) {
            continue;
        }
        let room = room_count;
        room_count += 1;
        let mut stack = vec![seed];
        room_of[seed] = room;
        while let Some(s) = stack.pop() {
            let (r, c) = grid.coords_of(s);
            for (dr, dc) in GRID_DELTAS {
                let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                if let Some(t) = grid.state_at(nr, nc) {
                    if room_of[t] == usize::MAX && !hallway_states.contains(&t) {
                        room_of[t] = room;
                        stack.push(t);
                    }
                }
            }
        }
    }
    if room_count != 4 {
        return Err(unsupported());
    }

    let mut action_of = vec![usize::MAX; num_states];
    let mut beta = vec![0.0; num_states];

    for &(r, c, a) in transit {
        let hall = grid.state_at(r, c).expect("checked above");
        action_of[hall] = a;
        let (dr, dc) = GRID_DELTAS[a];
        let entrance = grid
            .state_at((r as isize + dr) as usize, (c as isize + dc) as usize)
            .ok_or_else(unsupported)?;
        beta[entrance] = 1.0;

        // The room this hallway drains: the one on the opposite side of the
        // transit direction.
        let source = grid
            .state_at((r as isize - dr) as usize, (c as isize - dc) as usize)
            .ok_or_else(unsupported)?;
        let room = room_of[source];

        // Breadth-first distances to the hallway within the source room.
        let mut dist = vec![usize::MAX; num_states];
        dist[hall] = 0;
        let mut queue = std::collections::VecDeque::from([hall]);
        while let Some(s) = queue.pop_front() {
            let (sr, sc) = grid.coords_of(s);
            for (dr, dc) in GRID_DELTAS {
                let (nr, nc) = ((sr as isize + dr) as usize, (sc as isize + dc) as usize);
                if let Some(t) = grid.state_at(nr, nc) {
                    if room_of[t] == room && dist[t] == usize::MAX {
                        dist[t] = dist[s] + 1;
                        queue.push_back(t);
                    }
                }
            }
        }

        for s in 0..num_states {
            if room_of[s] != room {
                continue;
            }
            if dist[s] == usize::MAX {
                return Err(unsupported());
            }
            let (sr, sc) = grid.coords_of(s);
            for (na, (dr, dc)) in GRID_DELTAS.iter().enumerate() {
                let (nr, nc) = ((sr as isize + dr) as usize, (sc as isize + dc) as usize);
                let Some(t) = grid.state_at(nr, nc) else { continue };
                if dist[t] != usize::MAX && dist[t] + 1 == dist[s] {
                    action_of[s] = na;
                    break;
                }
            }
        }
    }

    if action_of.contains(&usize::MAX) {
        return Err(unsupported());
    }
    let mut pi = vec![0.0; num_states * num_actions];
    for s in 0..num_states {
        pi[s * num_actions + action_of[s]] = 1.0;
    }
    Ok(TabulatedOption {
        name: name.to_string(),
        num_states,
        num_actions,
        pi,
        beta,
        init: vec![1.0; num_states],
    })
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Replace preferences with their softmax, subtracting the max first so the
/// exponentials cannot overflow.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Entropy of a distribution, clamping probabilities away from 0 before the
/// log.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0);
            p * p.ln()
        })
        .sum::<f64>()
}

/// Gradient of a softmax policy's entropy with respect to its preferences:
/// component `a` is `-pi(a) * (ln pi(a) + entropy(pi))`.
pub fn entropy_grad_policy(probs: &[f64]) -> Result<Vec<f64>, OptionError> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| !p.is_finite()) {
        return Err(OptionError::MalformedData {
            context: format!("entropy gradient of a non-distribution {probs:?}"),
        });
    }
    for &p in probs {
        if p <= 0.0 || p >= 1.0 {
            return Err(OptionError::DegenerateDistribution { value: p });
        }
    }
    let ent = entropy(probs);
    Ok(probs
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -p * (p.ln() + ent)
        })
        .collect())
}

/// Gradient of a Bernoulli's entropy with respect to its sigmoid preference:
/// `p(1-p) * ln((1-p)/p)`.
pub fn entropy_grad_binary(p: f64) -> Result<f64, OptionError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OptionError::DegenerateDistribution { value: p });
    }
    Ok(entropy_grad_binary_clamped(p))
}

/// Infallible form of [`entropy_grad_binary`]: the log ratio is clamped,
/// while the `p(1-p)` factor keeps the true probability so the gradient
/// vanishes exactly at saturation (its correct limit).
#[inline]
pub fn entropy_grad_binary_clamped(p: f64) -> f64 {
    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    p * (1.0 - p) * ((1.0 - q) / q).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{four_room, two_room};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tables = ParamTables::zeros(3, OptionSet::new(2, 4));
        let dist = tables.policy_dist(1, 0).unwrap();
        assert_eq!(dist, vec![0.25; 4]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut tables = ParamTables::zeros(1, OptionSet::new(1, 4));
        let idx = tables.pi_index(0, 0, 0);
        tables.w_pi[idx] = 2.0_f64.ln();
        let dist = tables.policy_dist(0, 0).unwrap();
        assert_abs_diff_eq!(dist[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(dist[1], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(dist[2], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(dist[3], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn primitive_is_point_mass_everywhere() {
        let tables = ParamTables::zeros(2, OptionSet::new(2, 4));
        // Option index 4 is the primitive for action 2.
        assert_eq!(tables.policy_dist(0, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(tables.termination_prob(1, 4).unwrap(), 1.0);
        assert_eq!(tables.interest_prob(1, 4).unwrap(), 1.0);
    }

    #[test]
    fn sigmoid_preferences() {
        let mut tables = ParamTables::zeros(1, OptionSet::new(1, 4));
        assert_eq!(tables.termination_prob(0, 0).unwrap(), 0.5);
        assert_eq!(tables.interest_prob(0, 0).unwrap(), 0.5);
        tables.w_i[0] = 20.0;
        assert!((1.0 - tables.interest_prob(0, 0).unwrap()).abs() < 1e-8);
        tables.w_beta[0] = -20.0;
        assert!(tables.termination_prob(0, 0).unwrap() < 1e-8);
    }

    #[test]
    fn out_of_range_option_rejected() {
        let tables = ParamTables::zeros(1, OptionSet::new(1, 4));
        assert_eq!(
            tables.policy_dist(0, 5),
            Err(OptionError::IndexOutOfRange { index: 5, bound: 5 })
        );
        assert!(tables.termination_prob(0, 7).is_err());
        assert!(tables.interest_prob(0, 7).is_err());
    }

    #[test]
    fn entropy_grad_zero_at_uniform_and_half() {
        let grad = entropy_grad_policy(&[0.25; 4]).unwrap();
        for g in grad {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(entropy_grad_binary(0.5).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn entropy_grad_rejects_degenerate() {
        assert!(matches!(
            entropy_grad_binary(0.0),
            Err(OptionError::DegenerateDistribution { .. })
        ));
        assert!(matches!(
            entropy_grad_binary(1.0),
            Err(OptionError::DegenerateDistribution { .. })
        ));
        assert!(entropy_grad_policy(&[1.0, 0.0, 0.0, 0.0]).is_err());
        // The clamped form stays finite instead.
        assert!(entropy_grad_binary_clamped(0.0).is_finite());
        assert!(entropy_grad_binary_clamped(1.0).is_finite());
    }

    /// Central finite difference of f at x with step h.
    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn entropy_grad_policy_matches_finite_difference() {
        let w = [0.7f64.ln(), 0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()];
        let mut probs = w.to_vec();
        softmax_in_place(&mut probs);
        let grad = entropy_grad_policy(&probs).unwrap();
        for a in 0..4 {
            let fd = central_diff(
                |x| {
                    let mut shifted = w.to_vec();
                    shifted[a] = x;
                    softmax_in_place(&mut shifted);
                    entropy(&shifted)
                },
                w[a],
                1e-5,
            );
            assert_abs_diff_eq!(grad[a], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn entropy_grad_binary_matches_finite_difference() {
        for w in [-2.0, -0.3, 0.0, 1.4, 3.0] {
            let grad = entropy_grad_binary(sigmoid(w)).unwrap();
            let fd = central_diff(
                |x| {
                    let p = sigmoid(x);
                    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
                },
                w,
                1e-5,
            );
            assert_abs_diff_eq!(grad, fd, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn policy_rows_normalize(w in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let mut tables = ParamTables::zeros(1, OptionSet::new(1, 4));
            tables.w_pi.copy_from_slice(&w);
            let dist = tables.policy_dist(0, 0).unwrap();
            let total: f64 = dist.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(dist.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn entropy_grad_matches_fd_for_random_preferences(
            w in proptest::collection::vec(-3.0f64..3.0, 4)
        ) {
            let mut probs = w.clone();
            softmax_in_place(&mut probs);
            let grad = entropy_grad_policy(&probs).unwrap();
            for a in 0..4 {
                let fd = central_diff(
                    |x| {
                        let mut shifted = w.clone();
                        shifted[a] = x;
                        softmax_in_place(&mut shifted);
                        entropy(&shifted)
                    },
                    w[a],
                    1e-5,
                );
                prop_assert!((grad[a] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hallway_options_reject_other_grids() {
        assert_eq!(
            make_hallway_options(&two_room()),
            Err(OptionError::UnsupportedGrid { name: "tworoom".to_string() })
        );
    }

    #[test]
    fn hallway_entrances_and_transits() {
        let grid = four_room();
        let opts = make_hallway_options(&grid).unwrap();
        let state = |r, c| grid.state_at(r, c).unwrap();

        // Termination exactly on the four entrance cells per direction.
        let cw_entrances = [(3, 7), (8, 9), (10, 5), (5, 2)];
        let ccw_entrances = [(7, 2), (10, 7), (6, 9), (3, 5)];
        for (option, entrances) in
            [(&opts.clockwise, cw_entrances), (&opts.counter_clockwise, ccw_entrances)]
        {
            assert_eq!(option.beta.iter().filter(|&&b| b == 1.0).count(), 4);
            for (r, c) in entrances {
                assert_eq!(option.beta[state(r, c)], 1.0, "({r},{c})");
            }
            assert!(option.init.iter().all(|&p| p == 1.0));
        }

        // Hallway cells do not terminate; their action crosses into the next
        // room.
        for (r, c) in grid.hallway_cells() {
            assert_eq!(opts.clockwise.beta[state(r, c)], 0.0);
            assert_eq!(opts.counter_clockwise.beta[state(r, c)], 0.0);
        }
        assert_eq!(opts.clockwise.greedy_action(state(3, 6)), 3); // right
        assert_eq!(opts.clockwise.greedy_action(state(6, 2)), 0); // up
        assert_eq!(opts.clockwise.greedy_action(state(7, 9)), 1); // down
        assert_eq!(opts.clockwise.greedy_action(state(10, 6)), 2); // left
        assert_eq!(opts.counter_clockwise.greedy_action(state(3, 6)), 2);
        assert_eq!(opts.counter_clockwise.greedy_action(state(10, 6)), 3);
    }

    /// Walk an option's deterministic policy and collect the visited cells
    /// until it terminates (or panic after too many steps).
    fn rollout(grid: &GridSpec, option: &TabulatedOption, start: StateId) -> Vec<StateId> {
        let mut s = start;
        let mut path = vec![s];
        for _ in 0..200 {
            let a = option.greedy_action(s);
            let (r, c) = grid.coords_of(s);
            let (dr, dc) = GRID_DELTAS[a];
            let next = grid
                .state_at((r as isize + dr) as usize, (c as isize + dc) as usize)
                .expect("hallway options never walk into walls");
            path.push(next);
            if option.beta[next] == 1.0 {
                return path;
            }
            s = next;
        }
        panic!("option did not terminate");
    }

    #[test]
    fn clockwise_option_leaves_upper_left_room_through_top_hallway() {
        let grid = four_room();
        let opts = make_hallway_options(&grid).unwrap();
        // From every cell of the upper-left room, the clockwise option exits
        // via (3,6) and stops at (3,7).
        for r in 1..=5 {
            for c in 1..=5 {
                let Some(s) = grid.state_at(r, c) else { continue };
                let path = rollout(&grid, &opts.clockwise, s);
                assert_eq!(grid.coords_of(*path.last().unwrap()), (3, 7));
                assert!(path.iter().any(|&p| grid.coords_of(p) == (3, 6)));
            }
        }
    }

    #[test]
    fn rollouts_strictly_approach_the_next_entrance() {
        let grid = four_room();
        let opts = make_hallway_options(&grid).unwrap();

        // Full-map breadth-first distances from a target cell.
        let bfs = |target: StateId| {
            let mut dist = vec![usize::MAX; grid.num_states()];
            dist[target] = 0;
            let mut queue = std::collections::VecDeque::from([target]);
            while let Some(s) = queue.pop_front() {
                let (r, c) = grid.coords_of(s);
                for (dr, dc) in GRID_DELTAS {
                    if let Some(t) =
                        grid.state_at((r as isize + dr) as usize, (c as isize + dc) as usize)
                    {
                        if dist[t] == usize::MAX {
                            dist[t] = dist[s] + 1;
                            queue.push_back(t);
                        }
                    }
                }
            }
            dist
        };

        for option in [&opts.clockwise, &opts.counter_clockwise] {
            for start in 0..grid.num_states() {
                if option.beta[start] == 1.0 {
                    continue;
                }
                let path = rollout(&grid, option, start);
                let dist = bfs(*path.last().unwrap());
                for w in path.windows(2) {
                    assert!(
                        dist[w[1]] < dist[w[0]],
                        "{} does not approach its entrance from {:?}",
                        option.name,
                        grid.coords_of(w[0])
                    );
                }
            }
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let grid = four_room();
        let mut options = make_hallway_options(&grid).unwrap().into_vec();
        options.extend(primitive_options(grid.num_states(), 4));
        let json = export_options(&options);
        let back = import_options(&json).unwrap();
        assert_eq!(options, back);
    }

    #[test]
    fn import_rejects_broken_rows() {
        let mut options = primitive_options(2, 2);
        options[0].pi[0] = 0.7; // row no longer sums to 1
        let json = export_options(&options);
        assert!(matches!(
            import_options(&json),
            Err(OptionError::MalformedData { .. })
        ));
    }

    #[test]
    fn tabulate_matches_param_tables() {
        let mut tables = ParamTables::zeros(3, OptionSet::new(2, 4));
        let (pi_idx, beta_idx, i_idx) =
            (tables.pi_index(1, 0, 2), tables.sh_index(2, 1), tables.sh_index(0, 0));
        tables.w_pi[pi_idx] = 1.5;
        tables.w_beta[beta_idx] = -0.7;
        tables.w_i[i_idx] = 0.3;
        let tabs = tables.tabulate();
        assert_eq!(tabs.len(), 6);
        assert_eq!(tabs[0].policy_row(1), &tables.policy_dist(1, 0).unwrap()[..]);
        assert_eq!(tabs[1].beta[2], sigmoid(-0.7));
        assert_eq!(tabs[0].init[0], sigmoid(0.3));
        assert_eq!(tabs[2].policy_row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tabs[2].name, "primitive-0");
    }
}
