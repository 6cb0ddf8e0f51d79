//! Small hand-built environments used by tests and the command-line
//! demos: a four-state chain with one stochastic branch, expressed both as
//! a primitive-action MDP and as an already-solved option model.

use crate::exec::InitiationSample;
use crate::mdp::{Outcome, TabularMdp};
use crate::planner::{ModelSource, OptionModel};

/// Optimal state values of the four-state fixture under its depicted
/// options: left, first middle, second middle, terminal.
pub const CHAIN4_V_STAR: [f64; 4] = [-2.5, -1.0, -2.0, 0.0];

/// Expected number of option executions to reach the terminal from the
/// left state: `1 + 0.5·1 + 0.5·2`.
pub const CHAIN4_EXPECTED_DECISIONS: f64 = 2.5;

/// The four-state fixture as a primitive MDP with a single action: state 0
/// branches evenly to states 1 and 2, state 1 steps to the terminal,
/// state 2 steps to state 1. Every move costs 1; episodes start at state 0.
///
/// Because each state has exactly one action, every environment step is
/// also one option execution, which makes the expected-decisions constant
/// directly measurable with the executor.
pub fn chain4_mdp() -> TabularMdp {
    let transition = vec![
        // state 0: even branch to the two middle states
        vec![
            Outcome { next: 1, reward: -1.0, prob: 0.5 },
            Outcome { next: 2, reward: -1.0, prob: 0.5 },
        ],
        // state 1: straight to the terminal
        vec![Outcome { next: 3, reward: -1.0, prob: 1.0 }],
        // state 2: detour through state 1
        vec![Outcome { next: 1, reward: -1.0, prob: 1.0 }],
        // terminal self-loop
        vec![Outcome { next: 3, reward: 0.0, prob: 1.0 }],
    ];
    let mdp = TabularMdp {
        num_states: 4,
        num_actions: 1,
        task_count: 1,
        transition,
        terminal: vec![false, false, false, true],
        initial_dist: vec![1.0, 0.0, 0.0, 0.0],
        gamma: 1.0,
    };
    debug_assert!(mdp.validate().is_ok());
    mdp
}

/// The same fixture at the option level: three single-home options (one
/// per decision state) with exact models, plus the per-state option sets
/// and reference values planning needs.
pub struct Chain4Smdp {
    pub model: OptionModel,
    /// Ω(s): each decision state offers exactly its own option; the
    /// terminal row is a placeholder (planning never reads it).
    pub plan_sets: Vec<InitiationSample>,
    pub v_star: Vec<Vec<f64>>,
}

pub fn chain4_smdp() -> Chain4Smdp {
    let mut model = OptionModel::zeros(4, 3, 1, ModelSource::Exact, 1.0);
    // Option 0, home state 0: one move, even arrival split.
    let idx = model.r_index(0, 0, 0);
    model.r[idx] = -1.0;
    let base = model.p_index(0, 0, 0);
    model.p[base + 1] = 0.5;
    model.p[base + 2] = 0.5;
    // Option 1, home state 1: one move to the terminal.
    let idx = model.r_index(0, 1, 1);
    model.r[idx] = -1.0;
    let base = model.p_index(0, 1, 1);
    model.p[base + 3] = 1.0;
    // Option 2, home state 2: one move to state 1.
    let idx = model.r_index(0, 2, 2);
    model.r[idx] = -1.0;
    let base = model.p_index(0, 2, 2);
    model.p[base + 1] = 1.0;

    Chain4Smdp {
        model,
        plan_sets: vec![
            InitiationSample::from_mask(0b001),
            InitiationSample::from_mask(0b010),
            InitiationSample::from_mask(0b100),
            InitiationSample::from_mask(0b001),
        ],
        v_star: vec![CHAIN4_V_STAR.to_vec()],
    }
}
