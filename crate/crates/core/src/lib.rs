//! Tabular multi-task option discovery.

pub mod exec;
pub mod fixtures;
pub mod grid;
pub mod learner;
pub mod mdp;
pub mod options;
pub mod oracle;
pub mod planner;
pub mod sample;

pub use exec::{
    compound_return, meta_policy, run_episode, sample_initiation_set, EpisodeRecord, ExecError,
    ExecMode, InitiationSample, TraceStep,
};

pub use fixtures::{
    chain4_mdp, chain4_smdp, Chain4Smdp, CHAIN4_EXPECTED_DECISIONS, CHAIN4_V_STAR,
};

pub use grid::{four_room, parse_grid, two_room, Cell, GridError, GridSpec};
pub use learner::{
    estimate_m, estimate_v, evaluate, fpoc_step, td_errors, train, Algorithm, EvalPoint, IsClip,
    LearnerConfig, LearnerError, LearnerState, TrainReport, EVAL_MAX_STEPS, PINNED_INTEREST,
};
pub use mdp::{
    build_mdp, ActionId, MdpError, Outcome, StateId, StepOutcome, TabularMdp, TaskId, TaskMode,
};
pub use options::{
    entropy, entropy_grad_binary, entropy_grad_policy, export_options, import_options,
    make_hallway_options, primitive_options, sigmoid, softmax_in_place, HallwayOptions,
    OptionError, OptionSet, ParamTables, TabulatedOption,
};
pub use oracle::{
    central_difference, exact_gradient, exact_objective, exact_occupancy, exact_option_model,
    finite_diff_gradient, fixture_mdp_from_json, initiation_set_distribution, naive_m,
    random_fixture, ExactValues, GradientTables, MetaPreference, OracleError,
};
pub use planner::{
    flat_value_iteration, learn_option_model, operation_count, option_value_iteration,
    reward_bound, sample_plan_sets, ModelSource, OptionModel, PlanReport, PlannerError,
};
