//! Aggregation-order schedulers: ring, tree and the reinforcement-learned
//! chain scheduler.

mod config;
mod env;
mod plan;
mod qfunc;
mod rl;

pub use config::{Approximator, RLConfig, Strategy};
pub use env::{
    busy_reward, env_step, get_reward, send_reward, step_in_place, valid_actions, Outcome, SchedEnvState,
    COMPLETED_REWARD, FEATURES_PER_DEVICE, TERMINATION_PENALTY,
};
pub use plan::{ceil_log2, pack_rounds, ring_plan, tree_plan, Pair, SchedulePlan};
pub use qfunc::{argmax, ActionValues, DenseQ, QFunction, TabularQ, Transition};
pub use rl::{
    balance_bound, contract_busy, fallback_plan, greedy_rollout, latency_bound, plan_from_policy,
    relearn_if_changed, threshold, train_agent, train_from, write_curve_csv, Agent, AgentCheckpoint,
    ConvergenceTracker, CurvePoint, Explorer, PolicyPlan, Rollout, TrainReport, CONVERGE_RUN, CONVERGE_TOL,
    MA_WINDOW,
};
