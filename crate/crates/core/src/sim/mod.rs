//! Discrete-event simulator of a device mesh: a control channel carrying
//! resource reports, a data channel carrying gradients, synchronous
//! training iterations, binomial broadcast and scripted faults.

mod broadcast;
mod config;
mod engine;
mod queue;
mod trace;

use rayon::prelude::*;

pub use broadcast::{broadcast_global, resource_order, BroadcastLog, BroadcastTree, Delivery};
pub use config::{
    DataConfig, FaultEvent, FaultKind, FaultScript, ReconnectPolicy, SchedulerKind, SimConfig, TrainTimeModel,
    MESSAGE_HEADER_BYTES, MOBILE_AGENT,
};
pub use engine::{plan_span, replay_span, Simulator, FAULT_STREAM};
pub use queue::EventQueue;
pub use trace::{
    ChargeRecord, Checkpoint, EpochSnapshot, IterationRecord, IterationRow, MetricsExport, RunSummary, SimTrace,
    TraceEvent, TraceKind, CHECKPOINT_FORMAT,
};

use crate::error::Result;
use crate::param::TrainHyper;
use crate::scheduler::Agent;

/// Full training run of `kind` under `cfg` with the given hyperparameters.
pub fn run_experiment(cfg: &SimConfig, hyper: &TrainHyper, kind: SchedulerKind) -> Result<SimTrace> {
    let cfg = SimConfig { hyper: hyper.clone(), ..cfg.clone() };
    Simulator::new(&cfg, kind)?.run()
}

/// Like [`run_experiment`], starting the chain scheduler from `agent`.
pub fn run_experiment_with_agent(
    cfg: &SimConfig,
    hyper: &TrainHyper,
    kind: SchedulerKind,
    agent: Option<Agent>,
) -> Result<SimTrace> {
    let cfg = SimConfig { hyper: hyper.clone(), ..cfg.clone() };
    let sim = Simulator::new(&cfg, kind)?;
    match agent {
        Some(a) => sim.with_agent(a).run(),
        None => sim.run(),
    }
}

/// One run per seed, in parallel; results keep the seed order.
pub fn run_batch(
    cfg: &SimConfig,
    hyper: &TrainHyper,
    kind: SchedulerKind,
    seeds: &[u64],
    agent: Option<&Agent>,
) -> Vec<Result<SimTrace>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SimConfig { seed, ..cfg.clone() };
            run_experiment_with_agent(&cfg, hyper, kind, agent.cloned())
        })
        .collect()
}
