use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{central_aggregate, neighbor_aggregate, pair_aggregate, sgd_step, ParamVector};
use crate::resource::{
    classify, synthesize_report, variance, DeviceState, EnergyEvent, EnergyMeter, ResourceReport,
};
use crate::scheduler::{fallback_plan, relearn_if_changed, ring_plan, train_agent, tree_plan, Agent, Pair, SchedEnvState, SchedulePlan};
use crate::toy::{
    batches_per_epoch, device_rng, epoch_windows, evaluate, forward_loss_grad, generate_blobs, mean_loss,
    partition_dataset, windows_per_epoch, Layout, Partition, Sample, SyntheticDataset, ToyModel, BUSY_STREAM,
    DATA_STREAM, REPORT_STREAM, TRAIN_TIME_STREAM,
};

use super::broadcast::BroadcastTree;
use super::config::{FaultKind, SchedulerKind, SimConfig, MOBILE_AGENT};
use super::queue::EventQueue;
use super::trace::{ChargeRecord, Checkpoint, EpochSnapshot, IterationRecord, SimTrace, TraceEvent, TraceKind};

/// RNG stream for reconnect attempts.
pub const FAULT_STREAM: u64 = 6;

type PV = ParamVector<f64>;

/// Span of a reduce replayed with no busy waiting: each task starts as
/// soon as both endpoints have finished their earlier tasks, in the given
/// order. Returns the time the last task ends.
pub fn replay_span(tasks: &[(usize, usize, f64)], num_devices: usize) -> f64 {
    let mut ready = vec![0.0f64; num_devices];
    let mut end = 0.0f64;
    for &(s, r, cost) in tasks {
        let t = ready[s].max(ready[r]) + cost;
        ready[s] = t;
        ready[r] = t;
        end = end.max(t);
    }
    end
}

/// No-wait span of a plan whose pairs all cost `pair_ms`.
pub fn plan_span(plan: &SchedulePlan, num_devices: usize, pair_ms: f64) -> f64 {
    let tasks: Vec<_> = plan.pairs().map(|p| (p.sender, p.receiver, pair_ms)).collect();
    replay_span(&tasks, num_devices)
}

#[derive(Debug)]
enum Ev {
    TrainEnd { device: usize, iteration: usize },
    TaskDone { iteration: usize, task: usize },
    UploadDone { iteration: usize, token: u64 },
    CentralDone { iteration: usize, token: u64 },
    ReportDue { device: usize },
    ReportArrive { report: ResourceReport },
    BusyToggle { device: usize },
    BroadcastHop { iteration: usize, from: usize, to: usize, sent_at: f64, retried: bool },
    Fault { index: usize },
    ReconnectAttempt { device: usize, attempt: usize },
    RelearnDone { token: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Training,
    Aggregating,
    Uploading,
    Broadcasting,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TaskKind {
    Pair,
    Deferred,
    Central,
}

#[derive(Clone, Debug)]
struct Task {
    sender: usize,
    receiver: usize,
    cost: f64,
    kind: TaskKind,
    /// Transfer finished (central tasks stay open until the final mean).
    arrived: bool,
    closed: bool,
    aborted: bool,
}

#[derive(Clone, Debug)]
struct Holding {
    value: PV,
    contributors: BTreeSet<usize>,
}

#[derive(Debug)]
struct Device {
    alive: bool,
    dead_since: f64,
    rejoin_pending: bool,
    busy: bool,
    busy_after_task: bool,
    in_task: bool,
    speed: f64,
    weights: PV,
    grad: Option<PV>,
    holding: Option<Holding>,
    windows: Vec<Vec<usize>>,
    meter: EnergyMeter,
    data_rng: ChaCha8Rng,
    busy_rng: ChaCha8Rng,
    time_rng: ChaCha8Rng,
    report_rng: ChaCha8Rng,
}

#[derive(Debug, Default)]
struct Deferred {
    remaining: Vec<usize>,
    holder: Option<usize>,
    target: Option<usize>,
}

#[derive(Debug, Default)]
struct IterState {
    start: f64,
    barrier: f64,
    agg_end: f64,
    participants: BTreeSet<usize>,
    trained: BTreeSet<usize>,
    tasks: Vec<Task>,
    /// Planned receiver of each device's value.
    parent: Vec<Option<usize>>,
    /// Planned merges a device still has to receive before it may send.
    pending_in: Vec<usize>,
    /// Senders in plan order; ties between ready senders go to the earlier.
    send_order: Vec<usize>,
    deferred: Deferred,
    central_pending: Vec<usize>,
    central_received: BTreeMap<usize, usize>,
    link_busy: bool,
    central_token: u64,
    central_computing: bool,
    replan_pending: bool,
    faulted: bool,
    t_b: f64,
    plan_rounds: usize,
    fallback: bool,
    agent_version: Option<u64>,
    upload_token: u64,
    survivor: Option<usize>,
    result: Option<Holding>,
    bcast_start: f64,
    outstanding_hops: usize,
    root_free: f64,
    tree: Option<BroadcastTree>,
    delivered: Vec<usize>,
    energy_at_start: Vec<f64>,
}

/// Event-driven simulation of one training run.
pub struct Simulator {
    cfg: SimConfig,
    kind: SchedulerKind,
    ds: SyntheticDataset,
    partition: Partition,
    layout: Layout,
    bytes: usize,
    n: usize,
    queue: EventQueue<Ev>,
    now: f64,
    devices: Vec<Device>,
    global: PV,
    agent: Option<Agent>,
    pending_agent: Option<Agent>,
    relearn_token: u64,
    relearning: bool,
    relearns: usize,
    reports: Vec<Option<ResourceReport>>,
    fault_rng: ChaCha8Rng,
    iteration: usize,
    total_iterations: usize,
    windows_per_epoch: usize,
    batches: usize,
    phase: Phase,
    it: IterState,
    events: Vec<TraceEvent>,
    charges: Vec<ChargeRecord>,
    records: Vec<IterationRecord>,
    epochs: Vec<EpochSnapshot>,
    checkpoints: Vec<Checkpoint>,
    aborted: Option<String>,
}

impl Simulator {
    /// Builds the simulator; the chain scheduler trains its own agent
    /// unless one is supplied with [`Simulator::with_agent`].
    pub fn new(cfg: &SimConfig, kind: SchedulerKind) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_devices;
        let d = &cfg.data;
        let ds = generate_blobs(d.num_classes, d.per_class, d.dim, d.spread, cfg.seed)?;
        let partition = partition_dataset(&ds, n)?;
        let layout = Layout { input_dim: d.dim, hidden_dim: d.hidden, num_classes: d.num_classes };
        let model = ToyModel::<f64>::init(layout, cfg.seed);
        let bytes = SimConfig::message_bytes(model.weights.len());
        let batches = batches_per_epoch(&partition, cfg.hyper.batch_size);
        let wpe = windows_per_epoch(batches, cfg.hyper.agg_rounds_per_epoch);
        let devices = (0..n)
            .map(|i| {
                let mut time_rng = device_rng(cfg.seed, TRAIN_TIME_STREAM, i);
                let j = cfg.train_time.device_jitter;
                let speed = if j > 0.0 { time_rng.random_range(1.0 - j..1.0 + j) } else { 1.0 };
                Device {
                    alive: true,
                    dead_since: f64::INFINITY,
                    rejoin_pending: false,
                    busy: false,
                    busy_after_task: false,
                    in_task: false,
                    speed,
                    weights: model.weights.clone(),
                    grad: None,
                    holding: None,
                    windows: Vec::new(),
                    meter: EnergyMeter::default(),
                    data_rng: device_rng(cfg.seed, DATA_STREAM, i),
                    busy_rng: device_rng(cfg.seed, BUSY_STREAM, i),
                    time_rng,
                    report_rng: device_rng(cfg.seed, REPORT_STREAM, i),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            ds,
            partition,
            layout,
            bytes,
            n,
            queue: EventQueue::default(),
            now: 0.0,
            devices,
            global: model.weights,
            agent: None,
            pending_agent: None,
            relearn_token: 0,
            relearning: false,
            relearns: 0,
            reports: vec![None; n],
            fault_rng: device_rng(cfg.seed, FAULT_STREAM, 0),
            iteration: 0,
            total_iterations: cfg.hyper.epochs * wpe,
            windows_per_epoch: wpe,
            batches,
            phase: Phase::Training,
            it: IterState::default(),
            events: Vec::new(),
            charges: Vec::new(),
            records: Vec::new(),
            epochs: Vec::new(),
            checkpoints: Vec::new(),
            aborted: None,
        })
    }

    /// Uses a pre-trained chain agent instead of training one.
    pub fn with_agent(mut self, agent: Agent) -> Self {
        self.agent = Some(agent);
        self
    }

    /// Runs to completion and returns the trace.
    pub fn run(mut self) -> Result<SimTrace> {
        if self.kind == SchedulerKind::Chain && self.agent.is_none() {
            let env = SchedEnvState::all_free(self.n)?;
            self.agent = Some(train_agent(&env, &self.cfg.rl, self.cfg.seed)?);
        }
        for d in 0..self.n {
            let offset = self.cfg.report_period_ms * d as f64 / self.n as f64;
            self.queue.push(offset, Ev::ReportDue { device: d });
            if self.cfg.busy.enabled {
                let t = self.cfg.busy.holding_time(false, &mut self.devices[d].busy_rng);
                self.queue.push(t, Ev::BusyToggle { device: d });
            }
        }
        for (index, f) in self.cfg.faults.iter().enumerate() {
            self.queue.push(f.time_ms, Ev::Fault { index });
        }
        self.start_iteration()?;
        while self.phase != Phase::Finished {
            let Some((t, ev)) = self.queue.pop() else {
                return Err(Error::Invariant("event queue drained before the run finished".into()));
            };
            self.now = t;
            self.handle(ev)?;
        }
        self.finish()
    }

    fn finish(self) -> Result<SimTrace> {
        let model = ToyModel::from_weights(self.layout, self.global.clone())?;
        let final_accuracy = evaluate(&model, self.ds.test())?;
        Ok(SimTrace {
            scheduler: self.kind,
            config: self.cfg.clone(),
            events: self.events,
            charges: self.charges,
            iterations: self.records,
            epochs: self.epochs,
            meters: self.devices.iter().map(|d| d.meter.clone()).collect(),
            checkpoints: self.checkpoints,
            relearns: self.relearns,
            final_weights: self.global,
            final_accuracy,
            completed: self.aborted.is_none(),
            aborted: self.aborted,
        })
    }

    fn log(&mut self, kind: TraceKind, device: usize, peer: Option<usize>, detail: impl Into<String>) {
        self.events.push(TraceEvent {
            time: self.now,
            kind,
            device,
            peer,
            iteration: self.iteration,
            detail: detail.into(),
        });
    }

    fn charge(&mut self, device: usize, event: EnergyEvent) -> Result<()> {
        let amount = self.devices[device].meter.charge(event, &self.cfg.energy)?;
        self.charges.push(ChargeRecord { time: self.now, device, iteration: self.iteration, event, amount });
        Ok(())
    }

    fn charge_transfer(&mut self, from: usize, to: usize) -> Result<()> {
        let bytes = self.bytes as f64;
        self.charge(from, EnergyEvent::Send { bytes })?;
        self.charge(to, EnergyEvent::Receive { bytes })
    }

    fn transfer_ms(&self) -> f64 {
        self.cfg.transfer_ms(self.bytes)
    }

    fn available(&self, d: usize) -> bool {
        let dev = &self.devices[d];
        dev.alive && !dev.busy && !dev.in_task
    }

    fn reported_busy(&self, d: usize) -> bool {
        self.reports[d]
            .as_ref()
            .is_some_and(|r| classify(r, &self.cfg.busy_policy) == DeviceState::Busy)
    }

    /// Devices the scheduler would plan over right now.
    fn schedulable(&self) -> Vec<usize> {
        (0..self.n).filter(|&d| self.devices[d].alive && !self.devices[d].rejoin_pending).collect()
    }

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::TrainEnd { device, iteration } => self.on_train_end(device, iteration),
            Ev::TaskDone { iteration, task } => self.on_task_done(iteration, task),
            Ev::UploadDone { iteration, token } => self.on_upload_done(iteration, token),
            Ev::CentralDone { iteration, token } => self.on_central_done(iteration, token),
            Ev::ReportDue { device } => self.on_report_due(device),
            Ev::ReportArrive { report } => self.on_report_arrive(report),
            Ev::BusyToggle { device } => self.on_busy_toggle(device),
            Ev::BroadcastHop { iteration, from, to, sent_at, retried } => {
                self.on_hop(iteration, from, to, sent_at, retried)
            }
            Ev::Fault { index } => self.on_fault(index),
            Ev::ReconnectAttempt { device, attempt } => self.on_reconnect_attempt(device, attempt),
            Ev::RelearnDone { token } => self.on_relearn_done(token),
        }
    }

    // ----- iteration lifecycle -------------------------------------------

    fn start_iteration(&mut self) -> Result<()> {
        let participants: BTreeSet<usize> = self.schedulable().into_iter().collect();
        if participants.len() < 2 {
            let msg = format!("only {} live device(s) left at iteration {}", participants.len(), self.iteration);
            warn!("{msg}");
            self.aborted = Some(msg);
            self.phase = Phase::Finished;
            return Ok(());
        }
        let in_epoch = self.iteration % self.windows_per_epoch;
        if in_epoch == 0 {
            for d in 0..self.n {
                let shard = self.partition.shard(d).to_vec();
                let dev = &mut self.devices[d];
                dev.windows = epoch_windows(&shard, self.batches, self.cfg.hyper.agg_rounds_per_epoch, &mut dev.data_rng);
            }
        }
        self.it = IterState {
            start: self.now,
            parent: vec![None; self.n],
            pending_in: vec![0; self.n],
            energy_at_start: self.devices.iter().map(|d| d.meter.consumed()).collect(),
            participants: participants.clone(),
            ..IterState::default()
        };
        self.phase = Phase::Training;
        let tt = self.cfg.train_time.clone();
        for &d in &participants {
            let dev = &mut self.devices[d];
            dev.grad = None;
            dev.holding = None;
            let samples = dev.windows[in_epoch].len() as f64;
            let jitter = if tt.iteration_jitter > 0.0 {
                dev.time_rng.random_range(1.0 - tt.iteration_jitter..1.0 + tt.iteration_jitter)
            } else {
                1.0
            };
            let dur = samples * tt.ms_per_sample * dev.speed * jitter;
            self.queue.push(self.now + dur, Ev::TrainEnd { device: d, iteration: self.iteration });
        }
        Ok(())
    }

    fn on_train_end(&mut self, d: usize, iteration: usize) -> Result<()> {
        if iteration != self.iteration || self.phase != Phase::Training || !self.it.participants.contains(&d) {
            return Ok(());
        }
        let in_epoch = self.iteration % self.windows_per_epoch;
        let train = self.ds.train();
        let dev = &self.devices[d];
        let batch: Vec<&Sample> = dev.windows[in_epoch].iter().map(|&i| &train[i]).collect();
        let model = ToyModel::from_weights(self.layout, dev.weights.clone())?;
        let grad = forward_loss_grad(&model, &batch)?.1;
        let seconds = (self.now - self.it.start) / 1000.0;
        let dev = &mut self.devices[d];
        dev.holding = Some(Holding { value: grad.clone(), contributors: BTreeSet::from([d]) });
        dev.grad = Some(grad);
        self.it.trained.insert(d);
        self.charge(d, EnergyEvent::Train { seconds })?;
        self.log(TraceKind::TrainEnd, d, None, "");
        self.check_barrier()
    }

    fn check_barrier(&mut self) -> Result<()> {
        if self.phase == Phase::Training && self.it.participants.iter().all(|d| self.it.trained.contains(d)) {
            self.barrier()?;
        }
        Ok(())
    }

    fn barrier(&mut self) -> Result<()> {
        self.phase = Phase::Aggregating;
        self.it.barrier = self.now;
        let holders: Vec<usize> = self.it.participants.iter().copied().collect();
        if holders.len() < 2 && self.kind != SchedulerKind::Central {
            return self.progress();
        }
        match self.kind {
            SchedulerKind::Central => {
                self.it.central_pending = holders.into_iter().filter(|&d| d != MOBILE_AGENT).collect();
                self.it.plan_rounds = 1;
            }
            SchedulerKind::Tree => self.install(tree_plan(&holders)?, &holders, false)?,
            SchedulerKind::Ring | SchedulerKind::Neighbor => self.install(ring_plan(&holders)?, &holders, false)?,
            SchedulerKind::Chain => {
                let busy: Vec<bool> = holders.iter().map(|&d| self.reported_busy(d)).collect();
                let agent = self.agent.as_ref().ok_or_else(|| Error::Invariant("chain run without agent".into()))?;
                self.it.agent_version = Some(agent.version());
                let (local, fallback) = if agent.num_devices() == holders.len() {
                    let pp = agent.plan(&SchedEnvState::new(&busy)?)?;
                    (pp.plan, pp.fallback)
                } else {
                    (fallback_plan(&busy)?, true)
                };
                let map = |p: Pair| Pair::new(holders[p.sender], holders[p.receiver]);
                let plan = SchedulePlan {
                    rounds: local.rounds.iter().map(|r| r.iter().copied().map(map).collect()).collect(),
                    deferred: local.deferred.iter().copied().map(map).collect(),
                };
                self.install(plan, &holders, fallback)?;
                self.maybe_relearn()?;
            }
        }
        self.progress()
    }

    fn install(&mut self, plan: SchedulePlan, holders: &[usize], fallback: bool) -> Result<()> {
        plan.validate(holders)?;
        self.it.plan_rounds = plan.num_rounds();
        self.it.fallback = fallback;
        self.clear_plan();
        for round in &plan.rounds {
            for &p in round {
                self.it.parent[p.sender] = Some(p.receiver);
                self.it.pending_in[p.receiver] += 1;
                self.it.send_order.push(p.sender);
            }
        }
        self.it.deferred = Deferred {
            remaining: plan.deferred.iter().map(|p| p.sender).collect(),
            holder: None,
            target: plan.deferred.last().map(|p| p.receiver),
        };
        Ok(())
    }

    fn clear_plan(&mut self) {
        self.it.parent.iter_mut().for_each(|p| *p = None);
        self.it.pending_in.iter_mut().for_each(|c| *c = 0);
        self.it.send_order.clear();
    }

    fn live_holders(&self) -> Vec<usize> {
        (0..self.n).filter(|&d| self.devices[d].alive && self.devices[d].holding.is_some()).collect()
    }

    fn active_tasks(&self) -> usize {
        self.it.tasks.iter().filter(|t| !t.closed && !t.aborted && t.kind != TaskKind::Central).count()
    }

    /// Starts whatever can start and detects the end of the reduce.
    fn progress(&mut self) -> Result<()> {
        match self.phase {
            Phase::Aggregating if self.kind == SchedulerKind::Central => self.progress_central(),
            Phase::Aggregating => {
                if self.it.replan_pending && self.active_tasks() == 0 {
                    self.replan()?;
                }
                if !self.it.replan_pending {
                    self.start_ready_pairs();
                }
                let holders = self.live_holders();
                if self.active_tasks() == 0 && holders.len() == 1 {
                    self.finish_reduce(holders[0])?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Plan execution as a dependency graph: a device merges incoming
    /// values in whatever order they arrive and sends to its planned
    /// receiver once nothing more is due to it.
    fn start_ready_pairs(&mut self) {
        loop {
            let mut started = false;
            for i in 0..self.it.send_order.len() {
                let s = self.it.send_order[i];
                let Some(r) = self.it.parent[s] else { continue };
                if self.it.pending_in[s] == 0 && self.available(s) && self.available(r) {
                    self.it.parent[s] = None;
                    self.start_task(s, r, TaskKind::Pair);
                    started = true;
                }
            }
            started |= self.start_deferred();
            if !started {
                break;
            }
        }
    }

    /// The busy chain: the first freed device collects the others as they
    /// free up, then hands the lot to the survivor.
    fn start_deferred(&mut self) -> bool {
        let Some(target) = self.it.deferred.target else { return false };
        if self.it.deferred.holder.is_none() {
            if let Some(i) = self.it.deferred.remaining.iter().position(|&b| self.available(b)) {
                self.it.deferred.holder = Some(self.it.deferred.remaining.remove(i));
            } else {
                return false;
            }
        }
        let h = self.it.deferred.holder.expect("holder set above");
        if !self.available(h) {
            return false;
        }
        if let Some(i) = self.it.deferred.remaining.iter().position(|&b| self.available(b)) {
            let b = self.it.deferred.remaining.remove(i);
            self.it.deferred.holder = Some(b);
            self.start_task(h, b, TaskKind::Deferred);
            return true;
        }
        if self.it.deferred.remaining.is_empty() && self.available(target) {
            self.it.deferred = Deferred::default();
            self.start_task(h, target, TaskKind::Deferred);
            return true;
        }
        false
    }

    fn start_task(&mut self, sender: usize, receiver: usize, kind: TaskKind) {
        let cost = match kind {
            TaskKind::Central => self.transfer_ms(),
            _ => self.cfg.pair_ms(self.bytes),
        };
        self.devices[sender].in_task = true;
        if kind != TaskKind::Central {
            self.devices[receiver].in_task = true;
        }
        let task = self.it.tasks.len();
        self.it.tasks.push(Task { sender, receiver, cost, kind, arrived: false, closed: false, aborted: false });
        self.queue.push(self.now + cost, Ev::TaskDone { iteration: self.iteration, task });
        self.log(TraceKind::PairStart, sender, Some(receiver), format!("task={task}"));
    }

    fn end_task_for(&mut self, d: usize) -> Result<()> {
        self.devices[d].in_task = false;
        if std::mem::take(&mut self.devices[d].busy_after_task) && self.devices[d].alive {
            self.enter_busy(d);
        }
        Ok(())
    }

    fn on_task_done(&mut self, iteration: usize, task: usize) -> Result<()> {
        if iteration != self.iteration {
            return Ok(());
        }
        let t = self.it.tasks[task].clone();
        if t.aborted {
            return Ok(());
        }
        if t.kind == TaskKind::Central {
            return self.on_central_arrive(task);
        }
        let incoming = self.devices[t.sender]
            .holding
            .take()
            .ok_or_else(|| Error::Invariant(format!("sender {} holds nothing", t.sender)))?;
        let current = self.devices[t.receiver]
            .holding
            .take()
            .ok_or_else(|| Error::Invariant(format!("receiver {} holds nothing", t.receiver)))?;
        let value = if self.kind.is_exact() {
            pair_aggregate(&current.value, &incoming.value)?
        } else {
            neighbor_aggregate(&current.value, &[incoming.value], 1)?
        };
        let mut contributors = current.contributors;
        contributors.extend(incoming.contributors);
        self.devices[t.receiver].holding = Some(Holding { value, contributors });
        // After a drop the plan is cleared while unaffected pairs finish;
        // their completions no longer count toward it.
        if t.kind == TaskKind::Pair {
            self.it.pending_in[t.receiver] = self.it.pending_in[t.receiver].saturating_sub(1);
        }
        self.it.tasks[task].closed = true;
        self.charge_transfer(t.sender, t.receiver)?;
        self.charge(t.receiver, EnergyEvent::Aggregate)?;
        self.log(TraceKind::AggDone, t.sender, Some(t.receiver), format!("task={task}"));
        self.end_task_for(t.sender)?;
        self.end_task_for(t.receiver)?;
        self.progress()
    }

    fn replan(&mut self) -> Result<()> {
        self.it.replan_pending = false;
        let holders = self.live_holders();
        if holders.len() < 2 {
            return Ok(());
        }
        let plan = if self.kind.is_exact() { tree_plan(&holders)? } else { ring_plan(&holders)? };
        debug!("iteration {} re-planned over {holders:?}", self.iteration);
        let fallback = self.it.fallback;
        let rounds = self.it.plan_rounds;
        self.install(plan, &holders, fallback)?;
        self.it.plan_rounds = rounds.max(self.it.plan_rounds);
        Ok(())
    }

    fn finish_reduce(&mut self, survivor: usize) -> Result<()> {
        self.phase = Phase::Uploading;
        self.it.survivor = Some(survivor);
        if survivor == MOBILE_AGENT {
            return self.complete_aggregation();
        }
        self.it.upload_token += 1;
        let at = self.now + self.transfer_ms();
        self.queue.push(at, Ev::UploadDone { iteration: self.iteration, token: self.it.upload_token });
        self.log(TraceKind::Upload, survivor, Some(MOBILE_AGENT), "start");
        Ok(())
    }

    fn on_upload_done(&mut self, iteration: usize, token: u64) -> Result<()> {
        if iteration != self.iteration || token != self.it.upload_token || self.phase != Phase::Uploading {
            return Ok(());
        }
        let s = self.it.survivor.expect("uploading without survivor");
        self.charge_transfer(s, MOBILE_AGENT)?;
        self.log(TraceKind::Upload, s, Some(MOBILE_AGENT), "done");
        self.complete_aggregation()
    }

    // ----- central mode ----------------------------------------------------

    fn progress_central(&mut self) -> Result<()> {
        if !self.it.link_busy {
            if let Some(i) = self.it.central_pending.iter().position(|&d| self.available(d)) {
                let d = self.it.central_pending.remove(i);
                self.it.link_busy = true;
                self.start_task(d, MOBILE_AGENT, TaskKind::Central);
            }
        }
        if self.it.central_pending.is_empty() && !self.it.link_busy && !self.it.central_computing {
            self.it.central_computing = true;
            self.it.central_token += 1;
            let merges = self.it.central_received.len();
            for _ in 0..merges {
                self.charge(MOBILE_AGENT, EnergyEvent::Aggregate)?;
            }
            let at = self.now + self.cfg.agg_compute_ms * merges as f64;
            self.queue.push(at, Ev::CentralDone { iteration: self.iteration, token: self.it.central_token });
        }
        Ok(())
    }

    fn on_central_arrive(&mut self, task: usize) -> Result<()> {
        let t = self.it.tasks[task].clone();
        self.it.tasks[task].arrived = true;
        self.it.link_busy = false;
        self.it.central_received.insert(t.sender, task);
        self.charge_transfer(t.sender, MOBILE_AGENT)?;
        self.log(TraceKind::MsgArrive, t.sender, Some(MOBILE_AGENT), format!("task={task}"));
        self.end_task_for(t.sender)?;
        self.progress()
    }

    fn on_central_done(&mut self, iteration: usize, token: u64) -> Result<()> {
        if iteration != self.iteration || token != self.it.central_token || self.phase != Phase::Aggregating {
            return Ok(());
        }
        let mut ids = vec![MOBILE_AGENT];
        ids.extend(self.it.central_received.keys().copied());
        ids.sort_unstable();
        let grads: Vec<PV> = ids
            .iter()
            .map(|&d| self.devices[d].grad.clone().ok_or_else(|| Error::Invariant(format!("no gradient on {d}"))))
            .collect::<Result<_>>()?;
        let value = central_aggregate(&grads)?;
        let received: Vec<(usize, usize)> = self.it.central_received.iter().map(|(&d, &t)| (d, t)).collect();
        for (d, task) in received {
            self.it.tasks[task].closed = true;
            self.log(TraceKind::AggDone, d, Some(MOBILE_AGENT), format!("task={task}"));
        }
        for &d in &ids {
            self.devices[d].holding = None;
        }
        self.devices[MOBILE_AGENT].holding = Some(Holding { value, contributors: ids.into_iter().collect() });
        self.phase = Phase::Uploading;
        self.it.survivor = Some(MOBILE_AGENT);
        self.complete_aggregation()
    }

    // ----- global update and broadcast ------------------------------------

    fn complete_aggregation(&mut self) -> Result<()> {
        let s = self.it.survivor.expect("aggregation without survivor");
        let result = self.devices[s]
            .holding
            .take()
            .ok_or_else(|| Error::Invariant("survivor holds nothing".into()))?;
        let live: BTreeSet<usize> = self.it.participants.iter().copied().filter(|&d| self.devices[d].alive).collect();
        if result.contributors != live {
            return Err(Error::Invariant(format!(
                "iteration {} reduced {:?} but live participants are {:?}",
                self.iteration, result.contributors, live
            )));
        }
        if self.kind.is_exact() && result.value.theta() != result.contributors.len() as f64 {
            return Err(Error::Invariant("survivor theta differs from contributor count".into()));
        }
        self.global = sgd_step(&self.global, &result.value, self.cfg.hyper.eta)?;
        self.devices[MOBILE_AGENT].weights = self.global.clone();
        self.it.agg_end = self.now;
        self.it.result = Some(result);
        if (self.iteration + 1) % self.windows_per_epoch == 0 {
            let model = ToyModel::from_weights(self.layout, self.global.clone())?;
            self.epochs.push(EpochSnapshot {
                epoch: self.iteration / self.windows_per_epoch,
                train_loss: mean_loss(&model, self.ds.train())?,
                test_accuracy: evaluate(&model, self.ds.test())?,
                weights: self.global.clone(),
            });
        }
        self.start_broadcast()
    }

    fn start_broadcast(&mut self) -> Result<()> {
        self.phase = Phase::Broadcasting;
        self.it.bcast_start = self.now;
        let recipients: Vec<usize> =
            (0..self.n).filter(|&d| d != MOBILE_AGENT && self.devices[d].alive).collect();
        let tree = BroadcastTree::build(MOBILE_AGENT, &recipients, &self.reports, self.n)?;
        self.it.delivered = vec![MOBILE_AGENT];
        self.log(TraceKind::BroadcastHop, MOBILE_AGENT, None, "root");
        let hop = self.transfer_ms();
        let children = tree.children[MOBILE_AGENT].clone();
        self.it.tree = Some(tree);
        for (i, &c) in children.iter().enumerate() {
            let sent_at = self.now + hop * i as f64;
            self.push_hop(MOBILE_AGENT, c, sent_at, false);
        }
        self.it.root_free = self.now + hop * children.len() as f64;
        if self.it.outstanding_hops == 0 {
            return self.end_broadcast();
        }
        Ok(())
    }

    fn push_hop(&mut self, from: usize, to: usize, sent_at: f64, retried: bool) {
        self.it.outstanding_hops += 1;
        let at = sent_at + self.transfer_ms();
        self.queue.push(at, Ev::BroadcastHop { iteration: self.iteration, from, to, sent_at, retried });
    }

    fn reparent(&mut self, to: usize) {
        let start = self.it.root_free.max(self.now);
        self.it.root_free = start + self.transfer_ms();
        self.push_hop(MOBILE_AGENT, to, start, true);
    }

    fn on_hop(&mut self, iteration: usize, from: usize, to: usize, sent_at: f64, retried: bool) -> Result<()> {
        if iteration != self.iteration || self.phase != Phase::Broadcasting {
            return Ok(());
        }
        self.it.outstanding_hops -= 1;
        let children = self.it.tree.as_ref().map(|t| t.children[to].clone()).unwrap_or_default();
        if self.devices[from].dead_since <= sent_at {
            self.log(TraceKind::BroadcastHop, to, Some(from), "sender_down");
            self.reparent(to);
        } else if !self.devices[to].alive {
            self.charge(from, EnergyEvent::Send { bytes: self.bytes as f64 })?;
            self.log(TraceKind::BroadcastHop, to, Some(from), "lost");
            for c in children {
                self.reparent(c);
            }
        } else {
            self.charge_transfer(from, to)?;
            let dev = &mut self.devices[to];
            dev.weights = self.global.clone();
            dev.rejoin_pending = false;
            self.it.delivered.push(to);
            self.log(TraceKind::BroadcastHop, to, Some(from), if retried { "retry" } else { "" });
            let hop = self.transfer_ms();
            for (i, c) in children.into_iter().enumerate() {
                self.push_hop(to, c, self.now + hop * i as f64, false);
            }
        }
        if self.it.outstanding_hops == 0 {
            self.end_broadcast()?;
        }
        Ok(())
    }

    fn end_broadcast(&mut self) -> Result<()> {
        let it = &self.it;
        let result = it.result.as_ref().expect("broadcast without result");
        let participants: Vec<usize> = result.contributors.iter().copied().collect();
        let device_energy: Vec<f64> = self
            .devices
            .iter()
            .zip(&it.energy_at_start)
            .map(|(d, &s)| d.meter.consumed() - s)
            .collect();
        let part_energy: Vec<f64> = participants.iter().map(|&d| device_energy[d]).collect();
        let energy_variance = variance(&part_energy)?;
        let completed: Vec<&Task> = it.tasks.iter().filter(|t| t.closed && !t.aborted).collect();
        let upload = match it.survivor {
            Some(s) if s != MOBILE_AGENT => self.transfer_ms(),
            _ => 0.0,
        };
        let replay: Vec<(usize, usize, f64)> = completed.iter().map(|t| (t.sender, t.receiver, t.cost)).collect();
        let mut t_a = replay_span(&replay, self.n) + upload;
        if self.kind == SchedulerKind::Central {
            t_a += self.cfg.agg_compute_ms * (participants.len() - 1) as f64;
        }
        let t_tr = it.barrier - it.start;
        let agg_span = it.agg_end - it.barrier;
        let record = IterationRecord {
            iteration: self.iteration,
            epoch: self.iteration / self.windows_per_epoch,
            start: it.start,
            t_tr,
            t_a,
            t_b: it.t_b,
            agg_span,
            makespan: t_tr + agg_span,
            t_bcast: self.now - it.bcast_start,
            survivor: it.survivor.expect("survivor"),
            survivor_theta: participants.len() as f64,
            pairs: completed
                .iter()
                .filter(|t| t.kind != TaskKind::Central)
                .map(|t| Pair::new(t.sender, t.receiver))
                .collect(),
            plan_rounds: it.plan_rounds,
            fallback: it.fallback,
            agent_version: it.agent_version,
            faulted: it.faulted,
            delivered: it.delivered.clone(),
            device_energy,
            energy_variance,
            participants,
        };
        self.records.push(record);
        self.log(TraceKind::IterationDone, MOBILE_AGENT, None, "");
        self.iteration += 1;
        if self.iteration >= self.total_iterations {
            self.phase = Phase::Finished;
            return Ok(());
        }
        self.start_iteration()
    }

    // ----- resources -------------------------------------------------------

    fn busy_count(&self) -> usize {
        self.devices.iter().filter(|d| d.alive && (d.busy || d.busy_after_task)).count()
    }

    fn enter_busy(&mut self, d: usize) {
        if self.busy_count() >= self.cfg.busy.cap(self.n) {
            let t = self.cfg.busy.holding_time(false, &mut self.devices[d].busy_rng);
            self.queue.push(self.now + t, Ev::BusyToggle { device: d });
            self.log(TraceKind::BusyToggle, d, None, "capped");
            return;
        }
        self.devices[d].busy = true;
        let t = self.cfg.busy.holding_time(true, &mut self.devices[d].busy_rng);
        self.queue.push(self.now + t, Ev::BusyToggle { device: d });
        self.log(TraceKind::BusyToggle, d, None, "busy");
    }

    fn on_busy_toggle(&mut self, d: usize) -> Result<()> {
        if self.phase == Phase::Finished {
            return Ok(());
        }
        if self.devices[d].busy {
            self.devices[d].busy = false;
            let t = self.cfg.busy.holding_time(false, &mut self.devices[d].busy_rng);
            self.queue.push(self.now + t, Ev::BusyToggle { device: d });
            self.log(TraceKind::BusyToggle, d, None, "free");
            if self.owes_work(d) {
                self.it.t_b = self.it.t_b.max(self.now - self.it.barrier);
            }
            return self.progress();
        }
        if !self.devices[d].alive {
            let t = self.cfg.busy.holding_time(false, &mut self.devices[d].busy_rng);
            self.queue.push(self.now + t, Ev::BusyToggle { device: d });
        } else if self.devices[d].in_task {
            self.devices[d].busy_after_task = true;
        } else {
            self.enter_busy(d);
        }
        Ok(())
    }

    /// Whether `d` still has to take part in the running reduce.
    fn owes_work(&self, d: usize) -> bool {
        if !self.devices[d].alive || self.phase != Phase::Aggregating {
            return false;
        }
        if self.kind == SchedulerKind::Central {
            return self.it.central_pending.contains(&d);
        }
        self.devices[d].holding.is_some() && self.live_holders().len() > 1
    }

    fn on_report_due(&mut self, d: usize) -> Result<()> {
        if self.phase == Phase::Finished {
            return Ok(());
        }
        self.queue.push(self.now + self.cfg.report_period_ms, Ev::ReportDue { device: d });
        if !self.devices[d].alive {
            return Ok(());
        }
        let battery = self.cfg.limits.battery_pct(self.devices[d].meter.consumed());
        let busy = self.devices[d].busy;
        let report = synthesize_report(d, busy, battery, self.now, &mut self.devices[d].report_rng);
        self.charge(d, EnergyEvent::Report)?;
        self.log(TraceKind::ReportDue, d, None, if busy { "busy" } else { "free" });
        self.queue.push(self.now + self.cfg.control_latency_ms, Ev::ReportArrive { report });
        Ok(())
    }

    fn on_report_arrive(&mut self, report: ResourceReport) -> Result<()> {
        let d = report.device;
        self.reports[d] = Some(report);
        self.log(TraceKind::MsgArrive, d, Some(MOBILE_AGENT), "report");
        self.maybe_relearn()
    }

    fn maybe_relearn(&mut self) -> Result<()> {
        if self.kind != SchedulerKind::Chain || self.relearning || self.phase == Phase::Finished {
            return Ok(());
        }
        let Some(agent) = self.agent.as_ref() else { return Ok(()) };
        let set = self.schedulable();
        if set.len() < 2 {
            return Ok(());
        }
        let busy: Vec<bool> = set.iter().map(|&d| self.reported_busy(d)).collect();
        if agent.snapshot().busy_bits() == busy.as_slice() {
            return Ok(());
        }
        let current = SchedEnvState::new(&busy)?;
        let prev = agent.snapshot().clone();
        let next = relearn_if_changed(&prev, &current, agent.clone())?;
        self.pending_agent = Some(next);
        self.relearning = true;
        self.relearn_token += 1;
        self.queue.push(self.now + self.cfg.relearn_slot_ms, Ev::RelearnDone { token: self.relearn_token });
        self.log(TraceKind::RelearnStart, MOBILE_AGENT, None, format!("devices={}", set.len()));
        Ok(())
    }

    fn on_relearn_done(&mut self, token: u64) -> Result<()> {
        if token != self.relearn_token || !self.relearning {
            return Ok(());
        }
        self.relearning = false;
        if let Some(a) = self.pending_agent.take() {
            self.log(TraceKind::RelearnDone, MOBILE_AGENT, None, format!("version={}", a.version()));
            self.agent = Some(a);
            self.relearns += 1;
        }
        self.maybe_relearn()
    }

    // ----- faults ------------------------------------------------------------

    fn on_fault(&mut self, index: usize) -> Result<()> {
        if self.phase == Phase::Finished {
            return Ok(());
        }
        let f = self.cfg.faults[index].clone();
        match f.kind {
            FaultKind::Drop => self.drop_device(f.device),
            FaultKind::Reconnect => {
                if self.devices[f.device].alive {
                    warn!("reconnect of device {} which is not dropped; ignored", f.device);
                    self.log(TraceKind::Fault, f.device, None, "reconnect_noop");
                    return Ok(());
                }
                self.queue.push(self.now + self.cfg.control_latency_ms, Ev::ReconnectAttempt { device: f.device, attempt: 0 });
                Ok(())
            }
        }
    }

    fn drop_device(&mut self, d: usize) -> Result<()> {
        if !self.devices[d].alive {
            warn!("device {d} dropped twice; ignored");
            return Ok(());
        }
        let dev = &self.devices[d];
        let theta = dev.holding.as_ref().map_or(1.0, |h| h.contributors.len() as f64);
        let ck = Checkpoint::new(d, self.iteration, self.now, dev.weights.clone(), theta, self.cfg.seed, &dev.data_rng);
        self.checkpoints.push(ck);
        let dev = &mut self.devices[d];
        dev.alive = false;
        dev.dead_since = self.now;
        dev.busy = false;
        dev.rejoin_pending = false;
        if std::mem::take(&mut dev.busy_after_task) {
            // No toggle is pending while a busy flag waits for a task to end.
            let t = self.cfg.busy.holding_time(false, &mut dev.busy_rng);
            self.queue.push(self.now + t, Ev::BusyToggle { device: d });
        }
        self.log(TraceKind::Fault, d, None, "drop");
        if !self.it.participants.contains(&d) {
            return Ok(());
        }
        match self.phase {
            Phase::Training => {
                self.it.participants.remove(&d);
                self.devices[d].holding = None;
                self.devices[d].grad = None;
                self.check_barrier()
            }
            Phase::Aggregating | Phase::Uploading => {
                self.it.participants.remove(&d);
                self.it.faulted = true;
                if self.kind == SchedulerKind::Central {
                    self.drop_in_central(d)
                } else {
                    self.drop_in_reduce(d)
                }
            }
            Phase::Broadcasting | Phase::Finished => Ok(()),
        }
    }

    fn abort_task(&mut self, task: usize) -> Result<()> {
        let t = self.it.tasks[task].clone();
        self.it.tasks[task].aborted = true;
        self.log(TraceKind::PairAbort, t.sender, Some(t.receiver), format!("task={task}"));
        for e in [t.sender, t.receiver] {
            if self.devices[e].in_task && !(t.kind == TaskKind::Central && e == MOBILE_AGENT) {
                self.end_task_for(e)?;
            }
        }
        Ok(())
    }

    /// Removes `d`'s contribution: every partial aggregate containing it is
    /// dissolved back into its live contributors' cached gradients and the
    /// rest of the reduce is re-planned as a tree over the holders.
    fn drop_in_reduce(&mut self, d: usize) -> Result<()> {
        self.devices[d].grad = None;
        let tainted: BTreeSet<usize> = (0..self.n)
            .filter(|&h| self.devices[h].holding.as_ref().is_some_and(|x| x.contributors.contains(&d)))
            .collect();
        for task in 0..self.it.tasks.len() {
            let t = &self.it.tasks[task];
            if t.closed || t.aborted {
                continue;
            }
            if [t.sender, t.receiver].iter().any(|e| *e == d || tainted.contains(e)) {
                self.abort_task(task)?;
            }
        }
        for h in tainted {
            let Some(hold) = self.devices[h].holding.take() else { continue };
            for c in hold.contributors {
                if c == d || !self.devices[c].alive {
                    continue;
                }
                let value = self.devices[c].grad.clone().ok_or_else(|| Error::Invariant(format!("no cache on {c}")))?;
                self.devices[c].holding = Some(Holding { value, contributors: BTreeSet::from([c]) });
            }
        }
        self.clear_plan();
        self.it.deferred = Deferred::default();
        self.it.upload_token += 1;
        self.phase = Phase::Aggregating;
        self.it.survivor = None;
        self.it.replan_pending = true;
        self.progress()
    }

    fn drop_in_central(&mut self, d: usize) -> Result<()> {
        self.devices[d].grad = None;
        self.it.central_pending.retain(|&x| x != d);
        for task in 0..self.it.tasks.len() {
            let t = &self.it.tasks[task];
            if t.sender != d || t.closed || t.aborted {
                continue;
            }
            if !t.arrived {
                self.it.link_busy = false;
            }
            self.abort_task(task)?;
        }
        self.it.central_received.remove(&d);
        if self.it.central_computing {
            self.it.central_computing = false;
            self.it.central_token += 1;
        }
        self.progress()
    }

    fn on_reconnect_attempt(&mut self, d: usize, attempt: usize) -> Result<()> {
        if self.devices[d].alive || self.phase == Phase::Finished {
            return Ok(());
        }
        let p = self.cfg.reconnect.success_probability;
        if self.fault_rng.random::<f64>() < p {
            let dev = &mut self.devices[d];
            dev.alive = true;
            dev.dead_since = f64::INFINITY;
            dev.rejoin_pending = true;
            dev.holding = None;
            dev.grad = None;
            self.charge_transfer(d, MOBILE_AGENT)?;
            self.charge_transfer(MOBILE_AGENT, d)?;
            self.log(TraceKind::Fault, d, None, format!("reconnected attempt={attempt}"));
        } else if attempt + 1 < self.cfg.reconnect.attempts {
            let wait = self.cfg.reconnect.base_backoff_ms * 2f64.powi(attempt as i32);
            self.queue.push(self.now + wait, Ev::ReconnectAttempt { device: d, attempt: attempt + 1 });
            self.log(TraceKind::Fault, d, None, format!("reconnect_failed attempt={attempt}"));
        } else {
            warn!("device {d} stays skipped after {} reconnect attempts", attempt + 1);
            self.log(TraceKind::Fault, d, None, "skipped");
        }
        Ok(())
    }
}
