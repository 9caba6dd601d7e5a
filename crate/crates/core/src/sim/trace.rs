use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::param::ParamVector;
use crate::resource::{EnergyEvent, EnergyMeter};
use crate::scheduler::Pair;

use super::config::{SchedulerKind, SimConfig};

/// What a trace line records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    TrainEnd,
    ReportDue,
    MsgArrive,
    BusyToggle,
    PairStart,
    AggDone,
    PairAbort,
    Upload,
    BroadcastHop,
    IterationDone,
    Fault,
    RelearnStart,
    RelearnDone,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TrainEnd => "train_end",
            Self::ReportDue => "report_due",
            Self::MsgArrive => "msg_arrive",
            Self::BusyToggle => "busy_toggle",
            Self::PairStart => "pair_start",
            Self::AggDone => "agg_done",
            Self::PairAbort => "pair_abort",
            Self::Upload => "upload",
            Self::BroadcastHop => "broadcast_hop",
            Self::IterationDone => "iteration_done",
            Self::Fault => "fault",
            Self::RelearnStart => "relearn_start",
            Self::RelearnDone => "relearn_done",
        }
    }
}

/// One processed event. `peer` is the other endpoint of a transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: TraceKind,
    pub device: usize,
    pub peer: Option<usize>,
    pub iteration: usize,
    pub detail: String,
}

/// One energy charge, attributed to the iteration in progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeRecord {
    pub time: f64,
    pub device: usize,
    pub iteration: usize,
    pub event: EnergyEvent,
    pub amount: f64,
}

/// Timing and energy breakdown of one synchronous iteration.
///
/// Times are in ms. `t_tr` runs from the iteration start to the training
/// barrier; `agg_span` from the barrier until the mobile agent holds the
/// global gradient. `t_a` is the same reduce replayed without any busy
/// waiting and `t_b` the latest moment (after the barrier) at which a
/// device still owing work came out of a busy period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub start: f64,
    pub t_tr: f64,
    pub t_a: f64,
    pub t_b: f64,
    pub agg_span: f64,
    /// `t_tr + agg_span`.
    pub makespan: f64,
    pub t_bcast: f64,
    pub survivor: usize,
    pub survivor_theta: f64,
    /// Devices whose gradient is in the global gradient, ascending.
    pub participants: Vec<usize>,
    /// Completed pair merges in start order.
    pub pairs: Vec<Pair>,
    pub plan_rounds: usize,
    pub fallback: bool,
    pub agent_version: Option<u64>,
    /// A fault forced part of the reduce to be redone.
    pub faulted: bool,
    /// Devices that received the broadcast, the mobile agent first.
    pub delivered: Vec<usize>,
    /// Energy each device spent during this iteration.
    pub device_energy: Vec<f64>,
    /// Variance of `device_energy` over the participants.
    pub energy_variance: f64,
}

/// Model state at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub weights: ParamVector<f64>,
}

/// Current on-disk checkpoint layout.
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Cached device state written when a device drops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub device: usize,
    pub iteration: usize,
    pub time: f64,
    pub weights: ParamVector<f64>,
    pub theta: f64,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn new(device: usize, iteration: usize, time: f64, weights: ParamVector<f64>, theta: f64, seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            device,
            iteration,
            time,
            weights,
            theta,
            rng_seed: seed,
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    /// The device's data RNG exactly as it was at the checkpoint.
    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(invalid(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }
}

/// Everything one simulated run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub scheduler: SchedulerKind,
    pub config: SimConfig,
    pub events: Vec<TraceEvent>,
    pub charges: Vec<ChargeRecord>,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochSnapshot>,
    pub meters: Vec<EnergyMeter>,
    pub checkpoints: Vec<Checkpoint>,
    pub relearns: usize,
    pub final_weights: ParamVector<f64>,
    pub final_accuracy: f64,
    pub completed: bool,
    pub aborted: Option<String>,
}

/// Compact per-run numbers for the metrics JSON export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub num_devices: usize,
    pub completed: bool,
    pub iterations: usize,
    pub mean_makespan: f64,
    pub mean_energy_variance: f64,
    pub total_energy: f64,
    pub final_accuracy: f64,
    pub relearns: usize,
}

/// Per-iteration row of the metrics JSON export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub t_tr: f64,
    pub t_a: f64,
    pub t_b: f64,
    pub agg_span: f64,
    pub makespan: f64,
    pub energy_variance: f64,
    pub survivor: usize,
    pub survivor_theta: f64,
}

/// Metrics JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsExport {
    pub summary: RunSummary,
    pub iterations: Vec<IterationRow>,
    pub meters: Vec<EnergyMeter>,
    pub epoch_accuracy: Vec<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl SimTrace {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            scheduler: self.scheduler,
            seed: self.config.seed,
            num_devices: self.config.num_devices,
            completed: self.completed,
            iterations: self.iterations.len(),
            mean_makespan: mean(self.iterations.iter().map(|r| r.makespan)),
            mean_energy_variance: mean(self.iterations.iter().map(|r| r.energy_variance)),
            total_energy: self.meters.iter().map(EnergyMeter::consumed).sum(),
            final_accuracy: self.final_accuracy,
            relearns: self.relearns,
        }
    }

    pub fn metrics(&self) -> MetricsExport {
        MetricsExport {
            summary: self.summary(),
            iterations: self
                .iterations
                .iter()
                .map(|r| IterationRow {
                    iteration: r.iteration,
                    t_tr: r.t_tr,
                    t_a: r.t_a,
                    t_b: r.t_b,
                    agg_span: r.agg_span,
                    makespan: r.makespan,
                    energy_variance: r.energy_variance,
                    survivor: r.survivor,
                    survivor_theta: r.survivor_theta,
                })
                .collect(),
            meters: self.meters.clone(),
            epoch_accuracy: self.epochs.iter().map(|e| e.test_accuracy).collect(),
        }
    }

    pub fn write_metrics_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.metrics())?;
        Ok(())
    }

    /// Events CSV: `time,kind,device,peer,iteration,detail`.
    pub fn write_events_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "kind", "device", "peer", "iteration", "detail"])?;
        for e in &self.events {
            w.write_record([
                format!("{:.6}", e.time),
                e.kind.as_str().to_string(),
                e.device.to_string(),
                e.peer.map(|p| p.to_string()).unwrap_or_default(),
                e.iteration.to_string(),
                e.detail.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Energy spent per device, summed from the charge log.
    pub fn charged_per_device(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.meters.len()];
        for c in &self.charges {
            out[c.device] += c.amount;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::device_rng;
    use rand::Rng;

    #[test]
    fn checkpoint_round_trip_restores_rng() {
        let mut rng = device_rng(11, 1, 3);
        for _ in 0..17 {
            rng.random::<u64>();
        }
        let ck = Checkpoint::new(3, 4, 12.5, ParamVector::new(vec![0.1, -0.2]), 2.0, 11, &rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.restore_rng();
        for _ in 0..10 {
            assert_eq!(restored.random::<u64>(), rng.random::<u64>());
        }
    }

    #[test]
    fn rejects_unknown_checkpoint_format() {
        let rng = device_rng(1, 1, 1);
        let mut ck = Checkpoint::new(1, 0, 0.0, ParamVector::new(vec![1.0]), 1.0, 1, &rng);
        ck.format = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
