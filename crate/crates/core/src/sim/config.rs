use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::param::TrainHyper;
use crate::resource::{BusyPolicy, BusyProcess, EnergyCosts, ResourceLimits};
use crate::scheduler::RLConfig;

/// Gradient-exchange protocol used by a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    /// Every device uploads to the mobile agent, which takes the mean.
    Central,
    /// Pair reduce ordered by the learned chain scheduler.
    Chain,
    /// Ring-ordered sequence with the neighbour averaging rule.
    Neighbor,
    /// Pair reduce along a ring.
    Ring,
    /// Pair reduce along a halving tree.
    Tree,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 5] = [Self::Central, Self::Chain, Self::Neighbor, Self::Ring, Self::Tree];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Central => "central",
            Self::Chain => "chain",
            Self::Neighbor => "neighbor",
            Self::Ring => "ring",
            Self::Tree => "tree",
        }
    }

    /// Whether the reduce is exact (θ-weighted pairs or a central mean).
    pub fn is_exact(self) -> bool {
        !matches!(self, Self::Neighbor)
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown scheduler {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Drop,
    Reconnect,
}

/// One scripted fault.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub time_ms: f64,
    pub device: usize,
    pub kind: FaultKind,
}

/// Fault script file: `[[faults]]` entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultScript {
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
}

impl FaultScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }
}

/// How the mobile agent retries a reconnecting device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconnectPolicy {
    pub attempts: usize,
    pub base_backoff_ms: f64,
    /// Chance that one attempt succeeds.
    pub success_probability: f64,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_backoff_ms: 100.0, success_probability: 1.0 }
    }
}

/// Local training time: `samples · ms_per_sample · speed_d · jitter_t`,
/// with a fixed per-device speed in `1 ± device_jitter` and a per-iteration
/// factor in `1 ± iteration_jitter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainTimeModel {
    pub ms_per_sample: f64,
    pub device_jitter: f64,
    pub iteration_jitter: f64,
}

impl Default for TrainTimeModel {
    fn default() -> Self {
        Self { ms_per_sample: 20.0, device_jitter: 0.2, iteration_jitter: 0.1 }
    }
}

/// Synthetic workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub hidden: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_classes: 2, per_class: 200, dim: 2, spread: 0.3, hidden: 8 }
    }
}

/// Simulator configuration; every field has a default so partial files
/// work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_devices: usize,
    pub seed: u64,
    pub control_latency_ms: f64,
    pub data_base_latency_ms: f64,
    pub data_bandwidth_bytes_per_ms: f64,
    pub agg_compute_ms: f64,
    pub report_period_ms: f64,
    /// Simulated duration of one re-learning slot.
    pub relearn_slot_ms: f64,
    pub busy: BusyProcess,
    pub busy_policy: BusyPolicy,
    pub train_time: TrainTimeModel,
    pub energy: EnergyCosts,
    pub limits: ResourceLimits,
    pub reconnect: ReconnectPolicy,
    pub faults: Vec<FaultEvent>,
    pub data: DataConfig,
    pub hyper: TrainHyper,
    pub rl: RLConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_devices: 6,
            seed: 0,
            control_latency_ms: 20.0,
            data_base_latency_ms: 100.0,
            data_bandwidth_bytes_per_ms: 1000.0,
            agg_compute_ms: 15.0,
            report_period_ms: 200.0,
            relearn_slot_ms: 1000.0,
            busy: BusyProcess::default(),
            busy_policy: BusyPolicy::default(),
            train_time: TrainTimeModel::default(),
            energy: EnergyCosts::default(),
            limits: ResourceLimits::default(),
            reconnect: ReconnectPolicy::default(),
            faults: Vec::new(),
            data: DataConfig::default(),
            hyper: TrainHyper::default(),
            rl: RLConfig::default(),
        }
    }
}

/// Id of the device running the scheduler and resource monitor.
pub const MOBILE_AGENT: usize = 0;
/// Fixed per-message header added to the payload.
pub const MESSAGE_HEADER_BYTES: usize = 64;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices < 2 {
            return Err(invalid(format!("num_devices must be at least 2, got {}", self.num_devices)));
        }
        let positive = [
            ("control_latency_ms", self.control_latency_ms),
            ("data_base_latency_ms", self.data_base_latency_ms),
            ("data_bandwidth_bytes_per_ms", self.data_bandwidth_bytes_per_ms),
            ("report_period_ms", self.report_period_ms),
            ("train_time.ms_per_sample", self.train_time.ms_per_sample),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("agg_compute_ms", self.agg_compute_ms), ("relearn_slot_ms", self.relearn_slot_ms)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, j) in [
            ("train_time.device_jitter", self.train_time.device_jitter),
            ("train_time.iteration_jitter", self.train_time.iteration_jitter),
        ] {
            if !(0.0..1.0).contains(&j) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {j}")));
            }
        }
        let r = &self.reconnect;
        if !(r.base_backoff_ms >= 0.0) || !(0.0..=1.0).contains(&r.success_probability) {
            return Err(invalid("reconnect policy out of range"));
        }
        let d = &self.data;
        if d.num_classes < 2 || d.per_class == 0 || d.dim == 0 || d.hidden == 0 || !(d.spread >= 0.0) {
            return Err(invalid("data config out of range"));
        }
        let train_len = d.num_classes * d.per_class * 4 / 5;
        if train_len < self.num_devices {
            return Err(invalid("fewer training samples than devices"));
        }
        for f in &self.faults {
            if f.device >= self.num_devices {
                return Err(invalid(format!("fault names unknown device {}", f.device)));
            }
            if f.device == MOBILE_AGENT {
                return Err(invalid("the mobile agent cannot be faulted"));
            }
            if !(f.time_ms >= 0.0 && f.time_ms.is_finite()) {
                return Err(invalid("fault time must be non-negative"));
            }
        }
        self.busy.validate()?;
        self.limits.validate()?;
        self.hyper.validate()?;
        self.rl.validate()?;
        Ok(())
    }

    /// Loads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bytes on the wire for a parameter vector of `params` entries.
    pub fn message_bytes(params: usize) -> usize {
        params * 8 + MESSAGE_HEADER_BYTES
    }

    /// Time one data-channel transfer of `bytes` occupies.
    pub fn transfer_ms(&self, bytes: usize) -> f64 {
        self.data_base_latency_ms + bytes as f64 / self.data_bandwidth_bytes_per_ms
    }

    /// Cost of one pair: transfer plus merge.
    pub fn pair_ms(&self, bytes: usize) -> f64 {
        self.transfer_ms(bytes) + self.agg_compute_ms
    }
}
