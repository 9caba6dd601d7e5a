//! Device lifecycle, resource reports, busy classification and energy
//! accounting.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Device lifecycle state during an aggregation round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceState {
    Free,
    Busy,
    Send,
    Get,
    Done,
}

impl DeviceState {
    pub const ALL: [DeviceState; 5] = [Self::Free, Self::Busy, Self::Send, Self::Get, Self::Done];

    pub fn index(self) -> usize {
        match self {
            Self::Free => 0,
            Self::Busy => 1,
            Self::Send => 2,
            Self::Get => 3,
            Self::Done => 4,
        }
    }

    /// Legal moves within one iteration. `Done` only leaves through
    /// [`DeviceState::reset`].
    pub fn can_transition(self, to: DeviceState) -> bool {
        use DeviceState::*;
        matches!(
            (self, to),
            (Free, Busy) | (Free, Send) | (Free, Get) | (Busy, Free) | (Send, Done) | (Get, Free)
        )
    }

    /// Checked transition.
    pub fn transition(self, device: usize, to: DeviceState) -> Result<DeviceState> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(Error::IllegalTransition { device, from: self, to })
        }
    }

    /// Start-of-iteration reset: every device is Free or Busy again.
    pub fn reset(busy: bool) -> DeviceState {
        if busy {
            Self::Busy
        } else {
            Self::Free
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Free => "free",
            Self::Busy => "busy",
            Self::Send => "send",
            Self::Get => "get",
            Self::Done => "done",
        }
    }
}

/// Periodic resource report sent on the control channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub device: usize,
    pub free_memory_mb: f64,
    pub battery_pct: f64,
    pub in_use: bool,
    pub charging: bool,
    pub cpu_pct: f64,
    pub timestamp_ms: f64,
}

impl ResourceReport {
    pub fn validate(&self) -> Result<()> {
        let pct = 0.0..=100.0;
        if !pct.contains(&self.battery_pct) || !pct.contains(&self.cpu_pct) {
            return Err(invalid(format!("percentages out of range in {self:?}")));
        }
        if self.free_memory_mb < 0.0 {
            return Err(invalid("negative free memory"));
        }
        Ok(())
    }
}

/// Thresholds for the busy predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusyPolicy {
    pub cpu_threshold: f64,
    pub battery_floor: f64,
    pub memory_floor_mb: f64,
}

impl Default for BusyPolicy {
    fn default() -> Self {
        Self {
            cpu_threshold: 80.0,
            battery_floor: 15.0,
            memory_floor_mb: 64.0,
        }
    }
}

/// Busy iff in use, CPU strictly above threshold, battery below the floor
/// while discharging, or free memory below the floor.
pub fn classify(report: &ResourceReport, policy: &BusyPolicy) -> DeviceState {
    let busy = report.in_use
        || report.cpu_pct > policy.cpu_threshold
        || (report.battery_pct < policy.battery_floor && !report.charging)
        || report.free_memory_mb < policy.memory_floor_mb;
    if busy {
        DeviceState::Busy
    } else {
        DeviceState::Free
    }
}

/// Builds the report a device would send given its hidden busy condition.
/// Busy devices report either heavy use or a CPU spike.
pub fn synthesize_report<R: Rng>(
    device: usize,
    busy: bool,
    battery_pct: f64,
    timestamp_ms: f64,
    rng: &mut R,
) -> ResourceReport {
    let free_memory_mb = rng.random_range(512.0..2048.0);
    let (in_use, cpu_pct) = if busy {
        if rng.random_bool(0.5) {
            (true, rng.random_range(20.0..100.0))
        } else {
            (false, rng.random_range(85.0..100.0))
        }
    } else {
        (false, rng.random_range(5.0..60.0))
    };
    ResourceReport {
        device,
        free_memory_mb,
        battery_pct: battery_pct.clamp(0.0, 100.0),
        in_use,
        charging: false,
        cpu_pct,
        timestamp_ms,
    }
}

/// Linear energy cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCosts {
    /// Per second of local training.
    pub train_per_sec: f64,
    pub per_aggregation: f64,
    pub per_byte: f64,
    pub per_report: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        Self {
            train_per_sec: 0.05,
            per_aggregation: 0.8,
            per_byte: 1e-4,
            per_report: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyEvent {
    Train { seconds: f64 },
    Aggregate,
    Send { bytes: f64 },
    Receive { bytes: f64 },
    Report,
}

impl EnergyEvent {
    pub fn cost(&self, costs: &EnergyCosts) -> Result<f64> {
        Ok(match *self {
            Self::Train { seconds } => {
                non_negative(seconds, "train duration")?;
                costs.train_per_sec * seconds
            }
            Self::Aggregate => costs.per_aggregation,
            Self::Send { bytes } | Self::Receive { bytes } => {
                non_negative(bytes, "byte count")?;
                costs.per_byte * bytes
            }
            Self::Report => costs.per_report,
        })
    }
}

fn non_negative(x: f64, what: &str) -> Result<()> {
    if x < 0.0 || x.is_nan() {
        return Err(invalid(format!("{what} must be non-negative, got {x}")));
    }
    Ok(())
}

/// Energy consumed by one device, split by activity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyMeter {
    pub train: f64,
    pub aggregate_compute: f64,
    pub send: f64,
    pub receive: f64,
    pub report: f64,
}

impl EnergyMeter {
    pub fn consumed(&self) -> f64 {
        self.train + self.aggregate_compute + self.send + self.receive + self.report
    }

    /// Adds one event in place and returns its cost.
    pub fn charge(&mut self, event: EnergyEvent, costs: &EnergyCosts) -> Result<f64> {
        let c = event.cost(costs)?;
        let slot = match event {
            EnergyEvent::Train { .. } => &mut self.train,
            EnergyEvent::Aggregate => &mut self.aggregate_compute,
            EnergyEvent::Send { .. } => &mut self.send,
            EnergyEvent::Receive { .. } => &mut self.receive,
            EnergyEvent::Report => &mut self.report,
        };
        *slot += c;
        Ok(c)
    }
}

/// Value-style variant of [`EnergyMeter::charge`].
pub fn charge_energy(meter: &EnergyMeter, event: EnergyEvent, costs: &EnergyCosts) -> Result<EnergyMeter> {
    let mut next = meter.clone();
    next.charge(event, costs)?;
    Ok(next)
}

/// Population variance `(1/N) Σ (x_i - μ)²`.
pub fn variance(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("variance of an empty list"));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n)
}

pub fn energy_variance(meters: &[EnergyMeter]) -> Result<f64> {
    let consumed: Vec<f64> = meters.iter().map(EnergyMeter::consumed).collect();
    variance(&consumed)
}

/// Min-max normalisation, clamped to `[0, 1]`.
pub fn normalize(x: f64, xmin: f64, xmax: f64) -> Result<f64> {
    if !(xmax > xmin) {
        return Err(invalid(format!("degenerate range [{xmin}, {xmax}]")));
    }
    Ok(((x - xmin) / (xmax - xmin)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceLimits {
    pub max_memory_mb: f64,
    /// Battery capacity in energy units; 100 % battery equals this much.
    pub max_battery: f64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            max_memory_mb: 4096.0,
            max_battery: 3300.0,
        }
    }
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_memory_mb > 0.0 && self.max_battery > 0.0) {
            return Err(invalid("resource limits must be positive"));
        }
        Ok(())
    }

    pub fn battery_pct(&self, consumed: f64) -> f64 {
        (100.0 * (1.0 - consumed / self.max_battery)).clamp(0.0, 100.0)
    }
}

/// Two-state busy/free Markov process with exponential holding times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusyProcess {
    pub enabled: bool,
    pub mean_busy_ms: f64,
    pub mean_free_ms: f64,
    /// At most `floor(cap_fraction · N)` devices are busy at once.
    pub cap_fraction: f64,
}

impl Default for BusyProcess {
    fn default() -> Self {
        Self {
            enabled: true,
            mean_busy_ms: 1500.0,
            mean_free_ms: 3000.0,
            cap_fraction: 0.5,
        }
    }
}

impl BusyProcess {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.mean_busy_ms > 0.0 && self.mean_free_ms > 0.0) {
            return Err(invalid("busy process means must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cap_fraction) {
            return Err(invalid("cap_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn cap(&self, n: usize) -> usize {
        (self.cap_fraction * n as f64).floor() as usize
    }

    pub fn stationary_busy(&self) -> f64 {
        self.mean_busy_ms / (self.mean_busy_ms + self.mean_free_ms)
    }

    pub fn holding_time<R: Rng>(&self, busy: bool, rng: &mut R) -> f64 {
        let mean = if busy { self.mean_busy_ms } else { self.mean_free_ms };
        Exp::new(1.0 / mean).expect("positive rate").sample(rng)
    }
}

/// One row of the resource trace export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceTraceRow {
    pub time: f64,
    pub device: usize,
    pub state: DeviceState,
    pub battery: f64,
    pub cpu: f64,
    pub memory: f64,
}

pub fn write_resource_csv<W: Write>(rows: &[ResourceTraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "device", "state", "battery", "cpu", "memory"])?;
    for r in rows {
        w.write_record([
            format!("{:.3}", r.time),
            r.device.to_string(),
            r.state.as_str().to_string(),
            format!("{:.4}", r.battery),
            format!("{:.2}", r.cpu),
            format!("{:.1}", r.memory),
        ])?;
    }
    w.flush()?;
    Ok(())
}
