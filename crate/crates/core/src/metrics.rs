//! Post-hoc comparison quantities computed from simulator traces: the
//! normalised latency plus energy-balance objective, scheduler benchmark
//! summaries and per-device aggregation concurrency.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::resource::normalize;
use crate::sim::{SchedulerKind, SimConfig, SimTrace, TraceKind};

/// Normalisation ranges for per-iteration makespan and energy variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub makespan: (f64, f64),
    pub energy_variance: (f64, f64),
}

impl Bounds {
    /// Ranges over every iteration of every trace given, so objective values
    /// of different schedulers share one scale.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a SimTrace>) -> Result<Self> {
        let mut t = (f64::INFINITY, f64::NEG_INFINITY);
        let mut e = (f64::INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        for r in traces.into_iter().flat_map(|tr| &tr.iterations) {
            any = true;
            t = (t.0.min(r.makespan), t.1.max(r.makespan));
            e = (e.0.min(r.energy_variance), e.1.max(r.energy_variance));
        }
        if !any {
            return Err(invalid("no iterations to bound"));
        }
        Ok(Self { makespan: t, energy_variance: e })
    }
}

/// Sum over iterations of normalised makespan plus normalised energy
/// variance. Lower is better.
pub fn objective(trace: &SimTrace, bounds: &Bounds) -> Result<f64> {
    let (tmin, tmax) = bounds.makespan;
    let (emin, emax) = bounds.energy_variance;
    trace.iterations.iter().try_fold(0.0, |acc, r| {
        Ok(acc + normalize(r.makespan, tmin, tmax)? + normalize(r.energy_variance, emin, emax)?)
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One scheduler's row of a benchmark table. Makespan and energy variance
/// are per-run means over iterations, then summarised over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerRow {
    pub scheduler: SchedulerKind,
    pub runs: usize,
    pub mean_makespan: f64,
    pub std_makespan: f64,
    pub mean_energy_variance: f64,
    pub std_energy_variance: f64,
    /// Mean objective over runs; `None` when every compared iteration has
    /// the same makespan or the same energy variance.
    pub objective: Option<f64>,
}

/// Relative difference `(chain - other) / other`, negative when chain is
/// lower.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeDelta {
    pub makespan: f64,
    pub energy_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub rows: Vec<SchedulerRow>,
    pub chain_vs_tree: Option<RelativeDelta>,
    pub chain_vs_ring: Option<RelativeDelta>,
}

fn comparable(cfg: &SimConfig) -> SimConfig {
    SimConfig { seed: 0, ..cfg.clone() }
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b) / b
    }
}

/// Summarises each group of runs and the chain scheduler's relative
/// standing against tree and ring.
///
/// Every trace must carry its group's scheduler, and all configurations
/// must agree apart from the seed.
pub fn compare_schedulers(groups: &[(SchedulerKind, &[SimTrace])]) -> Result<BenchmarkSummary> {
    let reference = groups
        .iter()
        .find_map(|(_, ts)| ts.first())
        .map(|t| comparable(&t.config))
        .ok_or_else(|| invalid("no traces to compare"))?;
    for (kind, traces) in groups {
        if traces.is_empty() {
            return Err(invalid(format!("no runs for scheduler {kind}")));
        }
        if groups.iter().filter(|(k, _)| k == kind).count() > 1 {
            return Err(invalid(format!("scheduler {kind} listed twice")));
        }
        for t in *traces {
            if t.scheduler != *kind {
                return Err(invalid(format!("{} trace in the {kind} group", t.scheduler)));
            }
            if comparable(&t.config) != reference {
                return Err(invalid(format!("configuration mismatch in the {kind} group")));
            }
        }
    }
    let bounds = Bounds::from_traces(groups.iter().flat_map(|(_, ts)| ts.iter()))?;
    let degenerate = !(bounds.makespan.1 > bounds.makespan.0) || !(bounds.energy_variance.1 > bounds.energy_variance.0);
    let mut rows = Vec::with_capacity(groups.len());
    for (kind, traces) in groups {
        let sums: Vec<_> = traces.iter().map(SimTrace::summary).collect();
        let (mean_makespan, std_makespan) = mean_std(&sums.iter().map(|s| s.mean_makespan).collect::<Vec<_>>());
        let (mean_energy_variance, std_energy_variance) =
            mean_std(&sums.iter().map(|s| s.mean_energy_variance).collect::<Vec<_>>());
        let objective = if degenerate {
            None
        } else {
            let objs = traces.iter().map(|t| objective(t, &bounds)).collect::<Result<Vec<_>>>()?;
            Some(mean_std(&objs).0)
        };
        rows.push(SchedulerRow {
            scheduler: *kind,
            runs: traces.len(),
            mean_makespan,
            std_makespan,
            mean_energy_variance,
            std_energy_variance,
            objective,
        });
    }
    let row = |k: SchedulerKind| rows.iter().find(|r| r.scheduler == k);
    let delta = |other: SchedulerKind| {
        let (c, o) = (row(SchedulerKind::Chain)?, row(other)?);
        Some(RelativeDelta {
            makespan: relative(c.mean_makespan, o.mean_makespan),
            energy_variance: relative(c.mean_energy_variance, o.mean_energy_variance),
        })
    };
    let chain_vs_tree = delta(SchedulerKind::Tree);
    let chain_vs_ring = delta(SchedulerKind::Ring);
    Ok(BenchmarkSummary { rows, chain_vs_tree, chain_vs_ring })
}

impl BenchmarkSummary {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// One line per scheduler.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "scheduler",
            "runs",
            "mean_makespan",
            "std_makespan",
            "mean_energy_variance",
            "std_energy_variance",
            "objective",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.scheduler.as_str().to_string(),
                r.runs.to_string(),
                format!("{:.6}", r.mean_makespan),
                format!("{:.6}", r.std_makespan),
                format!("{:.6}", r.mean_energy_variance),
                format!("{:.6}", r.std_energy_variance),
                r.objective.map(|o| format!("{o:.6}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// For each device, the largest number of aggregation tasks it took part
/// in at the same instant, as sender or receiver.
pub fn peak_concurrency(trace: &SimTrace) -> Vec<usize> {
    let n = trace.config.num_devices;
    let mut open = vec![0usize; n];
    let mut peak = vec![0usize; n];
    for e in &trace.events {
        let Some(peer) = e.peer else { continue };
        match e.kind {
            TraceKind::PairStart => {
                for d in [e.device, peer] {
                    open[d] += 1;
                    peak[d] = peak[d].max(open[d]);
                }
            }
            TraceKind::AggDone | TraceKind::PairAbort => {
                for d in [e.device, peer] {
                    open[d] = open[d].saturating_sub(1);
                }
            }
            _ => {}
        }
    }
    peak
}
