//! Command-line runner for training experiments, scheduler benchmarks and
//! chain-scheduler agent training.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use chainreduce::metrics::compare_schedulers;
use chainreduce::scheduler::{train_agent, write_curve_csv, SchedEnvState, Strategy, TrainReport};
use chainreduce::sim::{run_batch, FaultScript, SchedulerKind, SimConfig, SimTrace};

#[derive(Parser, Debug)]
#[command(name = "chainreduce", version, about = "Chain-directed gradient reduction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full training runs; compares central, chain and neighbour accuracy
    /// unless one scheduler is chosen.
    Train(Common),
    /// Ring, tree and chain aggregation latency and energy under busy devices.
    SchedBench(Common),
    /// Trains chain-scheduler agents and reports convergence.
    Rl(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Simulator configuration, TOML or JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheduler: Option<SchedulerKind>,
    /// Inclusive range `a..b`, a comma list, or a single seed.
    #[arg(long, default_value = "0", value_parser = parse_seeds)]
    seeds: Seeds,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of devices, the mobile agent included.
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    agg_rounds: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Threshold offset sweep `start:step:end`, inclusive.
    #[arg(long, value_parser = parse_sweep)]
    calibrate_phi: Option<Sweep>,
    /// Scripted device drops and reconnects, TOML or JSON.
    #[arg(long)]
    fault_script: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad seed range end: {e}"))?;
        if b < a {
            return Err(format!("empty seed range {s}"));
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|e| format!("bad seed {x:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err("seeds must be distinct".into());
    }
    Ok(Seeds(seeds))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Sweep {
    start: f64,
    step: f64,
    end: f64,
}

impl Sweep {
    fn values(&self) -> Vec<f64> {
        let count = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.start + self.step * i as f64).collect()
    }
}

fn parse_sweep(s: &str) -> std::result::Result<Sweep, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad sweep value {x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [start, step, end] = parts[..] else {
        return Err("expected start:step:end".into());
    };
    if !(step > 0.0) || end < start || !start.is_finite() || !end.is_finite() {
        return Err(format!("unusable sweep {s}"));
    }
    Ok(Sweep { start, step, end })
}

/// Defaults, overlaid by the config file, overlaid by flags.
fn resolve_config(args: &Common) -> Result<SimConfig> {
    let mut cfg = match &args.config {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SimConfig::default(),
    };
    if let Some(n) = args.devices {
        cfg.num_devices = n;
    }
    if let Some(e) = args.epochs {
        cfg.hyper.epochs = e;
    }
    if let Some(r) = args.agg_rounds {
        cfg.hyper.agg_rounds_per_epoch = r;
    }
    if let Some(s) = args.strategy {
        cfg.rl.strategy = s;
    }
    if let Some(p) = &args.fault_script {
        cfg.faults = FaultScript::load(p).with_context(|| format!("loading {}", p.display()))?.faults;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SeedStatus {
    scheduler: String,
    seed: u64,
    completed: bool,
    error: Option<String>,
}

/// Writes one directory per seed and returns the successful traces.
fn export_runs(out: &Path, kind: SchedulerKind, seeds: &[u64], results: Vec<chainreduce::Result<SimTrace>>, status: &mut Vec<SeedStatus>) -> Result<Vec<SimTrace>> {
    let mut traces = Vec::new();
    for (&seed, res) in seeds.iter().zip(results) {
        let dir = out.join(kind.as_str()).join(format!("seed-{seed}"));
        match res {
            Ok(trace) => {
                let mut w = create(&dir.join("metrics.json"))?;
                trace.write_metrics_json(&mut w)?;
                w.flush()?;
                let mut w = create(&dir.join("events.csv"))?;
                trace.write_events_csv(&mut w)?;
                w.flush()?;
                if let Some(reason) = &trace.aborted {
                    error!("{kind} seed {seed} aborted: {reason}");
                }
                status.push(SeedStatus { scheduler: kind.to_string(), seed, completed: trace.completed, error: trace.aborted.clone() });
                traces.push(trace);
            }
            Err(e) => {
                error!("{kind} seed {seed} failed: {e}");
                status.push(SeedStatus { scheduler: kind.to_string(), seed, completed: false, error: Some(e.to_string()) });
            }
        }
    }
    Ok(traces)
}

fn cmd_train(args: &Common) -> Result<bool> {
    let cfg = resolve_config(args)?;
    let kinds = match args.scheduler {
        Some(k) => vec![k],
        None => vec![SchedulerKind::Central, SchedulerKind::Chain, SchedulerKind::Neighbor],
    };
    let mut status = Vec::new();
    let mut table = create(&args.out.join("accuracy.csv"))?;
    writeln!(table, "scheduler,seed,completed,final_accuracy")?;
    for kind in kinds {
        info!("training with {kind} aggregation over {} seeds", args.seeds.0.len());
        let results = run_batch(&cfg, &cfg.hyper, kind, &args.seeds.0, None);
        for t in export_runs(&args.out, kind, &args.seeds.0, results, &mut status)? {
            writeln!(table, "{kind},{},{},{:.6}", t.config.seed, t.completed, t.final_accuracy)?;
        }
    }
    table.flush()?;
    write_json(&args.out.join("manifest.json"), &status)?;
    Ok(status.iter().all(|s| s.completed))
}

fn cmd_sched_bench(args: &Common) -> Result<bool> {
    let cfg = resolve_config(args)?;
    if !cfg.busy.enabled {
        log::warn!("busy process disabled in the configuration");
    }
    let kinds = match args.scheduler {
        Some(k) => vec![k],
        None => vec![SchedulerKind::Ring, SchedulerKind::Tree, SchedulerKind::Chain],
    };
    // One agent, trained from the configured seed, serves every run.
    let agent = if kinds.contains(&SchedulerKind::Chain) {
        Some(train_agent(&SchedEnvState::all_free(cfg.num_devices)?, &cfg.rl, cfg.seed)?)
    } else {
        None
    };
    let mut status = Vec::new();
    let mut groups = Vec::new();
    for kind in kinds {
        info!("benchmarking {kind} over {} seeds", args.seeds.0.len());
        let results = run_batch(&cfg, &cfg.hyper, kind, &args.seeds.0, agent.as_ref());
        groups.push((kind, export_runs(&args.out, kind, &args.seeds.0, results, &mut status)?));
    }
    let refs: Vec<(SchedulerKind, &[SimTrace])> = groups.iter().map(|(k, t)| (*k, t.as_slice())).collect();
    if refs.iter().all(|(_, t)| !t.is_empty()) {
        let summary = compare_schedulers(&refs)?;
        let mut w = create(&args.out.join("summary.json"))?;
        summary.write_json(&mut w)?;
        w.flush()?;
        let mut w = create(&args.out.join("summary.csv"))?;
        summary.write_csv(&mut w)?;
        w.flush()?;
        for r in &summary.rows {
            println!("{:8} makespan {:10.2} ms  energy variance {:.6}", r.scheduler, r.mean_makespan, r.mean_energy_variance);
        }
    }
    write_json(&args.out.join("manifest.json"), &status)?;
    Ok(status.iter().all(|s| s.completed))
}

#[derive(Serialize)]
struct RlRow {
    strategy: Strategy,
    phi: f64,
    seed: u64,
    episodes_to_converge: usize,
    converged: bool,
    greedy_reward: f64,
}

fn train_reports(cfg: &SimConfig, strategy: Strategy, phi: f64, seeds: &[u64]) -> Result<Vec<TrainReport>> {
    use rayon::prelude::*;
    let env = SchedEnvState::all_free(cfg.num_devices)?;
    let rl = chainreduce::scheduler::RLConfig { strategy, phi, ..cfg.rl.clone() };
    seeds
        .par_iter()
        .map(|&seed| Ok(train_agent(&env, &rl, seed)?.report().clone()))
        .collect()
}

fn cmd_rl(args: &Common) -> Result<bool> {
    let cfg = resolve_config(args)?;
    let strategies = match args.strategy {
        Some(s) => vec![s],
        None => Strategy::ALL.to_vec(),
    };
    let seeds = &args.seeds.0;
    let mut rows = Vec::new();
    let mut table = create(&args.out.join("convergence.csv"))?;
    writeln!(table, "strategy,seed,episodes_to_converge,converged,greedy_reward")?;
    for &s in &strategies {
        let reports = train_reports(&cfg, s, cfg.rl.phi, seeds)?;
        for (&seed, r) in seeds.iter().zip(&reports) {
            let mut w = create(&args.out.join(s.as_str()).join(format!("seed-{seed}")).join("curve.csv"))?;
            write_curve_csv(&r.curve, &mut w)?;
            w.flush()?;
            writeln!(table, "{},{seed},{},{},{:.6}", s.as_str(), r.episodes_to_converge, r.converged, r.greedy_reward)?;
            rows.push(RlRow {
                strategy: s,
                phi: cfg.rl.phi,
                seed,
                episodes_to_converge: r.episodes_to_converge,
                converged: r.converged,
                greedy_reward: r.greedy_reward,
            });
        }
        let mean = reports.iter().map(|r| r.episodes_to_converge as f64).sum::<f64>() / reports.len() as f64;
        println!("{:5} mean episodes to converge {mean:.1}", s.as_str());
    }
    table.flush()?;
    if let Some(sweep) = args.calibrate_phi {
        let strategy = args.strategy.unwrap_or(Strategy::Tdge);
        let mut w = create(&args.out.join("phi.csv"))?;
        writeln!(w, "phi,mean_episodes_to_converge,converged_runs,runs")?;
        for phi in sweep.values() {
            let reports = train_reports(&cfg, strategy, phi, seeds)?;
            let mean = reports.iter().map(|r| r.episodes_to_converge as f64).sum::<f64>() / reports.len() as f64;
            let converged = reports.iter().filter(|r| r.converged).count();
            writeln!(w, "{phi:.6},{mean:.6},{converged},{}", reports.len())?;
            for (&seed, r) in seeds.iter().zip(&reports) {
                rows.push(RlRow {
                    strategy,
                    phi,
                    seed,
                    episodes_to_converge: r.episodes_to_converge,
                    converged: r.converged,
                    greedy_reward: r.greedy_reward,
                });
            }
        }
        w.flush()?;
    }
    write_json(&args.out.join("rl.json"), &rows)?;
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHAINREDUCE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::SchedBench(a) => cmd_sched_bench(a),
        Command::Rl(a) => cmd_rl(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some seeds did not complete; see manifest.json");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1..5").unwrap().0, vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("7").unwrap().0, vec![7]);
        assert_eq!(parse_seeds("3,1,9").unwrap().0, vec![3, 1, 9]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn phi_sweep() {
        let s = parse_sweep("0:0.1:0.5").unwrap();
        let v = s.values();
        assert_eq!(v.len(), 6);
        assert!((v[5] - 0.5).abs() < 1e-12);
        assert!(parse_sweep("0:0:1").is_err());
        assert!(parse_sweep("0:1").is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "num_devices = 5\nseed = 3\n[hyper]\nepochs = 4\n").unwrap();
        let mut args = Common {
            config: Some(path),
            scheduler: None,
            seeds: Seeds(vec![0]),
            out: dir.path().into(),
            devices: None,
            epochs: Some(2),
            agg_rounds: None,
            strategy: None,
            calibrate_phi: None,
            fault_script: None,
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!((cfg.num_devices, cfg.seed, cfg.hyper.epochs), (5, 3, 2));
        assert_eq!(cfg.hyper.agg_rounds_per_epoch, SimConfig::default().hyper.agg_rounds_per_epoch);
        args.devices = Some(7);
        assert_eq!(resolve_config(&args).unwrap().num_devices, 7);
    }
}
