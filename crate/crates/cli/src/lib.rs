//! Command-line entry points. Every flag can also be set through an
//! environment variable with the `ACS_` prefix.

pub mod serve;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use acs_core::affordance::{precompute_for_scenario, CapabilityMap};
use acs_core::agents::{HumanControl, HumanPolicy};
use acs_core::collaboration::ExperimentMode;
use acs_core::metrics::{aggregate, run_id, summarize, write_csv, ModeSummary};
use acs_core::simloop::{
    capability_digest, read_log, run, write_log, RunReport, SimConfig, DEFAULT_DT, DEFAULT_MAX_TIME,
};
use acs_core::world::{load_scenario, Scenario};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0:#}")]
    Config(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
    #[error("{0:#}")]
    Protocol(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Protocol(_) => 4,
        }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

#[derive(Debug, Parser)]
#[command(name = "acs", version, about = "Affordance-sharing human-robot cleaning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    #[arg(long, env = "ACS_SCENARIO")]
    pub scenario: PathBuf,
    /// Precomputed capability map; computed on the fly when absent.
    #[arg(long, env = "ACS_CAPABILITY")]
    pub capability: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, env = "ACS_DT", default_value_t = DEFAULT_DT)]
    pub dt: f64,
    #[arg(long = "max-time", env = "ACS_MAX_TIME", default_value_t = DEFAULT_MAX_TIME)]
    pub max_time: f64,
    /// Scripted stand-in for the human: diligent, declining or independent.
    #[arg(long, env = "ACS_POLICY", default_value = "diligent")]
    pub policy: HumanPolicy,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Precompute the robot capability map for a scenario.
    Precompute {
        #[arg(long, env = "ACS_SCENARIO")]
        scenario: PathBuf,
        #[arg(long, env = "ACS_OUT")]
        out: PathBuf,
        /// Worker threads; the map does not depend on this.
        #[arg(long, env = "ACS_THREADS")]
        threads: Option<usize>,
    },
    /// Check a scenario and report who can reach each object and bin.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// One headless run with a scripted human.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, env = "ACS_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ACS_MODE", default_value = "shared")]
        mode: ExperimentMode,
        #[arg(long, env = "ACS_OUT")]
        out: PathBuf,
    },
    /// Every (mode, seed) pair, plus an aggregate comparing modes.
    Batch {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated seeds, or a half-open range like `0..10`.
        #[arg(long, env = "ACS_SEEDS", default_value = "0,1,2", value_parser = parse_seeds)]
        seeds: Seeds,
        #[arg(long, env = "ACS_MODES", default_value = "noncomm,r2h,shared", value_parser = parse_modes)]
        modes: Modes,
        #[arg(long, env = "ACS_OUT")]
        out: PathBuf,
    },
    /// Serve a live run to one operator over WebSocket.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, env = "ACS_DT", default_value_t = DEFAULT_DT)]
        dt: f64,
        #[arg(long = "max-time", env = "ACS_MAX_TIME", default_value_t = DEFAULT_MAX_TIME)]
        max_time: f64,
        #[arg(long, env = "ACS_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ACS_MODE", default_value = "shared")]
        mode: ExperimentMode,
        #[arg(long, env = "ACS_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "ACS_PORT", default_value_t = 8765)]
        port: u16,
        /// Simulated seconds per wall-clock second.
        #[arg(long, env = "ACS_SPEED", default_value_t = 1.0)]
        speed: f64,
        /// Where to write the event log when the server stops.
        #[arg(long, env = "ACS_OUT")]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from an event log.
    Replay {
        #[arg(long, env = "ACS_LOG")]
        log: PathBuf,
        /// Report to check the recomputed metrics against.
        #[arg(long, env = "ACS_REPORT")]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seeds(pub Vec<u64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Modes(pub Vec<ExperimentMode>);

pub fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        (a..b).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse::<u64>().map_err(|e| format!("bad seed {v:?}: {e}")))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err("no seeds".into());
    }
    Ok(Seeds(seeds))
}

pub fn parse_modes(s: &str) -> Result<Modes, String> {
    let modes: Vec<ExperimentMode> = s.split(',').map(|m| m.trim().parse()).collect::<Result<_, _>>()?;
    if modes.is_empty() {
        return Err("no modes".into());
    }
    Ok(Modes(modes))
}

pub fn load_inputs(args: &ScenarioArgs) -> Result<(Arc<Scenario>, Arc<CapabilityMap>), CliError> {
    let scenario = load_scenario(&args.scenario)
        .with_context(|| format!("loading scenario {}", args.scenario.display()))
        .map_err(CliError::Config)?;
    let cap = match &args.capability {
        Some(path) => {
            let cap = CapabilityMap::load(path)
                .with_context(|| format!("loading capability map {}", path.display()))
                .map_err(CliError::Config)?;
            if !cap.matches_grid(&scenario.world.grid) {
                return Err(CliError::Config(anyhow!(
                    "capability map {} was computed for a different grid",
                    path.display()
                )));
            }
            cap
        }
        None => precompute_for_scenario(&scenario)
            .context("precomputing capability map")
            .map_err(CliError::Config)?,
    };
    Ok((Arc::new(scenario), Arc::new(cap)))
}

fn sim_config(sim: &SimArgs, mode: ExperimentMode, seed: u64) -> Result<SimConfig, CliError> {
    let config = SimConfig {
        dt: sim.dt,
        max_time: sim.max_time,
        seed,
        mode,
        human: HumanControl::Scripted(sim.policy),
        ..SimConfig::default()
    };
    config.validate().map_err(|e| CliError::Config(e.into()))?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(CliError::Runtime)
}

fn write_log_file(path: &Path, report: &RunReport) -> Result<(), CliError> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(CliError::Runtime)?;
    write_log(&report.log, BufWriter::new(f)).map_err(runtime)
}

fn write_csv_file(path: &Path, reports: &[RunReport]) -> Result<(), CliError> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(CliError::Runtime)?;
    write_csv(reports, BufWriter::new(f)).map_err(runtime)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display())).map_err(CliError::Runtime)
}

fn summary_line(r: &RunReport) -> String {
    let m = &r.metrics;
    let idle = |a| m.agents.get(&a).map(|x| x.idle_time).unwrap_or(0.0);
    format!(
        "{:<32} {:<10} t={:>7.1}s  idle R={:>6.1}s H={:>6.1}s  queries sent={} done={}",
        run_id(r),
        format!("{:?}", r.outcome).to_lowercase(),
        m.duration,
        idle(acs_core::ids::AgentId::R),
        idle(acs_core::ids::AgentId::H),
        m.queries.sent,
        m.queries.done,
    )
}

#[derive(Serialize)]
struct Aggregate<'a> {
    scenario: &'a str,
    scenario_digest: &'a str,
    runs: Vec<String>,
    modes: Vec<ModeSummary>,
}

#[derive(Serialize)]
struct Reach {
    kind: &'static str,
    id: u32,
    position: [f64; 3],
    robot: bool,
    human_height: bool,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Precompute { scenario, out, threads } => {
            let args = ScenarioArgs { scenario, capability: None };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| CliError::Config(e.into()))?;
            let (_, cap) = pool.install(|| load_inputs(&args))?;
            cap.save(&out).with_context(|| format!("writing {}", out.display())).map_err(CliError::Runtime)?;
            println!(
                "{}: {} poses, {} reachable voxels, sha256 {}",
                out.display(),
                cap.lattice().len(),
                cap.reachable_count(),
                capability_digest(&cap)
            );
            Ok(())
        }
        Cmd::Validate { scenario } => {
            let (s, cap) = load_inputs(&scenario)?;
            let chest_z = s.human_chest.z;
            let human = acs_core::agents::HumanConfig::default();
            let height_ok = |z: f64| {
                let [a, _, c] = human.reach_semi_axes;
                (human.standoff / a).powi(2) + ((z - chest_z) / c).powi(2) <= 1.0
            };
            let robot_ok = |p: &acs_core::geometry::Vec3| cap.query(p).map(|q| q.reachable).unwrap_or(false);
            let mut rows = Vec::new();
            for o in s.world.objects() {
                rows.push(Reach {
                    kind: "object",
                    id: o.id.0,
                    position: o.position.into(),
                    robot: robot_ok(&o.position),
                    human_height: height_ok(o.position.z),
                });
            }
            for b in &s.world.bins {
                rows.push(Reach {
                    kind: "bin",
                    id: b.id.0,
                    position: b.position.into(),
                    robot: robot_ok(&b.position),
                    human_height: height_ok(b.position.z),
                });
            }
            println!("{}: valid, {} objects, {} bins, {} robot-reachable voxels", s.name, s.world.objects().len(), s.world.bins.len(), cap.reachable_count());
            for r in &rows {
                println!(
                    "  {:<6} {:>3} at ({:.2}, {:.2}, {:.2})  robot={:<5} human={}",
                    r.kind, r.id, r.position[0], r.position[1], r.position[2], r.robot, r.human_height
                );
            }
            Ok(())
        }
        Cmd::Run { scenario, sim, seed, mode, out } => {
            let (s, cap) = load_inputs(&scenario)?;
            let config = sim_config(&sim, mode, seed)?;
            let report = run(s, cap, config).map_err(|e| CliError::Config(e.into()))?;
            create_dir(&out)?;
            write_json(&out.join("report.json"), &report)?;
            write_log_file(&out.join("log.jsonl"), &report)?;
            write_csv_file(&out.join("metrics.csv"), std::slice::from_ref(&report))?;
            println!("{}", summary_line(&report));
            Ok(())
        }
        Cmd::Batch { scenario, sim, seeds, modes, out } => {
            let (s, cap) = load_inputs(&scenario)?;
            let mut jobs = Vec::new();
            for &mode in &modes.0 {
                for &seed in &seeds.0 {
                    jobs.push(sim_config(&sim, mode, seed)?);
                }
            }
            let reports_dir = out.join("reports");
            let logs_dir = out.join("logs");
            create_dir(&reports_dir)?;
            create_dir(&logs_dir)?;
            let results: Vec<Result<RunReport, CliError>> = jobs
                .into_par_iter()
                .map(|config| {
                    let report = run(s.clone(), cap.clone(), config).map_err(|e| CliError::Runtime(e.into()))?;
                    let id = run_id(&report);
                    write_json(&reports_dir.join(format!("{id}.json")), &report)?;
                    write_log_file(&logs_dir.join(format!("{id}.jsonl")), &report)?;
                    Ok(report)
                })
                .collect();
            let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            for r in &reports {
                println!("{}", summary_line(r));
            }
            let agg = Aggregate {
                scenario: &s.name,
                scenario_digest: &s.digest,
                runs: reports.iter().map(run_id).collect(),
                modes: aggregate(&reports),
            };
            write_json(&out.join("aggregate.json"), &agg)?;
            write_csv_file(&out.join("runs.csv"), &reports)?;
            for m in &agg.modes {
                println!(
                    "{:<8} completed {}/{}  mean duration {:.1}s",
                    m.mode.label(),
                    m.completed,
                    m.runs,
                    m.mean_duration
                );
            }
            Ok(())
        }
        Cmd::Serve { scenario, dt, max_time, seed, mode, host, port, speed, out } => {
            let (s, cap) = load_inputs(&scenario)?;
            let config = SimConfig { dt, max_time, seed, mode, human: HumanControl::Live, ..SimConfig::default() };
            config.validate().map_err(|e| CliError::Config(e.into()))?;
            if !(speed.is_finite() && speed > 0.0) {
                return Err(CliError::Config(anyhow!("speed must be > 0")));
            }
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("port {port} on {host} is not available"))
                    .map_err(CliError::Runtime)?;
                eprintln!("serving {} ({}) on ws://{}", s.name, mode.label(), listener.local_addr().map_err(runtime)?);
                let opts = serve::ServeOptions { speed, ..serve::ServeOptions::default() };
                let sim = acs_core::simloop::Simulation::new(s, cap, config).map_err(|e| CliError::Config(e.into()))?;
                let server = serve::Server::start(listener, sim, opts);
                tokio::signal::ctrl_c().await.map_err(runtime)?;
                let log = server.shutdown().await;
                if let Some(out) = out {
                    create_dir(&out)?;
                    let path = out.join("log.jsonl");
                    let f = File::create(&path).with_context(|| format!("creating {}", path.display())).map_err(CliError::Runtime)?;
                    write_log(&log, BufWriter::new(f)).map_err(runtime)?;
                }
                Ok(())
            })
        }
        Cmd::Replay { log, report } => {
            let f = File::open(&log).with_context(|| format!("opening {}", log.display())).map_err(CliError::Config)?;
            let records = read_log(BufReader::new(f)).map_err(|e| CliError::Protocol(anyhow!("{}: {e}", log.display())))?;
            let metrics = summarize(&records).map_err(|e| CliError::Protocol(e.into()))?;
            let text = serde_json::to_string_pretty(&metrics).map_err(runtime)?;
            if let Some(path) = report {
                let r: RunReport = serde_json::from_str(
                    &fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(CliError::Config)?,
                )
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(CliError::Config)?;
                let original = serde_json::to_string_pretty(&r.metrics).map_err(runtime)?;
                if original != text {
                    return Err(CliError::Runtime(anyhow!("replayed metrics differ from {}", path.display())));
                }
                if acs_core::simloop::log_digest(&records) != r.log_digest {
                    return Err(CliError::Runtime(anyhow!("log digest differs from {}", path.display())));
                }
            }
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(runtime)?;
            Ok(())
        }
    }
}
