//! `uwbnav`: simulation, dataset replay, TDOA solving and gain checks.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime or data
//! error. Set `NAV_LOG` (e.g. `NAV_LOG=debug`) for log output on stderr.

mod config;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;
use uwbnav::liegroup::Vec3;
use uwbnav::observer::{validate_gains, Gains, ObserverConfig};
use uwbnav::replay::{
    load_dataset, run_replay, summary_json, write_metrics_csv, ReplayConfig, ReplayError, RunOutput,
};
use uwbnav::sensors::ConfidenceWeights;
use uwbnav::sim::{run_scenario_configured, Scenario, SimError};
use uwbnav::tdoa::{reconstruct, AnchorSet, SolveOptions, TdoaError, TdoaFrame};

use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ReplayError> for CliError {
    fn from(e: ReplayError) -> Self {
        if e.is_config() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Observer(e) => CliError::Runtime(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn anchor_error(e: TdoaError) -> CliError {
    match e {
        TdoaError::TooFewAnchors(_) | TdoaError::CoplanarAnchors { .. } => {
            CliError::Usage(format!("assumption violated: at least 4 non-coplanar anchors are required ({e})"))
        }
        other => CliError::Usage(other.to_string()),
    }
}

#[derive(Parser, Debug)]
#[command(name = "uwbnav", version, about = "UWB/IMU navigation observer on SE2(3)")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set gains.k_v=2.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent seeds or trials.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GainSource {
    /// k_Ω=3, k_v=2, k_a=70, γ_Ω=0.1, γ_a=2
    Paper,
    /// Gains from the configuration.
    Config,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scenario and run the observer on it.
    Sim {
        /// Preset (static, circle, figure8) or a scenario JSON file.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, value_enum, default_value = "config")]
        gains: GainSource,
        /// Also write imu.csv, uwb.csv, gt.csv and anchors.json.
        #[arg(long)]
        export: bool,
    },
    /// Replay a recorded dataset against its ground truth.
    Replay {
        /// Dataset directory; overrides `dataset.dir`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Anchor file; overrides `anchors`.
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Solve tag positions from range differences.
    TdoaSolve {
        /// Anchor file; overrides `anchors`.
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Comma-separated cyclic differences for one frame.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with_all = ["ranges", "input"])]
        diffs: Option<Vec<f64>>,
        /// Comma-separated ranges for one frame.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "input")]
        ranges: Option<Vec<f64>>,
        /// UWB CSV file, solved row by row with the configured column map.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Check the gain conditions for an analysis parameter δ.
    ValidateGains {
        #[arg(long)]
        delta: Option<f64>,
    },
}

fn observer_config(cfg: &Config, gains: Gains, tag_offset: Vec3) -> Result<ObserverConfig, CliError> {
    let weights = ConfidenceWeights::new(cfg.weights).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(ObserverConfig {
        gains,
        weights,
        tag_offset,
        solve: SolveOptions { reduced_fallback: cfg.reduced_fallback },
        ..ObserverConfig::default()
    })
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_run(dir: &Path, run: &RunOutput) -> Result<(), CliError> {
    let mut csv = Vec::new();
    write_metrics_csv(&run.rows, &mut csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    output::write_atomic(&dir.join("metrics.csv"), &csv)?;
    output::write_atomic(&dir.join("summary.json"), summary_json(&run.summary).as_bytes())
}

fn report_line(label: &str, run: &RunOutput) {
    let s = &run.summary;
    let settle = s.settling_time.map_or("not settled".to_string(), |t| format!("settled at {t:.2} s"));
    println!(
        "{label}pos_err {:.3} -> {:.3} m, att_err {:.2e} -> {:.2e}, steady pos RMS {:.3} m, {settle}",
        s.initial.pos_err, s.last.pos_err, s.initial.att_err, s.last.att_err, s.steady.pos_rms
    );
}

fn scenario_from(cfg: &Config, name: &str, seed: u64) -> Result<Scenario, CliError> {
    let mut sc = if Path::new(name).extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(name).map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
        let mut sc: Scenario = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
        sc.seed = seed;
        sc
    } else {
        Scenario::preset(name, seed)?
    };
    let o = &cfg.scenario;
    if let Some(v) = o.duration {
        sc.duration = v;
    }
    if let Some(v) = o.imu_rate {
        sc.imu_rate = v;
    }
    if let Some(v) = o.tdoa_rate {
        sc.tdoa_rate = v;
    }
    if let Some(v) = o.noise {
        sc.noise = v;
    }
    if let Some(v) = o.b_omega {
        sc.b_omega = v;
    }
    if let Some(v) = o.b_a {
        sc.b_a = v;
    }
    if let Some(e) = cfg.estimate {
        sc.estimate = e;
    }
    if let Some(t) = cfg.tag_offset {
        sc.tag_offset = t;
    }
    if let Some(path) = &cfg.anchors {
        sc.anchors = AnchorSet::from_json_file(path).map_err(anchor_error)?.anchors().to_vec();
    }
    sc.validate()?;
    Ok(sc)
}

fn cmd_sim(cfg: &Config, scenario: Option<String>, gains: GainSource, export: bool, jobs: Option<usize>) -> Result<(), CliError> {
    let name = scenario
        .or_else(|| cfg.scenario.name.clone())
        .ok_or_else(|| CliError::Usage("no scenario given (use --scenario static|circle|figure8|FILE.json)".into()))?;
    let gains = match gains {
        GainSource::Paper => Gains::paper(),
        GainSource::Config => cfg.gains,
    };
    let scenarios = cfg.seeds.iter().map(|&s| scenario_from(cfg, &name, s)).collect::<Result<Vec<_>, _>>()?;
    let export = export || cfg.scenario.export;
    let multi = scenarios.len() > 1;
    let pool = thread_pool(jobs)?;
    let results: Vec<Result<(), CliError>> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|sc| {
                let dir = if multi { cfg.out.join(format!("seed-{}", sc.seed)) } else { cfg.out.clone() };
                log::info!("{} seed {}: {} s at {} Hz IMU, {} Hz TDOA", sc.name, sc.seed, sc.duration, sc.imu_rate, sc.tdoa_rate);
                let config = observer_config(cfg, gains, v3(sc.tag_offset))?;
                let run = run_scenario_configured(sc, config, &cfg.summary)?;
                output::ensure_dir(&dir)?;
                write_run(&dir, &run.output)?;
                if export {
                    output::export_atomic(&run.data.dataset, &run.data.anchors, &dir)?;
                }
                report_line(&format!("{} seed {}: ", sc.name, sc.seed), &run.output);
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect()
}

fn load_anchors(flag: Option<PathBuf>, cfg: &Config) -> Result<AnchorSet, CliError> {
    let path = flag
        .or_else(|| cfg.anchors.clone())
        .ok_or_else(|| CliError::Usage("no anchor file given (use --anchors or the anchors key)".into()))?;
    match AnchorSet::from_json_file(&path) {
        Err(e @ (TdoaError::Io(_) | TdoaError::Parse(_))) => {
            Err(CliError::Usage(format!("{}: {e}", path.display())))
        }
        other => other.map_err(anchor_error),
    }
}

fn cmd_replay(cfg: &Config, dataset: Option<PathBuf>, anchors: Option<PathBuf>, jobs: Option<usize>) -> Result<(), CliError> {
    let anchors = load_anchors(anchors, cfg)?;
    let mut ds = cfg.dataset.clone();
    if let Some(dir) = dataset {
        ds.dir = Some(dir);
        ds.trials.clear();
    }
    let trials = ds.resolve()?;
    let tag_offset = v3(cfg.tag_offset.unwrap_or_default());
    let init = cfg.estimate.unwrap_or_default().to_state()?;
    let mut replay = ReplayConfig::new(observer_config(cfg, cfg.gains, tag_offset)?, init);
    replay.summary = cfg.summary;
    replay.velocity_window = cfg.velocity_window;
    replay.velocity_order = cfg.velocity_order;

    let pool = thread_pool(jobs)?;
    let results: Vec<Result<(), CliError>> = pool.install(|| {
        trials
            .par_iter()
            .map(|(name, paths)| {
                let (data, report) = load_dataset(paths, &ds.columns)?;
                for m in &report.malformed {
                    eprintln!("warning: {}:{}: skipped row ({})", m.file, m.line, m.reason);
                }
                log::info!(
                    "loaded {} IMU, {} UWB, {} ground-truth rows ({} reordered)",
                    report.imu.kept,
                    report.uwb.kept,
                    report.gt.kept,
                    report.imu.reordered + report.uwb.reordered + report.gt.reordered
                );
                let run = run_replay(&data, &anchors, &replay)?;
                let dir = if name.is_empty() { cfg.out.clone() } else { cfg.out.join(name) };
                output::ensure_dir(&dir)?;
                write_run(&dir, &run)?;
                let label = if name.is_empty() { String::new() } else { format!("{name}: ") };
                report_line(&label, &run);
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Serialize)]
struct SolveLine {
    t: f64,
    p: [f64; 3],
    range_to_h1: f64,
    residual: f64,
    consistency: Option<f64>,
    negative_range: bool,
    reduced: bool,
}

fn cmd_tdoa_solve(
    cfg: &Config,
    anchors: Option<PathBuf>,
    diffs: Option<Vec<f64>>,
    ranges: Option<Vec<f64>>,
    input: Option<PathBuf>,
) -> Result<(), CliError> {
    let anchors = load_anchors(anchors, cfg)?;
    let frames: Vec<TdoaFrame> = match (diffs, ranges, input) {
        (Some(d), _, _) => vec![TdoaFrame::new(0.0, d)],
        (_, Some(r), _) => vec![TdoaFrame::from_ranges(0.0, &r)],
        (_, _, Some(path)) => output::read_uwb(&path, &cfg.dataset.columns)?,
        _ => return Err(CliError::Usage("give --diffs, --ranges or --input".into())),
    };
    let opts = SolveOptions { reduced_fallback: cfg.reduced_fallback };
    let mut stdout = std::io::stdout().lock();
    for f in &frames {
        let sol = reconstruct(&anchors, f, &[], opts).map_err(|e| match e {
            TdoaError::DimensionMismatch { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(format!("t={}: {other}", f.timestamp)),
        })?;
        let line = SolveLine {
            t: f.timestamp,
            p: [sol.p.x, sol.p.y, sol.p.z],
            range_to_h1: sol.range_to_h1,
            residual: sol.residual,
            consistency: sol.consistency,
            negative_range: sol.negative_range,
            reduced: sol.reduced,
        };
        if writeln!(stdout, "{}", serde_json::to_string(&line).expect("serializable")).is_err() {
            break;
        }
    }
    Ok(())
}

fn cmd_validate_gains(cfg: &Config, delta: Option<f64>) -> Result<(), CliError> {
    let delta = delta.unwrap_or(cfg.delta);
    let r = validate_gains(&cfg.gains, delta).map_err(|e| CliError::Usage(e.to_string()))?;
    let g = &cfg.gains;
    println!(
        "gains: k_omega={} k_v={} k_a={} gamma_omega={} gamma_a={}",
        g.k_omega, g.k_v, g.k_a, g.gamma_omega, g.gamma_a
    );
    println!("delta {delta} vs bound 4k_v/(k_v^2+4k_a) = {:.6}, margin {:.6}", r.bound, r.margin);
    println!("Q4 eigenvalues [{:.6e}, {:.6e}] positive: {}", r.q4_eigenvalues[0], r.q4_eigenvalues[1], r.q4_positive);
    println!("Q6 eigenvalues [{:.6e}, {:.6e}] positive: {}", r.q6_eigenvalues[0], r.q6_eigenvalues[1], r.q6_positive);
    println!("{}", if r.pass { "PASS" } else { "FAIL" });
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match cli.command {
        Command::Sim { scenario, gains, export } => cmd_sim(&cfg, scenario, gains, export, cli.jobs),
        Command::Replay { dataset, anchors } => cmd_replay(&cfg, dataset, anchors, cli.jobs),
        Command::TdoaSolve { anchors, diffs, ranges, input } => cmd_tdoa_solve(&cfg, anchors, diffs, ranges, input),
        Command::ValidateGains { delta } => cmd_validate_gains(&cfg, delta),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NAV_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
