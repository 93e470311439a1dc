//! Benchmark front end for the dcad library: batch episode runs, planner
//! timing sweeps, and canned scenario generation. Emits plot-ready CSV
//! plus a summary JSON per run.

mod bench;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcad::sim::{self, Method, Scenario};

#[derive(Parser)]
#[command(name = "dcad", version, about = "Decentralized swarm collision-avoidance benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run seeded episodes of a scenario and emit trajectory CSVs + summary JSON.
    Run(RunArgs),
    /// Planner timing sweeps over neighbor cap and agent count.
    Bench(BenchArgs),
    /// Emit a canned scenario file.
    ScenarioGen(GenArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of episodes; seeds are seed..seed+episodes-1.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Base seed (defaults to the scenario's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Planner under test.
    #[arg(long, value_enum, default_value_t = MethodArg::Dcad)]
    method: MethodArg,
    /// Worker threads for episode-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the scenario's measurement-noise switch.
    #[arg(long, value_parser = parse_on_off)]
    noise: Option<bool>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Agent counts for the per-tick total sweep.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
    agents: Vec<usize>,
    /// Neighbor caps for the per-agent solve sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50")]
    neighbors: Vec<usize>,
    /// Repetitions per neighbor-cap point.
    #[arg(long, default_value_t = 30)]
    reps: usize,
}

#[derive(clap::Args)]
struct GenArgs {
    /// Scenario kind.
    #[arg(long, value_enum)]
    kind: ScenarioKind,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Agent count (circle).
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Circle diameter (m).
    #[arg(long, default_value_t = 40.0)]
    diameter: f64,
    /// Peak reference speed (m/s, circle).
    #[arg(long, default_value_t = 4.0)]
    v_peak: f64,
    /// Lemniscate scale (m).
    #[arg(long, default_value_t = 10.0)]
    scale: f64,
    /// Lemniscate average speed (m/s).
    #[arg(long, default_value_t = 4.2)]
    avg_speed: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    Circle,
    Lemniscate,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dcad,
    OrcaBaseline,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Dcad => Method::Dcad,
            MethodArg::OrcaBaseline => Method::OrcaBaseline,
        }
    }
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

/// Failure modes mapped onto the documented exit codes.
pub enum CliError {
    /// Exit 1: bad configuration (flags, scenario file, validation).
    Config(String),
    /// Exit 2: a simulation episode aborted.
    Sim(String),
    /// Exit 3: output I/O failure.
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Sim(_) => 2,
            CliError::Io(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Sim(m) | CliError::Io(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Bench(args) => bench::cmd_bench(args),
        Cmd::ScenarioGen(args) => cmd_scenario_gen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_scenario(path: &PathBuf) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    let scn: Scenario = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("scenario parse error in {}: {e}", path.display())))?;
    if scn.version != sim::SCENARIO_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "unsupported scenario schema version {} (expected {})",
            scn.version,
            sim::SCENARIO_SCHEMA_VERSION
        )));
    }
    scn.validate()
        .map_err(|e| CliError::Config(format!("invalid scenario: {e}")))?;
    Ok(scn)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    if args.episodes == 0 {
        return Err(CliError::Config("--episodes must be >= 1".into()));
    }
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let mut scn = load_scenario(&args.scenario)?;
    if let Some(noise) = args.noise {
        scn.noise.enabled = noise;
    }
    let seed_base = args.seed.unwrap_or(scn.seed);
    let method: Method = args.method.into();
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;

    let seeds: Vec<u64> = (0..args.episodes as u64).map(|i| seed_base + i).collect();
    let jobs = args.jobs.min(seeds.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<output::EpisodeSummary, CliError>>>> =
        seeds.iter().map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= seeds.len() {
                    break;
                }
                let mut episode_scn = scn.clone();
                episode_scn.seed = seeds[idx];
                let outcome = run_one(&episode_scn, method, seeds[idx], &args.out);
                *results[idx].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut summaries = Vec::with_capacity(seeds.len());
    for slot in results {
        match slot.into_inner().unwrap().expect("worker finished") {
            Ok(s) => summaries.push(s),
            Err(e) => return Err(e),
        }
    }

    let summary = output::aggregate(&scn.name, method, seed_base, summaries);
    output::write_summary_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{} episodes, {} with collisions, {} timed out -> {}",
        args.episodes,
        summary.collision_episodes,
        summary.timeout_episodes,
        args.out.display()
    );
    Ok(())
}

fn run_one(
    scn: &Scenario,
    method: Method,
    seed: u64,
    out: &PathBuf,
) -> Result<output::EpisodeSummary, CliError> {
    let result = sim::run_episode(scn, method)
        .map_err(|e| CliError::Sim(format!("episode seed {seed}: {e}")))?;
    let path = out.join(format!("episode_{seed:05}.csv"));
    output::write_episode_csv(&path, &result)?;
    Ok(output::EpisodeSummary::new(seed, &result))
}

fn cmd_scenario_gen(args: GenArgs) -> Result<(), CliError> {
    let scn = match args.kind {
        ScenarioKind::Circle => {
            if args.n < 2 || args.n % 2 != 0 {
                return Err(CliError::Config("--n must be even and >= 2".into()));
            }
            sim::circle_exchange(args.n, args.diameter, args.v_peak)
        }
        ScenarioKind::Lemniscate => sim::lemniscate(args.scale, args.avg_speed),
    };
    let text = toml::to_string_pretty(&scn)
        .map_err(|e| CliError::Config(format!("serialize failed: {e}")))?;
    output::write_atomic(&args.out, text.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}
