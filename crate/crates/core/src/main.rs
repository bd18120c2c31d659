use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hetero_track::controller::ControllerMode;
use hetero_track::harness::export::mode_name;
use hetero_track::harness::{
    export_ablation, export_run, export_sweep, run_ablation, run_delta_sweep, run_with, RunOptions, Scenario,
    ScenarioConfig,
};
use hetero_track::Error;

/// Risk-aware multi-robot target tracking simulator.
#[derive(Debug, Parser)]
#[command(name = "hetero-track", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one seeded run and write steps.csv, summary.json and timing.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Drop the risk constraint (ablation baseline).
        #[arg(long)]
        no_sog: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired risk-aware vs. ablated runs over an inclusive seed range `K..L`.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_seed_range)]
        seeds: SeedRange,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One controller step per forced sensing margin.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated margins; defaults to `run.sweep_deltas`.
        #[arg(long, value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load and validate a scenario file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone)]
struct SeedRange(Vec<u64>);

fn parse_seed_range(s: &str) -> Result<SeedRange, String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected K..L, got `{s}`"))?;
    let lo: u64 = lo.trim().parse().map_err(|e| format!("bad seed `{lo}`: {e}"))?;
    let hi: u64 = hi.trim().parse().map_err(|e| format!("bad seed `{hi}`: {e}"))?;
    if hi < lo {
        return Err(format!("empty seed range `{s}`"));
    }
    Ok(SeedRange((lo..=hi).collect()))
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DEGRADED: u8 = 3;

fn load(path: &PathBuf) -> Result<Scenario, ExitCode> {
    ScenarioConfig::from_file(path)
        .and_then(|c| c.build())
        .map_err(|e| {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(EXIT_CONFIG)
        })
}

fn runtime(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_FAILURE)
}

fn out_dir(s: &Scenario, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(&s.config.output.dir))
}

fn execute(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            let s = load(&config)?;
            println!(
                "ok: {} robots, {} targets, {} sensor types, minimal sensor count {}, initial margin {:.6}",
                s.robots(),
                s.target_count(),
                s.lib.len(),
                s.minimal.total,
                s.gamma.frobenius_norm() - s.minimal.frobenius_norm()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            seed,
            steps,
            no_sog,
            out,
        } => {
            let s = load(&config)?;
            let mut opts = RunOptions::from_scenario(&s);
            opts.seed = seed.unwrap_or(opts.seed);
            opts.steps = steps.unwrap_or(opts.steps);
            if no_sog {
                opts.mode = ControllerMode::NoSog;
            }
            let log = run_with(&s, &opts).map_err(runtime)?;
            let dir = out_dir(&s, out);
            let files = export_run(&dir, &s.config, &log).map_err(runtime)?;
            println!(
                "{} steps ({}), seed {}: final margin {:.6}, sensors lost {}, mean step {:.2} ms",
                log.records.len(),
                mode_name(opts.mode),
                opts.seed,
                log.final_delta(),
                log.records.iter().map(|r| r.sensors_lost).sum::<usize>(),
                log.mean_wall_ms()
            );
            println!("wrote {}", files.steps.display());
            if log.degraded_early() {
                eprintln!(
                    "warning: observability lost at step {}",
                    log.first_observability_loss().unwrap_or_default()
                );
                return Ok(ExitCode::from(EXIT_DEGRADED));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablation {
            config,
            seeds,
            steps,
            out,
        } => {
            let s = load(&config)?;
            let steps = steps.unwrap_or(s.config.run.steps);
            let result = run_ablation(&s, &seeds.0, steps).map_err(runtime)?;
            let dir = out_dir(&s, out);
            let (a, b) = export_ablation(&dir, &result).map_err(runtime)?;
            for mode in [ControllerMode::RiskAware, ControllerMode::NoSog] {
                println!(
                    "{:>10}: mean final margin {:.6}, median steps until margin exhausted {:.1}",
                    mode_name(mode),
                    result.mean_final_delta(mode),
                    result.median_time_to_delta_zero(mode)
                );
            }
            println!("wrote {} and {}", a.display(), b.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, deltas, out } => {
            let s = load(&config)?;
            let deltas = if deltas.is_empty() {
                s.config.run.sweep_deltas.clone()
            } else {
                deltas
            };
            if deltas.is_empty() || deltas.iter().any(|&d| !(d > 0.0)) {
                eprintln!("error: sweep margins must be positive and non-empty");
                return Err(ExitCode::from(EXIT_CONFIG));
            }
            let rows = run_delta_sweep(&s, &deltas).map_err(runtime)?;
            for r in &rows {
                println!(
                    "delta {:>6.3}: tracking quality {:.6}, safety {:.6} ({})",
                    r.delta, r.tracking_quality, r.safety, r.status
                );
            }
            let path = export_sweep(&out_dir(&s, out), &rows).map_err(runtime)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    execute(Cli::parse()).unwrap_or_else(|code| code)
}
