use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fadeldp::config::RunConfig;
use fadeldp::runner::{exit, exit_code, run};
use fadeldp::scenarios::scenario_registry;

#[derive(Parser)]
#[command(name = "fadeldp", version, about = "Small-noise SFDE laboratory with fading memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Ignore and do not write the Monte Carlo cache.
    #[arg(long)]
    no_cache: bool,
    /// Worker threads for replica parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run whatever experiment the config declares.
    Run(Common),
    Simulate(Common),
    Pullback(Common),
    Stationarity(Common),
    Rate(Common),
    Quasipotential(Common),
    LdpSlope(Common),
    VariationalCheck(Common),
    CheckModel(Common),
    /// Print the built-in scenarios as JSON.
    Scenarios,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (expected, common) = match cli.command {
        Command::Scenarios => {
            let reg = scenario_registry();
            match serde_json::to_string_pretty(&reg) {
                Ok(s) => {
                    println!("{s}");
                    return ExitCode::SUCCESS;
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(exit::FAILURE as u8);
                }
            }
        }
        Command::Run(c) => (None, c),
        Command::Simulate(c) => (Some("simulate"), c),
        Command::Pullback(c) => (Some("pullback"), c),
        Command::Stationarity(c) => (Some("stationarity"), c),
        Command::Rate(c) => (Some("rate"), c),
        Command::Quasipotential(c) => (Some("quasipotential"), c),
        Command::LdpSlope(c) => (Some("ldp-slope"), c),
        Command::VariationalCheck(c) => (Some("variational-check"), c),
        Command::CheckModel(c) => (Some("check-model"), c),
    };
    ExitCode::from(execute(expected, common) as u8)
}

fn execute(expected: Option<&str>, common: Common) -> i32 {
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return exit::CONFIG;
        }
    }
    let mut cfg = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Some(kind) = expected {
        if cfg.experiment.kind() != kind {
            eprintln!(
                "error: config declares experiment `{}` but the `{kind}` subcommand was used",
                cfg.experiment.kind()
            );
            return exit::CONFIG;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match run(&cfg, common.out.as_deref(), !common.no_cache) {
        Ok(outcome) => {
            let m = &outcome.manifest;
            println!(
                "{} done in {:.2}s{} -> {}",
                m.experiment,
                m.wall_time_s,
                if m.cache_hit { " (cached)" } else { "" },
                outcome.out_dir.display()
            );
            if outcome.exit_code == exit::INFEASIBLE {
                eprintln!("warning: rate problem infeasible; see result.json");
            }
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
