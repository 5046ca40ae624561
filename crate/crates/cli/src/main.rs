//! `tunekit` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tunekit::estimation::{run_monte_carlo, write_gains_table, write_monte_carlo};
use tunekit::sensitivity::{check_jacobians, JacobianReport};
use tunekit::systems::dubins::DubinsModel;
use tunekit::systems::quadrotor::QuadModel;
use tunekit::systems::SystemKind;
use tunekit::tuner::{emit_artifacts, emit_comparison};
use tunekit::{compare_strategies, tune, Strategy, TerminationReason, TuneConfig, TuneError};

#[derive(Parser)]
#[command(name = "tunekit", version, about = "Tune closed-loop controller gains by sensitivity propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one tuning loop and write run.csv, curve.csv and final.json.
    Tune(RunArgs),
    /// Run several strategies on the same problem.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategy names; all six when omitted.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
    },
    /// Repeat noisy tuning runs with independent noise seeds.
    Montecarlo {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides `trials` in the config.
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated strategy names; the config's strategy when omitted.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
    },
    /// Compare a system's Jacobians against finite differences.
    CheckJacobians {
        #[arg(long)]
        system: Option<SystemKind>,
        /// Physical constants are taken from this config when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Defaults to 1e-5 for the car and 1e-3 for the quadrotor.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to `output_dir` in the config, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
}

impl RunArgs {
    fn load(&self) -> Result<(TuneConfig, PathBuf), TuneError> {
        let mut cfg = TuneConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
            cfg.validate()?;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

/// Exit codes by error category. Usage errors from argument parsing exit 2.
fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "divergence" => 3,
        "io" => 4,
        "invalid-input" => 5,
        _ => 1,
    }
}

const CHECK_FAILED: u8 = 6;

fn fail(e: &TuneError) -> ExitCode {
    eprintln!("error [{}]: {e}", e.category());
    ExitCode::from(exit_code(e.category()))
}

fn cmd_tune(args: &RunArgs) -> Result<ExitCode, TuneError> {
    let (cfg, out) = args.load()?;
    let art = tune(&cfg)?;
    emit_artifacts(&art, &out)?;
    println!(
        "{} {}: {} after {} iterations, loss {:.6e}, rmse {:.6e} -> {}",
        cfg.system,
        art.strategy,
        art.termination_reason,
        art.records.len(),
        art.final_loss().unwrap_or(f64::NAN),
        art.final_rmse().unwrap_or(f64::NAN),
        out.display()
    );
    if art.termination_reason == TerminationReason::Divergence {
        eprintln!("error [divergence]: {}", art.failure.as_deref().unwrap_or("run diverged"));
        return Ok(ExitCode::from(exit_code("divergence")));
    }
    Ok(ExitCode::SUCCESS)
}

fn all_strategies(list: &[Strategy]) -> Vec<Strategy> {
    if list.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        list.to_vec()
    }
}

fn cmd_compare(args: &RunArgs, strategies: &[Strategy]) -> Result<ExitCode, TuneError> {
    let (cfg, out) = args.load()?;
    let cmp = compare_strategies(&cfg, &all_strategies(strategies))?;
    emit_comparison(&cmp, &out)?;
    for e in &cmp.entries {
        match &e.outcome {
            Ok(a) => println!(
                "{:<5} {:<19} rmse {:.6e}",
                e.strategy,
                a.termination_reason.to_string(),
                a.final_rmse().unwrap_or(f64::NAN)
            ),
            Err(msg) => println!("{:<5} failed: {msg}", e.strategy),
        }
    }
    println!("-> {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_montecarlo(args: &RunArgs, trials: Option<usize>, strategies: &[Strategy]) -> Result<ExitCode, TuneError> {
    let (cfg, out) = args.load()?;
    let trials = trials.unwrap_or(cfg.trials);
    let strategies = if strategies.is_empty() {
        vec![cfg.strategy]
    } else {
        strategies.to_vec()
    };
    let mut results = Vec::new();
    for s in strategies {
        let run_cfg = cfg.with_strategy(s);
        run_cfg.validate()?;
        let result = run_monte_carlo(&run_cfg, trials)?;
        let dir = out.join(s.name());
        write_monte_carlo(&result, &dir)?;
        println!(
            "{s}: {} of {trials} trials succeeded -> {}",
            result.successful().count(),
            dir.display()
        );
        results.push(result);
    }
    let gains = out.join("gains.csv");
    write_gains_table(&results, &gains)?;
    println!("-> {}", gains.display());
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &JacobianReport) {
    for (map, err) in &report.max_rel_error {
        let mark = if *err <= report.tol { "ok" } else { "FAIL" };
        println!("{:<10} max rel error {err:.3e} {mark}", map.name());
    }
    if report.skipped > 0 {
        println!("{} samples skipped", report.skipped);
    }
}

fn cmd_check_jacobians(
    system: Option<SystemKind>,
    config: Option<&Path>,
    samples: usize,
    tol: Option<f64>,
    seed: u64,
) -> Result<ExitCode, TuneError> {
    let cfg = match (config, system) {
        (Some(path), _) => TuneConfig::load(path)?,
        (None, Some(sys)) => TuneConfig::preset(sys, Strategy::Ls),
        (None, None) => return Err(TuneError::Config("--system or --config is required".into())),
    };
    if let Some(sys) = system {
        if sys != cfg.system {
            return Err(TuneError::Config(format!("--system {sys} contradicts config system {}", cfg.system)));
        }
    }
    let report = match cfg.system {
        SystemKind::Dubins => {
            check_jacobians(&DubinsModel::new(cfg.dubins_params())?, samples, tol.unwrap_or(1e-5), 1e-6, seed)?
        }
        SystemKind::Quadrotor => {
            check_jacobians(&QuadModel::new(cfg.quad_params())?, samples, tol.unwrap_or(1e-3), 1e-5, seed)?
        }
    };
    println!("{}: {samples} samples, tolerance {:e}", cfg.system, report.tol);
    print_report(&report);
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(CHECK_FAILED)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Tune(args) => cmd_tune(args),
        Command::Compare { run, strategies } => cmd_compare(run, strategies),
        Command::Montecarlo {
            run,
            trials,
            strategies,
        } => cmd_montecarlo(run, *trials, strategies),
        Command::CheckJacobians {
            system,
            config,
            samples,
            tol,
            seed,
        } => cmd_check_jacobians(*system, config.as_deref(), *samples, *tol, *seed),
    };
    result.unwrap_or_else(|e| fail(&e))
}
