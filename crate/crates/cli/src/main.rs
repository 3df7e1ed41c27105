//! `gexpect`: scenario-driven front end for the BSDE and nonlinear-expectation engine.

mod commands;
mod report;
mod suite;

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gexpect_core::scenario::{LoadedScenario, Scenario};
use gexpect_core::{Error, Execution};

use report::{Format, Report};

#[derive(Parser, Debug)]
#[command(
    name = "gexpect",
    version,
    about = "Exact BSDEs and g-expectations on finite trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Report format.
    #[arg(long, value_enum, global = true, default_value = "text")]
    report: Format,
    /// Run batch work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArg {
    /// Scenario file (JSON).
    #[arg(long)]
    pub scenario: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Onestep,
    Global,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a BSDE and verify the solution pathwise.
    Solve {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        driver: String,
        #[arg(long)]
        payoff: String,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Check the comparison theorem on two BSDEs.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        driver: String,
        #[arg(long)]
        payoff: String,
        #[arg(long)]
        driver2: String,
        #[arg(long)]
        payoff2: String,
        #[arg(long, default_value_t = 0)]
        from_level: usize,
    },
    /// Doob-Meyer decomposition of a supermartingale.
    Decompose {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long, conflicts_with = "oracle")]
        driver: Option<String>,
        #[arg(long, requires = "r")]
        oracle: Option<String>,
        #[arg(long)]
        r: Option<String>,
        #[arg(long)]
        process: String,
        /// Also run the penalization scheme (driver mode).
        #[arg(long)]
        penalized: bool,
        /// Comma-separated penalty levels.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<f64>>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Recover the driver of an oracle and verify the representation.
    Recover {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        oracle: String,
        #[arg(long)]
        r: String,
        #[arg(long, value_enum, default_value = "onestep")]
        method: MethodArg,
        /// Number of random payoffs for verification (0 skips it).
        #[arg(long, default_value_t = 0)]
        verify: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the axiom audit before recovery.
        #[arg(long)]
        no_audit: bool,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Sampled audit of the expectation axioms.
    Axioms {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        oracle: String,
        #[arg(long)]
        r: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Dump the martingale basis of a scenario's space.
    Basis {
        #[command(flatten)]
        scenario: ScenarioArg,
    },
    /// Property battery on seeded random spaces.
    Suite {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Answer oracle requests on stdin, one JSON line per request.
    #[command(hide = true)]
    ServeOracle {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        oracle: String,
    },
}

fn load(arg: &ScenarioArg) -> Result<LoadedScenario, Error> {
    Scenario::load(&arg.scenario)
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::ScenarioInvalid { .. })
}

fn serve(arg: &ScenarioArg, name: &str) -> Result<(), Error> {
    let loaded = load(arg)?;
    let oracle = loaded.oracle(name)?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::Oracle(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let answer =
            gexpect_core::gexp::oracle::answer_request(oracle.as_ref(), &loaded.space, &line)?;
        writeln!(stdout, "{answer}")
            .and_then(|_| stdout.flush())
            .map_err(|e| Error::Oracle(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let started = Instant::now();
    let outcome = match &cli.command {
        Command::ServeOracle { scenario, oracle } => {
            return match serve(scenario, oracle) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
        Command::Solve {
            scenario,
            driver,
            payoff,
            tol,
        } => load(scenario).and_then(|l| commands::solve(&l, driver, payoff, *tol, exec)),
        Command::Compare {
            scenario,
            driver,
            payoff,
            driver2,
            payoff2,
            from_level,
        } => load(scenario).and_then(|l| {
            commands::compare(&l, driver, payoff, driver2, payoff2, *from_level, exec)
        }),
        Command::Decompose {
            scenario,
            driver,
            oracle,
            r,
            process,
            penalized,
            schedule,
            tol,
        } => load(scenario).and_then(|l| {
            let input = commands::DecomposeInput {
                driver: driver.as_deref(),
                oracle: oracle.as_deref(),
                r: r.as_deref(),
                process,
                penalized: *penalized,
                schedule: schedule.clone(),
                tol: *tol,
            };
            commands::decompose(&l, &input, exec)
        }),
        Command::Recover {
            scenario,
            oracle,
            r,
            method,
            verify,
            seed,
            no_audit,
            tol,
        } => load(scenario).and_then(|l| {
            let input = commands::RecoverInput {
                oracle,
                r,
                method: *method,
                verify: *verify,
                seed: *seed,
                audit: !*no_audit,
                tol: *tol,
            };
            commands::recover(&l, &input, exec)
        }),
        Command::Axioms {
            scenario,
            oracle,
            r,
            samples,
            seed,
            tol,
        } => load(scenario)
            .and_then(|l| commands::axioms(&l, oracle, r.as_deref(), *samples, *seed, *tol, exec)),
        Command::Basis { scenario } => load(scenario).map(|l| commands::basis(&l)),
        Command::Suite { seed, trials } => Ok(suite::run(*seed, *trials, exec)),
    };
    match outcome {
        Ok(mut report) => {
            report.wall_clock_ms = started.elapsed().as_millis() as u64;
            print!("{}", report.render(cli.report));
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) if usage_error(&e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let mut report = Report::new(command_name(&cli.command), None);
            report.check("run", false, e.to_string());
            report.wall_clock_ms = started.elapsed().as_millis() as u64;
            print!("{}", report.render(cli.report));
            ExitCode::from(1)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Solve { .. } => "solve",
        Command::Compare { .. } => "compare",
        Command::Decompose { .. } => "decompose",
        Command::Recover { .. } => "recover",
        Command::Axioms { .. } => "axioms",
        Command::Basis { .. } => "basis",
        Command::Suite { .. } => "suite",
        Command::ServeOracle { .. } => "serve-oracle",
    }
}
