//! Command-line definition and dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minattn::optimizer::Termination;

use crate::app::{feedback_ratios, Prepared};
use crate::check::{run_checks, Level};
use crate::config::{Fidelity, RunConfig, PRESETS};
use crate::executor::Threads;
use crate::output::write_all;

/// Exit status when the solve ends without meeting the tolerance.
pub const NOT_CONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "minattn",
    version,
    about = "Minimum-attention control laws for a two-link arm"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize, optimize and write the CSV artifacts.
    Run(RunArgs),
    /// Run the invariant suites.
    Check {
        #[arg(long, value_enum, default_value_t = Level::Fast)]
        level: Level,
        /// Flip the arm's bias torque in the Jacobian suite (negative control).
        #[arg(long, hide = true)]
        corrupt_bias: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Estimate the density of the initial law only.
    Density(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file, or a bundled preset name (experiment1, experiment2).
    pub config: String,
    #[arg(long, value_enum, default_value_t = Fidelity::Desk)]
    pub fidelity: Fidelity,
    /// Validate and print the resolved settings without running.
    #[arg(long)]
    pub dry_run: bool,
    /// Density estimation threads [default: available parallelism].
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, env = "MINATTN_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl RunArgs {
    fn prepare(&self) -> anyhow::Result<Prepared> {
        let config = RunConfig::load(&self.config)?.with_fidelity(self.fidelity);
        Prepared::new(config, self.seed)
    }

    fn executor(&self) -> Threads {
        threads(self.workers)
    }
}

fn threads(workers: Option<usize>) -> Threads {
    workers.map_or_else(Threads::available, Threads::new)
}

fn print_resolved(p: &Prepared) {
    println!("# config_hash={} seed={}", p.stamp.config_hash, p.stamp.seed);
    print!("{}", p.config.to_toml());
}

fn run(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let p = args.prepare()?;
    if args.dry_run {
        print_resolved(&p);
        return Ok(ExitCode::SUCCESS);
    }
    let result = p.solve(&args.executor())?;
    let written = write_all(&args.out, &p.artifacts(&result))?;
    for h in &result.history {
        println!(
            "{:4} cost {:.6e} terminal {:.4e} attention {:.4e} {:.4e} eps {:.3e} miss {:.4}",
            h.iteration, h.cost.total, h.cost.terminal, h.cost.attention_x, h.cost.attention_t, h.eps, h.miss
        );
    }
    let (first, last) = feedback_ratios(&result.law, &result.final_trajectory);
    println!(
        "termination {} after {} outer / {} inner iterations",
        result.termination.as_str(),
        result.outer_iterations,
        result.inner_iterations
    );
    println!("miss {:.4} -> {:.4}", result.initial_miss(), result.final_miss());
    println!("feedback ratio first quarter {first:.4}, last quarter {last:.4}");
    match &result.ellipticity {
        Ok(e) => println!("c1 {:.4e} c2 {:.4e} step bound {:?}", e.c1, e.c2, e.step_bound()),
        Err(msg) => println!("ellipticity unavailable: {msg}"),
    }
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(if result.termination == Termination::Converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(NOT_CONVERGED)
    })
}

fn density(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let p = args.prepare()?;
    if args.dry_run {
        print_resolved(&p);
        return Ok(ExitCode::SUCCESS);
    }
    let (field, artifacts) = p.density(&args.executor())?;
    let written = write_all(&args.out, &artifacts)?;
    let last = field.grid().intervals();
    println!(
        "trackmax {} proposals {} exited {:.4} diverged {}",
        field.trackmax(),
        field.proposals(),
        field.exited_fraction(last),
        field.diverged()
    );
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn check(level: Level, corrupt_bias: bool, workers: Option<usize>) -> ExitCode {
    let reports = run_checks(level, corrupt_bias, &threads(workers));
    for r in &reports {
        println!("{r}");
    }
    if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Density(args) => density(args),
        Command::Check {
            level,
            corrupt_bias,
            workers,
        } => Ok(check(*level, *corrupt_bias, *workers)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Command::Run(a) | Command::Density(a) = &cli.command {
                if !std::path::Path::new(&a.config).exists() && !PRESETS.contains(&a.config.as_str()) {
                    eprintln!("presets: {}", PRESETS.join(", "));
                }
            }
            ExitCode::FAILURE
        }
    }
}
