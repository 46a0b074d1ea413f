use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};

use rzoro::cli::{self, EXIT_ERROR};
use rzoro::config::RunConfig;
use rzoro::output::SolveStatus;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn defaults_help() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "Configuration keys and their defaults (TOML, every key optional):\n\n{}",
            RunConfig::default().to_toml()
        )
    })
}

#[derive(Parser)]
#[command(name = "rzoro", version, about = "Tube-based robust optimal control benchmarks")]
#[command(after_long_help = defaults_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one tube OCP and write result.json, stages.csv and timings.csv.
    Solve(Common),
    /// Closed-loop Monte-Carlo simulation.
    ClosedLoop(Common),
    /// Per-iteration timings on the mass-chain family.
    Scaling(Common),
    /// List the built-in problems.
    ListProblems,
}

#[derive(Args)]
#[command(after_long_help = defaults_help())]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set problem.sigma=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (key `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set problem.name=...`.
    #[arg(long)]
    problem: Option<String>,
    /// Shorthand for `--set algo.kind=...`: nominal, zoro, riccati_zoro_constant,
    /// riccati_zoro_adaptive or riccati_zoro_siro.
    #[arg(long)]
    algo: Option<String>,
    /// Shorthand for `--set problem.sigma=...`.
    #[arg(long)]
    sigma: Option<f64>,
    /// Shorthand for `--set problem.gamma=...`.
    #[arg(long)]
    gamma: Option<f64>,
    /// Shorthand for `--set problem.horizon=...`.
    #[arg(long)]
    horizon: Option<usize>,
}

impl Common {
    fn load(&self) -> rzoro::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut sets = Vec::new();
        if let Some(v) = &self.problem {
            sets.push(format!("problem.name=\"{v}\""));
        }
        if let Some(v) = &self.algo {
            rzoro::config::Algorithm::parse(v)?;
            sets.push(format!("algo.kind=\"{v}\""));
        }
        if let Some(v) = self.sigma {
            sets.push(format!("problem.sigma={v:?}"));
        }
        if let Some(v) = self.gamma {
            sets.push(format!("problem.gamma={v:?}"));
        }
        if let Some(v) = self.horizon {
            sets.push(format!("problem.horizon={v}"));
        }
        if let Some(v) = self.seed {
            sets.push(format!("seed={v}"));
        }
        sets.extend(self.sets.iter().cloned());
        let mut cfg = base.with_overrides(&sets)?;
        if let Some(out) = &self.out {
            cfg.out = out.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }
}

fn report<T>(r: rzoro::Result<T>, status: impl Fn(&T) -> Option<SolveStatus>) -> ExitCode {
    let code = cli::exit_code(&r, &status);
    match &r {
        Err(e) => eprintln!("error: {e}"),
        Ok(v) => match status(v) {
            Some(SolveStatus::Infeasible) => eprintln!("error: the backed-off nominal problem is infeasible"),
            Some(SolveStatus::MaxOuterIters) => eprintln!("error: no fixed point within algo.max_outer_iters"),
            _ => {}
        },
    }
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListProblems => {
            print!("{}", cli::problems_text());
            ExitCode::SUCCESS
        }
        Command::Solve(c) => match c.load() {
            Ok(cfg) => report(cli::cmd_solve(&cfg, cfg.out.as_ref()), |s| Some(*s)),
            Err(e) => fail(e),
        },
        Command::ClosedLoop(c) => match c.load() {
            Ok(cfg) => report(cli::cmd_closed_loop(&cfg, cfg.out.as_ref()), |_| None),
            Err(e) => fail(e),
        },
        Command::Scaling(c) => match c.load() {
            Ok(cfg) => report(cli::cmd_scaling(&cfg, cfg.out.as_ref()), |_| None),
            Err(e) => fail(e),
        },
    }
}

fn fail(e: rzoro::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_ERROR as u8)
}
