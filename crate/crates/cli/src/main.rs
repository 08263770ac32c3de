//! `msm-design`: sample size design for IPTW marginal structural models.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msm_design::scenarios::PropensityMode;
use msm_design::{Estimand, Link, OutcomeKind};

use config::{parse_enum, PropensityTerms, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: flags, config, data files.
    User(String),
    /// The numerical pipeline failed.
    Numeric(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<msm_design::Error> for CliError {
    fn from(e: msm_design::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::User(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "msm-design", version, about = "Prospective sample sizes for IPTW marginal structural models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyse a pilot CSV and propose sample sizes.
    Design(DesignArgs),
    /// RCT-style benchmark sample size.
    Benchmark(BenchmarkArgs),
    /// Draw a synthetic dataset from a scenario.
    Simulate(SimulateArgs),
    /// Monte Carlo validation of the design procedure.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Targets {
    /// Effect size on the link scale.
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// Two-sided significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Nominal power.
    #[arg(long)]
    power: Option<f64>,
}

#[derive(Args)]
struct Stabilization {
    /// First-level bootstrap size.
    #[arg(long)]
    b: Option<usize>,
    /// Second-level (UCB) bootstrap size.
    #[arg(long)]
    b_ucb: Option<usize>,
    /// UCB level: the (1 - gamma) quantile is reported.
    #[arg(long)]
    gamma_ucb: Option<f64>,
    /// Comma-separated stability choices, e.g. q0.5,mean,ucb_q0.5.
    #[arg(long, value_delimiter = ',')]
    functionals: Option<Vec<String>>,
    #[arg(long, value_parser = parse_enum::<Estimand>)]
    estimand: Option<Estimand>,
}

#[derive(Args)]
struct DesignArgs {
    /// Pilot CSV with header y,t,x1,...,xp.
    #[arg(long)]
    pilot: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<OutcomeKind>)]
    kind: Option<OutcomeKind>,
    /// MSM link (default: logit, log, identity by outcome kind).
    #[arg(long, value_parser = parse_enum::<Link>)]
    link: Option<Link>,
    /// Propensity covariates: all or intercept.
    #[arg(long, value_parser = parse_enum::<PropensityTerms>)]
    propensity: Option<PropensityTerms>,
    #[command(flatten)]
    targets: Targets,
    #[command(flatten)]
    stab: Stabilization,
    /// Write the bootstrap LSVF draws to bootstrap.csv.
    #[arg(long)]
    dump_bootstrap: bool,
    /// Write the A, B and sandwich matrices as CSV.
    #[arg(long)]
    dump_matrices: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Take parameters from a scenario preset.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_parser = parse_enum::<OutcomeKind>)]
    kind: Option<OutcomeKind>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Treated fraction.
    #[arg(long)]
    rho: Option<f64>,
    #[command(flatten)]
    targets: Targets,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_parser = parse_enum::<PropensityMode>)]
    mode: Option<PropensityMode>,
    /// Rows to draw (default: the scenario's pilot size).
    #[arg(long)]
    n: Option<usize>,
    /// Override the scenario's true effect.
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_parser = parse_enum::<PropensityMode>)]
    mode: Option<PropensityMode>,
    #[command(flatten)]
    targets: Targets,
    #[command(flatten)]
    stab: Stabilization,
    /// Number of pilot replicates R.
    #[arg(long)]
    replicates: Option<usize>,
    /// Pilot size (default: the scenario's).
    #[arg(long)]
    n_pilot: Option<usize>,
    /// Monte Carlo reps per grid point.
    #[arg(long)]
    mc_reps: Option<usize>,
    /// Power threshold for the hit rate (default: the nominal power).
    #[arg(long)]
    target: Option<f64>,
    /// Score designs against the isotonic power curve.
    #[arg(long)]
    isotonic: bool,
    #[command(flatten)]
    common: Common,
}

macro_rules! overlay {
    ($cfg:expr, $src:expr; $($f:ident),* $(,)?) => {
        $( if let Some(v) = $src.$f.clone() { $cfg.$f = Some(v); } )*
    };
}

impl Common {
    fn base(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        overlay!(cfg, self; seed, workers, out);
        Ok(cfg)
    }
}

impl Targets {
    fn apply(&self, cfg: &mut RunConfig) {
        overlay!(cfg, self; delta, alpha, power);
    }
}

impl Stabilization {
    fn apply(&self, cfg: &mut RunConfig) {
        overlay!(cfg, self; b, b_ucb, gamma_ucb, functionals, estimand);
    }
}

impl Command {
    fn config(&self) -> Result<RunConfig, CliError> {
        match self {
            Command::Design(a) => {
                let mut cfg = a.common.base()?;
                overlay!(cfg, a; pilot, kind, link, propensity);
                a.targets.apply(&mut cfg);
                a.stab.apply(&mut cfg);
                if a.dump_bootstrap {
                    cfg.dump_bootstrap = Some(true);
                }
                if a.dump_matrices {
                    cfg.dump_matrices = Some(true);
                }
                Ok(cfg)
            }
            Command::Benchmark(a) => {
                let mut cfg = a.common.base()?;
                overlay!(cfg, a; scenario, kind, p0, p1, lambda0, lambda1, sigma2, rho);
                a.targets.apply(&mut cfg);
                Ok(cfg)
            }
            Command::Simulate(a) => {
                let mut cfg = a.common.base()?;
                overlay!(cfg, a; scenario, mode, n, delta);
                Ok(cfg)
            }
            Command::Validate(a) => {
                let mut cfg = a.common.base()?;
                overlay!(cfg, a; scenario, mode, replicates, n_pilot, mc_reps, target);
                if a.isotonic {
                    cfg.isotonic = Some(true);
                }
                a.targets.apply(&mut cfg);
                a.stab.apply(&mut cfg);
                Ok(cfg)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.command.config()?;
    let pool = match cfg.workers {
        Some(0) => return Err(CliError::user("--workers must be positive")),
        Some(w) => rayon::ThreadPoolBuilder::new().num_threads(w).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| CliError::user(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Design(_) => commands::design(cfg),
        Command::Benchmark(_) => commands::benchmark(cfg),
        Command::Simulate(_) => commands::simulate(cfg),
        Command::Validate(_) => commands::validate(cfg),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
