mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcpanel::features::AmihudDivisor;
use dcpanel::selection::Method;
use dcpanel::{Error, Result};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::output::OutDir;

#[derive(Parser, Debug)]
#[command(name = "dcpanel", version, about = "Heterogeneous exposures in panels with latent factors")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root seed; drawn and recorded in the manifest when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write markdown tables.
    #[arg(long, global = true)]
    markdown: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the weekly feature panel from raw OHLCV files.
    Prep {
        #[arg(long)]
        weekly: Option<PathBuf>,
        #[arg(long)]
        daily: Option<PathBuf>,
        /// calendar-days or trading-days.
        #[arg(long, value_parser = parse_divisor)]
        divisor: Option<AmihudDivisor>,
    },
    /// Run Stage 1, Stage 2 and Mean Group aggregation.
    Estimate {
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        proxies: Option<PathBuf>,
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Monte Carlo comparison of the selection methods.
    Mc {
        /// Named design grid, e.g. paper-r2.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated subset of pca-mtb, p-lasso, i-lasso.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Write a synthetic dataset with known coefficients.
    Synth {
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        periods: Option<usize>,
    },
}

fn parse_divisor(s: &str) -> std::result::Result<AmihudDivisor, String> {
    match s {
        "calendar-days" | "calendar_days" => Ok(AmihudDivisor::CalendarDays),
        "trading-days" | "trading_days" => Ok(AmihudDivisor::TradingDays),
        _ => Err(format!("unknown divisor {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli);
    let seed = cfg.seed.unwrap_or_else(|| rand::random::<u64>() >> 1);
    cfg.seed = Some(seed);
    if seed > i64::MAX as u64 {
        return Err(Error::InvalidConfig(format!("seed {seed} exceeds {}", i64::MAX)));
    }
    let name = match cli.command {
        Command::Prep { .. } => "prep",
        Command::Estimate { .. } => "estimate",
        Command::Mc { .. } => "mc",
        Command::Synth { .. } => "synth",
    };
    // Validate before creating any output.
    match name {
        "prep" => drop(cfg.validate_prep()?),
        "estimate" => drop(cfg.validate_estimate()?),
        "mc" => drop(cfg.validate_mc()?),
        _ => cfg.synth.validate()?,
    }
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("dcpanel-out"));
    cfg.out = Some(dir.clone());

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        let run = Run {
            config: &cfg,
            seed,
            out: OutDir::create(&dir)?,
        };
        match name {
            "prep" => commands::prep(run),
            "estimate" => commands::estimate(run),
            "mc" => commands::mc(run),
            _ => commands::synth(run),
        }
    })
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    let g = &cli.global;
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.out.is_some() {
        cfg.out = g.out.clone();
    }
    cfg.markdown |= g.markdown;
    match &cli.command {
        Command::Prep { weekly, daily, divisor } => {
            set(&mut cfg.prep.weekly, weekly);
            set(&mut cfg.prep.daily, daily);
            if let Some(d) = divisor {
                cfg.prep.amihud_divisor = *d;
            }
        }
        Command::Estimate {
            panel,
            factors,
            proxies,
            groups,
        } => {
            set(&mut cfg.inputs.panel, panel);
            set(&mut cfg.inputs.factors, factors);
            set(&mut cfg.inputs.proxies, proxies);
            set(&mut cfg.inputs.groups, groups);
        }
        Command::Mc { preset, reps, methods } => {
            if preset.is_some() {
                cfg.mc.preset = preset.clone();
                cfg.mc.designs.clear();
            }
            if let Some(r) = reps {
                cfg.mc.reps = *r;
            }
            if let Some(m) = methods {
                cfg.mc.methods = m.clone();
            }
        }
        Command::Synth { units, periods } => {
            if let Some(u) = units {
                cfg.synth.units = *u;
            }
            if let Some(p) = periods {
                cfg.synth.periods = *p;
            }
        }
    }
}

fn set(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        *slot = value.clone();
    }
}
