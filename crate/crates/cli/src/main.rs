use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fipa_core::bench::{self, Arm, SweepSpec};
use fipa_core::io::{self, ReportFormat, RunConfig, RunReport};
use fipa_core::{Error, Precision};

/// Invariance, equivalence and scaling checks for invariant point attention.
///
/// Exit status: 0 when every check passes, 1 when any check fails,
/// 2 on a usage, configuration or I/O error.
#[derive(Parser)]
#[command(name = "fipa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Output deviation under random global rigid motions.
    Invariance(Common),
    /// Flash arm against the reference arm on identical inputs.
    Equivalence(Common),
    /// Peak tracked bytes and wall-clock time over a length sweep.
    Scaling(Common),
    /// Refit the records of an earlier run.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Records to fit, as written by `scaling` in either format.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64")]
    precision: Precision,
    /// Report destination.
    #[arg(long)]
    out: PathBuf,
    /// Report format; defaults to the extension of --out, else csv.
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Sequence lengths, overriding the config.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lengths: Option<Vec<usize>>,
    /// Arms to run: reference, flash.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    arms: Option<Vec<Arm>>,
    /// Worker threads; 1 gives single-threaded timings.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn format(&self) -> ReportFormat {
        self.format
            .unwrap_or_else(|| match self.out.extension().and_then(|e| e.to_str()) {
                Some("json") => ReportFormat::Json,
                _ => ReportFormat::Csv,
            })
    }

    fn arms(&self) -> Vec<Arm> {
        self.arms.clone().unwrap_or_else(|| Arm::ALL.to_vec())
    }
}

fn run(cli: Cli) -> Result<RunReport, Error> {
    let (common, input) = match &cli.command {
        Command::Invariance(c) | Command::Equivalence(c) | Command::Scaling(c) => (c, None),
        Command::Fit { common, input } => (common, Some(input)),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    let arms = common.arms();
    if arms.is_empty() {
        return Err(Error::Usage("--arms needs at least one arm".into()));
    }
    let report = bench::with_threads(common.threads, || match &cli.command {
        Command::Invariance(c) => {
            if let Some(l) = &c.lengths {
                cfg.bench.invariance_lengths = l.clone();
            }
            bench::cmd_invariance(&cfg, c.seed, c.precision, &arms)
        }
        Command::Equivalence(c) => {
            if let Some(l) = &c.lengths {
                cfg.bench.equivalence_lengths = l.clone();
            }
            bench::cmd_equivalence(&cfg, c.seed, c.precision)
        }
        Command::Scaling(c) => {
            let spec = SweepSpec {
                lengths: c
                    .lengths
                    .clone()
                    .unwrap_or_else(|| cfg.bench.lengths.clone()),
                arms: arms.clone(),
                seeds: vec![c.seed],
                precision: c.precision,
                tiles: cfg.tiles,
            };
            bench::cmd_scaling(&cfg, &spec)
        }
        Command::Fit { common: c, .. } => {
            let mut records = io::read_records(input.expect("fit has an input"))?;
            records.retain(|r| arms.iter().any(|a| a.as_str() == r.arm));
            bench::cmd_fit(&cfg, records, c.seed, c.precision)
        }
    })??;
    io::emit_report(&report, common.format(), &common.out)?;
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for note in &report.notes {
                println!("NOTE {note}");
            }
            for fit in &report.fits {
                println!(
                    "FIT  {} a={:e} b={:e} r2={:.6} linear_r2={:.6} quadratic_share_at_max={:.4}",
                    fit.arm, fit.a, fit.b, fit.r2, fit.linear_r2, fit.quadratic_share_at_max
                );
            }
            for check in &report.checks {
                let verdict = if check.pass { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {} value={:e} threshold={:e}",
                    check.name, check.value, check.threshold
                );
            }
            if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("fipa: {e}");
            ExitCode::from(2)
        }
    }
}
