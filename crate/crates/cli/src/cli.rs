//! Argument parsing and dispatch. Flags override the values of `--config`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mbnla::nla::DEFAULT_CUTOFF_SD;
use mbnla::qkd::{SweepMode, DEFAULT_BETA};

use crate::commands::{self, CriteriaArgs, FilterArgs, KeyrateArgs, NormalityArgs};
use crate::config::{Analysis, ExperimentConfig, DEFAULT_CONFIDENCE, DEFAULT_N_BOOT};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mbnla", version, about = "Measurement-based noiseless linear amplification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Analytic,
    MonteCarlo,
}

impl From<ModeArg> for SweepMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Analytic => SweepMode::Analytic,
            ModeArg::MonteCarlo => SweepMode::MonteCarlo,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a measurement record from the configured state.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Record path; defaults to `<output.dir>/record.mbnl`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Post-select a record with the truncated amplifier filter.
    Filter {
        record: PathBuf,
        #[arg(long)]
        gain: f64,
        #[arg(long)]
        cutoff_sd: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<record stem>_g<gain>.mbnl` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Reconstruct the covariance and report the entanglement criteria.
    Criteria {
        record: PathBuf,
        /// Report directory; defaults to the record's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Secret key rate of the reconstructed covariance.
    Keyrate {
        record: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Skewness, kurtosis and Jarque-Bera per outcome stream.
    Normality {
        record: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gain and loss sweeps written as fig3.csv, fig4.csv and fig5.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shots: Option<usize>,
        /// Replace the configured gain list with a single gain.
        #[arg(long)]
        gain: Option<f64>,
        #[arg(long)]
        cutoff_sd: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Write a record's shots as CSV.
    Export {
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: Option<&Path>) -> CliResult<Option<ExperimentConfig>> {
    config.map(ExperimentConfig::load).transpose()
}

fn record_dir(record: &Path) -> PathBuf {
    record
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn check_beta(beta: f64) -> CliResult<f64> {
    if (0.0..=1.0).contains(&beta) {
        Ok(beta)
    } else {
        Err(CliError::Parameter(format!("--beta {beta} outside [0, 1]")))
    }
}

/// Runs one command, printing a short summary to standard output.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, out, seed, shots } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = shots {
                cfg.shots = n;
            }
            let out = out.unwrap_or_else(|| cfg.output.dir.join("record.mbnl"));
            println!("{}", commands::simulate(&cfg, &out)?);
        }
        Command::Filter { record, gain, cutoff_sd, seed, out, config } => {
            let cfg = load(config.as_deref())?;
            let cutoff_sd = cutoff_sd
                .or(cfg.as_ref().map(|c| c.filter.cutoff_sd))
                .unwrap_or(DEFAULT_CUTOFF_SD);
            let seed = seed.or(cfg.as_ref().map(|c| c.filter_seed())).unwrap_or(0);
            let out = out.unwrap_or_else(|| {
                let stem = record.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                record_dir(&record).join(format!("{stem}_g{gain}.mbnl"))
            });
            let summary = record_dir(&out).join("filter_summary.jsonl");
            let args = FilterArgs {
                input: record,
                out,
                gain,
                cutoff_sd,
                seed,
                summary,
            };
            match commands::filter(&args) {
                Ok(s) => println!("{s}"),
                Err(e) => {
                    eprintln!("summary appended to {}", args.summary.display());
                    return Err(e);
                }
            }
        }
        Command::Criteria { record, out, seed, config } => {
            let cfg = load(config.as_deref())?;
            let args = CriteriaArgs {
                out_dir: out.unwrap_or_else(|| record_dir(&record)),
                input: record,
                n_boot: cfg.as_ref().map_or(DEFAULT_N_BOOT, |c| c.n_boot),
                seed: seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
                normality: cfg.as_ref().map_or(true, |c| c.has(Analysis::Normality)),
            };
            let rep = commands::criteria(&args, cfg.as_ref())?;
            for r in rep.rows.iter().take(3) {
                println!(
                    "{} = {:.6} [{:.6}, {:.6}]",
                    r.name,
                    r.value,
                    r.ci_low.unwrap_or(f64::NAN),
                    r.ci_high.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Keyrate { record, beta, out, seed, config } => {
            let cfg = load(config.as_deref())?;
            let args = KeyrateArgs {
                out_dir: out.unwrap_or_else(|| record_dir(&record)),
                input: record,
                beta: check_beta(beta.or(cfg.as_ref().map(|c| c.beta_rec)).unwrap_or(DEFAULT_BETA))?,
                n_boot: cfg.as_ref().map_or(DEFAULT_N_BOOT, |c| c.n_boot),
                seed: seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
            };
            let rep = commands::keyrate(&args, cfg.as_ref())?;
            let k = &rep.rows[0];
            println!(
                "k = {:.6} bits/use [{:.6}, {:.6}]",
                k.value,
                k.ci_low.unwrap_or(f64::NAN),
                k.ci_high.unwrap_or(f64::NAN)
            );
        }
        Command::Normality { record, out, config } => {
            let cfg = load(config.as_deref())?;
            let args = NormalityArgs {
                out_dir: out.unwrap_or_else(|| record_dir(&record)),
                input: record,
                confidence: cfg.as_ref().map_or(DEFAULT_CONFIDENCE, |c| c.confidence),
            };
            let rep = commands::normality(&args, cfg.as_ref())?;
            let passes = rep.rows.iter().filter(|r| r.name.ends_with(".jb_pass"));
            for r in passes {
                println!("{} = {}", r.name, r.value == 1.0);
            }
        }
        Command::Sweep { config, out, mode, seed, shots, gain, cutoff_sd, beta } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = shots {
                cfg.shots = n;
            }
            if let Some(g) = gain {
                cfg.filter.gains = vec![g];
            }
            if let Some(k) = cutoff_sd {
                cfg.filter.cutoff_sd = k;
            }
            if let Some(b) = beta {
                cfg.beta_rec = check_beta(b)?;
            }
            let mode = mode.map(SweepMode::from).unwrap_or(cfg.sweep.mode);
            cfg.sweep.mode = mode;
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let t = commands::sweep(&cfg, mode, &out)?;
            println!(
                "fig3: {} rows, fig4: {} rows, fig5: {} rows, {} point errors -> {}",
                t.fig3.len(),
                t.fig4.len(),
                t.fig5.len(),
                t.errors,
                out.display()
            );
        }
        Command::Export { record, out } => {
            let n = commands::export(&record, &out)?;
            println!("{n} shots -> {}", out.display());
        }
    }
    Ok(())
}
