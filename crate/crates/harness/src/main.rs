use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vaee_harness::experiment::{execute, run_experiment, sweep_configs, write_outputs, write_simulated_capture, RunnerOptions};
use vaee_harness::run::DumpOptions;
use vaee_harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "vaee", version, about = "Blind MIMO equalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seeded run of one configuration.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment per value of a numeric configuration field.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Configuration field to vary, e.g. linewidth_hz.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Process an IQ capture instead of the simulated link.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Capture header file (.hdr).
        #[arg(long)]
        capture: PathBuf,
    },
    /// Write the simulated stream of one run as an IQ capture with bits.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run index whose seed generates the stream.
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Capture header file to create; samples and bits go next to it.
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Write taps_<run>_<frame>.bin after every frame.
    #[arg(long)]
    dump_taps: bool,
    /// Write phase_<run>_<frame>.csv with the CPR phase of every symbol.
    #[arg(long)]
    dump_phases: bool,
    /// Write losses.csv with the loss of every batch.
    #[arg(long)]
    dump_losses: bool,
    #[command(flatten)]
    overrides: Overrides,
}

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// Configuration fields settable from the command line.
        #[derive(Args)]
        struct Overrides {
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn apply(&self, cfg: &mut ExperimentConfig) -> vaee_harness::Result<()> {
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(stringify!($field), v)?;
                    }
                )*
                Ok(())
            }
        }
    };
}

overrides!(
    algorithm,
    order,
    symbol_rate_hz,
    sps,
    rolloff,
    rrc_span_symbols,
    cores,
    gamma_hv_rad,
    tau_pmd_ps,
    beta_cd_l_ps2,
    linewidth_hz,
    snr_db,
    m_eq,
    m_est,
    batch_symbols,
    cpr_window,
    cpr_angles_per_quadrant,
    cpr_temperature,
    lr_eq,
    lr_est,
    lr_pilot,
    demap_noise_var,
    frames,
    frame_symbols,
    preconv_symbols,
    runs,
    scored_frames,
    seed,
);

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        self.overrides.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self) -> RunnerOptions {
        RunnerOptions {
            workers: self.workers,
            dumps: DumpOptions {
                taps: self.dump_taps,
                phases: self.dump_phases,
                losses: self.dump_losses,
            },
        }
    }
}

fn run(cfg: &ExperimentConfig, common: &Common, dir: &Path) -> Result<()> {
    let opts = common.options();
    let out = run_experiment(cfg, &opts)?;
    write_outputs(&out, dir, opts.dumps).with_context(|| format!("writing results to {}", dir.display()))?;
    println!("{}", dir.join("summary.json").display());
    Ok(())
}

fn main_inner() -> Result<()> {
    match Cli::parse().command {
        Command::Run { common } => {
            let cfg = common.config()?;
            run(&cfg, &common, &common.out_dir)
        }
        Command::Sweep { common, axis, values } => {
            let configs = sweep_configs(&common.config()?, &axis, &values)?;
            let opts = common.options();
            for (value, out) in values.iter().zip(execute(&configs, &opts)?) {
                let dir = common.out_dir.join(format!("{axis}={value}"));
                write_outputs(&out, &dir, opts.dumps).with_context(|| format!("writing results to {}", dir.display()))?;
                println!("{}", dir.join("summary.json").display());
            }
            Ok(())
        }
        Command::Ingest { common, capture } => {
            let mut cfg = common.config()?;
            cfg.input = Some(capture);
            // A capture is a single stream.
            cfg.runs = 1;
            cfg.validate()?;
            run(&cfg, &common, &common.out_dir)
        }
        Command::Simulate { common, run, output } => {
            let cfg = common.config()?;
            write_simulated_capture(&cfg, run, &output)?;
            println!("{}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
