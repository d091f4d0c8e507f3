// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eav::commands::{bench_report_text, cmd_bench, cmd_compare, cmd_run, cmd_sweep};
use eav::config::Overrides;
use eav::CliError;

/// Cross-frame intensity enhancement on a toy video diffusion transformer.
///
/// Output verbosity is read from the EAV_LOG environment variable
/// (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "eav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    /// baseline, enhance_block, temp_attention_scaling or cfi_attention_scaling.
    #[arg(long)]
    strategy: Option<String>,
    /// `all`, `none`, or comma-separated layer indices.
    #[arg(long)]
    layers: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            tau: self.tau,
            strategy: self.strategy.clone(),
            layers: self.layers.clone(),
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline and write trace, latent, maps and manifest.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run several strategies on one seed and export attention diff maps.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Strategies as `name` or `name:tau`; the first is the reference.
        #[arg(
            long = "strategies",
            value_delimiter = ',',
            default_value = "baseline,enhance_block,temp_attention_scaling,cfi_attention_scaling"
        )]
        strategies: Vec<String>,
    },
    /// Run one configuration per enhance temperature.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "taus", value_delimiter = ',', required = true, allow_hyphen_values = true)]
        taus: Vec<f64>,
    },
    /// Median wall time of baseline vs the configured strategy.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common } => {
            let art = cmd_run(&common.config, &common.overrides())?;
            println!("wrote {} (config {})", art.dir.display(), art.manifest.config_hash);
        }
        Command::Compare { common, strategies } => {
            let res = cmd_compare(&common.config, &common.overrides(), &strategies)?;
            println!("compared {} ({} summary rows)", res.labels.join(", "), res.summary.len());
        }
        Command::Sweep { common, taus } => {
            let res = cmd_sweep(&common.config, &common.overrides(), &taus)?;
            println!("swept {} tau values", res.taus.len());
        }
        Command::Bench { common, repetitions } => {
            let report = cmd_bench(&common.config, &common.overrides(), repetitions)?;
            print!("{}", bench_report_text(&report, repetitions));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EAV_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eav: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
