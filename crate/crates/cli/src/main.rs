use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msgamp::harness::{self, output_lines, ExperimentSpec, HarnessError};

#[derive(Parser)]
#[command(name = "msgamp", version, about = "Monte Carlo simulator for scheduled GAMP channel estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// NMSE and activity-error sweep over schedulers and SNR points.
    Sweep(Common),
    /// Per-iteration mean NMSE with early stopping disabled.
    Convergence(Common),
    /// One trial per scheduler at the first SNR point, with its trace.
    Single {
        #[command(flatten)]
        common: Common,
        /// Trial index inside the seeded sequence.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    devices: Option<String>,
    #[arg(long)]
    antennas: Option<String>,
    #[arg(long)]
    pilot_len: Option<String>,
    #[arg(long)]
    window_len: Option<String>,
    #[arg(long)]
    window_step: Option<String>,
    /// Comma-separated SNR points in dB.
    #[arg(long)]
    snr: Option<String>,
    /// Comma-separated list from full, aud, rbp, arbp, oracle-full, oracle-arbp.
    #[arg(long)]
    schedulers: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// Weight of the new iterate in (0, 1]; 1 disables damping.
    #[arg(long)]
    damping: Option<String>,
    /// Master seed; falls back to MSGAMP_SEED.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    parallelism: Option<String>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, HarnessError> {
        let pairs = [
            ("devices", &self.devices),
            ("antennas", &self.antennas),
            ("pilot_len", &self.pilot_len),
            ("window_len", &self.window_len),
            ("window_step", &self.window_step),
            ("snr", &self.snr),
            ("schedulers", &self.schedulers),
            ("trials", &self.trials),
            ("max_iters", &self.max_iters),
            ("tol", &self.tol),
            ("threshold", &self.threshold),
            ("damping", &self.damping),
            ("seed", &self.seed),
            ("out", &self.out),
            ("parallelism", &self.parallelism),
        ];
        let overrides: Vec<(&str, String)> = pairs
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect();
        harness::parse_config(self.config.as_deref(), &overrides)
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Sweep(common) => {
            let spec = common.spec()?;
            harness::check_writable(&spec.output_path)?;
            let outcome = harness::run_experiment(&spec)?;
            print!("{}", harness::format_summary(&outcome.summary));
            println!("metrics: {}", outcome.metrics_path.display());
            println!("trace:   {}", outcome.trace_path.display());
        }
        Command::Convergence(common) => {
            let spec = common.spec()?;
            harness::check_writable(&spec.output_path)?;
            let outcome = harness::convergence_experiment(&spec)?;
            println!("{:<12} {:>7} {:>5} {:>12} {:>12} {:>9}", "scheduler", "snr_db", "iter", "mean_nmse", "mean_tol", "set_size");
            for r in &outcome.rows {
                println!(
                    "{:<12} {:>7.2} {:>5} {:>12.4e} {:>12} {:>9.1}",
                    r.scheduler.as_str(),
                    r.snr_db,
                    r.iter,
                    r.mean_nmse,
                    r.mean_tol.map_or("-".to_string(), |t| format!("{t:.4e}")),
                    r.mean_set_size,
                );
            }
            println!("convergence: {}", outcome.path.display());
        }
        Command::Single { common, trial } => {
            let spec = common.spec()?;
            for rec in harness::run_single(&spec, trial)? {
                for line in output_lines(&rec) {
                    println!("{line}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
