use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wavecast_cli::commands;
use wavecast_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "wavecast", version, about = "Wavefunction-based volume forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON). Missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap the worker pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override `io.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Train the encoder; writes checkpoints and the loss curve.
    Train,
    /// Evaluate a checkpoint and the persistence baseline on a split.
    Eval,
    /// Evaluate across unroll depths.
    SweepUnroll,
    /// Check analytic gradients against finite differences.
    Gradcheck,
    /// Check the integrator against the Crank–Nicolson reference.
    Oracle,
    /// Write mid-slice panels of V, |ψ| and |Hψ|².
    Interpret,
    /// Time single-volume forecasts.
    Profile,
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.io.out_dir = out.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let out = cfg.io.out_dir.display().to_string();
    Ok(match cli.command {
        Command::Gen => format!("manifest: {}", commands::cmd_gen(&cfg)?.display()),
        Command::Train => {
            let s = commands::cmd_train(&cfg)?;
            format!(
                "trained {} epochs; final train mse {:.4e}; checkpoint {}",
                s.epochs,
                s.final_train_mse,
                s.checkpoint.display()
            )
        }
        Command::Eval => {
            let s = commands::cmd_eval(&cfg)?;
            let (m, p) = (&s.model.report, &s.persistence.report);
            format!(
                "model ssim {:.4} dice {:.4} | persistence ssim {:.4} dice {:.4}; report {out}/report.json",
                m.mean_of("ssim"),
                m.mean_of("dice"),
                p.mean_of("ssim"),
                p.mean_of("dice")
            )
        }
        Command::SweepUnroll => {
            let s = commands::cmd_sweep_unroll(&cfg)?;
            format!("{} rows written to {out}/sweep.csv", s.rows.len())
        }
        Command::Gradcheck => {
            let r = commands::cmd_gradcheck(&cfg)?;
            let worst = r.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
            format!("gradcheck passed: max relative error {worst:.3e}")
        }
        Command::Oracle => {
            let r = commands::cmd_oracle(&cfg)?;
            format!(
                "oracle passed: order slopes {:?}, max drift/bound {:.3}",
                r.integrator_order.slopes, r.norm_drift.max_ratio
            )
        }
        Command::Interpret => {
            let s = commands::cmd_interpret(&cfg)?;
            format!("{} files written to {out}/interpret", s.files.len())
        }
        Command::Profile => {
            let s = commands::cmd_profile(&cfg)?;
            format!(
                "latency {:.3} ± {:.3} ms, {:.1} volumes/s",
                s.profile.latency_ms, s.profile.latency_sd_ms, s.profile.throughput_per_s
            )
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("wavecast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
