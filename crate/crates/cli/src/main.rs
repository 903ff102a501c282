//! `protoshot`: train, evaluate, verify and inspect few-shot prototype extractors.
//!
//! Exit codes: 0 success, 1 configuration error or failed check, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protoshot::numerics::GradFault;
use protoshot::synthetic::GaussianSpec;
use protoshot::verify::GradcheckSetup;
use protoshot::Error;

use commands::Outcome;
use config::{ConfigArgs, OutKey};

#[derive(Debug, Parser)]
#[command(name = "protoshot", version, about = "Few-shot classification with a transformer prototype extractor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an extractor; writes last.pfck, best.pfck and history.json under --out.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from last.pfck (and best.pfck) in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint (or the bypass baseline) on test episodes.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Evaluate the bypass baseline and each checkpoint on one paired episode stream.
    Compare {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoints to compare; repeatable.
        #[arg(long = "with", value_name = "PATH")]
        with: Vec<PathBuf>,
    },
    /// Write query embeddings and both kinds of prototypes as JSON lines.
    ExportPlot {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long = "n", default_value_t = 3)]
        way: usize,
        #[arg(long = "k", default_value_t = 2)]
        shot: usize,
        #[arg(long = "q", default_value_t = 2)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, hide = true, value_parser = commands::parse_fault)]
        inject_fault: Option<GradFault>,
    },
    /// Summarize a PFE1 embedding file without loading its rows.
    Inspect { path: PathBuf },
    /// Write a Gaussian embedding dataset.
    Synth {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        center_std: f64,
        #[arg(long, default_value_t = 0.5)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        nuisance_dims: usize,
        #[arg(long, default_value_t = 0.5)]
        nuisance_std: f64,
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Usage(_) => 1,
        Error::Format { .. } | Error::Data(_) | Error::Io { .. } | Error::Sampling(_) => 2,
        Error::Numeric { .. } => 3,
    }
}

fn set_threads(n: Option<usize>) -> protoshot::Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn with_config(
    args: &ConfigArgs,
    out: OutKey,
    f: impl FnOnce(&config::RunConfig) -> protoshot::Result<Outcome>,
) -> protoshot::Result<Outcome> {
    let config = args.load(out)?;
    set_threads(config.run.threads)?;
    f(&config)
}

fn run(cli: Cli) -> protoshot::Result<Outcome> {
    match cli.command {
        Command::Train { args, resume } => with_config(&args, OutKey::CheckpointDir, |c| commands::train(c, resume)),
        Command::Eval { args } => with_config(&args, OutKey::Report, commands::eval),
        Command::Compare { args, with } => with_config(&args, OutKey::Report, |c| commands::compare(c, &with)),
        Command::ExportPlot { args } => {
            let mut config = args.load(OutKey::Plot)?;
            if let Some(n) = args.episodes {
                config.run.plot_episodes = n;
            }
            set_threads(config.run.threads)?;
            commands::export_plot(&config)
        }
        Command::Gradcheck {
            dim,
            heads,
            layers,
            way,
            shot,
            queries,
            seed,
            step,
            tol,
            threads,
            out,
            inject_fault,
        } => {
            set_threads(threads)?;
            let setup = GradcheckSetup {
                dim,
                heads,
                layers,
                way,
                shot,
                queries,
                seed,
                step,
                tolerance: tol,
                fault: inject_fault,
                ..GradcheckSetup::default()
            };
            commands::gradcheck(&setup, out.as_deref())
        }
        Command::Inspect { path } => commands::inspect(&path),
        Command::Synth {
            classes,
            per_class,
            dim,
            center_std,
            noise_std,
            nuisance_dims,
            nuisance_std,
            offset,
            seed,
            out,
        } => commands::synth(
            &GaussianSpec {
                classes,
                per_class,
                dim,
                center_std,
                noise_std,
                nuisance_dims,
                nuisance_std,
                offset,
                seed,
            },
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
