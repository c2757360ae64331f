//! `curvseg` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curvseg::{Error, Result};

use commands::{Method, GRADCHECK_TOLERANCE};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "curvseg", version, about = "Instance segmentation of thin crossing curves")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ClusterOverrides {
    /// Intersection similarity threshold `a`.
    #[arg(long)]
    threshold_a: Option<f64>,
    /// Similarity sharpness `beta`.
    #[arg(long)]
    beta: Option<f64>,
    /// Mean-shift bandwidth; the merge radius follows at half of it.
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train on a dataset and write a checkpoint with its loss log.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "embedding")]
        method: Method,
        #[command(flatten)]
        overrides: ClusterOverrides,
    },
    /// Segment one PGM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "embedding")]
        method: Method,
        #[command(flatten)]
        overrides: ClusterOverrides,
    },
    /// Draw instance masks over a PGM image.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instances: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        fixtures: usize,
    },
}

fn apply_overrides(cfg: &mut RunConfig, o: &ClusterOverrides) {
    if let Some(a) = o.threshold_a {
        cfg.pipeline.resolve.threshold_a = a;
    }
    if let Some(b) = o.beta {
        cfg.pipeline.resolve.beta = b;
    }
    if let Some(bw) = o.bandwidth {
        cfg.pipeline.mean_shift.bandwidth = bw;
        cfg.pipeline.mean_shift.merge_radius = bw / 2.0;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let out = cfg.out.clone();
    match cli.command {
        Command::Synth { count } => {
            let m = commands::cmd_synth(&cfg, count, &out)?;
            let crossing = m.scenes.iter().filter(|s| s.has_crossing).count();
            println!("wrote {} scenes ({crossing} with crossings) to {}", m.scenes.len(), out.display());
        }
        Command::Train { dataset, epochs } => {
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            let s = commands::cmd_train(&cfg, &dataset, &out)?;
            match (s.best_epoch, s.final_val_loss) {
                (Some(best), Some(val)) => {
                    println!("trained {} epochs; best epoch {best}; final val loss {val:.6}", s.epochs)
                }
                _ => println!("no epochs run; checkpoint holds the initialization"),
            }
        }
        Command::Eval {
            dataset,
            checkpoint,
            method,
            overrides,
        } => {
            apply_overrides(&mut cfg, &overrides);
            let r = commands::cmd_eval(&cfg, checkpoint.as_deref(), &dataset, method, &out)?;
            println!(
                "{} images: iou {:.4} dice {:.4} ap {:.4} ar {:.4}",
                r.images, r.iou, r.dice, r.ap, r.ar
            );
        }
        Command::Infer {
            checkpoint,
            image,
            method,
            overrides,
        } => {
            apply_overrides(&mut cfg, &overrides);
            let k = commands::cmd_infer(&cfg, &checkpoint, &image, method, &out)?;
            println!("{k} instances written to {}", out.display());
        }
        Command::Render { image, instances } => {
            let path = commands::cmd_render(&image, &instances, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { fixtures } => {
            let r = commands::cmd_gradcheck(&cfg, fixtures, &out)?;
            println!(
                "{} fixtures: discriminative max rel error {:.3e}, total max rel error {:.3e}",
                r.fixtures, r.discriminative_max_rel_error, r.total_max_rel_error
            );
            let worst = r.discriminative_max_rel_error.max(r.total_max_rel_error);
            if worst > GRADCHECK_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "gradient error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Parse(_) | Error::Generation(_) => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
