//! `hygnn` — synthetic-data generation, training, evaluation, inference
//! export, and gradient checking for the hybrid graph crowd counting model.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hygnn_core::checkpoint::{load_checkpoint, save_checkpoint};
use hygnn_core::data::{load_dir, save_annotations, synth_scene, SynthConfig};
use hygnn_core::error::Error;
use hygnn_core::gradcheck::{check_all_ops, check_full_model, DEFAULT_TOLERANCE};
use hygnn_core::ppm::read_ppm;
use hygnn_core::train::{evaluate, infer_export, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "hygnn",
    version,
    about = "Hybrid graph crowd counting and localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic crowd scenes into a directory.
    Synth(SynthArgs),
    /// Train a model on a directory of annotated scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint: MAE and (root) MSE over a dataset.
    Eval(EvalArgs),
    /// Run one image through a checkpoint and export the predicted maps.
    Infer(InferArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long)]
    seed: u64,
    /// Number of scenes to generate.
    #[arg(long)]
    n: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Scene height in pixels (multiple of 8).
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Scene width in pixels (multiple of 8).
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Minimum people per scene.
    #[arg(long, default_value_t = 4)]
    count_min: usize,
    /// Maximum people per scene.
    #[arg(long, default_value_t = 10)]
    count_max: usize,
    /// Keep blob centers this many pixels from the borders.
    #[arg(long, default_value_t = 8.0)]
    margin: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Directory of annotation/PPM pairs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint (its config wins).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (binary PPM, dimensions divisible by 8).
    #[arg(long)]
    image: PathBuf,
    /// Output prefix for `.density.pgm`, `.localization.pgm`, `.count.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also check the full model (N=2, K=1, eighth width, 16x16 input).
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full-model parameter samples.
    #[arg(long, default_value_t = 24)]
    samples: usize,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFiniteLoss { .. } | Error::GradCheckFailed { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = SynthConfig {
                h: args.height,
                w: args.width,
                count_range: (args.count_min, args.count_max),
                margin: args.margin,
                ..SynthConfig::default()
            };
            std::fs::create_dir_all(&args.out)?;
            for i in 0..args.n {
                let scene = synth_scene(args.seed + i as u64, &cfg)?;
                let path = args.out.join(format!("scene_{i:04}.txt"));
                save_annotations(&scene, &path)?;
            }
            println!(
                "wrote {} scenes ({}x{}) to {}",
                args.n,
                args.height,
                args.width,
                args.out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let scenes = load_dir(&args.data)?;
            let (cfg, resume) = match &args.resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    (ckpt.config.clone(), Some(ckpt))
                }
                None => {
                    let path = args.config.as_ref().expect("clap enforces --config");
                    let text = std::fs::read_to_string(path)?;
                    (TrainConfig::parse(&text)?, None)
                }
            };
            let outcome = train(&cfg, &scenes, resume, Some(&args.out))?;
            for entry in &outcome.loss_log {
                println!(
                    "step {:>6}  l1 {:.6e}  l2 {:.6e}",
                    entry.step, entry.l1, entry.l2
                );
            }
            save_checkpoint(&args.out, &outcome.config, &outcome.params, &outcome.adam)?;
            println!(
                "trained {} steps, checkpoint: {}",
                outcome.adam.step_count(),
                args.out.display()
            );
            Ok(())
        }
        Command::Eval(args) => {
            let scenes = load_dir(&args.data)?;
            let (cfg, params, _) = load_checkpoint(&args.ckpt)?.into_parts()?;
            let result = evaluate(&params, &cfg.model_config(), &scenes)?;
            for (i, (pred, gt)) in result.per_image.iter().enumerate() {
                println!("image {i:>4}  predicted {pred:>10.3}  truth {gt:>7.1}");
            }
            println!("MAE {:.6}", result.mae);
            println!("MSE {:.6}", result.mse);
            Ok(())
        }
        Command::Infer(args) => {
            let (cfg, params, _) = load_checkpoint(&args.ckpt)?.into_parts()?;
            let image = read_ppm(&args.image)?;
            let outputs = infer_export(&params, &cfg.model_config(), &image, &args.out)?;
            println!("count {}", outputs.count);
            println!("density map: {}", outputs.density_path.display());
            println!("localization map: {}", outputs.localization_path.display());
            Ok(())
        }
        Command::Gradcheck(args) => {
            let mut report = check_all_ops(args.seed)?;
            if args.full {
                report.merge(check_full_model(args.seed, args.samples.max(20))?);
            }
            print!("{report}");
            if report.passed(DEFAULT_TOLERANCE) {
                println!("PASS (tolerance {DEFAULT_TOLERANCE:.0e})");
                Ok(())
            } else {
                Err(Error::GradCheckFailed {
                    max_rel_err: report.max_rel_err(),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
