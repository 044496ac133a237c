//! Command-line front end for the segmentation toolkit.
//!
//! `menisc [--config exp.toml] <stage> [flags]`. Stages default their
//! input and output directories to fixed locations under
//! `paths.output`, so running them in order needs no extra flags:
//!
//! ```text
//! phantom-gen -> phantoms/
//! preprocess  -> preprocessed/
//! train       -> runs/<model>/
//! predict     -> predictions/<model>/
//! evaluate    -> evaluation/<model>/
//! report      -> report/
//! ```

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Context;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "menisc", version, about = "Knee MRI meniscus segmentation experiments")]
pub struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for default stage outputs.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    PhantomGen(PhantomArgs),
    /// Window intensities and crop to the annotated region.
    Preprocess(PreprocessArgs),
    /// Train a model with early stopping.
    Train(TrainArgs),
    /// Predict masks for one subset.
    Predict(PredictArgs),
    /// Score predictions against reference masks.
    Evaluate(EvaluateArgs),
    /// Plots and a summary table from evaluations.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub no_distractors: bool,
    /// Train, validation and test counts, e.g. `12,4,4`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Dataset to preprocess (default: `paths.dataset`, else the phantoms).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `unet3d` or `promptless_vit`.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `decoder_only` or `end_to_end`.
    #[arg(long)]
    pub freeze: Option<String>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training run directory holding the checkpoint.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `label=dir` pairs; defaults to the configured model's evaluation.
    #[arg(long = "eval")]
    pub evaluations: Vec<String>,
    /// Prediction directory for projection images (needs `--data`).
    #[arg(long, requires = "data")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn apply_model(cfg: &mut ExperimentConfig, args: &ModelArgs) -> Result<()> {
    if let Some(m) = &args.model {
        cfg.model.kind = config::ModelKind::parse(m)?;
    }
    Ok(())
}

/// Loads the configuration file and applies the flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.paths.output = o.clone();
    }
    match &cli.command {
        Command::PhantomGen(a) => {
            if let Some(n) = a.count {
                cfg.phantom.count = n;
                if a.split.is_none() {
                    cfg.phantom.split = None;
                }
            }
            if let Some(n) = a.noise {
                cfg.phantom.noise_level = n;
            }
            if a.no_distractors {
                cfg.phantom.distractors = false;
            }
            if let Some(s) = &a.split {
                let counts = <[usize; 3]>::try_from(s.as_slice())
                    .map_err(|_| CliError::Config(format!("--split needs three counts, got {}", s.len())))?;
                cfg.phantom.split = Some(counts);
            }
        }
        Command::Preprocess(a) => {
            if let Some(m) = a.margin {
                cfg.preprocess.crop_margin = m;
            }
        }
        Command::Train(a) => {
            apply_model(&mut cfg, &a.model)?;
            if let Some(f) = &a.freeze {
                cfg.model.freeze = serde_json::from_value(serde_json::Value::String(f.clone()))
                    .map_err(|_| CliError::Config(format!("unknown freeze policy {f:?} (decoder_only, end_to_end)")))?;
            }
            if let Some(p) = &a.pretrained {
                cfg.model.pretrained = Some(p.clone());
            }
            if let Some(e) = a.epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(p) = a.patience {
                cfg.train.patience = p;
            }
        }
        Command::Predict(a) => apply_model(&mut cfg, &a.model)?,
        Command::Evaluate(a) => apply_model(&mut cfg, &a.model)?,
        Command::Report(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_eval(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((label, dir)) if !label.is_empty() && !dir.is_empty() => Ok((label.to_string(), PathBuf::from(dir))),
        _ => Err(CliError::Config(format!("--eval expects label=dir, got {s:?}"))),
    }
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::new(resolve_config(cli)?)?;
    let c = &ctx.config;
    let kind = c.model.kind.name();
    let or = |flag: &Option<PathBuf>, default: PathBuf| flag.clone().unwrap_or(default);
    match &cli.command {
        Command::PhantomGen(a) => {
            commands::phantom_gen(&ctx, &or(&a.out, c.out("phantoms")))?;
        }
        Command::Preprocess(a) => {
            let input = a.input.clone().or_else(|| c.paths.dataset.clone()).unwrap_or_else(|| c.out("phantoms"));
            commands::preprocess(&ctx, &input, &or(&a.out, c.out("preprocessed")))?;
        }
        Command::Train(a) => {
            let out = or(&a.out, c.out("runs").join(kind));
            let outcome = commands::train(&ctx, &or(&a.data, c.out("preprocessed")), &out)?;
            println!(
                "best validation loss {:.5} at epoch {}",
                outcome.history.best_val_loss, outcome.history.best_epoch
            );
        }
        Command::Predict(a) => {
            let subset = commands::parse_subset(&a.subset)?;
            let out = or(&a.out, c.out("predictions").join(kind));
            let index = commands::predict(
                &ctx,
                &or(&a.run, c.out("runs").join(kind)),
                &or(&a.data, c.out("preprocessed")),
                subset,
                &out,
            )?;
            println!("{} predictions in {}", index.cases.len(), out.display());
        }
        Command::Evaluate(a) => {
            let report = commands::evaluate(
                &ctx,
                &or(&a.predictions, c.out("predictions").join(kind)),
                &or(&a.data, c.out("preprocessed")),
                &or(&a.out, c.out("evaluation").join(kind)),
            )?;
            if let Some(d) = report.dice {
                println!("Dice {:.4} ± {:.4} over {} cases", d.mean, d.sd, d.n);
            }
            if let Some(h) = report.hd95_mm {
                println!("HD95 {:.3} ± {:.3} mm", h.mean, h.sd);
            }
        }
        Command::Report(a) => {
            let evaluations = if a.evaluations.is_empty() {
                vec![(kind.to_string(), c.out("evaluation").join(kind))]
            } else {
                a.evaluations.iter().map(|s| parse_eval(s)).collect::<Result<Vec<_>>>()?
            };
            let projections = a.predictions.as_deref().zip(a.data.as_deref());
            commands::report(&ctx, &evaluations, projections, &or(&a.out, c.out("report")))?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("menisc: {e}");
            e.exit_code()
        }
    }
}
