//! Command-line front end: train, eval, predict, gradcheck, gen-data, ablate.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exit::Status;

#[derive(Parser, Debug)]
#[command(name = "rescbam", version, about = "YOLOv8-style detector with residual CBAM attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; trailing `--key value` pairs override the config.
    Train(TrainArgs),
    /// Evaluate weights on a dataset split and write report files.
    Eval(EvalArgs),
    /// Detect objects in one PPM/PGM image.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset with a split manifest.
    GenData(GenDataArgs),
    /// Train and evaluate baseline and attention models at several input sizes.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (desk or paper) before applying the config.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Dataset directory (images/, labels/, optional split.txt and classes.txt).
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many generated images instead of a dataset directory.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Select the best weights on the training images instead of the val split.
    #[arg(long)]
    pub val_on_train: bool,
    /// Initial weights; must match the configured model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// `--key value` config overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test, or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// 101-point or all-point.
    #[arg(long, default_value = "101-point")]
    pub ap_method: String,
    /// Directory for report.txt, report.kv and pr_curves.csv.
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.45)]
    pub iou: f64,
    /// Class names, one per line.
    #[arg(long)]
    pub names: Option<PathBuf>,
    /// Write a copy of the image with detection boxes drawn in.
    #[arg(long)]
    pub draw: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// op, module or model.
    #[arg(long, default_value = "model")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Comma-separated relative class frequencies.
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; generated data when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub synthetic: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,96")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value = "runs/ablation.csv")]
    pub out: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Status::Usage } else { Status::Ok }.into();
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => Status::Ok.into(),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.status.into()
        }
    }
}
