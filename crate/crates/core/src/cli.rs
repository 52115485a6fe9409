//! `space` command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{keys_help, RunConfig};
use crate::datasets::{export_mvtec_layout, load_mvtec_layout, synth_toy_dataset, DatasetSplit};
use crate::error::{Result, SpaceError};
use crate::imaging::PixelImage;
use crate::metrics::{evaluate, summarize, write_report_csv, DEFAULT_FPR_LIMIT};
use crate::scoring::{calibrate, score_image, score_samples, write_heatmap, write_scores_csv, write_spmap};
use crate::trainer::{train, TrainOutputs};

pub const THREADS_ENV: &str = "SPACE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "space", version, about = "Student-teacher anomaly detection: train, calibrate, score, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic toy dataset in MVTec layout under OUT/<category>.
    Synth(SynthArgs),
    /// Train on DATA's train/good images and write a calibrated checkpoint.
    Train(TrainArgs),
    /// Score DATA's test split and write an evaluation report.
    Eval(EvalArgs),
    /// Score a single image; prints the image score.
    Score(ScoreArgs),
    /// Recompute calibration statistics from DATA's validation images.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub n_train: usize,
    #[arg(long, default_value_t = 8)]
    pub n_val: usize,
    /// Test images per class (good, structural, logical).
    #[arg(long, default_value_t = 16)]
    pub n_test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "toy")]
    pub category: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root, or a category directory containing train/.
    #[arg(long)]
    pub data: PathBuf,
    /// Category under the dataset root.
    #[arg(long)]
    pub category: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Take the teacher weights from an existing checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write per-image scores as `identifier,label,score`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FPR_LIMIT)]
    pub fpr_limit: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Raw total map in SPMAP format.
    #[arg(long)]
    pub map_out: Option<PathBuf>,
    /// Total map rendered as a PNG heatmap.
    #[arg(long)]
    pub heatmap_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

fn command() -> clap::Command {
    Cli::command()
        .after_help(keys_help())
        .mut_subcommand("train", |c| c.after_help(keys_help()))
}

/// `(root, category)` for a data argument.
fn resolve_data(args: &DataArgs) -> Result<(PathBuf, String)> {
    if let Some(c) = &args.category {
        return Ok((args.data.clone(), c.clone()));
    }
    if args.data.join("train").is_dir() {
        let name = args
            .data
            .file_name()
            .ok_or_else(|| SpaceError::config(format!("cannot name category of {}", args.data.display())))?;
        let root = args.data.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        return Ok((root, name.to_string_lossy().into_owned()));
    }
    let entries = std::fs::read_dir(&args.data)
        .map_err(|e| SpaceError::config(format!("cannot read data directory {}: {e}", args.data.display())))?;
    let mut cats: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("train").is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    cats.sort();
    match cats.len() {
        1 => Ok((args.data.clone(), cats.remove(0))),
        0 => Err(SpaceError::config(format!("no category with a train/ directory under {}", args.data.display()))),
        _ => Err(SpaceError::config(format!(
            "several categories under {} ({}); pass --category",
            args.data.display(),
            cats.join(", ")
        ))),
    }
}

fn load_data(args: &DataArgs, validation_fraction: f64) -> Result<(String, DatasetSplit)> {
    let (root, category) = resolve_data(args)?;
    let split = load_mvtec_layout(&root, &category, validation_fraction)?;
    Ok((category, split))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let split = synth_toy_dataset(a.seed, a.n_train, a.n_val, a.n_test, a.size)?;
    export_mvtec_layout(&split, &a.out, &a.category)?;
    println!(
        "wrote {} train, {} validation, {} test images to {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        a.out.join(&a.category).display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let run = RunConfig::load(&a.config)?;
    let (_, data) = load_data(&a.data, run.validation_fraction)?;
    let teacher = match &a.teacher {
        Some(p) => Some(checkpoint::load_teacher(p, &run)?.0),
        None => None,
    };
    let outputs = TrainOutputs::beside(&a.out);
    let ck = train(&run, &data, &outputs, teacher)?;
    println!("trained {} iterations; checkpoint {}", ck.iteration, a.out.display());
    if let Some(p) = &outputs.loss_csv {
        println!("loss log {}", p.display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = checkpoint::load(&a.ckpt)?;
    let (category, data) = load_data(&a.data, ck.run.validation_fraction)?;
    if data.test.is_empty() {
        return Err(SpaceError::config(format!("no test images for category '{category}'")));
    }
    let scored = score_samples(&ck.model, &data.test)?;
    let scores: Vec<f32> = scored.iter().map(|s| s.score).collect();
    let maps: Vec<&[f32]> = scored.iter().map(|s| s.total.values.as_slice()).collect();
    let report = evaluate(&category, &data.test, &scores, &maps, a.fpr_limit)?;
    write_report_csv(&a.report, std::slice::from_ref(&report))?;
    if let Some(p) = &a.scores {
        let rows: Vec<_> = data
            .test
            .iter()
            .zip(&scores)
            .map(|(s, &v)| (s.identifier.clone(), s.label.as_str().to_string(), v))
            .collect();
        write_scores_csv(p, &rows)?;
    }
    print!("{}", summarize(&[report]));
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let ck = checkpoint::load(&a.ckpt)?;
    let img = image::open(&a.image)
        .map_err(|e| SpaceError::config(format!("cannot read image {}: {e}", a.image.display())))?
        .to_rgb8();
    let scored = score_image(&ck.model, &PixelImage::from_rgb8(&img))?;
    if let Some(p) = &a.map_out {
        write_spmap(p, &scored.total)?;
    }
    if let Some(p) = &a.heatmap_out {
        write_heatmap(p, &scored.total)?;
    }
    println!("{}", scored.score);
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let mut ck = checkpoint::load(&a.ckpt)?;
    let (_, data) = load_data(&a.data, ck.run.validation_fraction)?;
    let cs = calibrate(&ck.model, &data.validation)?;
    ck.model.calibration = Some(cs);
    checkpoint::save(&a.ckpt, &ck)?;
    println!(
        "structural [{:.6}, {:.6}] logical [{:.6}, {:.6}]",
        cs.structural_lo, cs.structural_hi, cs.logical_lo, cs.logical_hi
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SpaceError::config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // a pool may already exist when called twice in one process; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

/// Parse `args`, run, and map the outcome to a process exit code
/// (0 success, 2 usage/configuration error, 1 runtime failure).
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
