//! Command-line front end.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{ModelSpec, RunConfig};

use crate::autograd::{inject_backward_fault, OpKind};
use crate::data::{
    synth_generate, DatasetManifest, Loader, SegSample, Split, SynthConfig, TextureFamily, MANIFEST_FILE, META_FILE,
};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::interpret::{explain_sample, ExplainOptions, SMOOTHGRAD_SAMPLES};
use crate::model::{ModelConfig, Preset, SaUNet};
use crate::objectives::TSV_HEADER;
use crate::train::{evaluate, fit, Trainer, BEST_CKPT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "SAUNET_SEED";

#[derive(Debug, Parser)]
#[command(name = "saunet", version, about = "Shape attentive U-Net: synthesize data, train, evaluate, explain, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write attention maps and overlays for selected samples.
    Explain(ExplainArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the block table of a model preset.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 250)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TextureFamily::A)]
    pub texture: TextureFamily,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Remove the shape stream (and its edge loss).
    #[arg(long)]
    pub no_shape_stream: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Single-threaded data preparation (numerics are always single-threaded).
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Per-sample TSV; defaults to `eval_<split>.tsv` next to the checkpoint.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.8])]
    pub thresholds: Vec<f64>,
    /// SmoothGrad sample count; 0 skips the baseline.
    #[arg(long, default_value_t = SMOOTHGRAD_SAMPLES)]
    pub smoothgrad: usize,
    /// Class explained by SmoothGrad.
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    #[arg(long, default_value = "explain")]
    pub out: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Corrupt the backward rule of one op (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::Tiny)]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum PresetArg {
    Tiny,
    Dense121,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::UninitializedRunningStats(_) => EXIT_DATA,
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Info(a) => cmd_info(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    if a.size == 0 || a.size % 8 != 0 {
        return Err(Error::Config(format!("--size must be a positive multiple of 8, got {}", a.size)));
    }
    if !(0.0..=1.0).contains(&a.train_fraction) {
        return Err(Error::Config(format!("--train-fraction must be in [0, 1], got {}", a.train_fraction)));
    }
    let nonempty = std::fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if nonempty {
        if !a.force {
            return Err(Error::Config(format!("{} is not empty; pass --force to replace", a.out.display())));
        }
        for sub in ["images", "labels"] {
            let p = a.out.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        for f in [MANIFEST_FILE, META_FILE] {
            let p = a.out.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let cfg = SynthConfig {
        n: a.n,
        size: a.size,
        seed: a.seed,
        texture: a.texture,
        train_fraction: a.train_fraction,
    };
    let sum = synth_generate(&a.out, &cfg)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    println!("checksum {sum}");
    Ok(EXIT_OK)
}

/// Native slice size of a dataset, read from its first image.
fn native_crop(m: &DatasetManifest) -> Result<usize> {
    let Some(row) = m.rows.first() else { return Ok(64) };
    let t = crate::data::sgt_read(&m.root.join(&row.image))?;
    let s = t.shape();
    Ok(s[s.len() - 2].max(s[s.len() - 1]))
}

/// Applies command-line overrides to a run config.
pub fn resolve_run(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&a.config)?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(s.parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}='{s}' is not an integer")))?),
        Err(_) => None,
    };
    if let Some(s) = a.seed.or(cfg.seed).or(env_seed) {
        cfg.train.seed = s;
    }
    cfg.seed = Some(cfg.train.seed);
    if a.no_shape_stream {
        cfg.model.shape_stream = Some(false);
    }
    if cfg.model.shape_stream == Some(false) {
        cfg.train.loss.lambda3 = 0.0;
    }
    if a.deterministic {
        cfg.train.workers = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = resolve_run(a)?;
    let model_cfg = cfg.model.resolve();
    let data = cfg.data.clone().expect("validated");
    let out = cfg.out.clone().expect("validated");
    let manifest = DatasetManifest::read(&data)?;
    if manifest.meta.classes != model_cfg.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model config {}",
            manifest.meta.classes, model_cfg.num_classes
        )));
    }
    let crop = cfg.crop.unwrap_or(native_crop(&manifest)?);
    let train_set = manifest.load_split(Split::Train, (crop, crop))?;
    let val_set = manifest.load_split(Split::Val, (crop, crop))?;
    if train_set.len() < cfg.train.batch_size.min(2) {
        return Err(Error::Data(format!("{} training samples; need at least 2", train_set.len())));
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::resume(p, cfg.train.clone())?;
            if t.model.config() != &model_cfg {
                return Err(Error::Config(format!("{} was trained with a different model config", p.display())));
            }
            t
        }
        None => Trainer::new(SaUNet::build(&model_cfg, cfg.train.seed)?, cfg.train.clone())?,
    };

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let run_json = out.join("run.json");
    std::fs::write(&run_json, serde_json::to_string_pretty(&cfg).expect("config serializes"))
        .map_err(|e| Error::io(&run_json, e))?;
    log::info!(
        "training {} parameters on {} samples ({} val), {} epochs",
        trainer.model.count_params(),
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );
    let train = trainer.train_loader(train_set);
    let val = Loader::eval(val_set, model_cfg.num_classes, cfg.train.batch_size);
    let summary = fit(&mut trainer, &train, &val, Some(&out))?;
    match summary.best {
        Some((e, d)) => println!("best epoch {e} score {d:.4}; checkpoint {}", out.join(BEST_CKPT).display()),
        None => println!("no epochs run"),
    }
    Ok(EXIT_OK)
}

fn load_checkpoint(ckpt: &Path) -> Result<SaUNet<f32>> {
    Ok(SaUNet::load(ckpt)?.0)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    if a.batch_size == 0 {
        return Err(Error::Config("--batch-size must be positive".into()));
    }
    let model = load_checkpoint(&a.ckpt)?;
    let manifest = DatasetManifest::read(&a.data)?;
    if manifest.meta.classes != model.config().num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, checkpoint predicts {}",
            manifest.meta.classes,
            model.config().num_classes
        )));
    }
    let crop = a.crop.unwrap_or(native_crop(&manifest)?);
    let samples = manifest.load_split(a.split, (crop, crop))?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", a.split)));
    }
    let loader = Loader::eval(samples, manifest.meta.classes, a.batch_size);
    let (report, rows) = evaluate(&model, &loader)?;
    let tsv = a.tsv.clone().unwrap_or_else(|| {
        a.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.tsv", a.split))
    });
    let mut text = String::from(TSV_HEADER) + "\n";
    for r in &rows {
        text += &(r.tsv() + "\n");
    }
    std::fs::write(&tsv, text).map_err(|e| Error::io(&tsv, e))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(EXIT_OK)
}

fn cmd_explain(a: &ExplainArgs) -> Result<i32> {
    for &t in &a.thresholds {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
    }
    let model = load_checkpoint(&a.ckpt)?;
    if a.class >= model.config().num_classes {
        return Err(Error::Config(format!("--class {} outside [0, {})", a.class, model.config().num_classes)));
    }
    let manifest = DatasetManifest::read(&a.data)?;
    let crop = a.crop.unwrap_or(native_crop(&manifest)?);
    let mut samples = Vec::with_capacity(a.ids.len());
    for id in &a.ids {
        let row = manifest.row(id).ok_or_else(|| Error::Data(format!("unknown sample id '{id}'")))?;
        let raw = manifest.load_raw(row, (crop, crop))?;
        samples.push(SegSample::finalize(&raw.id, &raw.image, raw.labels, raw.spacing));
    }
    let opts = ExplainOptions {
        thresholds: a.thresholds.clone(),
        smoothgrad: a.smoothgrad,
        class: a.class,
        seed: a.seed,
        ..ExplainOptions::default()
    };
    for s in &samples {
        let r = explain_sample(&model, s, &a.out, &opts)?;
        println!("{}: {} files in {}", r.sample_id, r.files.len(), r.dir.display());
        println!("{}", r.timing_line());
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if let Some(name) = &a.inject_fault {
        let kind =
            OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown differentiable op '{name}'")))?;
        inject_backward_fault(Some(kind));
    }
    let report = run_suite();
    inject_backward_fault(None);
    let report = report?;
    print!("{report}");
    if report.passed() {
        Ok(EXIT_OK)
    } else {
        let failed = report.failures();
        eprintln!("gradcheck failed: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

fn cmd_info(a: &InfoArgs) -> Result<i32> {
    let preset = match a.preset {
        PresetArg::Tiny => Preset::Tiny,
        PresetArg::Dense121 => Preset::Dense121,
    };
    let model = SaUNet::<f32>::build(&ModelConfig::preset(preset), 0)?;
    print!("{}", model.summarize(a.size, a.size));
    Ok(EXIT_OK)
}
