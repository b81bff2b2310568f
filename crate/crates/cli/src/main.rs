//! `argen`: data generation, training, sampling and benchmarking from the
//! command line. See FORMATS.md for files, CSV columns and exit codes.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use argen::armodel::{ArModel, Condition, ModelConfig};
use argen::bench::{bench_model, write_bench_csv};
use argen::pipeline::{
    eval_reconstruction, load_dataset, make_synthetic, precompute_codes, save_dataset, select_images, train_ar,
    train_tokenizer, write_csv, SyntheticConfig, TrainConfig,
};
use argen::sampler::{batch_generate, SamplingConfig};
use argen::tokenizer::pnm::save_pnm;
use argen::tokenizer::{TokenDataset, Tokenizer, TokenizerConfig};
use argen::{Error, Result, Rng};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Exit status for success.
const EXIT_OK: u8 = 0;
/// I/O, format and other runtime failures.
const EXIT_FAILURE: u8 = 1;
/// Malformed or invalid configuration. Also used by argument parsing.
const EXIT_CONFIG: u8 = 2;
/// A loss or logit became non-finite, or decode paths disagreed.
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "argen", version, about = "Tokenize, train and sample autoregressive image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic class-conditional dataset to a directory.
    GenData(GenData),
    /// Train the vector-quantized tokenizer on a dataset directory.
    TrainTokenizer(TrainTok),
    /// Tokenize a dataset directory into an ARTK file.
    Encode(Encode),
    /// Train the autoregressive model on an ARTK file.
    TrainAr(TrainAr),
    /// Sample token grids and decode them to pixmaps.
    Generate(Generate),
    /// Reconstruction metrics of a tokenizer over a dataset.
    Eval(Eval),
    /// Naive against cached decode timing.
    Bench(Bench),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainTok {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the config goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Encode {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shifted views per image.
    #[arg(long, default_value_t = 10)]
    crops: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainAr {
    #[arg(long)]
    config: Option<PathBuf>,
    /// ARTK file from `encode`.
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Model preset; overrides the config's `preset`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct SamplingFlags {
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplingFlags {
    fn apply(&self, s: &mut SamplingConfig) {
        if let Some(v) = self.cfg_scale {
            s.cfg_scale = v;
        }
        if let Some(v) = self.top_k {
            s.top_k = v;
        }
        if let Some(v) = self.top_p {
            s.top_p = v;
        }
        if let Some(v) = self.temperature {
            s.temperature = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
    }
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    config: Option<PathBuf>,
    /// AR checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Class label per image; repeat the flag for several. Defaults to
    /// cycling through the classes.
    #[arg(long = "class")]
    classes: Vec<usize>,
    /// Images to sample when no `--class` is given.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only the last N images.
    #[arg(long)]
    held_out: Option<usize>,
    /// Per-image CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Bench {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset names or AR checkpoint paths.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Serialize, Deserialize)]
struct BenchSettings {
    models: Vec<String>,
    batch: usize,
    repeats: usize,
}

fn main() -> ExitCode {
    argen::init_threads_from_env();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("argen: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Length(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainTokenizer(a) => train_tok(a),
        Command::Encode(a) => encode(a),
        Command::TrainAr(a) => train_ar_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(a: GenData) -> Result<()> {
    let merged = config::load(a.config.as_deref(), json!({ "data": to_value(&SyntheticConfig::default()) }))?;
    let mut cfg: SyntheticConfig = config::section(&merged, "data")?;
    if let Some(n) = a.images {
        cfg.images = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = make_synthetic(&cfg)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_tok(a: TrainTok) -> Result<()> {
    let defaults = json!({
        "tokenizer": to_value(&TokenizerConfig::desk(4)),
        "train": to_value(&TrainConfig::tokenizer_desk()),
    });
    let merged = config::load(a.config.as_deref(), defaults)?;
    let tcfg: TokenizerConfig = config::section(&merged, "tokenizer")?;
    let mut train: TrainConfig = config::section(&merged, "train")?;
    if let Some(s) = a.steps {
        train.steps = s;
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    let data = load_dataset(&a.data)?;
    let run = train_tokenizer(&data, &tcfg, &train)?;
    run.tokenizer.save(&a.out)?;
    if let Some(m) = &a.metrics {
        write_csv(m, &run.log)?;
    }
    if let Some(last) = run.log.last() {
        println!("step {} recon {:.5} usage {:.3} psnr {:.2}", last.step, last.recon, last.usage, last.psnr);
    }
    Ok(())
}

fn encode(a: Encode) -> Result<()> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let data = load_dataset(&a.data)?;
    let codes = precompute_codes(&data, &tok, a.crops, a.seed)?;
    codes.save(&a.out)?;
    let g = codes.grid(0, 0);
    println!("wrote {} grids of {}x{} to {}", codes.grids.len(), g.h, g.w, a.out.display());
    Ok(())
}

fn train_ar_cmd(a: TrainAr) -> Result<()> {
    let user = a.config.as_deref().map(config::read_json).transpose()?;
    let preset = match (&a.preset, user.as_ref().and_then(|u| u.get("preset"))) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(p))) => p.clone(),
        (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        (None, None) => "nano".to_string(),
    };
    let defaults = json!({
        "preset": preset,
        "model": to_value(&ModelConfig::preset(&preset)?),
        "train": to_value(&TrainConfig::ar_desk()),
    });
    let mut merged = match user {
        Some(u) => config::overlay(defaults, u)?,
        None => defaults,
    };
    if a.preset.is_some() {
        merged["preset"] = Value::String(preset);
    }
    let model_cfg: ModelConfig = config::section(&merged, "model")?;
    let mut train: TrainConfig = config::section(&merged, "train")?;
    if let Some(s) = a.steps {
        train.steps = s;
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    let data = TokenDataset::load(&a.tokens)?;
    let run = train_ar(&data, &model_cfg, &train)?;
    run.model.save(&a.out)?;
    if let Some(m) = &a.metrics {
        write_csv(m, &run.log)?;
    }
    println!(
        "steps {} initial loss {:.4} final loss {:.4}",
        run.steps_run, run.initial_loss, run.final_loss
    );
    Ok(())
}

fn sampling_config(path: Option<&Path>, flags: &SamplingFlags, extra: Value) -> Result<(Value, SamplingConfig)> {
    let mut defaults = json!({ "sampling": to_value(&SamplingConfig::default()) });
    if let (Value::Object(d), Value::Object(e)) = (&mut defaults, extra) {
        d.extend(e);
    }
    let merged = config::load(path, defaults)?;
    let mut s: SamplingConfig = config::section(&merged, "sampling")?;
    flags.apply(&mut s);
    s.validate()?;
    Ok((merged, s))
}

fn generate(a: Generate) -> Result<()> {
    let (_, sampling) = sampling_config(a.config.as_deref(), &a.sampling, json!({}))?;
    let model = ArModel::load(&a.model)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let conds: Vec<Condition> = if a.classes.is_empty() {
        argen::bench::bench_conditions(&model, a.count)
    } else {
        a.classes.iter().map(|&c| Condition::Class(c)).collect()
    };
    let grids = batch_generate(&model, &conds, &sampling)?;
    let images = tok.decode_grids(&grids)?;
    create_dir(&a.out)?;
    let ext = if tok.config.image_channels == 1 { "pgm" } else { "ppm" };
    for (i, cond) in conds.iter().enumerate() {
        let tag = match cond {
            Condition::Class(c) => format!("_c{c}"),
            _ => String::new(),
        };
        let path = a.out.join(format!("{i:04}{tag}.{ext}"));
        save_pnm(&path, &select_images(&images, &[i]))?;
    }
    println!("wrote {} images to {}", conds.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let mut data = load_dataset(&a.data)?;
    if let Some(n) = a.held_out {
        data = data.split(n).1;
    }
    let report = eval_reconstruction(&data, &tok)?;
    report.write_csv(&a.out)?;
    print!(
        "images {} mse {:.6} psnr {:.3} ssim {:.4}",
        report.rows.len(),
        report.mean_mse,
        report.mean_psnr,
        report.mean_ssim
    );
    match report.usage {
        Some(u) => println!(" usage {u:.3}"),
        None => println!(),
    }
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    let settings = BenchSettings { models: vec!["nano".into(), "micro".into()], batch: 8, repeats: 5 };
    let (merged, sampling) = sampling_config(a.config.as_deref(), &a.sampling, json!({ "bench": to_value(&settings) }))?;
    let mut settings: BenchSettings = config::section(&merged, "bench")?;
    if !a.models.is_empty() {
        settings.models = a.models;
    }
    if let Some(b) = a.batch {
        settings.batch = b;
    }
    if let Some(r) = a.repeats {
        settings.repeats = r;
    }
    let mut results = Vec::new();
    for name in &settings.models {
        let path = Path::new(name);
        let model = if path.is_file() {
            ArModel::load(path)?
        } else {
            ArModel::new(ModelConfig::preset(name)?, &mut Rng::new(sampling.seed))?
        };
        let r = bench_model(name, &model, settings.batch, &sampling, settings.repeats)?;
        println!(
            "{:<8} params {:>9} naive {:.4}s cached {:.4}s speedup {:.2}x",
            r.model, r.params, r.naive_sec, r.cached_sec, r.speedup_ratio
        );
        results.push(r);
    }
    write_bench_csv(&a.out, &results)
}
