//! `cracknet` command-line front end.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cracknet::ablation::ablate;
use cracknet::checkpoint;
use cracknet::complexity::{measure_latency, ComplexityReport};
use cracknet::data::{
    load_dataset_with, read_image, resize, split_80_20, synth_generate, write_dataset, write_mask,
    MaskEncoding, Sample, SynthConfig, IMAGE_DIR, MASK_DIR,
};
use cracknet::rfem::export_attention_map;
use cracknet::train::{evaluate, resolve_class_weights, train};
use cracknet::{Error, Mask, Model, ModelConfig, Result, Tensor};
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "cracknet",
    version,
    about = "Crack segmentation with attention-gated skips and a linear-attention bottleneck"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crack dataset
    Synth(SynthArgs),
    /// Train on a dataset (80:20 split) and keep the best checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Segment one image and optionally export the gate maps
    Predict(PredictArgs),
    /// Train and evaluate the four module combinations
    Ablate(AblateArgs),
    /// Report parameters, FLOPs and inference latency
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.028)]
    fg_fraction: f64,
    #[arg(long)]
    width_min: Option<usize>,
    #[arg(long)]
    width_max: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: Overrides,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which part of the seeded 80:20 split to score
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    #[arg(long, default_value = "binary")]
    mask_encoding: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    /// Directory for one gate-coefficient PNG per gated decoder stage
    #[arg(long)]
    out_attn: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: Overrides,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: Overrides,
    /// Square input side (same as --size)
    #[arg(long)]
    input_size: Option<usize>,
    /// Use the full-width network instead of the configured one
    #[arg(long)]
    full_width: bool,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    /// Skip timing; report counts only
    #[arg(long)]
    no_latency: bool,
    /// Human-readable table instead of JSON
    #[arg(long)]
    text: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CRACKNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "CRACKNET_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Print the resolved configuration and, with an output directory, keep a copy.
fn echo_config(cfg: &RunConfig) -> Result<()> {
    let text = to_json(cfg);
    eprintln!("resolved config:\n{text}");
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_file(&out.join("config.json"), text)?;
    }
    Ok(())
}

fn load_for(model: &ModelConfig, root: &Path, encoding: MaskEncoding) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset directory not found",
            ),
        });
    }
    let samples = load_dataset_with(&root.join(IMAGE_DIR), &root.join(MASK_DIR), encoding)?;
    samples
        .iter()
        .map(|s| resize(s, model.height, model.width))
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        count: a.count,
        size: a.size,
        fg_fraction: a.fg_fraction,
        width_min: a.width_min.unwrap_or(defaults.width_min),
        width_max: a.width_max.unwrap_or(defaults.width_max),
        ..defaults
    };
    let samples = synth_generate(&cfg, a.seed)?;
    write_dataset(&samples, &a.out)?;
    let fg: usize = samples.iter().map(|s| s.mask.count(1)).sum();
    let total: usize = samples.iter().map(|s| s.mask.len()).sum();
    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        count: usize,
        size: usize,
        seed: u64,
        foreground_fraction: f64,
    }
    println!(
        "{}",
        to_json(&Summary {
            out: &a.out,
            count: samples.len(),
            size: a.size,
            seed: a.seed,
            foreground_fraction: if total == 0 {
                0.0
            } else {
                fg as f64 / total as f64
            },
        })
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let (data, out) = (cfg.data_dir()?.to_path_buf(), cfg.out_dir()?.to_path_buf());
    let samples = load_for(&cfg.model, &data, cfg.mask_encoding)?;
    echo_config(&cfg)?;
    let (tr, va) = split_80_20(&samples, cfg.train.seed)?;
    eprintln!(
        "training on {} samples, validating on {}",
        tr.len(),
        va.len()
    );
    let mut model = Model::new(cfg.model.clone())?;
    let outcome = train(&mut model, &tr, &va, &cfg.train, Some(&out))?;
    for h in &outcome.history {
        eprintln!(
            "epoch {:>4}  train {:.5}  val {:.5}  lr {:.2e}  mIoU {:.4}  dice {:.4}",
            h.epoch, h.train_loss, h.val_loss, h.lr, h.miou, h.dice
        );
    }
    println!("{}", to_json(&outcome));
    Ok(())
}

fn parse_encoding(s: &str) -> Result<MaskEncoding> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Usage(format!("unknown mask encoding `{s}` (binary or index)")))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, meta) = checkpoint::load(&a.checkpoint)?;
    eprintln!("checkpoint model config:\n{}", to_json(&model.config));
    let samples = load_for(&model.config, &a.data, parse_encoding(&a.mask_encoding)?)?;
    let train_cfg = meta.train.clone().unwrap_or_default();
    let split = |samples: &[Sample]| split_80_20(samples, train_cfg.seed);
    let (subset, weight_source) = match a.split {
        Split::All => {
            let source = if meta.train.is_some() && samples.len() >= 5 {
                split(&samples)?.0
            } else {
                samples.clone()
            };
            (samples, source)
        }
        Split::Train | Split::Val => {
            if meta.train.is_none() {
                return Err(Error::Usage(
                    "checkpoint records no training run, so its split is unknown".into(),
                ));
            }
            let (tr, va) = split(&samples)?;
            if a.split == Split::Train {
                (tr.clone(), tr)
            } else {
                (va, tr)
            }
        }
    };
    if subset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let weights = resolve_class_weights(&model, &train_cfg.loss, &weight_source)?;
    let eval = evaluate(
        &model,
        &subset,
        train_cfg.batch_size,
        &train_cfg.loss,
        &weights,
    )?;
    if a.json {
        println!("{}", to_json(&eval));
    } else {
        print!("loss {:.6}\n{}", eval.loss, eval.report.to_text());
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let image = read_image(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (mh, mw) = (model.config.height, model.config.width);
    let input = resize(&Sample::new("input", image, Mask::filled(h, w, 0))?, mh, mw)?;
    let batch = cracknet::data::stack_images(&[&input])?;
    let (masks, trace) = model.predict(&batch)?;
    let predicted = Sample::new(
        "output",
        Tensor::zeros(&[3, mh, mw]),
        masks.into_iter().next().expect("one image"),
    )?;
    let mask = resize(&predicted, h, w)?.mask;
    let encoding = if model.config.classes == 1 {
        MaskEncoding::Binary
    } else {
        MaskEncoding::Index
    };
    write_mask(&mask, &a.out_mask, encoding)?;
    let mut maps = Vec::new();
    if let Some(dir) = &a.out_attn {
        create_dir(dir)?;
        for (psi, level) in trace.psi.iter().zip(ModelConfig::SKIP_LEVELS) {
            let path = dir.join(format!("psi_level{level}.png"));
            export_attention_map(psi, &path)?;
            maps.push(path);
        }
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        mask: &'a Path,
        height: usize,
        width: usize,
        foreground_fraction: f64,
        attention_maps: Vec<PathBuf>,
    }
    println!(
        "{}",
        to_json(&Summary {
            mask: &a.out_mask,
            height: h,
            width: w,
            foreground_fraction: (mask.len() - mask.count(0)) as f64 / mask.len() as f64,
            attention_maps: maps,
        })
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let samples = load_for(&cfg.model, cfg.data_dir()?, cfg.mask_encoding)?;
    echo_config(&cfg)?;
    let (tr, va) = split_80_20(&samples, cfg.train.seed)?;
    let table = ablate(&cfg.model, &tr, &va, &cfg.train, cfg.out.as_deref())?;
    if let Some(out) = &cfg.out {
        write_file(&out.join("ablation.json"), to_json(&table))?;
        write_file(&out.join("ablation.csv"), table.to_csv())?;
    }
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut run = a.run.clone();
    run.size = a.input_size.or(run.size);
    let mut cfg = run.resolve()?;
    if a.full_width {
        let m = &cfg.model;
        cfg.model = ModelConfig {
            seed: m.seed,
            ..ModelConfig::full_width(m.height, m.width, m.classes)
        }
        .with_flags(m.use_rfem, m.use_cagm);
    }
    eprintln!("model config:\n{}", to_json(&cfg.model));
    let latency = if a.no_latency {
        None
    } else {
        Some(measure_latency(&Model::new(cfg.model.clone())?, a.runs)?)
    };
    let report = ComplexityReport::new(&cfg.model, latency)?;
    if a.text {
        print!("{}", report.to_text());
    } else {
        let mut value = serde_json::to_value(&report).expect("report serializes");
        value
            .as_object_mut()
            .expect("object")
            .entry("latency")
            .or_insert(serde_json::Value::Null);
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    }
    Ok(())
}
