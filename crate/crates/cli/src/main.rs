//! `versatile`: train, evaluate, benchmark and count versatile-filter networks.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::{ConfigError, RunConfig};
use versatile_core::accounting::{network_counts, parse_netspec, render_records, render_summary};
use versatile_core::data::{load_mnist, Dataset};
use versatile_core::fastinfer::{cached_forward, measure_vs_predict, CountRecord};
use versatile_core::masks::write_mask_records;
use versatile_core::tensor::Tensor;
use versatile_core::train::{evaluate, load_checkpoint, save_checkpoint, Layer, Model, Trainer};
use versatile_core::vconv;

#[derive(Parser)]
#[command(name = "versatile", version, about = "Versatile convolution filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the default CNN on an IDX dataset
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated lambda values; trains once per value and prints test accuracy
        #[arg(long, value_delimiter = ',')]
        lambda_sweep: Vec<f64>,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate (defaults to out.checkpoint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the plain and cached kernels and check op counts per conv layer
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input height and width for a freshly built model
        #[arg(long, default_value_t = 28)]
        hw: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Parameter, MUL, ADD and memory counts for the networks in a shape list
    CountOps {
        netspec: PathBuf,
        /// Print per-layer tables too
        #[arg(long)]
        layers: bool,
        /// Emit JSON lines instead of tables
        #[arg(long)]
        json: bool,
    },
    /// Write the binary masks of a checkpoint as packed records
    ExportMasks {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_file(&text)?;
    }
    for a in &args.set {
        cfg.assign(a)?;
    }
    cfg.train.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    for (k, v) in cfg.resolved() {
        eprintln!("config {k}={v}");
    }
}

fn load_split(cfg: &RunConfig, split: &str, limit: usize) -> Result<Dataset<f32>> {
    let dir = cfg.data_path()?;
    let mut ds = load_mnist::<f32>(dir, split).with_context(|| format!("loading {split} split"))?;
    if limit > 0 {
        ds.truncate(limit);
    }
    Ok(ds)
}

fn test_split(cfg: &RunConfig) -> Result<Option<Dataset<f32>>> {
    match load_split(cfg, "t10k", cfg.test_limit) {
        Ok(ds) => Ok(Some(ds)),
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => Err(e),
        Err(_) => Ok(None),
    }
}

fn train_once(cfg: &RunConfig, data: &Dataset<f32>, log: Option<&mut dyn Write>) -> Result<Model<f32>> {
    let input = data.image_shape();
    let mut model = Model::<f32>::build(input, data.classes, &cfg.model, cfg.train.seed)
        .map_err(|e| ConfigError(e.to_string()))?;
    let mut trainer = Trainer::new(cfg.train.clone());
    let mut sink = log;
    let mut io_err = None;
    let t = Instant::now();
    trainer.fit(&mut model, data, |rec| {
        if let Some(w) = sink.as_deref_mut() {
            if let Err(e) = writeln!(w, "{}", serde_json::to_string(rec).unwrap()) {
                io_err.get_or_insert(e);
            }
        }
        if rec.step % 50 == 0 {
            eprintln!(
                "step {:>6} epoch {} loss {:.4} acc {:.3} flips {:.4}",
                rec.step, rec.epoch, rec.loss, rec.accuracy, rec.flip_rate
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing training log");
    }
    eprintln!("trained in {:.1}s", t.elapsed().as_secs_f64());
    Ok(model)
}

fn cmd_train(args: &ConfigArgs, sweep: &[f64]) -> Result<()> {
    let cfg = resolve(args)?;
    cfg.data_path()?;
    log_config(&cfg);
    let data = load_split(&cfg, "train", cfg.data_limit)?;
    let test = test_split(&cfg)?;
    if !sweep.is_empty() {
        println!("{:>10} {:>10}", "lambda", "accuracy");
        let mut rows = Vec::new();
        for &lambda in sweep {
            let mut c = cfg.clone();
            c.train.lambda = lambda;
            c.train.validate().map_err(|e| ConfigError(e.to_string()))?;
            let model = train_once(&c, &data, None)?;
            let eval_set = test.as_ref().unwrap_or(&data);
            let report = evaluate(&model, &eval_set.images, &eval_set.labels, c.train.loss)?;
            println!("{lambda:>10} {:>10.4}", report.accuracy);
            rows.push(json!({ "lambda": lambda, "accuracy": report.accuracy, "loss": report.loss }));
        }
        for r in rows {
            println!("{r}");
        }
        return Ok(());
    }
    let mut log_file = match &cfg.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            writeln!(w, "{}", json!({ "config": cfg.resolved_json() }))?;
            Some(w)
        }
        None => None,
    };
    let model = train_once(&cfg, &data, log_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    save_checkpoint(&model, &cfg.checkpoint).with_context(|| format!("writing {}", cfg.checkpoint.display()))?;
    let counts = model.conv_counts()?;
    let mut summary = json!({
        "checkpoint": cfg.checkpoint.display().to_string(),
        "conv_params": counts.param_equivalent(),
        "conv_memory_bytes": counts.memory_bytes(),
    });
    if let Some(test) = &test {
        let r = evaluate(&model, &test.images, &test.labels, cfg.train.loss)?;
        summary["test_accuracy"] = json!(r.accuracy);
        summary["test_loss"] = json!(r.loss);
    }
    println!("{summary}");
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = resolve(args)?;
    cfg.data_path()?;
    let path = checkpoint.unwrap_or(&cfg.checkpoint);
    let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let test = load_split(&cfg, "t10k", cfg.test_limit)?;
    let r = evaluate(&model, &test.images, &test.labels, cfg.train.loss)?;
    println!(
        "{}",
        json!({ "checkpoint": path.display().to_string(), "samples": r.samples, "accuracy": r.accuracy, "loss": r.loss })
    );
    Ok(())
}

fn cmd_bench(args: &ConfigArgs, checkpoint: Option<&Path>, hw: usize, trials: usize) -> Result<()> {
    let cfg = resolve(args)?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => Model::<f32>::build((hw, hw, 1), 10, &cfg.model, cfg.train.seed).map_err(|e| ConfigError(e.to_string()))?,
    };
    let shapes = model.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    println!(
        "{:<8} {:>12} {:>12} {:>8} {:>12} {:>12} {:>10}",
        "layer", "plain_ms", "cached_ms", "equal", "mul_fp32", "mask_ops", "add_err"
    );
    let mut records = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let Layer::Conv(conv) = layer else { continue };
        let (h, w, c) = shapes[i];
        let x = Tensor::<f32>::random_uniform(&[h, w, c], -1.0, 1.0, &mut rng);
        let t = Instant::now();
        let mut plain = None;
        for _ in 0..trials.max(1) {
            plain = Some(vconv::forward(&x, &conv.bank, conv.masks.as_ref(), &conv.spec)?);
        }
        let plain_ms = t.elapsed().as_secs_f64() * 1e3 / trials.max(1) as f64;
        let t = Instant::now();
        let mut cached = None;
        for _ in 0..trials.max(1) {
            cached = Some(cached_forward(&x, &conv.bank, conv.masks.as_ref(), &conv.spec)?);
        }
        let cached_ms = t.elapsed().as_secs_f64() * 1e3 / trials.max(1) as f64;
        let (y, counts) = cached.unwrap();
        let equal = y == plain.unwrap();
        let report = measure_vs_predict(&conv.spec, (h, w), trials.max(1), cfg.train.seed)?;
        let name = format!("conv{i}");
        println!(
            "{name:<8} {plain_ms:>12.3} {cached_ms:>12.3} {equal:>8} {:>12} {:>12} {:>10.4}",
            counts.mul_fp32, counts.mask_ops, report.add_rel_error
        );
        records.push(json!({
            "layer": name, "plain_ms": plain_ms, "cached_ms": cached_ms, "bitwise_equal": equal,
            "counts": CountRecord::new(name.clone(), &counts), "add_rel_error": report.add_rel_error,
        }));
        if !equal {
            anyhow::bail!("{name}: cached kernel differs from the plain forward pass");
        }
    }
    for r in records {
        println!("{r}");
    }
    Ok(())
}

fn cmd_count_ops(path: &Path, layers: bool, as_json: bool) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let nets = parse_netspec(&text).with_context(|| format!("parsing {}", path.display()))?;
    let counts = nets.iter().map(network_counts).collect::<versatile_core::Result<Vec<_>>>()?;
    if as_json {
        for n in &counts {
            for r in n.records() {
                let mut v = serde_json::to_value(&r)?;
                v["network"] = json!(n.name);
                println!("{v}");
            }
        }
        return Ok(());
    }
    if layers {
        for n in &counts {
            println!("network {}", n.name);
            print!("{}", render_records(&n.records()));
            println!();
        }
    }
    print!("{}", render_summary(&counts));
    Ok(())
}

fn cmd_export_masks(checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut total = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        if let Layer::Conv(c) = layer {
            if let Some(m) = &c.masks {
                write_mask_records(m, &mut w)?;
                total += m.num_masks();
                eprintln!(
                    "conv{i}: {} masks of {}x{}x{}, density {:.4}",
                    m.num_masks(),
                    c.spec.d,
                    c.spec.d,
                    c.spec.c,
                    m.density()
                );
            }
        }
    }
    w.flush()?;
    println!("{}", json!({ "masks": total, "out": out.display().to_string() }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, lambda_sweep } => cmd_train(&cfg, &lambda_sweep),
        Command::Eval { cfg, checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Bench {
            cfg,
            checkpoint,
            hw,
            trials,
        } => cmd_bench(&cfg, checkpoint.as_deref(), hw, trials),
        Command::CountOps { netspec, layers, json } => cmd_count_ops(&netspec, layers, json),
        Command::ExportMasks { checkpoint, out } => cmd_export_masks(&checkpoint, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
