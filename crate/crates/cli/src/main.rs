mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mambar_core::artifact::{
    feature_distance_map, norm_map, outlier_comparison_csv, outlier_summary, probe_features,
    trace_activations, write_pgm, FeatureSpec, ProbeConfig, NORM_CSV_HEADER,
};
use mambar_core::data::SyntheticDataset;
use mambar_core::mbrt::Container;
use mambar_core::model::{build_layout, PositionMode, TapPoint, VisionMambaR};
use mambar_core::ssm::{max_relative_error, scan_parallel, scan_sequential, DiscretizedSteps};
use mambar_core::train::{evaluate, train, Trainer};
use mambar_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{write_manifest, Common, RunConfig};

#[derive(Parser)]
#[command(name = "mambar", version, about = "Vision Mamba with registers: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics.csv and ckpt_{epoch}.mbrt under --out.
    Train(TrainArgs),
    /// Report the accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Norm maps, histograms, outlier statistics and linear probes.
    Analyze(AnalyzeArgs),
    /// Print the token layout as an R/I string.
    Layout(LayoutArgs),
    /// Time sequential against parallel scans over L = 2^8 .. 2^16.
    BenchScan(BenchArgs),
}

#[derive(clap::Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on the training set instead of the validation set.
    #[arg(long)]
    train_split: bool,
}

#[derive(clap::Args, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Trained parameters; a freshly initialized model is analyzed without one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Validation images averaged into the outlier statistics.
    #[arg(long, default_value_t = 16)]
    images: usize,
    /// Optimizer steps per linear probe; 0 skips probing.
    #[arg(long, default_value_t = 300)]
    probe_steps: usize,
    /// Token fraction for the top/bottom-norm probe features.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    /// Record activations after each block's residual or after the next norm.
    #[arg(long, value_enum, default_value_t = Tap::PostResidual)]
    tap: Tap,
}

#[derive(Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Tap {
    PostResidual,
    PreNorm,
}

#[derive(clap::Args, Serialize)]
struct LayoutArgs {
    /// Image tokens.
    #[arg(long)]
    m: usize,
    /// Register tokens.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "even")]
    mode: PositionMode,
    /// Also write layout.txt and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    min_log2: u32,
    #[arg(long, default_value_t = 16)]
    max_log2: u32,
    #[arg(long, default_value_t = 16)]
    state_dim: usize,
    /// Timed repetitions per length; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write bench_scan.csv and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.validate()?;
    }
    let out = &args.common.out;
    write_manifest(out, "train", args, &cfg)?;
    let train_set = SyntheticDataset::generate(cfg.train_data.clone())?;
    let val_set = SyntheticDataset::generate(cfg.val_data.clone())?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = Container::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::<f32>::resume(cfg.model.clone(), cfg.train.clone(), &ckpt)?
        }
        None => Trainer::new(VisionMambaR::<f32>::new(cfg.model.clone())?, cfg.train.clone())?,
    };
    let report = train(&mut trainer, &train_set, &val_set, out)?;
    if let Some(last) = report.metrics.last() {
        println!(
            "epoch {} train_acc {:.4} val_acc {:.4} loss {:.4}",
            last.epoch, last.train_acc, last.val_acc, last.train_loss
        );
    }
    for p in &report.checkpoints {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalResult {
    checkpoint: PathBuf,
    split: &'static str,
    items: usize,
    accuracy: f64,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let out = &args.common.out;
    write_manifest(out, "eval", args, &cfg)?;
    let (split, spec) = if args.train_split {
        ("train", cfg.train_data.clone())
    } else {
        ("val", cfg.val_data.clone())
    };
    let data = SyntheticDataset::generate(spec)?;
    let accuracy = evaluate::<f32>(cfg.model.clone(), &args.checkpoint, &data)
        .with_context(|| format!("evaluating {}", args.checkpoint.display()))?;
    let result = EvalResult {
        checkpoint: args.checkpoint.clone(),
        split,
        items: data.len(),
        accuracy,
    };
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
    println!("{split} accuracy {accuracy:.4} over {} images", data.len());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<VisionMambaR<f32>> {
    let mut model = VisionMambaR::<f32>::new(cfg.model.clone())?;
    if let Some(p) = checkpoint {
        let ckpt = Container::load(p).with_context(|| format!("loading {}", p.display()))?;
        model.params.load_container(&ckpt)?;
    }
    Ok(model)
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let out = &args.common.out;
    write_manifest(out, "analyze", args, &cfg)?;
    let model = load_model(&cfg, args.checkpoint.as_deref())?;
    let val = SyntheticDataset::generate(cfg.val_data.clone())?;
    let tap = match args.tap {
        Tap::PostResidual => TapPoint::PostResidual,
        Tap::PreNorm => TapPoint::PreNorm,
    };

    // Per-layer maps for the first validation image.
    let (_, trace) = trace_activations(&model, &val.image(0), tap)?;
    trace.to_container().save(out.join("trace.mbrt"))?;
    let mut norms_csv = format!("{NORM_CSV_HEADER}\n");
    let mut layers_csv = String::from("layer,mean,median,max,outliers,outlier_fraction\n");
    for layer in 0..trace.depth() {
        let report = norm_map(&trace, layer)?;
        norms_csv.push_str(&report.csv_rows());
        writeln!(
            layers_csv,
            "{layer},{},{},{},{},{}",
            report.mean,
            report.median,
            report.max,
            report.outliers,
            report.outlier_fraction()
        )?;
        write_pgm(out.join(format!("norm_map_layer{layer}.pgm")), &report.norms, report.grid)?;
        if layer + 1 == trace.depth() {
            std::fs::write(out.join("histogram.csv"), report.histogram_csv())?;
            let rows = trace.image_rows(layer)?;
            let mut global = vec![0.0f32; rows[0].len()];
            for r in &rows {
                global.iter_mut().zip(r.iter()).for_each(|(g, v)| *g += v / rows.len() as f32);
            }
            let dist = feature_distance_map(&trace, layer, &global)?;
            write_pgm(out.join("distance_map.pgm"), &dist, report.grid)?;
        }
    }
    std::fs::write(out.join("norms.csv"), norms_csv)?;
    std::fs::write(out.join("layers.csv"), layers_csv)?;

    let k = args.images.clamp(1, val.len());
    let images: Vec<Tensor<f32>> = (0..k).map(|i| val.image(i)).collect();
    let summary = outlier_summary("model", &model, &images)?;
    std::fs::write(out.join("outliers.csv"), outlier_comparison_csv(std::slice::from_ref(&summary)))?;
    println!(
        "last layer: {:.4} of image tokens above 3× median norm ({} images)",
        summary.outlier_fraction, summary.images
    );

    if args.probe_steps > 0 {
        let probe = ProbeConfig {
            steps: args.probe_steps,
            seed: cfg.train.seed,
            ..ProbeConfig::default()
        };
        let mut specs = vec![
            ("global_pool", FeatureSpec::GlobalPool),
            ("top_norm", FeatureSpec::TopNorm(args.fraction)),
            ("bottom_norm", FeatureSpec::BottomNorm(args.fraction)),
        ];
        if cfg.model.n > 0 {
            specs.push(("class_token", FeatureSpec::ClassToken));
            specs.push(("mean_registers", FeatureSpec::MeanRegisters));
        }
        let mut csv = String::from("feature,train_acc,test_acc\n");
        for (name, spec) in specs {
            let r = probe_features(&model, &val, spec, &probe)?;
            writeln!(csv, "{name},{},{}", r.train_acc, r.test_acc)?;
            println!("probe {name}: test_acc {:.4}", r.test_acc);
        }
        std::fs::write(out.join("probe.csv"), csv)?;
    }
    println!("wrote reports to {}", out.display());
    Ok(())
}

fn run_layout(args: &LayoutArgs) -> Result<()> {
    let pattern = build_layout(args.m, args.n, args.mode).pattern();
    println!("{pattern}");
    if let Some(out) = &args.out {
        let cfg = RunConfig::default();
        write_manifest(out, "layout", args, &cfg)?;
        std::fs::write(out.join("layout.txt"), format!("{pattern}\n"))?;
    }
    Ok(())
}

const BENCH_HEADER: &str = "L,sequential_us,parallel_us,max_rel_err";

fn run_bench(args: &BenchArgs) -> Result<()> {
    anyhow::ensure!(
        args.min_log2 <= args.max_log2 && args.max_log2 <= 24,
        "need min-log2 <= max-log2 <= 24"
    );
    anyhow::ensure!(args.state_dim > 0 && args.reps > 0, "state-dim and reps must be positive");
    let n = args.state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut csv = format!("{BENCH_HEADER}\n");
    println!("{BENCH_HEADER}");
    for k in args.min_log2..=args.max_log2 {
        let len = 1usize << k;
        let mut draw = |count: usize, lo: f32, hi: f32| -> Vec<f32> {
            (0..count).map(|_| rng.gen_range(lo..hi)).collect()
        };
        let steps = DiscretizedSteps::new(n, draw(len * n, 0.5, 0.999), draw(len * n, -0.1, 0.1))?;
        let (c, x, h0) = (draw(len * n, -1.0, 1.0), draw(len, -1.0, 1.0), vec![0.0f32; n]);
        let (mut seq_us, mut par_us) = (f64::INFINITY, f64::INFINITY);
        let (mut ys, mut yp) = (Vec::new(), Vec::new());
        for _ in 0..args.reps {
            let t = Instant::now();
            ys = scan_sequential(&steps, &c, 0.5, &x, &h0)?;
            seq_us = seq_us.min(t.elapsed().as_secs_f64() * 1e6);
            let t = Instant::now();
            yp = scan_parallel(&steps, &c, 0.5, &x, &h0)?;
            par_us = par_us.min(t.elapsed().as_secs_f64() * 1e6);
        }
        let row = format!("{len},{seq_us:.1},{par_us:.1},{:e}", max_relative_error(&yp, &ys));
        println!("{row}");
        writeln!(csv, "{row}")?;
    }
    if let Some(out) = &args.out {
        write_manifest(out, "bench-scan", args, &RunConfig::default())?;
        std::fs::write(out.join("bench_scan.csv"), csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Layout(a) => run_layout(a),
        Command::BenchScan(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
