use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hunet::ablation::{ablation_table, run_ablation};
use hunet::data::{min_max_normalize, read_png_slice, resize_bilinear, save_mask_png, save_probability_png, synth_blobs, write_png_dataset};
use hunet::metrics::{binarize, evaluate};
use hunet::model::{AttentionUNet, Segmenter};
use hunet::nn::FeatureMap;
use hunet::oracles::{run_checks, CheckScope, Fault};
use hunet::train::{load_checkpoint, load_checkpoint_for, train_with, TrainContext};
use hunet::{Error, RunConfig};
use ndarray::{Array4, Axis};

const MODEL_NAME: &str = "H-UNet";

#[derive(Parser)]
#[command(name = "hunet", version, about = "Attention U-Net lesion segmentation for CT slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, history and test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Write mask and probability PNGs for input slices.
    Predict(PredictArgs),
    /// Run the built-in oracle checks.
    Check(CheckArgs),
    /// Write a synthetic PNG dataset.
    Synth(SynthArgs),
    /// Train one model per loss variant and compare test metrics.
    Ablate(RunArgs),
}

/// Settings shared by every command that reads a run configuration.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or synth://<count>x<size>.
    #[arg(long)]
    data: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the region terms; beta defaults to 1 - alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the boundary terms; alpha defaults to 1 - beta.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the resolved configuration and stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitChoice {
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which samples of the data source to score.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG files or directories of PNG files.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Square side the slices are resized to before inference; by default
    /// each side is rounded up to a multiple of 16.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Losses,
    Metrics,
    Gates,
    Distance,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipBoundaryGradient,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum, default_value = "all")]
    scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the outcomes as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Plant a known defect to confirm the checks catch it.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Check(a) => cmd_check(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.data {
        c.data.source = v.clone();
    }
    if let Some(v) = &args.out {
        c.output.dir = v.clone();
    }
    if let Some(v) = args.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        c.train.lr = v;
    }
    match (args.alpha, args.beta) {
        (Some(a), Some(b)) => (c.loss.alpha, c.loss.beta) = (a, b),
        (Some(a), None) => (c.loss.alpha, c.loss.beta) = (a, 1.0 - a),
        (None, Some(b)) => (c.loss.alpha, c.loss.beta) = (1.0 - b, b),
        (None, None) => {}
    }
    if let Some(v) = args.threshold {
        c.eval.threshold = v;
    }
    if let Some(v) = args.seed {
        c.train.seed = v;
    }
    if let Some(v) = args.base_channels {
        c.model.base_channels = v;
    }
    c.resolve()?;
    Ok(c)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config = resolve_config(&args.run)?;
    let out = config.output.dir.clone();
    prepare_out(&out)?;
    write_file(&out.join("config.toml"), &config.to_toml()?)?;
    if args.dry_run {
        println!("wrote {}", out.join("config.toml").display());
        return Ok(ExitCode::SUCCESS);
    }

    let split = config.load_split()?;
    eprintln!(
        "{} training / {} test slices ({} / {} scans)",
        split.train.len(),
        split.test.len(),
        split.train_scans.len(),
        split.test_scans.len()
    );
    let model = AttentionUNet::<f32>::new(config.model.clone(), config.train.seed)?;
    let total = config.train.epochs;
    let ctx = TrainContext {
        checkpoint_dir: Some(out.clone()),
        on_epoch: Some(Box::new(move |r| {
            eprintln!(
                "epoch {:>3}/{total}  loss {:.4}  val dice {:.4}  lr {:.1e}  {:.1}s",
                r.epoch, r.loss, r.val_dice, r.lr, r.seconds
            )
        })),
    };
    let mut outcome = train_with(model, &split, &config.train_config(), ctx)?;
    outcome.history.write(&out)?;

    let report = evaluate(&mut outcome.best, &split.test, config.eval.threshold, config.eval.batch_size)?;
    write_file(&out.join("metrics.json"), &report.to_json()?)?;
    let table = report.to_table(MODEL_NAME);
    write_file(&out.join("metrics.txt"), &table)?;
    println!("best epoch {} (validation Dice {:.4})", outcome.best_epoch, outcome.history.best().map_or(f64::NAN, |r| r.val_dice));
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let threshold = args.run.threshold.unwrap_or(0.5);
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!("threshold must lie in (0, 1), got {threshold}");
    }
    if !args.checkpoint.is_file() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    let mut run = args.run.clone();
    let checkpoint = match run.base_channels {
        Some(_) => {
            let mut wanted = hunet::train::read_checkpoint_meta(&args.checkpoint)?.model;
            wanted.base_channels = run.base_channels.unwrap_or(wanted.base_channels);
            load_checkpoint_for::<f32>(&args.checkpoint, &wanted)?
        }
        None => load_checkpoint::<f32>(&args.checkpoint)?,
    };
    run.base_channels = Some(checkpoint.meta.model.base_channels);
    let config = resolve_config(&run)?;
    let samples = match args.split {
        SplitChoice::Test => config.load_split()?.test,
        SplitChoice::All => config.load_samples()?,
    };
    let mut model = checkpoint.model;
    let report = evaluate(&mut model, &samples, config.eval.threshold, config.eval.batch_size)?;
    let out = &config.output.dir;
    prepare_out(out)?;
    write_file(&out.join("metrics.json"), &report.to_json()?)?;
    let table = report.to_table(MODEL_NAME);
    write_file(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no input images found");
    }
    Ok(files)
}

fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple).max(1) * multiple
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        bail!("threshold must lie in (0, 1), got {}", args.threshold);
    }
    let checkpoint = load_checkpoint::<f32>(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let multiple = checkpoint.meta.model.size_multiple();
    if let Some(s) = args.size {
        if s == 0 || s % multiple != 0 {
            bail!("--size must be a positive multiple of {multiple}, got {s}");
        }
    }
    let mut model = checkpoint.model;
    let files = collect_images(&args.images)?;
    prepare_out(&args.out)?;
    for path in files {
        let slice = read_png_slice(&path).with_context(|| format!("cannot read image {}", path.display()))?;
        let (h, w) = slice.dim();
        let (th, tw) = match args.size {
            Some(s) => (s, s),
            None => (round_up(h, multiple), round_up(w, multiple)),
        };
        let pixels = resize_bilinear(&min_max_normalize(&slice).pixels, th, tw);
        let input = FeatureMap::new(pixels.insert_axis(Axis(0)).insert_axis(Axis(3)))?;
        let probs: Array4<f32> = model.predict(&input)?.into_values();
        let probs = probs.index_axis(Axis(0), 0).index_axis(Axis(2), 0).to_owned();
        let probs = if (th, tw) == (h, w) { probs } else { resize_bilinear(&probs, h, w) };
        let mask = binarize(probs.view(), args.threshold);

        let stem = &slice.source_id;
        save_mask_png(&mask, &args.out.join(format!("{stem}_mask.png")))?;
        save_probability_png(&probs, &args.out.join(format!("{stem}_prob.png")))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    let scope = match args.scope {
        ScopeArg::Losses => CheckScope::Losses,
        ScopeArg::Metrics => CheckScope::Metrics,
        ScopeArg::Gates => CheckScope::Gates,
        ScopeArg::Distance => CheckScope::Distance,
        ScopeArg::All => CheckScope::All,
    };
    let fault = args.inject_fault.map(|FaultArg::FlipBoundaryGradient| Fault::FlipBoundaryGradient);
    let outcomes = run_checks(scope, args.seed, fault)?;
    for o in &outcomes {
        println!(
            "{} {}  measured {:.3e}  tolerance {:.1e}{}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.measured,
            o.tolerance,
            if o.detail.is_empty() { String::new() } else { format!("  ({})", o.detail) }
        );
    }
    if let Some(path) = &args.json {
        write_file(path, &serde_json::to_string_pretty(&outcomes)?)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let samples = synth_blobs(args.count, args.size, args.seed)?;
    write_png_dataset(&samples, &args.out).with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: RunArgs) -> Result<ExitCode> {
    let config = resolve_config(&args)?;
    let out = config.output.dir.clone();
    prepare_out(&out)?;
    write_file(&out.join("config.toml"), &config.to_toml()?)?;
    let split = config.load_split()?;
    let rows = run_ablation(&split, &config.model, &config.train_config(), config.eval.threshold, |row| {
        let s = row.scores();
        eprintln!(
            "{:<14} dice {:.4}  sensitivity {:.4}  specificity {:.4}",
            row.variant.name, s.dice, s.sensitivity, s.specificity
        );
    })?;
    write_file(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
    let table = ablation_table(&rows);
    write_file(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}
