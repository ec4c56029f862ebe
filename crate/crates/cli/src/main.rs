mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use stitchfusion::checkpoint::{load_checkpoint, save_checkpoint, Scope};
use stitchfusion::data::{generate_synthetic, load_dataset, save_dataset, SynthConfig};
use stitchfusion::encoder::EncoderConfig;
use stitchfusion::metrics::Metrics;
use stitchfusion::param_count::{CountRow, CountSpec};
use stitchfusion::stitch::{DEFAULT_ADAPTER_DROPOUT, DEFAULT_BOTTLENECK};
use stitchfusion::train::{evaluate, fit, TrainConfig};
use stitchfusion::verify::{equivalence_check, gradient_suite, transparency_gap};
use stitchfusion::{DensityConfig, DensityVariant, Error, Mode, ModelConfig, StitchConfig, StitchModel};

use config::{to_toml, CountArgs, ModelArgs, PathArgs, RunFile, SynthArgs, TrainArgs};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "stitchfusion", version, about = "Multimodal segmentation with stitched frozen encoders")]
struct Cli {
    /// TOML run file; command-line flags take precedence over it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic complementary-modality dataset
    SynthData {
        #[command(flatten)]
        synth: SynthArgs,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train adapters, fusion module and decoder on frozen encoders
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Training dataset directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation dataset directory
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        /// Checkpoint directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the closed-form adapter budget with an enumerated bank
    ParamCount {
        #[command(flatten)]
        count: CountArgs,
    },
    /// Run the finite-difference gradient suite
    GradCheck {
        /// Number of seeds, starting at --seed
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Check the two-modality density equivalence and zero-adapter transparency
    EquivCheck {
        /// Random inputs per comparison
        #[arg(long, default_value_t = 10)]
        inputs: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            _ => EXIT_VERIFY,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, message: message.into() }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let file = RunFile::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::SynthData { mut synth, out } => {
            synth.fill(&file.synth);
            let out = require(out.or(file.paths.out.clone()), "out")?;
            synth_data(synth, &out, seed)
        }
        Command::Train { mut model, mut train, data, eval_data, out } => {
            model.fill(&file.model);
            train.fill(&file.train);
            let mut paths = PathArgs { data, eval_data, checkpoint: None, out };
            paths.fill(&file.paths);
            train_cmd(model, train, paths, seed)
        }
        Command::Eval { checkpoint, data, out } => {
            let mut paths = PathArgs { data, eval_data: None, checkpoint, out };
            paths.fill(&file.paths);
            eval_cmd(paths)
        }
        Command::ParamCount { mut count } => {
            count.fill(&file.count);
            param_count(count)
        }
        Command::GradCheck { seeds } => grad_check(seed, seeds),
        Command::EquivCheck { inputs } => equiv_check(seed, inputs),
    }
}

fn require<T>(value: Option<T>, name: &str) -> std::result::Result<T, Failure> {
    value.ok_or_else(|| config_error(format!("missing required setting `{name}`")))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

#[derive(Serialize)]
struct ResolvedSynth {
    seed: u64,
    out: PathBuf,
    synth: SynthConfig,
}

fn synth_data(args: SynthArgs, out: &Path, seed: u64) -> Outcome {
    let cfg = SynthConfig {
        samples: args.samples.unwrap_or(200),
        height: args.height.unwrap_or(32),
        width: args.width.unwrap_or(32),
        num_classes: args.classes.unwrap_or(5),
        modalities: args.num_modalities.unwrap_or(2),
        channels: args.channels.unwrap_or(3),
        seed,
        split: args.split.unwrap_or_else(|| "train".into()),
    };
    let dataset = generate_synthetic(&cfg)?;
    save_dataset(&dataset, out)?;
    let resolved = ResolvedSynth { seed, out: out.to_path_buf(), synth: cfg };
    write_text(&out.join("resolved_config.toml"), &to_toml(&resolved))?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrain {
    seed: u64,
    data: PathBuf,
    eval_data: Option<PathBuf>,
    out: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
}

fn train_cmd(margs: ModelArgs, targs: TrainArgs, paths: PathArgs, seed: u64) -> Outcome {
    let data_dir = require(paths.data, "data")?;
    let out = require(paths.out, "out")?;
    let train_set = load_dataset(&data_dir)?;
    let eval_set = paths.eval_data.as_deref().map(load_dataset).transpose()?;

    let names = margs
        .modalities
        .clone()
        .unwrap_or_else(|| train_set.modalities.iter().map(|m| m.name.clone()).collect());
    let modalities = names
        .iter()
        .map(|n| {
            let idx = train_set
                .modality_index(n)
                .ok_or_else(|| config_error(format!("dataset has no modality named {n:?}")))?;
            Ok(train_set.modalities[idx].clone())
        })
        .collect::<std::result::Result<Vec<_>, Failure>>()?;
    let stitch = if margs.no_stitch.unwrap_or(false) || modalities.len() < 2 {
        None
    } else {
        let density = DensityConfig::new(
            margs.density.unwrap_or(DensityVariant::PairBidirectional),
            margs.stages.clone().unwrap_or_else(|| vec![3, 4]),
        );
        Some(StitchConfig {
            density,
            bottleneck: margs.r.unwrap_or(DEFAULT_BOTTLENECK),
            adapter_dropout: margs.adapter_dropout.unwrap_or(DEFAULT_ADAPTER_DROPOUT),
        })
    };
    let preset = margs.preset.as_deref().unwrap_or("tiny");
    let model_config = ModelConfig {
        encoder: EncoderConfig::preset(preset)?,
        modalities,
        stitch,
        ffm: margs.ffm.unwrap_or(false),
        decoder_dim: margs.decoder_dim.unwrap_or(if preset == "tiny" { 64 } else { 256 }),
        num_classes: train_set.num_classes,
    };
    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        base_lr: targs.base_lr.unwrap_or(defaults.base_lr),
        warmup_epochs: targs.warmup_epochs.unwrap_or(defaults.warmup_epochs),
        decay_factor: targs.decay_factor.unwrap_or(defaults.decay_factor),
        epochs: targs.epochs.unwrap_or(defaults.epochs),
        batch_size: targs.batch_size.unwrap_or(defaults.batch_size),
        weight_decay: targs.weight_decay.unwrap_or(defaults.weight_decay),
        eval_every: targs.eval_every.unwrap_or(defaults.eval_every),
        seed,
        ..defaults
    };
    train_config.validate()?;
    let resolved = ResolvedTrain {
        seed,
        data: data_dir,
        eval_data: paths.eval_data,
        out: out.clone(),
        model: model_config.clone(),
        train: train_config.clone(),
    };
    fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
    write_text(&out.join("resolved_config.toml"), &to_toml(&resolved))?;

    let mut model = StitchModel::new(model_config, seed)?;
    let mut log = String::from("epoch,mean_loss,lr,eval_miou\n");
    let report = fit(&mut model, &train_set, eval_set.as_ref(), &train_config, |e| {
        let miou = e.eval_miou.map(|m| format!("{m:.4}")).unwrap_or_default();
        println!("epoch {:>3}  loss {:.5}  lr {:.3e}  mIoU {}", e.epoch, e.mean_loss, e.lr, miou);
        writeln!(log, "{},{},{},{}", e.epoch, e.mean_loss, e.lr, miou).unwrap();
    })?;
    write_text(&out.join("train_log.csv"), &log)?;
    save_checkpoint(&model, &out.join("checkpoint"), Scope::Full)?;
    if let Some(metrics) = &report.final_metrics {
        write_metrics(&out, metrics)?;
        println!("{metrics}");
    }
    Ok(())
}

fn write_metrics(out: &Path, metrics: &Metrics) -> Outcome {
    write_text(&out.join("metrics.txt"), &format!("{metrics}\n"))?;
    write_text(&out.join("metrics.csv"), &metrics.to_csv(&[]))
}

#[derive(Serialize)]
struct ResolvedEval {
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    model: ModelConfig,
}

fn eval_cmd(paths: PathArgs) -> Outcome {
    let checkpoint = require(paths.checkpoint, "checkpoint")?;
    let data = require(paths.data, "data")?;
    let out = require(paths.out, "out")?;
    let model = load_checkpoint(&checkpoint)?;
    let dataset = load_dataset(&data)?;
    let metrics = evaluate(&model, &dataset)?;
    let resolved = ResolvedEval { checkpoint, data, out: out.clone(), model: model.config().clone() };
    write_text(&out.join("resolved_config.toml"), &to_toml(&resolved))?;
    write_metrics(&out, &metrics)?;
    println!("{metrics}");
    Ok(())
}

fn param_count(args: CountArgs) -> Outcome {
    let encoder = EncoderConfig::preset(args.preset.as_deref().unwrap_or("b2-like"))?;
    let include_bias = args.include_bias.unwrap_or(false);
    let stages = args.stages.clone().unwrap_or_else(|| (1..=encoder.num_stages()).collect());
    let spec = CountSpec::from_encoder(
        &encoder,
        args.r.unwrap_or(DEFAULT_BOTTLENECK),
        args.modalities.unwrap_or(2),
        args.density.unwrap_or(DensityVariant::PairBidirectional),
        stages,
        include_bias,
    );
    spec.validate()?;
    let row = CountRow::compute(&spec)?;
    println!("{row}\n");
    print!("{}", row.to_key_values());
    let total = if include_bias { row.analytic_with_biases } else { row.analytic_without_biases };
    println!("total={total}");
    if row.agrees() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, message: "analytic and enumerated counts disagree".into() })
    }
}

fn grad_check(seed: u64, seeds: u64) -> Outcome {
    if seeds == 0 {
        return Err(config_error("--seeds must be at least 1"));
    }
    let list: Vec<u64> = (seed..seed + seeds).collect();
    let outcomes = gradient_suite(&list)?;
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        if !o.passed() {
            failed += 1;
        }
        println!(
            "{status:<4} {:<18} seed {:<4} max_rel_err {:.3e} ({} coords, worst {})",
            o.name,
            o.seed,
            o.report.max_rel_error,
            o.report.coordinates,
            o.report.worst.as_deref().unwrap_or("-")
        );
    }
    println!("{} checks, {failed} failed", outcomes.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, message: format!("{failed} gradient checks failed") })
    }
}

fn equiv_check(seed: u64, inputs: usize) -> Outcome {
    if inputs == 0 {
        return Err(config_error("--inputs must be at least 1"));
    }
    let report = equivalence_check(seed, inputs)?;
    println!(
        "shared vs pair-bi (2 modalities): identical={} max_diff={:.3e}",
        report.shared_vs_pair_identical, report.shared_vs_pair_max_diff
    );
    println!(
        "tied pair-uni (2 modalities):     identical={} max_diff={:.3e}",
        report.tied_unidirectional_identical, report.tied_unidirectional_max_diff
    );
    println!("shared vs pair-bi (3 modalities): max_diff={:.3e} (must be > 0)", report.three_modal_max_diff);
    let mut ok = report.passed();
    for variant in [DensityVariant::Shared, DensityVariant::PairBidirectional, DensityVariant::PairTwoUnidirectional] {
        for stages in [vec![1, 2, 3, 4], vec![3, 4], vec![1]] {
            let gap = transparency_gap(3, DensityConfig::new(variant, stages.clone()), Mode::Eval, seed)?;
            println!("zero adapters {variant:<8} stages {stages:?}: gap {gap:.3e}");
            ok &= gap == 0.0;
        }
    }
    if ok {
        println!("equivalence checks passed");
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, message: "equivalence checks failed".into() })
    }
}
