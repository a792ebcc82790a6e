//! `extremec3` command-line front end.
//!
//! Logging goes to stderr and follows `RUST_LOG` (default `info`).
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use extremec3::complexity::{count_flops, report_table, CountMode, TableFormat, PUBLISHED};
use extremec3::data::image_io::{write_mask, write_rgb};
use extremec3::data::synthetic::write_dataset;
use extremec3::data::{
    augment, augment_seed, face_crop_generate, load_attributes, load_boxes, load_dataset, Dataset, Sample,
};
use extremec3::error::{Error, Result};
use extremec3::network::{ExtremeC3Net, Head, NetworkSpec};
use extremec3::tensor::Shape;
use extremec3::train::{
    evaluate_head, group_rows, load_checkpoint, render_group_table, save_checkpoint, split_validation, train_stage,
    Config, CsvSink, EpochRecord, MetricsSink, SampleValidator, Stage,
};

#[derive(Parser)]
#[command(name = "extremec3", version, about = "Train, evaluate and analyze ExtremeC3Net portrait segmentation")]
struct Cli {
    /// Worker threads for data and evaluation parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; writes the best checkpoint to `<out>/model.ckpt`.
    Train(TrainArgs),
    /// mIoU of a checkpoint on a dataset, optionally grouped by attributes.
    Eval(EvalArgs),
    /// Parameter and FLOPs accounting per layer.
    Analyze(AnalyzeArgs),
    /// Face-box crops of a dataset, written as a new dataset.
    Generate(GenerateArgs),
    /// Writes augmented image/mask pairs for inspection.
    AugmentPreview(PreviewArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Coarse,
    Full,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with `images/` and `masks/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    /// Checkpoint to start from; the usual input for `--stage full`.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Per-epoch `epoch,stage,loss,miou` rows.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Coarse,
    Full,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `id,race,gender,age` table; overrides `<data>/attributes.csv`.
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    head: HeadArg,
    /// Input normalization from the `[data]` section.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    All,
    #[value(name = "conv_bn")]
    ConvBn,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// `HxW`, both divisible by 4.
    #[arg(long, default_value = "224x224", value_parser = parse_size)]
    input_size: (usize, usize),
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    /// Network section taken from this config instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    data: PathBuf,
    /// `id,x,y,w,h` face boxes.
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resize crops to `HxW`.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Crop ratios from the `[data]` section.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Augmented copies per sample.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Output `HxW`; defaults to each sample's own size.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 for usage errors and 0 for --help/--version.
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Generate(a) => generate(a),
        Command::AugmentPreview(a) => preview(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    t.epochs_stage1 = a.epochs_stage1.unwrap_or(t.epochs_stage1);
    t.epochs_stage2 = a.epochs_stage2.unwrap_or(t.epochs_stage2);
    t.seed = a.seed.unwrap_or(t.seed);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.resolution = a.resolution.unwrap_or(t.resolution);
    cfg.validate()?;

    let dataset = load_dataset(&a.data)?;
    info!("{} training images ({} skipped)", dataset.len(), dataset.skipped.len());
    let mut net = match &a.init {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut net = ExtremeC3Net::build(&cfg.training_spec(), cfg.train.seed)?;
            ck.restore(&mut net)?;
            net
        }
        None => {
            if a.stage == StageArg::Full {
                warn!("--stage full without --init starts from a fresh network");
            }
            ExtremeC3Net::build(&cfg.training_spec(), cfg.train.seed)?
        }
    };

    let (train_set, val) = split_validation(&dataset.samples, cfg.train.val_fraction, cfg.train.seed);
    let res = cfg.train.resolution;
    let val: Vec<Sample> = val.iter().map(|s| s.resized(res, res)).collect::<Result<_>>()?;
    let mut validator = SampleValidator { samples: &val, norm: cfg.data.normalization };

    create_dir(&a.out)?;
    let mut csv;
    let mut records: Vec<EpochRecord> = Vec::new();
    let sink: &mut dyn MetricsSink = match &a.metrics {
        Some(path) => {
            csv = CsvSink::create(path)?;
            &mut csv
        }
        None => &mut records,
    };

    let stages: &[Stage] = match a.stage {
        StageArg::Coarse => &[Stage::Coarse],
        StageArg::Full => &[Stage::Full],
        StageArg::Both => &[Stage::Coarse, Stage::Full],
    };
    let mut best = None;
    for &stage in stages {
        let ck = train_stage(&mut net, &train_set, &mut validator, &cfg, stage, sink)?;
        if a.stage == StageArg::Both && stage == Stage::Coarse {
            save_checkpoint(&ck, &a.out.join("coarse.ckpt"))?;
        }
        best = Some(ck);
    }
    let best = best.expect("at least one stage runs");
    let path = a.out.join("model.ckpt");
    save_checkpoint(&best, &path)?;
    println!(
        "best {} epoch {} mIoU {:.4} -> {}",
        best.stage.map_or("-".to_string(), |s| s.to_string()),
        best.epoch,
        best.best_miou.unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let net = ck.to_network()?;
    let mut ds = load_dataset(&a.data)?;
    if let Some(path) = &a.attributes {
        ds.attach_attributes(&load_attributes(path)?);
    }
    let [h, w] = net.spec().input_size;
    let ds = ds.resized(h, w)?;
    let norm = load_config(a.config.as_deref())?.data.normalization;
    let head = match a.head {
        HeadArg::Coarse => Head::Coarse,
        HeadArg::Full => Head::Full,
    };
    let mut r = evaluate_head(&net, &ds.samples, &norm, head)?;
    println!("images {}", ds.len());
    for (c, iou) in r.class_iou.iter().enumerate() {
        println!("class {c} IoU {iou:.4}");
    }
    println!("mIoU {:.4}", r.miou);
    if ds.samples.iter().any(|s| s.attributes.is_some()) {
        r.groups = group_rows(&r, &ds);
        println!();
        print!("{}", render_group_table(&r));
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let spec = match &a.config {
        Some(path) => Config::load(path)?.network,
        None => NetworkSpec::default(),
    };
    let (h, w) = a.input_size;
    let net = ExtremeC3Net::build(&spec.with_input_size(h, w), 0)?;
    let report = count_flops(net.graph(), Shape::new(1, 3, h, w)?)?;
    let format = match a.format {
        FormatArg::Text => TableFormat::Text,
        FormatArg::Csv => TableFormat::Csv,
    };
    let reference = (h, w) == (224, 224);
    print!("{}", report_table(&report, format, reference.then_some(&PUBLISHED)));
    if matches!(a.format, FormatArg::Text) {
        let modes: &[CountMode] = match a.mode {
            ModeArg::All => &[CountMode::All],
            ModeArg::ConvBn => &[CountMode::ConvBn],
            ModeArg::Both => &[CountMode::All, CountMode::ConvBn],
        };
        for &m in modes {
            println!("flops ({m}) {}", report.flops(m));
        }
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = load_dataset(&a.data)?;
    let boxes = load_boxes(&a.boxes)?;
    let mut out = Dataset::default();
    let mut review = Vec::new();
    for b in &boxes {
        let Some(sample) = ds.get(&b.id) else {
            warn!("box for unknown id `{}`", b.id);
            continue;
        };
        let g = face_crop_generate(sample, b, &cfg.data.crop, a.size)?;
        if g.needs_review {
            review.push(b.id.clone());
        }
        out.samples.push(g.sample);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no box matched a dataset id".into()));
    }
    create_dir(&a.out)?;
    write_dataset(&a.out, &out)?;
    println!("{} crops written to {}", out.len(), a.out.display());
    if !review.is_empty() {
        println!("needs review (empty mask): {}", review.join(", "));
    }
    Ok(())
}

fn preview(a: PreviewArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = load_dataset(&a.data)?;
    let (images, masks) = (a.out.join("images"), a.out.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    let mut written = 0;
    for (i, s) in ds.samples.iter().enumerate() {
        let (h, w) = a.size.unwrap_or((s.height(), s.width()));
        for k in 0..a.count {
            let seed = augment_seed(a.seed, k as u64, i as u64);
            let (out, params) = augment(s, &cfg.augment, seed, h, w)?;
            let name = format!("{}_{k:02}.png", s.id);
            write_rgb(&images.join(&name), &out.image)?;
            write_mask(&masks.join(&name), &out.mask)?;
            log::debug!("{name}: {params:?}");
            written += 1;
        }
    }
    println!("{written} augmented pairs written to {}", a.out.display());
    Ok(())
}
