use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use oicr_core::ablation::{self, Axis};
use oicr_core::eval::{self, ApMode, EvalConfig, ScoreSource};
use oicr_core::io_util::write_atomic;
use oicr_core::netcore::{checkpoint, ModelParams};
use oicr_core::synthdata::{generate_dataset, load_dataset, save_dataset, Dataset, SceneConfig};
use oicr_core::trainer::{train_run, TrainConfig, DEFAULT_ITERATIONS};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "oicr",
    version,
    about = "Weakly supervised detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Compute mAP and CorLoc for a checkpoint.
    Eval(EvalArgs),
    /// Write detections for one or all images.
    Detect(DetectArgs),
    /// Write the top proposal of every positive class as pseudo ground truth.
    ExportPseudoGt(ExportArgs),
    /// Train and evaluate a grid of settings.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    proposals: usize,
    #[arg(long, default_value_t = 40)]
    feature_dim: usize,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Initialization and sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of refined classifiers.
    #[arg(long = "K", default_value_t = 3)]
    k: usize,
    /// IoU above which a proposal joins its top proposal's class.
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Drop the per-proposal loss weights.
    #[arg(long)]
    unweighted: bool,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::with_iterations(self.iters);
        cfg.seed = self.seed;
        cfg.oicr.refinements = self.k;
        cfg.oicr.iou_threshold = self.iou_threshold;
        cfg.oicr.weighted_loss = !self.unweighted;
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `model.ckpt` and `train_log.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Clone, Copy)]
struct EvalFlags {
    #[arg(long, default_value_t = eval::DEFAULT_NMS_THRESHOLD)]
    nms_threshold: f64,
    #[arg(long, value_enum, default_value_t = ApModeArg::Voc07)]
    ap_mode: ApModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApModeArg {
    Voc07,
    Area,
}

impl EvalFlags {
    fn config(&self, source: ScoreSource) -> EvalConfig {
        EvalConfig {
            nms_threshold: self.nms_threshold,
            ap_mode: match self.ap_mode {
                ApModeArg::Voc07 => ApMode::Voc07,
                ApModeArg::Area => ApMode::Area,
            },
            source,
        }
    }
}

/// Checkpoints without refined classifiers are scored by the MIDN.
fn source_for(params: &ModelParams) -> ScoreSource {
    if params.dims().refinements == 0 {
        ScoreSource::Midn
    } else {
        ScoreSource::Refined
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset for mAP.
    #[arg(long)]
    data: PathBuf,
    /// Dataset for CorLoc; defaults to `--data`.
    #[arg(long)]
    corloc_data: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Restrict to one image id.
    #[arg(long)]
    image: Option<u64>,
    /// Detections JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    /// Refinement count 0..=3.
    #[value(name = "K", alias = "k")]
    K,
    /// Weighted vs. unweighted loss.
    Loss,
    /// IoU threshold sweep.
    Iou,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset; CorLoc is measured here.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for mAP; defaults to `--data`.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Axes to sweep; all three when omitted.
    #[arg(long, value_enum)]
    axis: Vec<AxisArg>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
}

fn print_config(command: &str, config: &impl Serialize) {
    let json = serde_json::to_string(config).expect("configs serialize");
    eprintln!("config {command} {json}");
}

fn load(dir: &Path) -> Result<Dataset> {
    Ok(load_dataset(dir)?)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = SceneConfig {
        seed: args.seed,
        images: args.images,
        num_classes: args.classes,
        proposals_per_image: args.proposals,
        feature_dim: args.feature_dim,
        ..SceneConfig::default()
    };
    print_config("gen-data", &cfg);
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &args.out)?;
    println!("wrote {} images to {}", ds.bags.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.train.config();
    print_config("train", &cfg);
    let ds = load(&args.data)?;
    let (params, log) = train_run(&ds, &cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt = args.out.join("model.ckpt");
    checkpoint::save(&params, &ckpt)?;
    write_atomic(&args.out.join("train_log.csv"), log.to_csv().as_bytes())?;
    if let Some(last) = log.rows.last() {
        println!("iter {} loss {}", last.iter, last.loss.total);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRun<'a> {
    data: &'a Path,
    corloc_data: &'a Path,
    ckpt: &'a Path,
    eval: EvalConfig,
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let params = checkpoint::load(&args.ckpt)?;
    let cfg = args.eval.config(source_for(&params));
    let corloc_path = args.corloc_data.as_deref().unwrap_or(&args.data);
    print_config(
        "eval",
        &EvalRun {
            data: &args.data,
            corloc_data: corloc_path,
            ckpt: &args.ckpt,
            eval: cfg,
        },
    );
    let ds = load(&args.data)?;
    let corloc_ds = match &args.corloc_data {
        Some(p) => load(p)?,
        None => ds.clone(),
    };
    let report = eval::evaluate(&ds, &corloc_ds, &params, &cfg)?;
    emit(args.out.as_deref(), report.to_csv().as_bytes())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => {
            write_atomic(path, bytes)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", String::from_utf8_lossy(bytes)),
    }
    Ok(())
}

#[derive(Serialize)]
struct DetectRun<'a> {
    data: &'a Path,
    ckpt: &'a Path,
    image: Option<u64>,
    eval: EvalConfig,
}

fn detect(args: DetectArgs) -> Result<()> {
    let params = checkpoint::load(&args.ckpt)?;
    let cfg = args.eval.config(source_for(&params));
    print_config(
        "detect",
        &DetectRun {
            data: &args.data,
            ckpt: &args.ckpt,
            image: args.image,
            eval: cfg,
        },
    );
    let ds = load(&args.data)?;
    let bags: Vec<_> = ds
        .bags
        .iter()
        .filter(|b| args.image.is_none_or(|id| b.image_id == id))
        .collect();
    if let (Some(id), true) = (args.image, bags.is_empty()) {
        bail!("image {id} not found in {}", args.data.display());
    }
    let mut out = Vec::new();
    for bag in bags {
        let scores = eval::class_scores(bag, &params, cfg.source)?;
        out.extend(eval::detections_from_scores(
            bag,
            &scores,
            cfg.nms_threshold,
        ));
    }
    let json = serde_json::to_vec_pretty(&out)?;
    emit(args.out.as_deref(), &json)
}

#[derive(Serialize)]
struct ExportRun<'a> {
    data: &'a Path,
    ckpt: &'a Path,
    out: &'a Path,
    eval: EvalConfig,
}

fn export(args: ExportArgs) -> Result<()> {
    let params = checkpoint::load(&args.ckpt)?;
    let cfg = EvalFlags {
        nms_threshold: eval::DEFAULT_NMS_THRESHOLD,
        ap_mode: ApModeArg::Voc07,
    }
    .config(source_for(&params));
    print_config(
        "export-pseudo-gt",
        &ExportRun {
            data: &args.data,
            ckpt: &args.ckpt,
            out: &args.out,
            eval: cfg,
        },
    );
    let ds = load(&args.data)?;
    let boxes = eval::export_pseudo_gt(&ds, &params, &cfg, &args.out)?;
    println!("wrote {} boxes to {}", boxes.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AblateRun<'a> {
    data: &'a Path,
    test_data: &'a Path,
    cells: &'a [ablation::Cell],
    train: TrainConfig,
    eval: EvalConfig,
}

fn ablate(args: AblateArgs) -> Result<()> {
    let axes: Vec<Axis> = if args.axis.is_empty() {
        vec![Axis::Refinements, Axis::Loss, Axis::IouThreshold]
    } else {
        args.axis
            .iter()
            .map(|a| match a {
                AxisArg::K => Axis::Refinements,
                AxisArg::Loss => Axis::Loss,
                AxisArg::Iou => Axis::IouThreshold,
            })
            .collect()
    };
    let cells = ablation::grid(&axes, &args.seeds);
    let base = TrainConfig::with_iterations(args.iters);
    // the source is chosen per cell
    let eval_cfg = args.eval.config(ScoreSource::Refined);
    let test_path = args.test_data.as_deref().unwrap_or(&args.data);
    print_config(
        "ablate",
        &AblateRun {
            data: &args.data,
            test_data: test_path,
            cells: &cells,
            train: base.clone(),
            eval: eval_cfg,
        },
    );
    let train = load(&args.data)?;
    let test = match &args.test_data {
        Some(p) => load(p)?,
        None => train.clone(),
    };
    let mut results = Vec::with_capacity(cells.len());
    for cell in &cells {
        let (r, _, _) = ablation::run_cell(&train, &test, cell, &base, &eval_cfg)?;
        eprintln!(
            "cell K={} weighted={} I_t={} seed={} mAP={:.4} CorLoc={:.4}",
            cell.refinements, cell.weighted, cell.iou_threshold, cell.seed, r.map, r.corloc
        );
        results.push(r);
    }
    write_atomic(&args.out, ablation::to_csv(&results).as_bytes())?;
    println!("wrote {} rows to {}", results.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Detect(a) => detect(a),
        Command::ExportPseudoGt(a) => export(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// The error chain on one line, skipping causes already quoted by their
/// parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
