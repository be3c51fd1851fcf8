use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fsaf_core::ablation::{detect_dataset, run_ablation, AblationConfig};
use fsaf_core::data::{make_synthetic, AnnotationFile, Dataset, SynthConfig};
use fsaf_core::detector::{build_model, Branches, ModelConfig, ModelParams};
use fsaf_core::eval::{evaluate, ImageDetections};
use fsaf_core::exec::Execution;
use fsaf_core::gradcheck::{gradient_check, tiny_batch, tiny_config, GradCheckConfig};
use fsaf_core::inference::DetectOptions;
use fsaf_core::selection::{annotate_agreement, heuristic_select};
use fsaf_core::targets::{generate_targets, Assignment, TargetParams};
use fsaf_core::train::{head_maps, select_levels, write_loss_log, Objective, SelectionMode, TrainConfig, Trainer};

/// Feature-selective anchor-free detection toolkit.
///
/// Set FSAF_THREADS to cap worker threads (0 or unset = one per core).
#[derive(Parser)]
#[command(name = "fsaf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rectangle dataset (PPM images + annotations.json).
    MakeSynth(MakeSynthArgs),
    /// Dump anchor-free training targets of one image as PGM and binary files.
    GenTargets(GenTargetsArgs),
    /// Compare online and heuristic level selection per instance.
    Select(SelectArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Run a model over a dataset and write detections JSON.
    Infer(InferArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Finite-difference check of backpropagation on a fresh tiny model.
    Gradcheck(GradcheckArgs),
    /// Train and compare the four branch / selection variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    first_id: Option<u64>,
}

#[derive(Args)]
struct GenTargetsArgs {
    /// annotations.json of the dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    image_id: u64,
    #[arg(long)]
    out: PathBuf,
    /// Select levels online with this model instead of by box size.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    l0: i64,
    #[arg(long, default_value_t = 3)]
    min_level: u32,
    #[arg(long, default_value_t = 5)]
    max_level: u32,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model; a freshly initialized one is used when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Initialization seed of the fresh model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    l0: i64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Run without data parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    AnchorFree,
    AnchorBased,
    Both,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Branches to decode; defaults to every branch the model has.
    #[arg(long, value_enum)]
    branches: Option<BranchArg>,
    #[arg(long, default_value_t = 0.05)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_threshold: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write the report as JSON here instead of printing it.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    images: usize,
    #[arg(long, default_value_t = 240)]
    samples: usize,
    /// Deliberately distort the gradient of tensors with this name prefix.
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// First of three training seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<fsaf_core::Error> for Failure {
    fn from(e: fsaf_core::Error) -> Self {
        match e {
            fsaf_core::Error::NonFinite { .. } => Failure::Numerical(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<fsaf_core::Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Data(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn make_synth(a: MakeSynthArgs) -> Outcome {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.num_images = a.count.unwrap_or(cfg.num_images);
    cfg.image_size = a.size.unwrap_or(cfg.image_size);
    cfg.num_classes = a.classes.unwrap_or(cfg.num_classes);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.first_id = a.first_id.unwrap_or(cfg.first_id);
    let ds = make_synthetic(&cfg)?;
    let path = ds.save(&a.out)?;
    println!("{} images, {} instances -> {}", ds.len(), ds.annotations.instances.len(), path.display());
    Ok(())
}

fn image_index(ds: &Dataset, id: u64) -> anyhow::Result<usize> {
    ds.annotations
        .images
        .iter()
        .position(|im| im.id == id)
        .with_context(|| format!("no image with id {id}"))
}

fn load_model(path: &Path) -> anyhow::Result<ModelParams<f32>> {
    ModelParams::load(path).with_context(|| format!("loading model {}", path.display()))
}

/// Per-instance online selections of `model` on image `n`.
fn online_levels(
    model: &ModelParams<f32>,
    ds: &Dataset,
    n: usize,
    objective: &Objective,
) -> Result<Vec<fsaf_core::selection::SelectionResult>, Failure> {
    if !model.config.branches.anchor_free() {
        return Err(Failure::Data(anyhow::anyhow!("online selection needs a model with anchor-free heads")));
    }
    let img = &ds.images[n];
    let boxes = ds.annotations.boxes_for(ds.annotations.images[n].id)?;
    let preds = model.forward(&[img.to_tensor()])?.remove(0);
    let pyramid = model.config.pyramid(img.height, img.width);
    let maps = head_maps(&preds, model.config.num_classes);
    Ok(select_levels(&boxes, &maps, &pyramid, objective)?)
}

#[derive(Serialize)]
struct TargetDumpIndex {
    image_id: u64,
    levels: Vec<u32>,
    assignment: Vec<u32>,
    files: Vec<String>,
}

fn gen_targets(a: GenTargetsArgs) -> Outcome {
    let ds = Dataset::load(&a.data)?;
    let n = image_index(&ds, a.image_id)?;
    let img = &ds.images[n];
    let boxes = ds.annotations.boxes_for(a.image_id)?;
    let k = ds.annotations.num_classes;
    let (pyramid, assignment) = match &a.model {
        Some(p) => {
            let model = load_model(p)?;
            let obj = Objective {
                selection: SelectionMode::Online,
                ..Objective::default()
            };
            let sel = online_levels(&model, &ds, n, &obj)?;
            (model.config.pyramid(img.height, img.width), sel.iter().map(|s| s.level).collect())
        }
        None => {
            let cfg = ModelConfig {
                min_level: a.min_level,
                max_level: a.max_level,
                ..ModelConfig::default()
            };
            cfg.validate()?;
            let pyramid = cfg.pyramid(img.height, img.width);
            let levels = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| heuristic_select(i, b.w, b.h, a.l0, &pyramid).map(|s| s.level))
                .collect::<fsaf_core::Result<Vec<_>>>()?;
            (pyramid, levels)
        }
    };
    let params = TargetParams::default();
    let targets = generate_targets(&boxes, &Assignment(assignment.clone()), &pyramid, k, &params)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> anyhow::Result<()> {
        fs::write(a.out.join(&name), bytes).with_context(|| format!("writing {name}"))?;
        files.push(name);
        Ok(())
    };
    for (cls, reg) in targets.classes.iter().zip(&targets.regression) {
        for c in 0..k {
            put(format!("cls_P{}_c{}.pgm", cls.level, c), &cls.to_pgm(c))?;
        }
        put(format!("offsets_P{}.bin", reg.level), &reg.offsets_le_bytes())?;
        let header = serde_json::to_vec_pretty(&reg.dump_header(params.normalizer)).map_err(anyhow::Error::from)?;
        put(format!("offsets_P{}.json", reg.level), &header)?;
    }
    let index = TargetDumpIndex {
        image_id: a.image_id,
        levels: pyramid.levels().collect(),
        assignment,
        files,
    };
    write_json(&a.out.join("index.json"), &index)?;
    println!("{} files -> {}", index.files.len() + 1, a.out.display());
    Ok(())
}

fn select(a: SelectArgs) -> Outcome {
    let ds = Dataset::load(&a.data)?;
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => build_model(
            &ModelConfig {
                num_classes: ds.annotations.num_classes,
                ..ModelConfig::default()
            },
            a.seed,
        )?,
    };
    let obj = Objective {
        selection: SelectionMode::Online,
        heuristic_l0: a.l0,
        ..Objective::default()
    };
    let per_image = Execution::default().map_indexed(ds.len(), |n| -> Result<_, Failure> {
        let img = &ds.images[n];
        let pyramid = model.config.pyramid(img.height, img.width);
        let boxes = ds.annotations.boxes_for(ds.annotations.images[n].id)?;
        let online = online_levels(&model, &ds, n, &obj)?;
        let heuristic = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| heuristic_select(i, b.w, b.h, a.l0, &pyramid))
            .collect::<fsaf_core::Result<Vec<_>>>()?;
        Ok((online, heuristic))
    });
    let (mut online, mut heuristic) = (Vec::new(), Vec::new());
    let mut next_id = 0;
    println!("id,online_level,heuristic_level,agreement");
    for r in per_image {
        let (o, h) = r?;
        for (mut o, mut h) in o.into_iter().zip(h) {
            // Renumber instances across images so the ids match annotation order.
            (o.instance, h.instance) = (next_id, next_id);
            next_id += 1;
            let same = o.level == h.level;
            println!("{},{},{},{}", o.instance, o.level, h.level, if same { "agree" } else { "disagree" });
            online.push(o);
            heuristic.push(h);
        }
    }
    let stats = annotate_agreement(&mut online, &mut heuristic)?;
    println!(
        "summary,total={},agree={},disagree={},disagreement_rate={:.4}",
        stats.total, stats.agree, stats.disagree, stats.disagreement_rate
    );
    for ((ol, hl), count) in &stats.contingency {
        println!("contingency,online=P{ol},heuristic=P{hl},count={count}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    let ds = Dataset::load(&a.data)?;
    if cfg.model.num_classes != ds.annotations.num_classes {
        log::warn!(
            "model.num_classes = {} replaced by the dataset's {}",
            cfg.model.num_classes,
            ds.annotations.num_classes
        );
        cfg.model.num_classes = ds.annotations.num_classes;
    }
    let samples = ds.samples()?;
    let exec = if a.sequential { Execution::Sequential } else { Execution::default() };
    let mut trainer = Trainer::new(cfg, exec)?;
    let every = (trainer.config().iterations / 20).max(1);
    let log = trainer.run(&samples, |s| {
        if s.iteration % every == 0 {
            log::info!("iteration {} lr {:.5} loss {:.4}", s.iteration, s.lr, s.loss.total);
        }
    })?;
    trainer.params().save(&a.out)?;
    if let Some(p) = &a.loss_log {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_loss_log(std::io::BufWriter::new(f), &log)?;
    }
    if let Some(last) = log.last() {
        println!("trained {} iterations, final loss {:.4} -> {}", log.len(), last.loss.total, a.out.display());
    }
    Ok(())
}

fn infer(a: InferArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let ds = Dataset::load(&a.data)?;
    let mut opts = DetectOptions::default();
    opts.decode.score_threshold = a.score_threshold;
    opts.nms_threshold = a.nms_threshold;
    if let Some(b) = a.branches {
        let b = match b {
            BranchArg::AnchorFree => Branches::AnchorFree,
            BranchArg::AnchorBased => Branches::AnchorBased,
            BranchArg::Both => Branches::Both,
        };
        opts.anchor_free = b.anchor_free();
        opts.anchor_based = b.anchor_based();
    }
    let dets = detect_dataset(&model, &ds, &opts, Execution::default())?;
    write_json(&a.out, &dets)?;
    let total: usize = dets.iter().map(|d| d.detections.len()).sum();
    println!("{total} detections on {} images -> {}", dets.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let dets: Vec<ImageDetections> = read_json(&a.detections)?;
    let ann = AnnotationFile::read(&a.data)?;
    let report = evaluate(&dets, &ann, Execution::default())?;
    print!("{report}");
    match &a.json {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.classes == 0 || a.images == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--classes and --images must be positive")));
    }
    let params = build_model::<f64>(&tiny_config(a.classes), a.seed)?;
    let batch = tiny_batch(a.images, a.classes, a.seed + 1)?;
    let cfg = GradCheckConfig {
        samples: a.samples,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&params, &batch, &Objective::default(), &cfg, a.corrupt.as_deref())?;
    println!(
        "parameters {}  probes {}  kinked {}  max relative error {:.3e}  tolerance {:.0e}",
        report.parameters, report.probes, report.kinked, report.max_rel_error, report.tolerance
    );
    for (name, e) in &report.per_tensor {
        println!("  {name:<28} {e:.3e}");
    }
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Numerical(anyhow::anyhow!(
            "gradient check failed: max relative error {:.3e} in {}",
            report.max_rel_error,
            report.worst_layer
        )))
    }
}

fn ablate(a: AblateArgs) -> Outcome {
    let mut cfg: AblationConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AblationConfig::default(),
    };
    cfg.seeds = vec![a.seed, a.seed + 1, a.seed + 2];
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.train_set.num_images = a.train_images.unwrap_or(cfg.train_set.num_images);
    cfg.test_set.num_images = a.test_images.unwrap_or(cfg.test_set.num_images);
    cfg.train.validate()?;
    let report = run_ablation(&cfg, Execution::default())?;
    print!("{report}");
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("FSAF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(anyhow::anyhow!("FSAF_THREADS must be a non-negative integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.into()))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    match cli.command {
        Command::MakeSynth(a) => make_synth(a),
        Command::GenTargets(a) => gen_targets(a),
        Command::Select(a) => select(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numerical(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
