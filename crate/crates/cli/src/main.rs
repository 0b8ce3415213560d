mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amefu::classifier::Similarity;
use amefu::dgadain::{FeatureNorm, InitScheme};
use amefu::evaluator::{self, AblationAxes, DepthProbe, EvalConfig, EvalMode};
use amefu::featurestore::{self, Dataset, Split, SyntheticSpec};
use amefu::gradcheck::{self, GradcheckConfig};
use amefu::model::FusionKind;
use amefu::sampler::{AugmentMode, ClipConfig};
use amefu::trainer::{self, TrainConfig, UpdateMode};
use amefu::Error;
use clap::{Args, Parser, Subcommand};

/// Few-shot video recognition with depth-guided fusion of RGB and depth features.
#[derive(Debug, Parser)]
#[command(name = "amefu", version)]
struct Cli {
    /// Flat `key=value` file; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-stream dataset.
    GenData(GenDataArgs),
    /// Meta-train the fusion module on the base split.
    Train(TrainArgs),
    /// Evaluate on test episodes.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over a grid of settings; writes CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Seed for every random stream.
    #[arg(long, env = "AMEFU_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output dataset file; the split file is written next to it.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    videos_per_class: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    /// Feature width L of both streams.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Scale of the per-class RGB means.
    #[arg(long, default_value_t = 1.0)]
    rgb_sep: f64,
    /// Scale of the per-class depth means.
    #[arg(long, default_value_t = 1.0)]
    depth_sep: f64,
    /// Class pairs (2i, 2i+1) sharing the same RGB mean.
    #[arg(long, default_value_t = 5)]
    confusable_pairs: usize,
    #[arg(long, default_value_t = 0.5)]
    noise_std: f64,
    /// Per-frame random-walk step of the class mean.
    #[arg(long, default_value_t = 0.05)]
    drift_std: f64,
    #[arg(long, default_value_t = 0)]
    val_classes: usize,
    #[arg(long, default_value_t = 5)]
    novel_classes: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5, help = "Classes per episode [paper: 5]")]
    n_way: usize,
    #[arg(long, default_value_t = 1, help = "Support videos per class [paper: 1 for training; 1 and 5 at test]")]
    k_shot: usize,
    #[arg(long, default_value_t = 4, help = "Segments per clip [paper: 4]")]
    num_seg: usize,
    #[arg(long, default_value_t = 4, help = "Consecutive frames per segment [paper: 4]")]
    num_f: usize,
    /// pooled | per_frame
    #[arg(long, default_value = "pooled", value_parser = parse_norm)]
    feature_norm: FeatureNorm,
    /// cosine | euclidean
    #[arg(long, default_value = "cosine", value_parser = parse_from_str::<Similarity>)]
    similarity: Similarity,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct TrainOnlyArgs {
    #[arg(long, default_value_t = 6, help = "Training epochs [paper: 6]")]
    epochs: usize,
    /// Episodes per epoch [default: 2000, or 200 for synthetic-size datasets under 1000 videos] [paper: 2000]
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 2e-5, help = "Learning rate [paper: 2e-5]")]
    lr: f64,
    #[arg(long, default_value_t = 0.9, help = "SGD momentum [paper: 0.9]")]
    momentum: f64,
    #[arg(long, default_value_t = 0.1, help = "Learning-rate decay factor [paper: 0.1]")]
    lr_decay_factor: f64,
    /// Decay the learning rate every this many epochs [default: off] [paper: 3 for small datasets]
    #[arg(long)]
    lr_decay_after_epochs: Option<usize>,
    #[arg(long, default_value_t = 2, help = "Asynchronized extra pairs per video [paper: 2]")]
    num_aug: usize,
    /// depth_only | both
    #[arg(long, default_value = "depth_only", value_parser = parse_from_str::<AugmentMode>)]
    augment: AugmentMode,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// default | identity
    #[arg(long, default_value = "default", value_parser = parse_from_str::<InitScheme>)]
    init: InitScheme,
    /// per_pair | accumulate
    #[arg(long, default_value = "per_pair", value_parser = parse_from_str::<UpdateMode>)]
    update: UpdateMode,
    /// Rescale gradients to at most this norm [default: off]
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    /// Validation episodes after every epoch; 0 disables
    #[arg(long, default_value_t = 0)]
    val_episodes: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file written by gen-data.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out_dir: PathBuf,
    /// dgadain | rgb_guide_depth | two_way
    #[arg(long, default_value = "dgadain", value_parser = parse_from_str::<FusionKind>)]
    mode: FusionKind,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    train: TrainOnlyArgs,
}

#[derive(Debug, Args)]
struct EvalOnlyArgs {
    #[arg(long, default_value_t = 10_000, help = "Test episodes [paper: 10000]")]
    episodes: usize,
    /// base | val | novel
    #[arg(long, default_value = "novel", value_parser = parse_from_str::<Split>)]
    split: Split,
    /// matched | shifted (depth clip placed at random, an extension of the protocol)
    #[arg(long, default_value = "matched", value_parser = parse_from_str::<DepthProbe>)]
    probe: DepthProbe,
    /// Evaluate episodes on one thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Parameter checkpoint; not needed for rgb_only and concat.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// dgadain | rgb_only | concat | rgb_guide_depth | two_way
    #[arg(long, default_value = "dgadain", value_parser = parse_from_str::<EvalMode>)]
    mode: EvalMode,
    /// Also write the result as a one-row CSV.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    eval: EvalOnlyArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Finite-difference step; above 1e-4 the threshold is not enforced.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Random instances per suite.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,
    /// Normalize each frame before pooling.
    #[arg(long)]
    per_frame: bool,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Sweep axis `key=v1,v2,..` or `key=a..b` with key mode, num_aug or k_shot. Repeatable.
    #[arg(long, value_name = "KEY=VALUES")]
    axis: Vec<String>,
    /// Mode used when mode is not an axis.
    #[arg(long, default_value = "dgadain", value_parser = parse_from_str::<EvalMode>)]
    mode: EvalMode,
    /// CSV output; printed to stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    train: TrainOnlyArgs,
    #[command(flatten)]
    eval: EvalOnlyArgs,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_norm(s: &str) -> Result<FeatureNorm, String> {
    match s {
        "pooled" => Ok(FeatureNorm::Pooled),
        "per_frame" => Ok(FeatureNorm::PerFrame),
        other => Err(format!("unknown feature normalization `{other}`")),
    }
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Sampling(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

type CmdResult = Result<(), Failure>;

fn load(path: &Path) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(usage(format!(
            "dataset file {} does not exist (create one with `amefu gen-data --out {}`)",
            path.display(),
            path.display()
        )));
    }
    Ok(featurestore::read_dataset(path)?.load_all()?)
}

fn gen_data(a: &GenDataArgs) -> CmdResult {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        videos_per_class: a.videos_per_class,
        t: a.frames,
        l: a.dim,
        rgb_sep: a.rgb_sep,
        depth_sep: a.depth_sep,
        confusable_pairs: a.confusable_pairs,
        noise_std: a.noise_std,
        drift_std: a.drift_std,
        n_val: a.val_classes,
        n_novel: a.novel_classes,
        seed: a.seed.seed,
    };
    println!("seed={}", spec.seed);
    let (records, splits) = featurestore::generate_synthetic(&spec)?;
    let summary = featurestore::write_dataset(&records, &splits, &a.out)?;
    println!("wrote {} and {}", a.out.display(), featurestore::splits_path(&a.out).display());
    println!("{summary}");
    Ok(())
}

/// Below this many videos, an unset episodes-per-epoch shrinks to 200.
const SMALL_DATASET_VIDEOS: usize = 1000;

fn train_config(e: &EpisodeArgs, t: &TrainOnlyArgs, fusion: FusionKind, dataset: &Dataset) -> TrainConfig {
    let episodes_per_epoch = t.episodes_per_epoch.unwrap_or_else(|| {
        if dataset.manifest().len() < SMALL_DATASET_VIDEOS {
            println!(
                "note: dataset has {} videos, episodes per epoch shrunk from 2000 to 200",
                dataset.manifest().len()
            );
            200
        } else {
            2000
        }
    });
    TrainConfig {
        n_way: e.n_way,
        k_shot: e.k_shot,
        epochs: t.epochs,
        episodes_per_epoch,
        lr: t.lr,
        momentum: t.momentum,
        lr_decay_factor: t.lr_decay_factor,
        lr_decay_after_epochs: t.lr_decay_after_epochs,
        clips: ClipConfig {
            num_seg: e.num_seg,
            num_f: e.num_f,
            num_aug: t.num_aug,
            augment: t.augment,
        },
        seed: e.seed.seed,
        eps: t.eps,
        init: t.init,
        fusion,
        update: t.update,
        clip_grad_norm: t.clip_grad_norm,
        feature_norm: e.feature_norm,
        similarity: e.similarity,
        split: Split::Base,
        val_episodes: t.val_episodes,
    }
}

fn eval_config(e: &EpisodeArgs, v: &EvalOnlyArgs, mode: EvalMode) -> EvalConfig {
    EvalConfig {
        n_way: e.n_way,
        k_shot: e.k_shot,
        episodes: v.episodes,
        split: v.split,
        mode,
        seed: e.seed.seed,
        probe: v.probe,
        num_seg: e.num_seg,
        num_f: e.num_f,
        feature_norm: e.feature_norm,
        similarity: e.similarity,
        parallel: !v.serial,
    }
}

fn train(a: &TrainArgs) -> CmdResult {
    let dataset = load(&a.data)?;
    let cfg = train_config(&a.episode, &a.train, a.mode, &dataset);
    println!("seed={}", cfg.seed);
    println!("config {cfg:?}");
    let out = trainer::train(&cfg, &dataset, Some(&a.out_dir))?;

    let log_path = a.out_dir.join("train.log");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    for entry in &out.log {
        writeln!(log, "{entry}")?;
    }
    log.flush()?;
    for (epoch, report) in &out.validation {
        println!("validation epoch={epoch} acc={:.6} ci95={:.6}", report.accuracy, report.ci95);
    }
    println!(
        "trained {} episodes, {} updates, mean loss {:.6}, train accuracy {:.4}",
        out.state.episodes,
        out.state.updates,
        out.state.mean_loss(),
        out.state.accuracy()
    );
    println!("log {}", log_path.display());
    if let Some(last) = out.checkpoints.last() {
        println!("checkpoint {}", last.display());
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> CmdResult {
    let dataset = load(&a.data)?;
    let cfg = eval_config(&a.episode, &a.eval, a.mode);
    let model = match (a.mode.fusion(), &a.checkpoint) {
        (Some(kind), Some(path)) => Some(trainer::load_model(path, kind)?),
        (Some(_), None) => return Err(usage(format!("mode {} needs --checkpoint", a.mode))),
        (None, _) => None,
    };
    println!("seed={}", cfg.seed);
    let report = evaluator::evaluate(model.as_ref(), &dataset, &cfg)?;
    print!("{report}");
    println!("{}", report.result_line());
    if let Some(path) = &a.out {
        let row = format!(
            "{},,{},{},{:.6},{:.6}\n",
            report.mode, report.k_shot, report.episodes, report.accuracy, report.ci95
        );
        fs::write(path, format!("{}\n{row}", evaluator::ABLATION_CSV_HEADER))?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let cfg = GradcheckConfig {
        seed: a.seed.seed,
        instances: a.instances,
        h: a.h,
        norm: if a.per_frame { FeatureNorm::PerFrame } else { FeatureNorm::Pooled },
        ..GradcheckConfig::default()
    };
    println!("seed={} h={:e} instances={}", cfg.seed, cfg.h, cfg.instances);
    let results = gradcheck::run(&cfg)?;
    let enforce = cfg.h <= 1e-4;
    if !enforce {
        eprintln!("warning: h={:e} is a diagnostic step; the {:e} threshold is not enforced", cfg.h, a.threshold);
    }
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.worst < a.threshold;
        println!(
            "gradient {}.{} worst_rel_err={:.3e} instance={} {}",
            r.suite,
            r.name,
            r.worst,
            r.instance,
            match (enforce, ok) {
                (false, _) => "unchecked",
                (true, true) => "pass",
                (true, false) => "FAIL",
            }
        );
        if enforce && !ok {
            failed.push(format!(
                "{}.{} (seed {}, instance {}, error {:.3e})",
                r.suite, r.name, cfg.seed, r.instance, r.worst
            ));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

fn parse_values(spec: &str) -> Vec<String> {
    if let Some((lo, hi)) = spec.split_once("..") {
        if let (Ok(lo), Ok(hi)) = (lo.trim().parse::<usize>(), hi.trim().parse::<usize>()) {
            return (lo..=hi).map(|v| v.to_string()).collect();
        }
    }
    spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn parse_axes(raw: &[String]) -> Result<AblationAxes, Failure> {
    let mut axes = AblationAxes::default();
    for item in raw {
        let (key, values) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("axis `{item}` is not of the form key=values")))?;
        let values = parse_values(values);
        if values.is_empty() {
            return Err(usage(format!("axis `{key}` has no values")));
        }
        let numbers = || {
            values
                .iter()
                .map(|v| v.parse::<usize>().map_err(|_| usage(format!("axis `{key}`: `{v}` is not a count"))))
                .collect::<Result<Vec<_>, _>>()
        };
        match key.trim() {
            "mode" => {
                axes.modes = values
                    .iter()
                    .map(|v| v.parse::<EvalMode>().map_err(Failure::from))
                    .collect::<Result<_, _>>()?
            }
            "num_aug" => axes.num_aug = numbers()?,
            "k_shot" => axes.k_shot = numbers()?,
            other => return Err(usage(format!("unknown axis `{other}` (expected mode, num_aug or k_shot)"))),
        }
    }
    Ok(axes)
}

fn ablate(a: &AblateArgs) -> CmdResult {
    let axes = parse_axes(&a.axis)?;
    let dataset = load(&a.data)?;
    let train_cfg = train_config(&a.episode, &a.train, FusionKind::DepthGuided, &dataset);
    let eval_cfg = eval_config(&a.episode, &a.eval, a.mode);
    println!("seed={}", train_cfg.seed);
    let rows = evaluator::ablate(&dataset, &train_cfg, &eval_cfg, &axes)?;
    for row in &rows {
        println!("{} num_aug={} probe={}", row.report.result_line(), row.num_aug, row.report.probe);
    }
    let csv = evaluator::ablation_csv(&rows);
    match &a.out {
        Some(path) => {
            fs::write(path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(args) => args,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == 2 {
                eprintln!("run `amefu --help` for usage");
            }
            ExitCode::from(f.code)
        }
    }
}
