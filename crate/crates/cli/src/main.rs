//! `mocnn`: generate synthetic datasets, train, transfer, evaluate and sweep.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mocnn_core::datastore::Corpus;
use mocnn_core::eval::{self, DEFAULT_SWEEP_COUNTS};
use mocnn_core::synth::{generate_dataset, SceneConfig};
use mocnn_core::train::{self, TrainConfig};
use mocnn_core::{Error, MultiObjectiveNet, RobotModel};

#[derive(Parser)]
#[command(name = "mocnn", version, about = "Multi-objective CNN for robot-arm perception")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset.
    Gen(GenArgs),
    /// Train a network from scratch.
    Train(TrainArgs),
    /// Transfer a pretrained network to a new robot family.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Transfer runs over growing numbers of training samples.
    Sweep(SweepArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Robot family: ur3like, ur5like, ur10like or kukalike.
    #[arg(long)]
    robot: RobotModel,
    /// Number of samples to render.
    #[arg(long)]
    n: usize,
    /// Base seed; per-sample seeds and the train/test split derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Draw an inert second robot in the background of the color images.
    #[arg(long)]
    distractor: bool,
}

#[derive(Args, Serialize)]
struct TrainingFlags {
    /// JSON file overriding fields of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset directories; several are pooled into one corpus.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Use only this many training samples (a seeded subset).
    #[arg(long)]
    samples: Option<usize>,
    /// Run directory for checkpoints, logs and the report.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args, Serialize)]
struct TransferArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    from: PathBuf,
    /// Dataset directories of the new robot family.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Use only this many training samples (a seeded subset).
    #[arg(long)]
    samples: Option<usize>,
    /// Run directory for checkpoints, logs and the report.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directories; the test split is evaluated.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    from: PathBuf,
    /// Dataset directories of the new robot family.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Training-sample counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_COUNTS)]
    counts: Vec<usize>,
    /// Output directory for sweep.csv and sweep.svg.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Serialize)]
struct Snapshot<'a, A: Serialize> {
    command: &'a str,
    created_unix_ms: u128,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<&'a TrainConfig>,
}

/// Creates `dir` and writes a timestamped config snapshot that is never
/// overwritten.
fn open_run_dir<A: Serialize>(dir: &Path, command: &str, args: &A, config: Option<&TrainConfig>) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let created_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH)?.as_millis();
    let snapshot = Snapshot {
        command,
        created_unix_ms,
        args,
        train_config: config,
    };
    let json = serde_json::to_string_pretty(&snapshot)?;
    let mut stamp = created_unix_ms;
    loop {
        let path = dir.join(format!("config-{stamp}.json"));
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{json}")?;
                return Ok(());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => stamp += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

fn resolve_config(base: TrainConfig, flags: &TrainingFlags) -> anyhow::Result<TrainConfig> {
    let mut config = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            let mut value = serde_json::to_value(&base)?;
            merge(&mut value, serde_json::from_str(&text)?);
            serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if let Some(epochs) = flags.epochs {
        config.epochs = epochs;
    }
    if let Some(b) = flags.batch_size {
        config.batch_size = b;
    }
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_corpus(dirs: &[PathBuf], samples: Option<usize>, seed: u64) -> anyhow::Result<Corpus> {
    let corpus = Corpus::load(dirs)?;
    Ok(match samples {
        Some(n) => corpus.train_subset(n, seed)?,
        None => corpus,
    })
}

fn gen(args: &GenArgs) -> anyhow::Result<()> {
    let mut scene = SceneConfig::for_robot(args.robot, args.seed);
    scene.distractor = args.distractor;
    let manifest = generate_dataset(&args.robot.robot(), args.n, &scene, &args.out)?;
    println!("wrote {} samples to {}", manifest.records.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> anyhow::Result<()> {
    let config = resolve_config(TrainConfig::full(), &args.training)?;
    let corpus = load_corpus(&args.data, args.samples, config.seed)?;
    open_run_dir(&args.out, "train", args, Some(&config))?;
    let net = MultiObjectiveNet::build(corpus.n_joints, corpus.n_types, config.seed)?;
    let outcome = train::train_full(net, &corpus, &config)?;
    outcome.write_to(&args.out)?;
    let evaluation = eval::evaluate(&outcome.best_net, &corpus, corpus.n_types > 1)?;
    eval::write_evaluation(&args.out, &evaluation)?;
    println!(
        "trained {} steps; best epoch {}; mask accuracy {:.4}",
        outcome.log.total_steps(),
        outcome.log.best_epoch,
        evaluation.report.mask_accuracy
    );
    Ok(())
}

fn transfer_cmd(args: &TransferArgs) -> anyhow::Result<()> {
    let config = resolve_config(TrainConfig::transfer(), &args.training)?;
    let corpus = load_corpus(&args.data, args.samples, config.seed)?;
    open_run_dir(&args.out, "transfer", args, Some(&config))?;
    let outcome = train::train_transfer(&args.from, &corpus, &config)?;
    outcome.write_to(&args.out)?;
    let evaluation = eval::evaluate(&outcome.best_net, &corpus, false)?;
    eval::write_evaluation(&args.out, &evaluation)?;
    println!(
        "transferred in {} steps; best epoch {}; mask accuracy {:.4}",
        outcome.log.total_steps(),
        outcome.log.best_epoch,
        evaluation.report.mask_accuracy
    );
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> anyhow::Result<()> {
    let net = MultiObjectiveNet::load(&args.ckpt)?;
    let corpus = Corpus::load(&args.data)?;
    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => args.ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&out)?;
    let evaluation = eval::evaluate(&net, &corpus, net.n_types() > 1)?;
    eval::write_evaluation(&out, &evaluation)?;
    println!("{}", serde_json::to_string_pretty(&evaluation.report)?);
    Ok(())
}

fn sweep_cmd(args: &SweepArgs) -> anyhow::Result<()> {
    let config = resolve_config(TrainConfig::transfer(), &args.training)?;
    let net = MultiObjectiveNet::load(&args.from)?;
    let corpus = Corpus::load(&args.data)?;
    open_run_dir(&args.out, "sweep", args, Some(&config))?;
    let rows = eval::sample_count_sweep(&net, &corpus, &args.counts, &config)?;
    eval::write_sweep(&args.out, &rows)?;
    print!("{}", eval::sweep_csv(&rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Transfer(a) => transfer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
