use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use bayeseg::data::{
    export_uncertainty_maps, generate_synthetic, load_checkpoint, load_checkpoint_for,
    load_dataset, read_image, save_checkpoint, write_dataset, Difficulty, RunConfig,
};
use bayeseg::metrics::{evaluate_set, write_report_csv};
use bayeseg::network::{NetConfig, SegNet};
use bayeseg::trainer::{write_metrics_csv, OptimizerKind, SchedulerKind, Trainer};
use bayeseg::uncertainty::{decompose, mc_predict, DEFAULT_SAMPLES};
use bayeseg::{selftest, Error};

/// Bayesian encoder–decoder segmentation with Monte-Carlo uncertainty.
#[derive(Parser)]
#[command(name = "bayeseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image/mask dataset.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus a per-epoch metrics CSV.
    Train(TrainArgs),
    /// Monte-Carlo prediction with uncertainty maps for one image.
    Predict(PredictArgs),
    /// Mean DSC/IoU of a checkpoint on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Run the built-in gradient, KL, decomposition and metric checks.
    Selftest,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise level: easy (σ = 0.05) or hard (σ = 0.15).
    #[arg(long, default_value = "easy")]
    difficulty: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Metrics CSV path [default: <out>.metrics.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Epochs to train [default: 500].
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer: adam | sgd-momentum [default: adam].
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Initial learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Momentum for sgd-momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 weight decay on posterior means [default: 0.0005].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Scheduler: plateau | cyclical | none [default: plateau].
    #[arg(long)]
    scheduler: Option<SchedulerKind>,
    /// Plateau patience in epochs [default: 10].
    #[arg(long)]
    patience: Option<usize>,
    /// Plateau reduction factor [default: 0.1].
    #[arg(long)]
    factor: Option<f64>,
    /// Cyclical lower bound as a fraction of the rate [default: 0.1].
    #[arg(long)]
    gamma: Option<f64>,
    /// Latent vector size [default: 10].
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Seed for initialisation, shuffling and sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Greyscale PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Directory for mean_prob, mask, aleatoric and epistemic PGMs.
    #[arg(long)]
    out: PathBuf,
    /// Monte-Carlo passes.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Monte-Carlo passes per image.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-image score CSV.
    #[arg(long, default_value = "evaluation.csv")]
    out: PathBuf,
}

/// Failures split by exit code: 1 for usage/configuration, 2 for data.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownConfigKey(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .to_string(),
    )
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let difficulty: Difficulty = a.difficulty.parse()?;
    let multiple = NetConfig::default().spatial_multiple();
    if !a.size.is_multiple_of(multiple) {
        eprintln!(
            "warning: size {} is not divisible by {multiple}; the default depth-{} network cannot consume it",
            a.size,
            NetConfig::default().depth
        );
    }
    let samples = generate_synthetic(a.n, a.size, a.size, a.seed, difficulty)?;
    write_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    macro_rules! apply {
        ($($flag:ident => $field:expr),* $(,)?) => {$(if let Some(v) = a.$flag { $field = v; })*};
    }
    apply!(
        epochs => t.max_epochs,
        batch_size => t.batch_size,
        optimizer => t.optimizer,
        lr => t.learning_rate,
        momentum => t.momentum,
        weight_decay => t.weight_decay,
        scheduler => t.scheduler,
        patience => t.plateau_patience,
        factor => t.plateau_factor,
        gamma => t.cyclical_gamma,
        seed => t.seed,
        latent_dim => cfg.net.latent_dim,
    );
    cfg.validate()?;

    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::EmptySet.into());
    }
    let mut net = match &a.resume {
        Some(p) if a.config.is_some() => load_checkpoint_for(p, &cfg.net)?,
        Some(p) => {
            let net = load_checkpoint(p)?;
            if a.latent_dim.is_some_and(|d| d != net.config().latent_dim) {
                return Err(Error::ConfigShapeMismatch(format!(
                    "--latent-dim {} but the checkpoint has latent_dim {}",
                    cfg.net.latent_dim,
                    net.config().latent_dim
                ))
                .into());
            }
            cfg.net = net.config().clone();
            net
        }
        None => SegNet::new(cfg.net.clone(), cfg.train.seed)?,
    };
    net.check_input(&[
        1,
        cfg.net.in_channels,
        samples[0].image.shape()[0],
        samples[0].image.shape()[1],
    ])?;

    let mut trainer = Trainer::new(cfg.train.clone(), cfg.loss.clone(), &samples)?;
    eprintln!(
        "training {} parameters on {} images ({} validation) for {} epochs",
        net.param_count(),
        trainer.train.len(),
        trainer.val.len(),
        cfg.train.max_epochs
    );
    let start = Instant::now();
    let rows = trainer.fit(&mut net, |m| {
        eprintln!(
            "epoch {:>4}  train {:.5}  val {:.5}  seg {:.5}  lr {:.1e}",
            m.epoch, m.train_loss, m.val_loss, m.seg_loss, m.lr
        )
    })?;
    save_checkpoint(&net, &a.out)?;
    let metrics = a
        .metrics
        .unwrap_or_else(|| a.out.with_extension("metrics.csv"));
    let file = File::create(&metrics).map_err(|e| io_failure(&metrics, e))?;
    write_metrics_csv(BufWriter::new(file), &rows).map_err(|e| io_failure(&metrics, e))?;
    match rows.last() {
        Some(m) => println!(
            "epoch {}: train_loss {:.6} val_loss {:.6} seg_loss {:.6} lr {:.1e} ({:.1?})",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.seg_loss,
            m.lr,
            start.elapsed()
        ),
        None => println!("no epochs run; checkpoint rewritten unchanged"),
    }
    println!(
        "checkpoint: {}  metrics: {}",
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let net = load_checkpoint(&a.ckpt)?;
    let image = read_image(&a.image)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let x = image.reshape(&[1, 1, h, w])?;
    let report = decompose(&mc_predict(&net, &x, a.samples, a.seed)?)?;
    let paths = export_uncertainty_maps(&report, &a.out)?;
    println!("mean total variance: {:.6e}", report.total_var.mean());
    println!(
        "mean aleatoric: {:.6e}  mean epistemic: {:.6e}",
        report.aleatoric.mean(),
        report.epistemic.mean()
    );
    println!(
        "maps written to {}",
        paths.mean_prob.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let net = load_checkpoint(&a.ckpt)?;
    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::EmptySet.into());
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in &samples {
        let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
        let x = s.image.reshape(&[1, 1, h, w])?;
        let report = decompose(&mc_predict(&net, &x, a.samples, a.seed)?)?;
        preds.push(report.mask.reshape(&[h, w])?);
        truths.push(s.mask.clone());
    }
    let report = evaluate_set(&preds, &truths)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let file = File::create(&a.out).map_err(|e| io_failure(&a.out, e))?;
    write_report_csv(BufWriter::new(file), &ids, &report).map_err(|e| io_failure(&a.out, e))?;
    println!(
        "images: {}  mean DSC: {:.4}  mean IoU: {:.4}",
        samples.len(),
        report.mean_dsc,
        report.mean_iou
    );
    Ok(())
}

fn run_selftest() -> Result<(), Failure> {
    let start = Instant::now();
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<40} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    println!(
        "{} checks, {failed} failed, {:.1?}",
        results.len(),
        start.elapsed()
    );
    if failed > 0 {
        return Err(Failure::Data(format!("{failed} self-test checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Selftest => run_selftest(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
