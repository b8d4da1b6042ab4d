//! `uap`: train a reference oracle, run query-limited attacks against it,
//! score saved perturbations, and audit query ledgers.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use uap::eval::evaluate;
use uap::experiment::{run_experiment, ExperimentConfig};
use uap::loss::AttackObjective;
use uap::oracle::formats::{load_images, load_model, load_raw_tensors, save_model};
use uap::oracle::{audit_neighborhoods, train_reference, Dataset, FeedForwardOracle, QueryLedger, TrainConfig};
use uap::tensor::UniversalPerturbation;
use uap::{Error, Result};

/// Fraction of the attack archive held out when no separate holdout is given.
const DEFAULT_HOLDOUT_FRACTION: f64 = 1.0 / 6.0;

#[derive(Parser)]
#[command(name = "uap", version, about = "Query-limited black-box universal adversarial perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense reference classifier and save it as NNW1 weights.
    TrainOracle(TrainArgs),
    /// Run seeded attack repetitions and write per-run artifacts.
    Attack(AttackArgs),
    /// Score a saved perturbation on a holdout set.
    Evaluate(EvaluateArgs),
    /// Recheck a saved query ledger.
    AuditLedger(AuditArgs),
}

/// Image archive (IDX or UAPT) plus optional labels (IDX or UAPL).
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long)]
    holdout_labels: Option<PathBuf>,
    /// Hidden layer widths, comma separated; empty for softmax regression.
    #[arg(long, default_value = "16", value_delimiter = ',')]
    hidden: Vec<String>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Yoqo,
    Yoqt,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    /// NNW1 weights of the attacked classifier.
    #[arg(long)]
    oracle: PathBuf,
    /// Separate holdout archive; otherwise a seeded sixth of --dataset.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long)]
    holdout_labels: Option<PathBuf>,
    /// Flat key = value config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tile_side: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    directions: Option<usize>,
    #[arg(long)]
    basis_size: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// fft, canonical, random or random:SEED.
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    target_class: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Report the last generation's best instead of the best ever seen.
    #[arg(long)]
    fidelity_pick: bool,
    /// Image budgets at which to snapshot the tile, comma separated.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    oracle: PathBuf,
    /// UAPT file holding one perturbation.
    #[arg(long)]
    perturbation: PathBuf,
    #[arg(long)]
    holdout: PathBuf,
    #[arg(long)]
    holdout_labels: Option<PathBuf>,
    #[arg(long)]
    target_class: Option<usize>,
    /// Radius to enforce; defaults to the perturbation's own l-inf norm.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    ledger: PathBuf,
    /// Also check that no two queried images share an epsilon ball.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainOracle(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::AuditLedger(a) => audit(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_dataset(images: &Path, labels: Option<&Path>, source: u32) -> Result<Dataset> {
    Dataset::new(load_images(images, labels)?, source)
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let train = load_images(&a.data.dataset, a.data.labels.as_deref())?;
    let holdout = match &a.holdout {
        Some(p) => load_images(p, a.holdout_labels.as_deref())?,
        None => Vec::new(),
    };
    let hidden = a
        .hidden
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad hidden width {s:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let config = TrainConfig {
        hidden,
        classes: a.classes,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
    };
    let trained = train_reference(&train, &holdout, &config)?;
    save_model(&a.out, &trained.model)?;
    print_json(&json!({
        "model": a.out.display().to_string(),
        "config": config,
        "train_accuracy": trained.train_accuracy,
        "holdout_accuracy": trained.holdout_accuracy,
        "epoch_losses": trained.epoch_losses,
    }));
    Ok(ExitCode::SUCCESS)
}

fn experiment_config(a: &AttackArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&a.config, a.algorithm) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(_)) => ExperimentConfig::new(uap::report::Algorithm::Yoqt),
        (None, None) => return Err(Error::Config("give --algorithm or --config".into())),
    };
    let mut set = |k: &str, v: Option<String>| match v {
        Some(v) => cfg.set(k, &v),
        None => Ok(()),
    };
    set("algorithm", a.algorithm.map(|x| match x {
        AlgorithmArg::Yoqo => "yoqo".to_string(),
        AlgorithmArg::Yoqt => "yoqt".to_string(),
    }))?;
    set("epsilon", a.epsilon.map(|v| v.to_string()))?;
    set("tile_size", a.tile_side.map(|v| v.to_string()))?;
    set("population", a.population.map(|v| v.to_string()))?;
    set("batch", a.batch.map(|v| v.to_string()))?;
    set("directions", a.directions.map(|v| v.to_string()))?;
    set("basis_size", a.basis_size.map(|v| v.to_string()))?;
    set("sigma0", a.sigma0.map(|v| v.to_string()))?;
    set("mu", a.mu.map(|v| v.to_string()))?;
    set("eta", a.eta.map(|v| v.to_string()))?;
    set("basis", a.basis.clone())?;
    set("target_class", a.target_class.map(|v| v.to_string()))?;
    set("iterations", a.iterations.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("repetitions", a.repetitions.map(|v| v.to_string()))?;
    set("fidelity_pick", a.fidelity_pick.then(|| "true".to_string()))?;
    if !a.checkpoints.is_empty() {
        cfg.checkpoints = a.checkpoints.clone();
    }
    Ok(cfg)
}

fn attack(a: AttackArgs) -> Result<ExitCode> {
    let cfg = experiment_config(&a)?;
    let full = load_dataset(&a.data.dataset, a.data.labels.as_deref(), 0)?;
    let (attack_set, holdout) = match &a.holdout {
        Some(p) => (full, load_dataset(p, a.holdout_labels.as_deref(), 1)?),
        None => full.split_holdout(DEFAULT_HOLDOUT_FRACTION, cfg.seed)?,
    };
    let oracle = FeedForwardOracle::new(load_model(&a.oracle, attack_set.shape())?);
    let (summary, runs) = run_experiment(&cfg, &oracle, &attack_set, &holdout, Some(&a.out))?;
    for (r, run) in summary.runs.iter().zip(&runs) {
        print_json(&json!({
            "run_index": r.run_index,
            "seed": r.seed,
            "success_rate": r.success_rate,
            "images_consumed": r.images_consumed,
            "total_queries": r.total_queries,
            "max_queries_per_image": run.outcome.report.audit.max_per_image,
            "ledger_violations": run.outcome.report.audit.violations,
        }));
    }
    print_json(&json!({
        "config_hash": summary.config_hash,
        "median_success_rate": summary.median_success_rate,
        "out": a.out.display().to_string(),
    }));
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<ExitCode> {
    let holdout = load_dataset(&a.holdout, a.holdout_labels.as_deref(), 1)?;
    let raw = load_raw_tensors(&a.perturbation)?;
    if raw.count != 1 {
        return Err(Error::Config(format!("expected one perturbation, file holds {}", raw.count)));
    }
    let data: Vec<f64> = raw.values.iter().map(|v| f64::from(*v)).collect();
    let epsilon = a.epsilon.unwrap_or_else(|| uap::tensor::linf_norm(&data));
    let p = UniversalPerturbation::new(raw.shape, data, epsilon)?;
    let oracle = FeedForwardOracle::new(load_model(&a.oracle, holdout.shape())?);
    let objective = match a.target_class {
        Some(target_class) => AttackObjective::Targeted { target_class },
        None => AttackObjective::Untargeted,
    };
    let result = evaluate(&oracle, &p, &holdout, objective)?;
    print_json(&serde_json::to_value(&result).map_err(|e| Error::Io(e.to_string()))?);
    Ok(ExitCode::SUCCESS)
}

fn audit(a: AuditArgs) -> Result<ExitCode> {
    let file = File::open(&a.ledger).map_err(|e| Error::Io(format!("{}: {e}", a.ledger.display())))?;
    let ledger = QueryLedger::read_jsonl(BufReader::new(file))?;
    let report = ledger.audit();
    let mut clean = report.is_clean();
    let mut out = json!({ "audit": report, "clean": clean });
    if let Some(p) = &a.dataset {
        let data = load_dataset(p, None, 0)?;
        let hood = audit_neighborhoods(&ledger, data.iter().map(|(id, x)| (id, x.data())), ledger.epsilon());
        clean &= hood.is_clean();
        out["neighborhoods"] = json!({
            "images_checked": hood.images_checked,
            "min_pairwise_distance": hood.min_pairwise_distance,
            "flagged_pairs": hood.flagged_pairs.len(),
        });
        out["clean"] = json!(clean);
    }
    print_json(&out);
    Ok(if clean { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
