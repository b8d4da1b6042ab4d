//! Seeded repetitions of an attack, with evaluation and on-disk artifacts.
//!
//! Config files are flat `key = value` lines; `#` starts a comment.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{check_disjoint, evaluate, median, EvaluationResult};
use crate::fd::BasisKind;
use crate::loss::AttackObjective;
use crate::oracle::formats::{f32_within, save_raw_tensors, RawTensors};
use crate::oracle::{ClassifierOracle, Dataset};
use crate::report::{Algorithm, AttackOutcome, AttackReport};
use crate::yoqo::{run_yoqo, YoqoConfig};
use crate::yoqt::{run_yoqt, YoqtConfig};

/// Every knob of a run. Unset optional fields fall back to the per-algorithm
/// defaults for 28x28 grayscale data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub tile_size: Option<usize>,
    pub population: Option<usize>,
    pub batch: Option<usize>,
    pub directions: Option<usize>,
    pub basis_size: Option<usize>,
    pub sigma0: Option<f64>,
    pub mu: Option<f64>,
    pub eta: Option<f64>,
    pub basis: Option<BasisKind>,
    pub epsilon: f64,
    pub target_class: Option<usize>,
    pub iterations: Option<usize>,
    pub seed: u64,
    pub repetitions: usize,
    pub fidelity_pick: bool,
    pub checkpoints: Vec<usize>,
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        ExperimentConfig {
            algorithm,
            tile_size: None,
            population: None,
            batch: None,
            directions: None,
            basis_size: None,
            sigma0: None,
            mu: None,
            eta: None,
            basis: None,
            epsilon: 0.3,
            target_class: None,
            iterations: None,
            seed: 0,
            repetitions: 5,
            fidelity_pick: false,
            checkpoints: Vec::new(),
        }
    }

    pub fn objective(&self) -> AttackObjective {
        match self.target_class {
            Some(target_class) => AttackObjective::Targeted { target_class },
            None => AttackObjective::Untargeted,
        }
    }

    /// Parses `key = value` lines. Unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {}", n + 1, k.trim())));
            }
        }
        let algorithm = match map.remove("algorithm").as_deref() {
            Some(a) => parse_algorithm(a)?,
            None => return Err(Error::Config("missing key: algorithm".into())),
        };
        let mut cfg = ExperimentConfig::new(algorithm);
        for (k, v) in map {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form; used by the parser and CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "algorithm" => self.algorithm = parse_algorithm(value)?,
            "tile_size" => self.tile_size = Some(num(key, value)?),
            "population" => self.population = Some(num(key, value)?),
            "batch" => self.batch = Some(num(key, value)?),
            "directions" => self.directions = Some(num(key, value)?),
            "basis_size" => self.basis_size = Some(num(key, value)?),
            "sigma0" => self.sigma0 = Some(num(key, value)?),
            "mu" => self.mu = Some(num(key, value)?),
            "eta" => self.eta = Some(num(key, value)?),
            "basis" => self.basis = Some(parse_basis(value)?),
            "epsilon" => self.epsilon = num(key, value)?,
            "target_class" => {
                self.target_class = match value {
                    "none" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            "iterations" => self.iterations = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "repetitions" => self.repetitions = num(key, value)?,
            "fidelity_pick" => self.fidelity_pick = num(key, value)?,
            "checkpoints" => {
                self.checkpoints = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown key: {other}"))),
        }
        Ok(())
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = format!("algorithm = {}\n", self.algorithm.name());
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push_str(&format!("{k} = {v}\n"));
            }
        };
        put("tile_size", self.tile_size.map(|v| v.to_string()));
        put("population", self.population.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("directions", self.directions.map(|v| v.to_string()));
        put("basis_size", self.basis_size.map(|v| v.to_string()));
        put("sigma0", self.sigma0.map(|v| format!("{v:?}")));
        put("mu", self.mu.map(|v| format!("{v:?}")));
        put("eta", self.eta.map(|v| format!("{v:?}")));
        put("basis", self.basis.map(basis_text));
        put("epsilon", Some(format!("{:?}", self.epsilon)));
        put("target_class", self.target_class.map(|v| v.to_string()));
        put("iterations", self.iterations.map(|v| v.to_string()));
        put("seed", Some(self.seed.to_string()));
        put("repetitions", Some(self.repetitions.to_string()));
        put("fidelity_pick", Some(self.fidelity_pick.to_string()));
        if !self.checkpoints.is_empty() {
            let list: Vec<String> = self.checkpoints.iter().map(|c| c.to_string()).collect();
            put("checkpoints", Some(list.join(",")));
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn yoqo(&self, seed: u64) -> YoqoConfig {
        let d = YoqoConfig::untargeted_mnist();
        YoqoConfig {
            tile_side: self.tile_size.unwrap_or(d.tile_side),
            population_size: self.population.unwrap_or(d.population_size),
            batch_size: self.batch.unwrap_or(d.batch_size),
            max_iterations: self.iterations,
            epsilon: self.epsilon,
            initial_step: self.sigma0,
            objective: self.objective(),
            seed,
            fidelity_pick: self.fidelity_pick,
            checkpoints: self.checkpoints.clone(),
        }
    }

    /// Untargeted runs default to the tiled low-frequency setup, targeted
    /// runs to the untiled canonical one. The preset basis size only applies
    /// to the preset tile; other tiles default to their full basis.
    pub fn yoqt(&self, seed: u64) -> YoqtConfig {
        let d = match self.target_class {
            Some(t) => YoqtConfig::targeted_mnist(t),
            None => YoqtConfig::untargeted_mnist(),
        };
        let tile_side = self.tile_size.unwrap_or(d.tile_side);
        let preset_basis = if tile_side == d.tile_side { d.basis_size } else { None };
        YoqtConfig {
            tile_side,
            batch_size: self.batch.unwrap_or(d.batch_size),
            directions_per_step: self.directions.unwrap_or(d.directions_per_step),
            basis_size: self.basis_size.or(preset_basis),
            max_iterations: self.iterations,
            smoothing: self.mu.unwrap_or(d.smoothing),
            step_size: self.eta.unwrap_or(d.step_size),
            epsilon: self.epsilon,
            basis: self.basis.unwrap_or(d.basis),
            objective: self.objective(),
            seed,
            checkpoints: self.checkpoints.clone(),
            record_gradients: false,
        }
    }

    pub fn run_once(&self, oracle: &dyn ClassifierOracle, data: &Dataset, seed: u64) -> Result<AttackOutcome> {
        match self.algorithm {
            Algorithm::Yoqo => run_yoqo(oracle, data, &self.yoqo(seed)).map(|r| r.0),
            Algorithm::Yoqt => run_yoqt(oracle, data, &self.yoqt(seed)).map(|r| r.0),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

pub fn parse_algorithm(s: &str) -> Result<Algorithm> {
    match s {
        "yoqo" => Ok(Algorithm::Yoqo),
        "yoqt" => Ok(Algorithm::Yoqt),
        other => Err(Error::Config(format!("unknown algorithm {other:?} (yoqo|yoqt)"))),
    }
}

/// `fft`, `canonical`, `random` or `random:SEED`.
pub fn parse_basis(s: &str) -> Result<BasisKind> {
    match s.split_once(':') {
        None if s == "fft" => Ok(BasisKind::FftLowFrequency),
        None if s == "canonical" => Ok(BasisKind::Canonical),
        None if s == "random" => Ok(BasisKind::RandomNormal { seed: 0 }),
        Some(("random", seed)) => Ok(BasisKind::RandomNormal { seed: num("basis", seed)? }),
        _ => Err(Error::Config(format!("unknown basis {s:?} (fft|canonical|random[:seed])"))),
    }
}

fn basis_text(b: BasisKind) -> String {
    match b {
        BasisKind::RandomNormal { seed } => format!("random:{seed}"),
        other => other.name().to_string(),
    }
}

/// Sidecar record next to each saved perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub algorithm: Algorithm,
    pub config_hash: String,
    pub run_index: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub shape: [usize; 3],
    pub images_consumed: usize,
    pub total_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub images_consumed: usize,
    pub total_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub median_success_rate: f64,
}

/// One finished repetition.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: AttackOutcome,
    pub evaluation: EvaluationResult,
}

/// The perturbation as stored on disk: `f32`, never exceeding `epsilon`.
pub fn perturbation_file(outcome: &AttackOutcome) -> RawTensors {
    let p = &outcome.perturbation;
    RawTensors {
        shape: p.shape(),
        count: 1,
        values: p.data().iter().map(|v| f32_within(*v, p.epsilon())).collect(),
    }
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Io(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Report as written to disk. Wall time is the only field that varies
/// between identical runs.
pub fn report_json(report: &AttackReport) -> Result<String> {
    Ok(json_line(report)? + "\n")
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, index: usize, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    save_raw_tensors(&dir.join("perturbation.uapt"), &perturbation_file(&run.outcome))?;
    let s = run.outcome.perturbation.shape();
    let meta = RunMetadata {
        algorithm: cfg.algorithm,
        config_hash: cfg.hash(),
        run_index: index,
        seed: run.seed,
        epsilon: cfg.epsilon,
        shape: [s.height, s.width, s.channels],
        images_consumed: run.outcome.report.images_consumed,
        total_queries: run.outcome.report.total_queries,
    };
    write_text(&dir.join("metadata.json"), &(json_line(&meta)? + "\n"))?;
    write_text(&dir.join("report.json"), &report_json(&run.outcome.report)?)?;
    write_text(&dir.join("evaluation.json"), &(json_line(&run.evaluation)? + "\n"))?;
    let path = dir.join("ledger.jsonl");
    let f = File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    run.outcome.ledger.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs `repetitions` attacks with seeds `seed + r`, evaluates each on the
/// holdout, and (when `out` is given) writes `run-<r>/` directories plus
/// `results.jsonl` and `config.txt`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    oracle: &dyn ClassifierOracle,
    attack_data: &Dataset,
    holdout: &Dataset,
    out: Option<&Path>,
) -> Result<(ExperimentSummary, Vec<RunResult>)> {
    if cfg.repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        write_text(&dir.join("config.txt"), &cfg.to_text())?;
    }
    let mut runs = Vec::with_capacity(cfg.repetitions);
    for r in 0..cfg.repetitions {
        let seed = cfg.seed.wrapping_add(r as u64);
        let attempt = || -> Result<RunResult> {
            let before = oracle.query_count();
            let outcome = cfg.run_once(oracle, attack_data, seed)?;
            let delta = oracle.query_count() - before;
            if delta != outcome.report.total_queries {
                return Err(Error::Evaluation(format!(
                    "oracle answered {delta} queries but the report claims {}",
                    outcome.report.total_queries
                )));
            }
            check_disjoint(&outcome.ledger, holdout)?;
            let evaluation = evaluate(oracle, &outcome.perturbation, holdout, cfg.objective())?;
            Ok(RunResult { seed, outcome, evaluation })
        };
        let run = attempt().map_err(|e| Error::Run { index: r, source: Box::new(e) })?;
        if let Some(dir) = out {
            write_run(&run_dir(dir, r), cfg, r, &run).map_err(|e| Error::Run { index: r, source: Box::new(e) })?;
        }
        runs.push(run);
    }
    let records: Vec<RunRecord> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| RunRecord {
            run_index: i,
            seed: r.seed,
            success_rate: r.evaluation.success_rate,
            images_consumed: r.outcome.report.images_consumed,
            total_queries: r.outcome.report.total_queries,
        })
        .collect();
    let rates: Vec<f64> = records.iter().map(|r| r.success_rate).collect();
    let summary = ExperimentSummary {
        config_hash: cfg.hash(),
        median_success_rate: median(&rates).expect("at least one run"),
        runs: records,
    };
    if let Some(dir) = out {
        let mut text = String::new();
        for r in &summary.runs {
            text.push_str(&json_line(r)?);
            text.push('\n');
        }
        text.push_str(&json_line(&summary)?);
        text.push('\n');
        write_text(&dir.join("results.jsonl"), &text)?;
    }
    Ok((summary, runs))
}

pub fn run_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("run-{index}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trips_and_rejects_garbage() {
        let text = "# table row\nalgorithm = yoqt\ntile_size = 7\nbatch=10\nmu = 0.0005\neta = 1\nbasis = fft\n\
                    epsilon = 0.3\nseed = 4\nrepetitions = 5\ncheckpoints = 500, 1000\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.tile_size, Some(7));
        assert_eq!(cfg.basis, Some(BasisKind::FftLowFrequency));
        assert_eq!(cfg.checkpoints, vec![500, 1000]);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.hash().len(), 64);
        assert!(ExperimentConfig::parse("algorithm = yoqt\nfoo = 1\n").is_err());
        assert!(ExperimentConfig::parse("tile_size = 7\n").is_err());
        assert!(ExperimentConfig::parse("algorithm = yoqt\nbatch = ten\n").is_err());
        assert!(ExperimentConfig::parse("algorithm = yoqt\nseed = 1\nseed = 2\n").is_err());
        assert_eq!(parse_basis("random:9").unwrap(), BasisKind::RandomNormal { seed: 9 });
    }

    #[test]
    fn defaults_follow_the_objective() {
        let mut cfg = ExperimentConfig::new(Algorithm::Yoqt);
        assert_eq!(cfg.yoqt(1).tile_side, 7);
        assert_eq!(cfg.yoqt(1).basis, BasisKind::FftLowFrequency);
        assert_eq!(cfg.yoqt(1).basis_size, Some(9));
        cfg.set("tile_size", "2").unwrap();
        assert_eq!(cfg.yoqt(1).basis_size, None);
        cfg.tile_size = None;
        cfg.set("target_class", "3").unwrap();
        let t = cfg.yoqt(1);
        assert_eq!((t.tile_side, t.basis, t.smoothing), (28, BasisKind::Canonical, 1e-4));
        assert_eq!(cfg.yoqo(2).population_size, 150);
        assert!((cfg.yoqo(2).step() - 0.18).abs() < 1e-15);
    }
}
