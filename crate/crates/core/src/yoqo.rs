//! One query per image: CMA-ES over perturbation tiles, each candidate
//! scored on its own fresh batch.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cma::{default_params, sample_population, update, CmaState, RankedPopulation, Sense};
use crate::error::{Error, Result};
use crate::loss::AttackObjective;
use crate::oracle::{ClassifierOracle, Dataset, QuerySession, Sample};
use crate::report::{Algorithm, AttackOutcome, AttackReport, CheckpointRecorder, StopReason, TraceEntry};
use crate::tensor::{tile_expand, PerturbationTile};
use crate::yoqt::{check_data, check_tile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoqoConfig {
    pub tile_side: usize,
    pub population_size: usize,
    pub batch_size: usize,
    /// `None` runs until the dataset is exhausted.
    pub max_iterations: Option<usize>,
    pub epsilon: f64,
    /// Defaults to `0.6 * epsilon`.
    pub initial_step: Option<f64>,
    pub objective: AttackObjective,
    pub seed: u64,
    /// Report the last generation's best tile instead of the best ever seen.
    #[serde(default)]
    pub fidelity_pick: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<usize>,
}

impl YoqoConfig {
    /// 7x7 tile, lambda = 150, B = 1, epsilon = 0.3.
    pub fn untargeted_mnist() -> Self {
        YoqoConfig {
            tile_side: 7,
            population_size: 150,
            batch_size: 1,
            max_iterations: None,
            epsilon: 0.3,
            initial_step: None,
            objective: AttackObjective::Untargeted,
            seed: 0,
            fidelity_pick: false,
            checkpoints: Vec::new(),
        }
    }

    pub fn step(&self) -> f64 {
        self.initial_step.unwrap_or(0.6 * self.epsilon)
    }

    pub fn images_per_generation(&self) -> usize {
        self.population_size * self.batch_size
    }
}

/// Mean loss of `tile` over `batch`; one query per image.
pub fn fitness_of_tile(session: &mut QuerySession<'_>, tile: &PerturbationTile, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let expanded = tile_expand(tile, session.input_shape())?;
    let mut total = 0.0;
    for s in batch {
        total += session.loss(s, &expanded)?;
    }
    Ok(total / batch.len() as f64)
}

/// Extra outputs beyond the reported tile.
#[derive(Debug, Clone, PartialEq)]
pub struct YoqoDetail {
    pub global_best: PerturbationTile,
    pub global_best_loss: f64,
    pub last_generation_best: PerturbationTile,
    pub last_generation_loss: f64,
    pub final_state: CmaState,
}

pub fn run_yoqo(oracle: &dyn ClassifierOracle, data: &Dataset, config: &YoqoConfig) -> Result<(AttackOutcome, YoqoDetail)> {
    let started = Instant::now();
    let shape = oracle.input_shape();
    check_tile(config.tile_side, shape)?;
    if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", config.epsilon)));
    }
    if config.batch_size == 0 || config.population_size < 2 {
        return Err(Error::Config("need batch size >= 1 and population >= 2".into()));
    }
    if config.max_iterations == Some(0) {
        return Err(Error::Config("max iterations must be >= 1".into()));
    }
    if !(config.step() > 0.0 && config.step().is_finite()) {
        return Err(Error::Config(format!("initial step must be positive, got {}", config.step())));
    }
    check_data(data, shape, config.objective, config.images_per_generation())?;

    let (l, c, eps) = (config.tile_side, shape.channels, config.epsilon);
    let n = l * l * c;
    let params = default_params(n, config.population_size)?;
    let mut state = CmaState::new(vec![0.0; n], config.step())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stream = data.stream(Some(config.seed));
    let mut session = QuerySession::new(oracle, config.objective, Algorithm::Yoqo.budget(), eps)?;
    let queries_before = oracle.query_count();

    let zero = PerturbationTile::zeros(l, c, eps)?;
    let mut checkpoints = CheckpointRecorder::new(&config.checkpoints, &zero);
    let mut global: Option<(PerturbationTile, f64)> = None;
    let mut last: Option<(PerturbationTile, f64)> = None;
    let mut trace = Vec::new();
    let mut stop = StopReason::IterationLimit;
    let mut generation = 0usize;

    while config.max_iterations.map_or(true, |m| generation < m) {
        // a partial generation would bias the ranking, so never start one
        if stream.remaining() < config.images_per_generation() {
            stop = StopReason::DatasetExhausted;
            break;
        }
        let samples = sample_population(&state, &params, eps, &mut rng)?;
        let mut fitness = Vec::with_capacity(samples.len());
        for z in &samples {
            let tile = PerturbationTile::new(l, c, z.clone(), eps)?;
            let batch = stream.take(config.batch_size)?;
            // CMA-ES minimizes, the attacker maximizes
            fitness.push(-fitness_of_tile(&mut session, &tile, &batch)?);
        }
        let ranked = RankedPopulation::rank(samples, &fitness, Sense::Minimize)?;
        let (best_z, best_f) = ranked.best().cloned().expect("population is non-empty");
        let best_tile = PerturbationTile::new(l, c, best_z, eps)?;
        let best_loss = -best_f;
        if global.as_ref().map_or(true, |(_, g)| best_loss > *g) {
            global = Some((best_tile.clone(), best_loss));
        }
        last = Some((best_tile, best_loss));
        state = update(&state, &params, &ranked)?;
        generation += 1;
        trace.push(TraceEntry {
            iteration: generation,
            images_consumed: stream.consumed(),
            loss: best_loss,
            sigma: Some(state.step_size()),
        });
        let reported = if config.fidelity_pick { &last } else { &global };
        checkpoints.observe(stream.consumed(), &reported.as_ref().expect("set above").0);
    }

    let (global_best, global_best_loss) = global.ok_or_else(|| {
        Error::Config("no generation completed".into())
    })?;
    let (last_best, last_loss) = last.expect("set with global");
    let tile = if config.fidelity_pick { last_best.clone() } else { global_best.clone() };
    let ledger = session.into_ledger();
    let report = AttackReport {
        algorithm: Algorithm::Yoqo,
        config: serde_json::to_value(config).expect("config serializes"),
        iterations: generation,
        images_consumed: stream.consumed(),
        total_queries: oracle.query_count() - queries_before,
        stop_reason: stop,
        final_loss: Some(if config.fidelity_pick { last_loss } else { global_best_loss }),
        trace,
        audit: ledger.audit(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let perturbation = tile_expand(&tile, shape)?;
    Ok((
        AttackOutcome { tile, perturbation, report, ledger, checkpoints: checkpoints.finish() },
        YoqoDetail {
            global_best,
            global_best_loss,
            last_generation_best: last_best,
            last_generation_loss: last_loss,
            final_state: state,
        },
    ))
}
