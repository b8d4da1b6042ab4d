//! Two queries per image: momentum sign ascent on finite-difference
//! gradient estimates.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{averaged_gradient, BasisKind, DirectionBasis, FdConfig};
use crate::loss::AttackObjective;
use crate::oracle::{ClassifierOracle, Dataset, QuerySession};
use crate::report::{Algorithm, AttackOutcome, AttackReport, CheckpointRecorder, StopReason, TraceEntry};
use crate::tensor::{project_linf, tile_expand, PerturbationTile, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoqtConfig {
    pub tile_side: usize,
    pub batch_size: usize,
    pub directions_per_step: usize,
    /// Leading basis vectors to cycle through; `None` uses the whole basis.
    pub basis_size: Option<usize>,
    /// `None` runs until the dataset is exhausted.
    pub max_iterations: Option<usize>,
    pub smoothing: f64,
    pub step_size: f64,
    pub epsilon: f64,
    pub basis: BasisKind,
    pub objective: AttackObjective,
    /// Drives the order images are drawn in.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<usize>,
    /// Keep every gradient estimate and momentum vector in the outcome.
    #[serde(skip)]
    pub record_gradients: bool,
}

/// Directions per step in the MNIST presets. Nine batches per iteration
/// average out enough per-image noise for the sign step to be stable.
pub const DEFAULT_DIRECTIONS: usize = 9;

/// Untargeted preset basis size: DC plus the four lowest nonzero frequency
/// pairs (cosine and sine each) of a 7x7 tile.
pub const UNTARGETED_BASIS_SIZE: usize = 9;

impl YoqtConfig {
    /// 7x7 tile, B = 10, mu = 5e-4, eta = 1, the 9 lowest Fourier directions.
    pub fn untargeted_mnist() -> Self {
        YoqtConfig {
            tile_side: 7,
            batch_size: 10,
            directions_per_step: DEFAULT_DIRECTIONS,
            basis_size: Some(UNTARGETED_BASIS_SIZE),
            max_iterations: None,
            smoothing: 0.0005,
            step_size: 1.0,
            epsilon: 0.3,
            basis: BasisKind::FftLowFrequency,
            objective: AttackObjective::Untargeted,
            seed: 0,
            checkpoints: Vec::new(),
            record_gradients: false,
        }
    }

    /// Full-image tile, B = 10, mu = 1e-4, eta = 1, all 784 canonical directions.
    pub fn targeted_mnist(target_class: usize) -> Self {
        YoqtConfig {
            tile_side: 28,
            basis_size: None,
            smoothing: 0.0001,
            basis: BasisKind::Canonical,
            objective: AttackObjective::Targeted { target_class },
            ..Self::untargeted_mnist()
        }
    }

    pub fn fd_config(&self) -> FdConfig {
        FdConfig {
            smoothing: self.smoothing,
            directions_per_step: self.directions_per_step,
            batch_size: self.batch_size,
            basis: self.basis,
            basis_size: self.basis_size,
        }
    }

    fn validate(&self, shape: Shape, data: &Dataset) -> Result<()> {
        check_tile(self.tile_side, shape)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("max iterations must be >= 1".into()));
        }
        self.fd_config().validate(self.tile_side * self.tile_side * shape.channels)?;
        check_data(data, shape, self.objective, self.directions_per_step * self.batch_size)
    }
}

pub(crate) fn check_tile(side: usize, shape: Shape) -> Result<()> {
    if side == 0 || side > shape.height.min(shape.width) {
        return Err(Error::Config(format!("tile side {side} does not fit a {shape} image")));
    }
    Ok(())
}

pub(crate) fn check_data(data: &Dataset, shape: Shape, objective: AttackObjective, per_step: usize) -> Result<()> {
    if data.shape() != shape {
        return Err(Error::Shape { expected: shape.to_string(), found: data.shape().to_string() });
    }
    if objective.needs_labels() && !data.has_labels() {
        return Err(Error::Config("untargeted attacks need a labeled dataset".into()));
    }
    if data.len() < per_step {
        return Err(Error::Config(format!(
            "dataset has {} images but one iteration needs {per_step}",
            data.len()
        )));
    }
    Ok(())
}

/// `g <- (g + g_hat) / 2`, starting from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub g_avg: Vec<f64>,
}

impl MomentumState {
    pub fn new(dimension: usize) -> Self {
        MomentumState { g_avg: vec![0.0; dimension] }
    }

    pub fn update(&mut self, g_hat: &[f64]) {
        self.g_avg.iter_mut().zip(g_hat).for_each(|(g, h)| *g = 0.5 * *g + 0.5 * h);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `project(delta + eta * sign(g), eps)`, with `sign(0) = 0`.
pub fn sign_step(delta: &PerturbationTile, g_avg: &[f64], eta: f64, epsilon: f64) -> Result<PerturbationTile> {
    if g_avg.len() != delta.dimension() {
        return Err(Error::Shape {
            expected: format!("gradient of length {}", delta.dimension()),
            found: format!("{}", g_avg.len()),
        });
    }
    let moved: Vec<f64> = delta.data().iter().zip(g_avg).map(|(d, g)| d + eta * sign(*g)).collect();
    PerturbationTile::new(delta.side(), delta.channels(), project_linf(&moved, epsilon), epsilon)
}

/// Gradient estimates and momentum after each iteration, when recorded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientTrace {
    pub estimates: Vec<Vec<f64>>,
    pub momentum: Vec<Vec<f64>>,
}

pub fn run_yoqt(oracle: &dyn ClassifierOracle, data: &Dataset, config: &YoqtConfig) -> Result<(AttackOutcome, GradientTrace)> {
    let started = Instant::now();
    let shape = oracle.input_shape();
    config.validate(shape, data)?;
    let (l, c) = (config.tile_side, shape.channels);
    let fd = config.fd_config();
    let basis = DirectionBasis::new(config.basis, l, c)?;
    let mut session = QuerySession::new(oracle, config.objective, Algorithm::Yoqt.budget(), config.epsilon)?;
    let mut stream = data.stream(Some(config.seed));
    let queries_before = oracle.query_count();

    let mut delta = PerturbationTile::zeros(l, c, config.epsilon)?;
    let mut momentum = MomentumState::new(delta.dimension());
    let mut checkpoints = CheckpointRecorder::new(&config.checkpoints, &delta);
    let mut trace = Vec::new();
    let mut grads = GradientTrace::default();
    let mut stop = StopReason::IterationLimit;
    let mut t = 0usize;

    while config.max_iterations.map_or(true, |m| t < m) {
        let est = match averaged_gradient(&mut session, &mut stream, &delta, &fd, &basis, t as u64) {
            Ok(e) => e,
            Err(Error::Exhausted { .. }) => {
                stop = StopReason::DatasetExhausted;
                break;
            }
            Err(e) => return Err(e),
        };
        momentum.update(&est.gradient);
        delta = sign_step(&delta, &momentum.g_avg, config.step_size, config.epsilon)?;
        t += 1;
        if config.record_gradients {
            grads.estimates.push(est.gradient);
            grads.momentum.push(momentum.g_avg.clone());
        }
        trace.push(TraceEntry { iteration: t, images_consumed: stream.consumed(), loss: est.mean_loss, sigma: None });
        checkpoints.observe(stream.consumed(), &delta);
    }

    let ledger = session.into_ledger();
    let total_queries = oracle.query_count() - queries_before;
    let report = AttackReport {
        algorithm: Algorithm::Yoqt,
        config: serde_json::to_value(config).expect("config serializes"),
        iterations: t,
        images_consumed: stream.consumed(),
        total_queries,
        stop_reason: stop,
        final_loss: trace.last().map(|e| e.loss),
        trace,
        audit: ledger.audit(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let perturbation = tile_expand(&delta, shape)?;
    Ok((
        AttackOutcome { tile: delta, perturbation, report, ledger, checkpoints: checkpoints.finish() },
        grads,
    ))
}
