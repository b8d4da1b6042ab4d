//! Covariance matrix adaptation evolution strategy with active (negative)
//! recombination weights and coordinate-wise box clamping of samples.
//!
//! The engine minimizes. Callers that maximize (the attacks) rank their
//! population with [`Sense::Maximize`], which orders samples best-first by
//! descending fitness before the update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strategy constants. Built by [`default_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub dimension: usize,
    pub population_size: usize,
    /// Number of positively weighted parents.
    pub parent_count: usize,
    /// One weight per rank, best first.
    pub weights: Vec<f64>,
    pub c_m: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub mu_eff: f64,
    pub chi_n: f64,
}

/// Expected norm of an `n`-dimensional standard normal, series approximation.
pub fn chi_n(n: usize) -> f64 {
    let n = n as f64;
    n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
}

/// Textbook population size `4 + floor(3 ln n)`.
pub fn default_population_size(dimension: usize) -> usize {
    4 + (3.0 * (dimension.max(1) as f64).ln()).floor() as usize
}

/// Standard strategy parameters for the given dimension and population size.
pub fn default_params(dimension: usize, population_size: usize) -> Result<CmaParams> {
    if dimension == 0 {
        return Err(Error::Domain("dimension must be >= 1".into()));
    }
    if population_size < 2 {
        return Err(Error::Domain(format!(
            "population size must be >= 2, got {population_size}"
        )));
    }
    let n = dimension as f64;
    let lambda = population_size;
    let parents = lambda / 2;

    let raw: Vec<f64> = (1..=lambda)
        .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
        .collect();
    let pos_sum: f64 = raw[..parents].iter().sum();
    let pos_sq: f64 = raw[..parents].iter().map(|w| w * w).sum();
    let mu_eff = pos_sum * pos_sum / pos_sq;
    let neg_sum: f64 = raw[parents..].iter().filter(|w| **w < 0.0).map(|w| -w).sum();
    let neg_sq: f64 = raw[parents..].iter().filter(|w| **w < 0.0).map(|w| w * w).sum();
    let mu_eff_neg = if neg_sq > 0.0 { neg_sum * neg_sum / neg_sq } else { 0.0 };

    let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
    let alpha_cov = 2.0;
    let c_1 = alpha_cov / ((n + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(
        alpha_cov * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + alpha_cov * mu_eff / 2.0),
    );

    let alpha_mu_neg = 1.0 + c_1 / c_mu;
    let alpha_mu_eff_neg = 1.0 + 2.0 * mu_eff_neg / (mu_eff + 2.0);
    let alpha_posdef_neg = (1.0 - c_1 - c_mu) / (n * c_mu);
    let neg_scale = alpha_mu_neg.min(alpha_mu_eff_neg).min(alpha_posdef_neg);

    let weights = raw
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i < parents {
                w / pos_sum
            } else if *w < 0.0 {
                neg_scale * w / neg_sum
            } else {
                // the middle rank for odd lambda has raw weight exactly zero
                0.0
            }
        })
        .collect();

    Ok(CmaParams {
        dimension,
        population_size: lambda,
        parent_count: parents,
        weights,
        c_m: 1.0,
        c_sigma,
        d_sigma,
        c_c,
        c_1,
        c_mu,
        mu_eff,
        chi_n: chi_n(dimension),
    })
}

impl CmaParams {
    /// Same constants with all negative weights zeroed (non-active update).
    pub fn without_active_weights(mut self) -> Self {
        for w in &mut self.weights {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        self
    }
}

/// Search distribution. The eigendecomposition of the covariance is cached
/// and refreshed on every update.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaState {
    mean: DVector<f64>,
    step_size: f64,
    covariance: DMatrix<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    generation: u64,
    eigenvectors: DMatrix<f64>,
    /// Square roots of the covariance eigenvalues.
    axis_lengths: DVector<f64>,
    repairs: u64,
    last_update_repaired: bool,
}

impl CmaState {
    /// Identity covariance, zero evolution paths.
    pub fn new(mean: Vec<f64>, step_size: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Domain("mean must have dimension >= 1".into()));
        }
        if !(step_size > 0.0 && step_size.is_finite()) {
            return Err(Error::Domain(format!("step size must be positive, got {step_size}")));
        }
        let n = mean.len();
        Ok(CmaState {
            mean: DVector::from_vec(mean),
            step_size,
            covariance: DMatrix::identity(n, n),
            path_sigma: DVector::zeros(n),
            path_c: DVector::zeros(n),
            generation: 0,
            eigenvectors: DMatrix::identity(n, n),
            axis_lengths: DVector::from_element(n, 1.0),
            repairs: 0,
            last_update_repaired: false,
        })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn path_sigma(&self) -> &[f64] {
        self.path_sigma.as_slice()
    }

    pub fn path_c(&self) -> &[f64] {
        self.path_c.as_slice()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Total eigenvalue-floor repairs so far.
    pub fn repairs(&self) -> u64 {
        self.repairs
    }

    pub fn last_update_repaired(&self) -> bool {
        self.last_update_repaired
    }

    pub fn covariance_eigenvalues(&self) -> Vec<f64> {
        self.axis_lengths.iter().map(|d| d * d).collect()
    }

    /// `Sigma^{-1/2} v` from the cached eigendecomposition.
    fn inv_sqrt_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut coords = self.eigenvectors.tr_mul(v);
        for (c, d) in coords.iter_mut().zip(self.axis_lengths.iter()) {
            *c /= d;
        }
        &self.eigenvectors * coords
    }
}

/// Whether smaller or larger fitness is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Samples with their fitness, ordered best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPopulation {
    samples: Vec<(Vec<f64>, f64)>,
}

impl RankedPopulation {
    /// Sorts by fitness according to `sense`. The sort is stable, so equal
    /// fitnesses keep their sampling order.
    pub fn rank(samples: Vec<Vec<f64>>, fitness: &[f64], sense: Sense) -> Result<Self> {
        if samples.len() != fitness.len() {
            return Err(Error::Shape {
                expected: format!("{} fitness values", samples.len()),
                found: format!("{}", fitness.len()),
            });
        }
        if let Some(f) = fitness.iter().find(|f| f.is_nan()) {
            return Err(Error::Domain(format!("fitness {f} cannot be ranked")));
        }
        let mut pairs: Vec<(Vec<f64>, f64)> = samples.into_iter().zip(fitness.iter().copied()).collect();
        match sense {
            Sense::Minimize => pairs.sort_by(|a, b| a.1.total_cmp(&b.1)),
            Sense::Maximize => pairs.sort_by(|a, b| b.1.total_cmp(&a.1)),
        }
        Ok(RankedPopulation { samples: pairs })
    }

    /// Wraps samples that the caller has already ordered best first.
    pub fn from_ordered(samples: Vec<(Vec<f64>, f64)>) -> Self {
        RankedPopulation { samples }
    }

    pub fn samples(&self) -> &[(Vec<f64>, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn best(&self) -> Option<&(Vec<f64>, f64)> {
        self.samples.first()
    }

    /// Median fitness (mean of the two central values for even sizes).
    pub fn median_fitness(&self) -> f64 {
        let n = self.samples.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            self.samples[n / 2].1
        } else {
            0.5 * (self.samples[n / 2 - 1].1 + self.samples[n / 2].1)
        }
    }
}

/// Draws `lambda` points from `N(mean, sigma^2 Sigma)` and clamps every
/// coordinate into `[-bound, bound]`.
pub fn sample_population<R: Rng + ?Sized>(
    state: &CmaState,
    params: &CmaParams,
    bound: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if !(bound > 0.0) {
        return Err(Error::Domain(format!("box bound must be positive, got {bound}")));
    }
    let n = state.dimension();
    if params.dimension != n {
        return Err(Error::Shape {
            expected: format!("dimension {}", params.dimension),
            found: format!("state of dimension {n}"),
        });
    }
    if state.axis_lengths.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::NumericalDegeneracy {
            message: "covariance has non-positive or non-finite eigenvalues".into(),
            matrix: state.covariance.as_slice().to_vec(),
        });
    }
    let mut population = Vec::with_capacity(params.population_size);
    for _ in 0..params.population_size {
        let mut normal = DVector::<f64>::zeros(n);
        for (v, d) in normal.iter_mut().zip(state.axis_lengths.iter()) {
            let g: f64 = rng.sample(StandardNormal);
            *v = d * g;
        }
        let step = &state.eigenvectors * normal;
        let z: Vec<f64> = state
            .mean
            .iter()
            .zip(step.iter())
            .map(|(m, s)| (m + state.step_size * s).clamp(-bound, bound))
            .collect();
        population.push(z);
    }
    Ok(population)
}

/// Relative eigenvalue floor applied after every covariance update.
pub const EIGENVALUE_FLOOR: f64 = 1e-14;

/// One generation of mean, path, step-size and covariance adaptation.
pub fn update(state: &CmaState, params: &CmaParams, ranked: &RankedPopulation) -> Result<CmaState> {
    let n = state.dimension();
    if ranked.len() != params.population_size || params.weights.len() != params.population_size {
        return Err(Error::Shape {
            expected: format!("{} ranked samples", params.population_size),
            found: format!("{}", ranked.len()),
        });
    }
    if let Some((z, _)) = ranked.samples.iter().find(|(z, _)| z.len() != n) {
        return Err(Error::Shape {
            expected: format!("samples of dimension {n}"),
            found: format!("dimension {}", z.len()),
        });
    }
    let sigma = state.step_size;

    let displacements: Vec<DVector<f64>> = ranked
        .samples
        .iter()
        .map(|(z, _)| {
            DVector::from_iterator(n, z.iter().zip(state.mean.iter()).map(|(zi, mi)| (zi - mi) / sigma))
        })
        .collect();

    let mut y_w = DVector::<f64>::zeros(n);
    for (w, y) in params.weights.iter().zip(&displacements).take(params.parent_count) {
        y_w.axpy(*w, y, 1.0);
    }

    let mut mean = state.mean.clone();
    mean.axpy(params.c_m * sigma, &y_w, 1.0);

    let cs = params.c_sigma;
    let mut path_sigma = state.path_sigma.scale(1.0 - cs);
    path_sigma.axpy(
        (cs * (2.0 - cs) * params.mu_eff).sqrt(),
        &state.inv_sqrt_times(&y_w),
        1.0,
    );

    let step_size =
        sigma * ((cs / params.d_sigma) * (path_sigma.norm() / params.chi_n - 1.0)).exp();
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::NumericalDegeneracy {
            message: format!("step size became {step_size}"),
            matrix: state.covariance.as_slice().to_vec(),
        });
    }

    let cc = params.c_c;
    let mut path_c = state.path_c.scale(1.0 - cc);
    path_c.axpy((cc * (2.0 - cc) * params.mu_eff).sqrt(), &y_w, 1.0);

    let weight_sum: f64 = params.weights.iter().sum();
    let mut covariance = state
        .covariance
        .scale(1.0 - params.c_1 - params.c_mu * weight_sum);
    covariance.ger(params.c_1, &path_c, &path_c, 1.0);
    for (w, y) in params.weights.iter().zip(&displacements) {
        let w_eff = if *w >= 0.0 {
            *w
        } else {
            let whitened = state.inv_sqrt_times(y).norm_squared();
            if whitened > 0.0 {
                w * n as f64 / whitened
            } else {
                0.0
            }
        };
        if w_eff != 0.0 {
            covariance.ger(params.c_mu * w_eff, y, y, 1.0);
        }
    }

    let (covariance, eigenvectors, axis_lengths, repaired) = factorize(covariance)?;

    Ok(CmaState {
        mean,
        step_size,
        covariance,
        path_sigma,
        path_c,
        generation: state.generation + 1,
        eigenvectors,
        axis_lengths,
        repairs: state.repairs + u64::from(repaired),
        last_update_repaired: repaired,
    })
}

type Factorized = (DMatrix<f64>, DMatrix<f64>, DVector<f64>, bool);

/// Symmetrizes, eigendecomposes and floors small eigenvalues.
fn factorize(mut covariance: DMatrix<f64>) -> Result<Factorized> {
    let n = covariance.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = avg;
            covariance[(j, i)] = avg;
        }
    }
    let degenerate = |c: &DMatrix<f64>, message: &str| Error::NumericalDegeneracy {
        message: message.to_string(),
        matrix: c.as_slice().to_vec(),
    };
    if covariance.iter().any(|v| !v.is_finite()) {
        return Err(degenerate(&covariance, "covariance has non-finite entries"));
    }
    let trace = covariance.trace();
    if !(trace > 0.0) {
        return Err(degenerate(&covariance, "covariance trace is not positive"));
    }
    let eig = covariance
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| degenerate(&covariance, "eigendecomposition did not converge"))?;
    let floor = EIGENVALUE_FLOOR * trace / n as f64;
    let mut repaired = false;
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
            repaired = true;
        }
    }
    let vectors = eig.eigenvectors;
    if repaired {
        covariance = &vectors * DMatrix::from_diagonal(&values) * vectors.transpose();
        // recomposition reintroduces rounding asymmetry
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
                covariance[(i, j)] = avg;
                covariance[(j, i)] = avg;
            }
        }
    }
    let axis_lengths = values.map(f64::sqrt);
    Ok((covariance, vectors, axis_lengths, repaired))
}

/// Per-generation trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub generation: u64,
    pub sigma: f64,
    pub best_fitness: f64,
    pub median_fitness: f64,
    pub repaired: bool,
}

/// Options for [`run_cma`].
#[derive(Debug, Clone)]
pub struct CmaRun {
    pub initial_mean: Vec<f64>,
    pub initial_step: f64,
    pub bound: f64,
    pub max_iterations: usize,
    pub sense: Sense,
    /// Stop once the best-ever fitness reaches this value.
    pub target_fitness: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CmaOutcome {
    /// Best point ever evaluated.
    pub best: Vec<f64>,
    pub best_fitness: f64,
    pub generations: usize,
    pub evaluations: usize,
    pub state: CmaState,
    pub trace: Vec<GenerationTrace>,
}

fn better(sense: Sense, a: f64, b: f64) -> bool {
    match sense {
        Sense::Minimize => a < b,
        Sense::Maximize => a > b,
    }
}

/// Sample, evaluate, rank, update until `max_iterations` generations ran or
/// the target fitness is reached. Returns the best point ever evaluated.
pub fn run_cma<F, R>(mut objective: F, params: &CmaParams, run: &CmaRun, rng: &mut R) -> Result<CmaOutcome>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if run.max_iterations == 0 {
        return Err(Error::Domain("max_iterations must be >= 1".into()));
    }
    if run.initial_mean.len() != params.dimension {
        return Err(Error::Shape {
            expected: format!("initial mean of dimension {}", params.dimension),
            found: format!("{}", run.initial_mean.len()),
        });
    }
    let mut state = CmaState::new(run.initial_mean.clone(), run.initial_step)?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trace = Vec::with_capacity(run.max_iterations);
    let mut evaluations = 0;
    let mut generations = 0;

    for _ in 0..run.max_iterations {
        let samples = sample_population(&state, params, run.bound, rng)?;
        let fitness: Vec<f64> = samples.iter().map(|z| objective(z)).collect();
        evaluations += samples.len();
        let ranked = RankedPopulation::rank(samples, &fitness, run.sense)?;
        let (gen_best, gen_fit) = ranked.best().cloned().expect("population is non-empty");
        if best.as_ref().map_or(true, |(_, f)| better(run.sense, gen_fit, *f)) {
            best = Some((gen_best, gen_fit));
        }
        state = update(&state, params, &ranked)?;
        generations += 1;
        trace.push(GenerationTrace {
            generation: state.generation(),
            sigma: state.step_size(),
            best_fitness: gen_fit,
            median_fitness: ranked.median_fitness(),
            repaired: state.last_update_repaired(),
        });
        let best_fit = best.as_ref().map(|b| b.1).unwrap_or(f64::NAN);
        if let Some(target) = run.target_fitness {
            if !better(run.sense, target, best_fit) {
                break;
            }
        }
    }
    let (best, best_fitness) = best.expect("at least one generation ran");
    Ok(CmaOutcome { best, best_fitness, generations, evaluations, state, trace })
}
