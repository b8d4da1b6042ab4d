//! The black-box boundary. Attacks only ever see a [`ClassifierOracle`]
//! through a [`QuerySession`], which writes every query to the ledger before
//! it reaches the model.

pub mod dataset;
pub mod formats;
pub mod ledger;
pub mod model;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::loss::{AttackObjective, Logits};
use crate::tensor::{ImageTensor, Shape, UniversalPerturbation};

pub use dataset::{Dataset, DatasetStream, Sample};
pub use ledger::{audit_neighborhoods, LedgerAudit, LedgerEntry, NeighborhoodReport, QueryLedger};
pub use model::{train_reference, Activation, DenseLayer, FeedForwardModel, TrainConfig, TrainedModel};

/// Query access to a classifier: logits in, nothing else out.
pub trait ClassifierOracle: Send + Sync {
    fn input_shape(&self) -> Shape;
    fn num_classes(&self) -> usize;
    /// Deterministic; bumps the query counter by one on every call.
    fn query(&self, x: &ImageTensor) -> Result<Logits>;
    fn query_count(&self) -> u64;
}

/// A [`FeedForwardModel`] behind a query counter.
#[derive(Debug)]
pub struct FeedForwardOracle {
    model: FeedForwardModel,
    queries: AtomicU64,
}

impl FeedForwardOracle {
    pub fn new(model: FeedForwardModel) -> Self {
        FeedForwardOracle { model, queries: AtomicU64::new(0) }
    }

    pub fn model(&self) -> &FeedForwardModel {
        &self.model
    }
}

impl ClassifierOracle for FeedForwardOracle {
    fn input_shape(&self) -> Shape {
        self.model.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn query(&self, x: &ImageTensor) -> Result<Logits> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.model.forward(x)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }
}

/// An oracle defined by a plain function of the flattened pixels. Handy for
/// synthetic losses with known gradients.
pub struct FunctionOracle<F> {
    shape: Shape,
    classes: usize,
    f: F,
    queries: AtomicU64,
}

impl<F> FunctionOracle<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(shape: Shape, classes: usize, f: F) -> Self {
        FunctionOracle { shape, classes, f, queries: AtomicU64::new(0) }
    }
}

impl<F> ClassifierOracle for FunctionOracle<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn query(&self, x: &ImageTensor) -> Result<Logits> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        if x.shape() != self.shape {
            return Err(Error::Shape { expected: self.shape.to_string(), found: x.shape().to_string() });
        }
        let out = Logits::new((self.f)(x.data()))?;
        if out.num_classes() != self.classes {
            return Err(Error::Shape {
                expected: format!("{} logits", self.classes),
                found: format!("{}", out.num_classes()),
            });
        }
        Ok(out)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }
}

/// One oracle response kept for replay checks.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub image_id: u64,
    pub label: Option<usize>,
    pub logits: Logits,
}

/// Pairs an oracle with an objective and a ledger. Each call to
/// [`QuerySession::loss`] is one ledger entry and one oracle query.
pub struct QuerySession<'o> {
    oracle: &'o dyn ClassifierOracle,
    objective: AttackObjective,
    ledger: QueryLedger,
    record: Option<Vec<QueryRecord>>,
    queries: u64,
}

impl<'o> QuerySession<'o> {
    pub fn new(oracle: &'o dyn ClassifierOracle, objective: AttackObjective, budget: u32, epsilon: f64) -> Result<Self> {
        if let Some(t) = objective.target_class() {
            if t >= oracle.num_classes() {
                return Err(Error::Config(format!(
                    "target class {t} out of range for {} classes",
                    oracle.num_classes()
                )));
            }
        }
        Ok(QuerySession {
            oracle,
            objective,
            ledger: QueryLedger::new(budget, epsilon)?,
            record: None,
            queries: 0,
        })
    }

    /// Keeps every response for later replay.
    pub fn recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    pub fn objective(&self) -> AttackObjective {
        self.objective
    }

    pub fn input_shape(&self) -> Shape {
        self.oracle.input_shape()
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> QueryLedger {
        self.ledger
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn records(&self) -> &[QueryRecord] {
        self.record.as_deref().unwrap_or(&[])
    }

    /// Loss of `sample` under `perturbation`, after clipping to `[0, 1]`.
    /// Nothing reaches the oracle if the ledger refuses the query.
    pub fn loss(&mut self, sample: &Sample, perturbation: &UniversalPerturbation) -> Result<f64> {
        if self.objective.needs_labels() && sample.image.label().is_none() {
            return Err(Error::Config(format!("image {} has no label", sample.id)));
        }
        let queried = sample.image.perturbed(perturbation)?;
        self.ledger.record_query(sample.id, queried.data(), sample.image.data())?;
        self.queries += 1;
        let logits = self.oracle.query(&queried)?;
        let loss = self.objective.loss(&logits, sample.image.label())?;
        if let Some(r) = &mut self.record {
            r.push(QueryRecord { image_id: sample.id, label: sample.image.label(), logits });
        }
        Ok(loss)
    }
}
