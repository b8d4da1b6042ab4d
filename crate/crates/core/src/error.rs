use std::fmt;

/// Errors raised anywhere in the attack pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two arrays (or an array and a model) disagree on shape.
    Shape { expected: String, found: String },
    /// An index fell outside its valid range.
    Index { what: &'static str, index: usize, len: usize },
    /// A precondition on scalar arguments failed.
    Domain(String),
    /// An image was queried more times than the budget allows.
    Budget { image_id: u64, budget: u32 },
    /// A query left the epsilon ball around its base image.
    Protocol { image_id: u64, distance: f64, epsilon: f64 },
    /// Malformed input file.
    Parse { offset: u64, message: String },
    /// Covariance could not be factorized.
    NumericalDegeneracy { message: String, matrix: Vec<f64> },
    /// The dataset stream ran out of fresh images.
    Exhausted { requested: usize, remaining: usize },
    /// Invalid run configuration, detected before any query.
    Config(String),
    /// Evaluation could not be carried out (e.g. no eligible images).
    Evaluation(String),
    /// Training loss became non-finite.
    Divergence { epoch: usize, loss: f64 },
    Io(String),
    /// A repetition of an experiment failed.
    Run { index: usize, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { expected, found } => {
                write!(f, "shape mismatch: expected {expected}, found {found}")
            }
            Error::Index { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Budget { image_id, budget } => write!(
                f,
                "query budget exceeded for image {image_id} (budget {budget} per image)"
            ),
            Error::Protocol { image_id, distance, epsilon } => write!(
                f,
                "query on image {image_id} is {distance} away in l-inf, outside epsilon {epsilon}"
            ),
            Error::Parse { offset, message } => write!(f, "parse error at byte {offset}: {message}"),
            Error::NumericalDegeneracy { message, matrix } => write!(
                f,
                "numerical degeneracy: {message} ({} matrix entries attached)",
                matrix.len()
            ),
            Error::Exhausted { requested, remaining } => write!(
                f,
                "dataset exhausted: requested {requested} images, {remaining} remaining"
            ),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Evaluation(msg) => write!(f, "evaluation error: {msg}"),
            Error::Divergence { epoch, loss } => write!(
                f,
                "training diverged at epoch {epoch} (loss {loss}); try a smaller learning rate"
            ),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
            Error::Run { index, source } => write!(f, "run {index} failed: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Run { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
