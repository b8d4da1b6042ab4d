pub mod cma;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fd;
pub mod loss;
pub mod oracle;
pub mod report;
pub mod tensor;
pub mod yoqo;
pub mod yoqt;

pub use error::{Error, Result};
