pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod actstore;
pub mod causal;
pub mod forecaster;
pub mod pipeline;
pub mod sae;
pub mod series;
pub mod taxonomy;
pub mod tokenizer;
