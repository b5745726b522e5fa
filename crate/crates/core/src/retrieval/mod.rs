//! Gallery index, ranking and evaluation metrics.

pub mod eval;
pub mod index;
pub mod metrics;

pub use eval::{embed_gallery, evaluate, EvalReport, DEFAULT_PRECISION_K};
pub use index::RetrievalIndex;
