//! Synthetic sketch/photo data, on-disk datasets and splits.

pub mod dataset;
pub mod render;
pub mod split;
pub mod synth;

pub use dataset::{Dataset, Manifest, Mode, PairRecord, PhotoRecord};
pub use render::{Geometry, Primitive, StyleParams};
pub use split::{split_dataset, SplitProtocol, Splits};
pub use synth::{generate_dataset, SynthSpec};
