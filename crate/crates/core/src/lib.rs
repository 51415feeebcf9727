//! Class-incremental semantic segmentation with a hyperbolic hierarchical
//! head, trained and evaluated on procedural scenes.

pub mod autograd;
pub mod cli;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod model;
pub mod presets;
pub mod protocol;
pub mod pseudolabel;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
