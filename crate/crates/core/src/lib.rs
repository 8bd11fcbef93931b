//! Global–local attention classifier: a residual global branch that proposes
//! a region of interest, a bag-of-features local branch with a capped
//! receptive field, a two-token transformer fusing both, and the tooling to
//! train, evaluate and explain it.

pub mod backbone;
pub mod data;
pub mod error;
pub mod explainer;
pub mod export;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod presets;
pub mod rig;
pub mod roi;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, Pass, RadFormer, Stage};
