//! Guided diffusion sampling on Gaussian-mixture targets with exact scores,
//! guidance-weight estimation, CFG refinement and guidance-gap measurement.

pub mod config;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod gap;
pub mod guidance;
pub mod linalg;
pub mod mixture;
pub mod persist;
pub mod plot;
pub mod refine;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};
pub use exec::{Execution, SimRng, Stream};
pub use mixture::{ConditionLabel, ConditionedMixtureFamily, GaussianMixture};
pub use schedule::NoiseSchedule;
pub use score::{OracleField, ScoreField};
