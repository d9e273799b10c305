//! Hierarchical recurrent state-space model with learned temporal
//! abstraction, its variational training, toy environments and a jumpy
//! imagination planner.

pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod elbo;
pub mod envs;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod planner;
pub mod plot;
pub mod report;
pub mod train;

pub use boundary::{BoundaryLimits, BoundaryTrack};
pub use config::{Likelihood, Mode, ModelConfig, TrainConfig};
pub use elbo::{ElboTerms, SequenceBatch};
pub use error::{Error, Result};
pub use model::{Frames, WorldModel};
