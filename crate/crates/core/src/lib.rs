//! Latent-ODE competing-risks survival modelling on irregular time series.
//!
//! An ODE-RNN encoder maps each subject's irregular measurements to a
//! Gaussian posterior over an initial latent state. A latent ODE carries that
//! state forward over discrete remaining-time bins, where cause-specific
//! modules and a softmax head give per-bin hazards for `b` competing events.
//! Training combines an ELBO with the right-censored survival likelihood.

pub mod analysis;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod odeint;
pub mod training;

pub use data::{
    build_batch, simulate, split, Dataset, EncodedBatch, IrregularSeries, Outcome, SimConfig,
    SimOutput, SurvivalRecord,
};
pub use decoder::{cif, event_free_survival, HazardGrid, LatentTrajectory, SurvivalCurves};
pub use encoder::{encode, PosteriorParams};
pub use error::{Error, Result};
pub use model::{Architecture, Model};
pub use odeint::{OdeProblem, SolverSettings};
pub use training::{predict, train, TrainConfig, TrainOutcome};
