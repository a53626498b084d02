//! CRAT-Pred trajectory prediction: a small reverse-mode engine, scene
//! ingestion, the network, two-stage training, metrics and the
//! vehicle-selection experiment.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Array2, ParamMap};
