//! Learning models used by the managing system and the task detector.

mod autoencoder;
mod scaler;
mod sgd;
mod svc;

pub use autoencoder::{AeHyperParams, Autoencoder, Dense, TrainReport, MIN_TRAINING_SAMPLES};
pub use scaler::{ScalerState, STD_FLOOR};
pub use sgd::{SgdRegressor, POWER_T};
pub use svc::{BinarySvm, LinearSvc, SvcHyperParams, UNCERTAINTY_EPS};
