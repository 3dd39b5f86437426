pub mod deltaiot;
pub mod error;
pub mod gas;
pub mod knowledge;
pub mod learners;
pub mod lifelong;
pub mod managing;
pub mod scenario;
pub mod stats;

pub use error::{Error, Result};
