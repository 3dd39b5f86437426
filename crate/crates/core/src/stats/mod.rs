//! Rank tests, multiple-comparison correction and hyperparameter search.

mod holm;
mod mann_whitney;
mod search;

pub use holm::holm_decide;
pub use mann_whitney::{mann_whitney_u, UTestMethod, UTestResult, EXACT_MAX_MIN_SIZE};
pub use search::{
    hyper_search, hyper_search_with, Configuration, Dimension, ParamValue, RandomSearch, SearchOutcome, SearchSpace,
    SearchStrategy,
};
