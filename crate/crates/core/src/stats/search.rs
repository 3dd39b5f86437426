//! Budgeted hyperparameter search.
//!
//! A [`SearchStrategy`] proposes configurations; [`hyper_search`] evaluates
//! exactly `budget` of them and keeps the one with the lowest loss. The
//! default strategy is seeded random search.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Real(v) => Some(*v),
            ParamValue::Text(_) => None,
        }
    }

    pub fn as_usize(&self) -> Option<usize> {
        match self {
            ParamValue::Int(v) if *v >= 0 => Some(*v as usize),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    Categorical { values: Vec<ParamValue> },
    LogUniform { low: f64, high: f64 },
}

pub type Configuration = BTreeMap<String, ParamValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: Vec<(String, Dimension)>,
    pub budget: usize,
    pub seed: u64,
}

impl SearchSpace {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self {
            dimensions: Vec::new(),
            budget,
            seed,
        }
    }

    pub fn categorical(mut self, name: &str, values: Vec<ParamValue>) -> Self {
        self.dimensions
            .push((name.to_string(), Dimension::Categorical { values }));
        self
    }

    pub fn log_uniform(mut self, name: &str, low: f64, high: f64) -> Self {
        self.dimensions
            .push((name.to_string(), Dimension::LogUniform { low, high }));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return invalid("search budget must be at least 1");
        }
        for (name, dim) in &self.dimensions {
            match dim {
                Dimension::Categorical { values } if values.is_empty() => {
                    return invalid(format!("dimension {name} has no values"));
                }
                Dimension::LogUniform { low, high } if !(*low > 0.0 && low <= high && high.is_finite()) => {
                    return invalid(format!("dimension {name} needs 0 < low <= high"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub trait SearchStrategy {
    fn propose(&mut self, space: &SearchSpace, trial: usize) -> Configuration;
}

/// Independent draws per trial: uniform over categories, log-uniform over intervals.
pub struct RandomSearch {
    rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SearchStrategy for RandomSearch {
    fn propose(&mut self, space: &SearchSpace, _trial: usize) -> Configuration {
        space
            .dimensions
            .iter()
            .map(|(name, dim)| {
                let value = match dim {
                    Dimension::Categorical { values } => {
                        values.choose(&mut self.rng).expect("validated nonempty").clone()
                    }
                    Dimension::LogUniform { low, high } => {
                        let (l, h) = (low.ln(), high.ln());
                        let u: f64 = self.rng.gen();
                        ParamValue::Real((l + u * (h - l)).exp())
                    }
                };
                (name.clone(), value)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Configuration,
    pub loss: f64,
    pub trial: usize,
    pub failed_trials: usize,
}

/// Random search with the space's own seed.
pub fn hyper_search<F>(space: &SearchSpace, objective: F) -> Result<SearchOutcome>
where
    F: FnMut(&Configuration) -> Option<f64>,
{
    hyper_search_with(space, &mut RandomSearch::new(space.seed), objective)
}

/// Evaluates `space.budget` proposals. A trial fails when the objective
/// returns `None` or a non-finite loss. Ties keep the earliest trial.
pub fn hyper_search_with<S, F>(space: &SearchSpace, strategy: &mut S, mut objective: F) -> Result<SearchOutcome>
where
    S: SearchStrategy + ?Sized,
    F: FnMut(&Configuration) -> Option<f64>,
{
    space.validate()?;
    let mut best: Option<SearchOutcome> = None;
    let mut failed = 0;
    for trial in 0..space.budget {
        let config = strategy.propose(space, trial);
        match objective(&config).filter(|l| l.is_finite()) {
            Some(loss) => {
                if best.as_ref().map_or(true, |b| loss < b.loss) {
                    best = Some(SearchOutcome {
                        best: config,
                        loss,
                        trial,
                        failed_trials: 0,
                    });
                }
            }
            None => failed += 1,
        }
    }
    let mut outcome = best.ok_or(Error::SearchFailed(space.budget))?;
    outcome.failed_trials = failed;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn letters() -> SearchSpace {
        SearchSpace::new(30, 7).categorical(
            "x",
            vec![
                ParamValue::Text("a".into()),
                ParamValue::Text("b".into()),
                ParamValue::Text("c".into()),
            ],
        )
    }

    fn letter_loss(c: &Configuration) -> Option<f64> {
        match &c["x"] {
            ParamValue::Text(s) if s == "a" => Some(3.0),
            ParamValue::Text(s) if s == "b" => Some(1.0),
            _ => Some(2.0),
        }
    }

    #[test]
    fn finds_categorical_minimum() {
        let out = hyper_search(&letters(), letter_loss).unwrap();
        assert_eq!(out.best["x"], ParamValue::Text("b".into()));
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn budget_one_returns_the_single_sample() {
        let space = SearchSpace::new(1, 3).log_uniform("lr", 1e-4, 1e-1);
        let mut seen = Vec::new();
        let out = hyper_search(&space, |c| {
            seen.push(c.clone());
            Some(0.5)
        })
        .unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(out.best, seen[0]);
        let lr = out.best["lr"].as_f64().unwrap();
        assert!((1e-4..=1e-1).contains(&lr));
    }

    #[test]
    fn deterministic_per_seed() {
        let space = SearchSpace::new(10, 11).log_uniform("lr", 1e-4, 1e-1);
        let f = |c: &Configuration| Some((c["lr"].as_f64().unwrap() - 0.01).abs());
        assert_eq!(hyper_search(&space, f).unwrap(), hyper_search(&space, f).unwrap());
    }

    #[test]
    fn all_failures_is_an_error() {
        let out = hyper_search(&letters(), |_| None);
        assert!(matches!(out, Err(Error::SearchFailed(30))));
        let out = hyper_search(&letters(), |_| Some(f64::NAN));
        assert!(matches!(out, Err(Error::SearchFailed(30))));
    }

    #[test]
    fn partial_failures_are_counted() {
        let mut i = 0;
        let out = hyper_search(&letters(), |c| {
            i += 1;
            if i % 2 == 0 {
                None
            } else {
                letter_loss(c)
            }
        })
        .unwrap();
        assert_eq!(out.failed_trials, 15);
    }

    #[test]
    fn ties_keep_earliest_trial() {
        let out = hyper_search(&letters(), |_| Some(1.0)).unwrap();
        assert_eq!(out.trial, 0);
    }

    #[test]
    fn invalid_spaces() {
        assert!(hyper_search(&SearchSpace::new(0, 1), |_| Some(0.0)).is_err());
        let bad = SearchSpace::new(2, 1).log_uniform("lr", 0.0, 1.0);
        assert!(hyper_search(&bad, |_| Some(0.0)).is_err());
    }
}
