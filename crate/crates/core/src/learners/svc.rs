//! Linear multi-class support vector classifier, one-vs-one.
//!
//! Each unordered class pair gets a binary hinge-loss classifier trained by
//! SGD. Prediction is a majority vote; ties go to the larger summed decision
//! value and then to the smaller class id.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stats::{Configuration, ParamValue, SearchSpace};

/// Standard-deviation floor in [`LinearSvc::uncertainty`]; the score is capped at its inverse.
pub const UNCERTAINTY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvcHyperParams {
    /// L2 regularisation strength.
    pub lambda: f64,
    pub eta0: f64,
    pub epochs: usize,
}

impl Default for SvcHyperParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            eta0: 0.05,
            epochs: 10,
        }
    }
}

impl SvcHyperParams {
    pub fn search_space(budget: usize, seed: u64) -> SearchSpace {
        SearchSpace::new(budget, seed)
            .log_uniform("lambda", 1e-5, 1e-1)
            .log_uniform("eta0", 1e-3, 0.5)
    }

    pub fn from_config(config: &Configuration, epochs: usize) -> Self {
        let mut hp = Self {
            epochs,
            ..Self::default()
        };
        if let Some(v) = config.get("lambda").and_then(ParamValue::as_f64) {
            hp.lambda = v;
        }
        if let Some(v) = config.get("eta0").and_then(ParamValue::as_f64) {
            hp.eta0 = v;
        }
        hp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    /// Class voted for on a non-negative score.
    pub positive: u8,
    pub negative: u8,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub steps: u64,
}

impl BinarySvm {
    fn new(positive: u8, negative: u8, dim: usize) -> Self {
        Self {
            positive,
            negative,
            weights: vec![0.0; dim],
            bias: 0.0,
            steps: 0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Signed distance of `x` to the decision hyperplane.
    pub fn distance(&self, x: &[f64]) -> f64 {
        let norm = self.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        self.score(x) / norm.max(1e-12)
    }

    fn train(&mut self, samples: &[(&[f64], f64)], hp: &SvcHyperParams, rng: &mut ChaCha8Rng) -> u64 {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut updates = 0;
        for _ in 0..hp.epochs {
            order.shuffle(rng);
            for &i in &order {
                let (x, y) = samples[i];
                let eta = hp.eta0 / (1.0 + hp.eta0 * hp.lambda * self.steps as f64);
                self.steps += 1;
                let margin = y * self.score(x);
                let shrink = 1.0 - eta * hp.lambda;
                if margin < 1.0 {
                    for (w, v) in self.weights.iter_mut().zip(x) {
                        *w = shrink * *w + eta * y * v;
                    }
                    self.bias += eta * y;
                } else {
                    self.weights.iter_mut().for_each(|w| *w *= shrink);
                }
                updates += 1;
            }
        }
        updates
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvc {
    pub classes: Vec<u8>,
    pub machines: Vec<BinarySvm>,
    pub params: SvcHyperParams,
    pub dim: usize,
}

impl LinearSvc {
    /// Fits a fresh classifier. Returns the model and the number of SGD updates.
    pub fn fit(data: &[Vec<f64>], labels: &[u8], hp: &SvcHyperParams, seed: u64) -> Result<(Self, u64)> {
        let classes: BTreeSet<u8> = labels.iter().copied().collect();
        if classes.len() < 2 {
            return invalid("SVC training data must contain at least two classes");
        }
        let dim = data.first().map_or(0, Vec::len);
        let mut model = Self {
            classes: Vec::new(),
            machines: Vec::new(),
            params: hp.clone(),
            dim,
        };
        let cost = model.partial_fit(data, labels, seed)?;
        Ok((model, cost))
    }

    /// Continues training on more labelled data. Classes not seen before get
    /// new pairwise machines.
    pub fn partial_fit(&mut self, data: &[Vec<f64>], labels: &[u8], seed: u64) -> Result<u64> {
        if data.len() != labels.len() {
            return invalid(format!("{} samples but {} labels", data.len(), labels.len()));
        }
        if let Some(x) = data.iter().find(|x| x.len() != self.dim) {
            return invalid(format!("expected {} features, got {}", self.dim, x.len()));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite SVC input");
        }
        let mut classes: BTreeSet<u8> = self.classes.iter().copied().collect();
        classes.extend(labels.iter().copied());
        let classes: Vec<u8> = classes.into_iter().collect();
        let mut machines = Vec::new();
        for (i, &a) in classes.iter().enumerate() {
            for &b in &classes[i + 1..] {
                let existing = self.machines.iter().find(|m| m.positive == a && m.negative == b);
                machines.push(existing.cloned().unwrap_or_else(|| BinarySvm::new(a, b, self.dim)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cost = 0;
        for m in &mut machines {
            let samples: Vec<(&[f64], f64)> = data
                .iter()
                .zip(labels)
                .filter_map(|(x, &l)| match l {
                    l if l == m.positive => Some((x.as_slice(), 1.0)),
                    l if l == m.negative => Some((x.as_slice(), -1.0)),
                    _ => None,
                })
                .collect();
            cost += m.train(&samples, &self.params, &mut rng);
        }
        self.classes = classes;
        self.machines = machines;
        Ok(cost)
    }

    /// Same boundaries with new hyperparameters and a fresh learning-rate schedule.
    pub fn restarted(&self, hp: &SvcHyperParams) -> Self {
        let mut out = self.clone();
        out.params = hp.clone();
        out.machines.iter_mut().for_each(|m| m.steps = 0);
        out
    }

    /// Signed distances to every pairwise boundary, in machine order.
    pub fn distances(&self, x: &[f64]) -> Vec<f64> {
        self.machines.iter().map(|m| m.distance(x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let n = self.classes.len();
        let mut votes = vec![0usize; n];
        let mut margins = vec![0.0; n];
        let index = |c: u8| self.classes.binary_search(&c).expect("machine classes are known");
        for m in &self.machines {
            let d = m.score(x);
            let (p, q) = (index(m.positive), index(m.negative));
            if d >= 0.0 {
                votes[p] += 1;
            } else {
                votes[q] += 1;
            }
            margins[p] += d;
            margins[q] -= d;
        }
        let mut best = 0;
        for i in 1..n {
            if votes[i] > votes[best] || (votes[i] == votes[best] && margins[i] > margins[best]) {
                best = i;
            }
        }
        self.classes[best]
    }

    /// `1 / max(std(|d_k|), 1e-6)` over pairwise distances; higher means the
    /// input sits at similar distances from all boundaries.
    pub fn uncertainty(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = self.distances(x).iter().map(|v| v.abs()).collect();
        if d.is_empty() {
            return 1.0 / UNCERTAINTY_EPS;
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        1.0 / std.max(UNCERTAINTY_EPS)
    }

    pub fn accuracy(&self, data: &[Vec<f64>], labels: &[u8]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data.iter().zip(labels).filter(|(x, l)| self.predict(x) == **l).count();
        hits as f64 / data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn blobs(seed: u64, centers: &[(f64, f64)], per: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per {
                xs.push(vec![cx + 0.5 * gaussian(&mut rng), cy + 0.5 * gaussian(&mut rng)]);
                ys.push(c as u8 + 1);
            }
        }
        (xs, ys)
    }

    #[test]
    fn separable_blobs() {
        let (xs, ys) = blobs(1, &[(-3.0, 0.0), (3.0, 0.0)], 100);
        let (m, _) = LinearSvc::fit(&xs, &ys, &SvcHyperParams::default(), 4).unwrap();
        assert!(m.accuracy(&xs, &ys) >= 0.99);
    }

    #[test]
    fn three_classes_and_determinism() {
        let (xs, ys) = blobs(2, &[(-4.0, 0.0), (4.0, 0.0), (0.0, 5.0)], 60);
        let (m, _) = LinearSvc::fit(&xs, &ys, &SvcHyperParams::default(), 9).unwrap();
        assert_eq!(m.machines.len(), 3);
        assert!(m.accuracy(&xs, &ys) > 0.95);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x = vec![rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            let p = m.predict(&x);
            assert!(m.classes.contains(&p));
            assert_eq!(p, m.predict(&x));
        }
    }

    #[test]
    fn single_class_rejected() {
        assert!(LinearSvc::fit(&[vec![1.0], vec![2.0]], &[3, 3], &SvcHyperParams::default(), 0).is_err());
    }

    #[test]
    fn equal_distances_hit_the_cap() {
        let m = LinearSvc {
            classes: vec![1, 2, 3],
            machines: vec![
                BinarySvm {
                    positive: 1,
                    negative: 2,
                    weights: vec![1.0, 0.0],
                    bias: 0.0,
                    steps: 0,
                },
                BinarySvm {
                    positive: 1,
                    negative: 3,
                    weights: vec![0.0, 1.0],
                    bias: 0.0,
                    steps: 0,
                },
                BinarySvm {
                    positive: 2,
                    negative: 3,
                    weights: vec![-1.0, 0.0],
                    bias: 0.0,
                    steps: 0,
                },
            ],
            params: SvcHyperParams::default(),
            dim: 2,
        };
        assert_eq!(m.uncertainty(&[1.0, 1.0]), 1.0 / UNCERTAINTY_EPS);
        // spread distances are less uncertain than near-equal ones
        assert!(m.uncertainty(&[5.0, 0.1]) < m.uncertainty(&[1.0, 1.1]));
    }

    #[test]
    fn vote_tie_broken_by_margin_then_id() {
        // a 3-cycle of votes: each class wins one duel
        let m = LinearSvc {
            classes: vec![1, 2, 3],
            machines: vec![
                BinarySvm {
                    positive: 1,
                    negative: 2,
                    weights: vec![1.0],
                    bias: 0.0,
                    steps: 0,
                },
                BinarySvm {
                    positive: 1,
                    negative: 3,
                    weights: vec![-1.0],
                    bias: 0.0,
                    steps: 0,
                },
                BinarySvm {
                    positive: 2,
                    negative: 3,
                    weights: vec![1.0],
                    bias: 0.0,
                    steps: 0,
                },
            ],
            params: SvcHyperParams::default(),
            dim: 1,
        };
        // x = 1: 1 beats 2, 3 beats 1, 2 beats 3 -> one vote each; margins 1:0, 2:0, 3:0
        assert_eq!(m.predict(&[1.0]), 1);
    }

    #[test]
    fn warm_start_adds_classes() {
        let (xs, ys) = blobs(3, &[(-4.0, 0.0), (4.0, 0.0)], 30);
        let (mut m, _) = LinearSvc::fit(&xs, &ys, &SvcHyperParams::default(), 1).unwrap();
        let (xs3, ys3) = blobs(4, &[(0.0, 6.0)], 30);
        let mut all_x = xs.clone();
        all_x.extend(xs3);
        let mut all_y = ys.clone();
        all_y.extend(ys3.iter().map(|_| 3));
        m.partial_fit(&all_x, &all_y, 2).unwrap();
        assert_eq!(m.classes, vec![1, 2, 3]);
        assert_eq!(m.machines.len(), 3);
    }
}
