use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Exponent of the inverse-scaling learning-rate schedule.
pub const POWER_T: f64 = 0.25;

/// Linear regressor trained by per-sample SGD on the squared loss
/// `(y_hat - y)^2` with learning rate `eta0 / t^0.25`.
///
/// The effective step is capped at `0.5 / (1 + |x|^2)` so that no single
/// update overshoots the residual it corrects; this keeps predictions finite
/// when inputs move far outside the range seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdRegressor {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub eta0: f64,
    /// L2 penalty on the weights.
    pub alpha: f64,
    pub samples_seen: u64,
}

impl SgdRegressor {
    pub fn new(dim: usize, eta0: f64) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            eta0,
            alpha: 0.0,
            samples_seen: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Keeps the learned weights but restarts the learning-rate schedule.
    pub fn restarted(&self, eta0: f64, alpha: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            bias: self.bias,
            eta0,
            alpha,
            samples_seen: 0,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn learning_rate(&self) -> f64 {
        self.eta0 / ((self.samples_seen + 1) as f64).powf(POWER_T)
    }

    fn check(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<()> {
        if xs.len() != ys.len() {
            return invalid(format!("{} feature rows but {} targets", xs.len(), ys.len()));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.dim()) {
            return invalid(format!("expected {} features, got {}", self.dim(), x.len()));
        }
        if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
            return invalid("non-finite training value");
        }
        Ok(())
    }

    fn step(&mut self, x: &[f64], y: f64) {
        let eta = self.learning_rate();
        self.samples_seen += 1;
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        let eta = eta.min(0.5 / (1.0 + norm2));
        let grad = 2.0 * (self.predict(x) - y);
        for (w, v) in self.weights.iter_mut().zip(x) {
            *w -= eta * (grad * v + self.alpha * *w);
        }
        self.bias -= eta * grad;
    }

    /// One in-order pass over the batch. Returns the number of updates.
    pub fn partial_fit(&mut self, xs: &[Vec<f64>], ys: &[f64]) -> Result<u64> {
        self.check(xs, ys)?;
        for (x, y) in xs.iter().zip(ys) {
            self.step(x, *y);
        }
        Ok(xs.len() as u64)
    }

    /// Shuffled passes over the data, stopping after `steps` updates.
    pub fn fit_steps(&mut self, xs: &[Vec<f64>], ys: &[f64], steps: u64, seed: u64) -> Result<u64> {
        self.check(xs, ys)?;
        if xs.is_empty() {
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut done = 0;
        while done < steps {
            order.shuffle(&mut rng);
            for &i in &order {
                if done == steps {
                    break;
                }
                self.step(&xs[i], ys[i]);
                done += 1;
            }
        }
        Ok(done)
    }

    /// `epochs` full shuffled passes.
    pub fn fit_epochs(&mut self, xs: &[Vec<f64>], ys: &[f64], epochs: usize, seed: u64) -> Result<u64> {
        self.fit_steps(xs, ys, (epochs * xs.len()) as u64, seed)
    }

    pub fn mse(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        xs.iter()
            .zip(ys)
            .map(|(x, y)| (self.predict(x) - y).powi(2))
            .sum::<f64>()
            / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn empty_batch_is_noop() {
        let mut m = SgdRegressor::new(3, 0.1);
        let before = m.clone();
        assert_eq!(m.partial_fit(&[], &[]).unwrap(), 0);
        assert_eq!(m, before);
    }

    #[test]
    fn single_step_by_hand() {
        let mut m = SgdRegressor::new(1, 0.1);
        m.partial_fit(&[vec![1.0]], &[1.0]).unwrap();
        assert!((m.weights[0] - 0.2).abs() < 1e-15);
        assert!((m.bias - 0.2).abs() < 1e-15);
        assert_eq!(m.samples_seen, 1);
    }

    #[test]
    fn learns_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.gen::<f64>()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x[0] + 1.0).collect();
        let mut m = SgdRegressor::new(1, 0.1);
        m.partial_fit(&xs, &ys).unwrap();
        assert!((m.weights[0] - 3.0).abs() < 0.1, "w = {}", m.weights[0]);
        assert!((m.bias - 1.0).abs() < 0.1, "b = {}", m.bias);
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = SgdRegressor::new(1, 0.1);
        assert!(m.partial_fit(&[vec![f64::NAN]], &[1.0]).is_err());
        assert!(m.partial_fit(&[vec![1.0]], &[f64::INFINITY]).is_err());
        assert!(m.partial_fit(&[vec![1.0]], &[]).is_err());
        assert!(m.partial_fit(&[vec![1.0, 2.0]], &[1.0]).is_err());
        assert_eq!(m.samples_seen, 0);
    }

    #[test]
    fn stays_finite_on_extreme_inputs() {
        let mut m = SgdRegressor::new(2, 1.0);
        let xs = vec![vec![1e6, -1e6]; 50];
        let ys = vec![1e3; 50];
        m.partial_fit(&xs, &ys).unwrap();
        assert!(m.predict(&[1e6, -1e6]).is_finite());
    }

    #[test]
    fn fit_steps_counts_updates() {
        let mut m = SgdRegressor::new(1, 0.05);
        let xs = vec![vec![1.0], vec![2.0], vec![3.0]];
        let ys = vec![1.0, 2.0, 3.0];
        assert_eq!(m.fit_steps(&xs, &ys, 7, 1).unwrap(), 7);
        assert_eq!(m.samples_seen, 7);
        assert_eq!(m.fit_epochs(&xs, &ys, 2, 1).unwrap(), 6);
    }
}
