use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor applied to the standard deviation when transforming.
pub const STD_FLOOR: f64 = 1e-8;

/// Running per-feature mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    m2: Vec<f64>,
    count: u64,
}

impl ScalerState {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn fitted(batch: &[Vec<f64>]) -> Result<Self> {
        let dim = batch.first().map_or(0, Vec::len);
        let mut s = Self::new(dim);
        s.update(batch)?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        self.m2
            .iter()
            .map(|m| (m / self.count as f64).max(0.0).sqrt())
            .collect()
    }

    /// Centre and divisor applied by [`ScalerState::transform_one`].
    pub fn effective(&self) -> (Vec<f64>, Vec<f64>) {
        if self.count == 0 {
            return (vec![0.0; self.dim()], vec![1.0; self.dim()]);
        }
        let scale = self.std().into_iter().map(|s| s.max(STD_FLOOR)).collect();
        (self.mean.clone(), scale)
    }

    fn check(&self, batch: &[Vec<f64>]) -> Result<()> {
        match batch.iter().find(|x| x.len() != self.dim()) {
            Some(x) => invalid(format!("expected {} features, got {}", self.dim(), x.len())),
            None => Ok(()),
        }
    }

    /// Merges a batch into the running statistics (pairwise update, so one
    /// large batch and several small ones give the same mean).
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        self.check(batch)?;
        if batch.is_empty() {
            return Ok(());
        }
        let nb = batch.len() as f64;
        let na = self.count as f64;
        let n = na + nb;
        for j in 0..self.dim() {
            let mb = batch.iter().map(|x| x[j]).sum::<f64>() / nb;
            let m2b: f64 = batch.iter().map(|x| (x[j] - mb).powi(2)).sum();
            let delta = mb - self.mean[j];
            if self.count == 0 {
                self.mean[j] = mb;
            } else {
                self.mean[j] += delta * nb / n;
            }
            self.m2[j] += m2b + delta * delta * na * nb / n;
        }
        self.count += batch.len() as u64;
        Ok(())
    }

    /// `(x - mean) / max(std, 1e-8)`; the identity until the first update.
    pub fn transform_one(&self, x: &[f64]) -> Vec<f64> {
        if self.count == 0 {
            return x.to_vec();
        }
        let n = self.count as f64;
        x.iter()
            .zip(&self.mean)
            .zip(&self.m2)
            .map(|((v, m), m2)| (v - m) / (m2 / n).max(0.0).sqrt().max(STD_FLOOR))
            .collect()
    }

    pub fn transform(&self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check(batch)?;
        Ok(batch.iter().map(|x| self.transform_one(x)).collect())
    }

    pub fn update_transform(&mut self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.update(batch)?;
        self.transform(batch)
    }
}
