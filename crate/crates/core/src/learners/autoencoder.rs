//! Small fully-connected auto-encoder used as a task detector.
//!
//! Hidden and latent layers use the rectifier, the output layer is linear.
//! Training minimises the mean squared reconstruction error with mini-batch
//! gradient steps under the Adam update rule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stats::{Configuration, ParamValue, SearchSpace};

/// Fewest samples accepted by [`Autoencoder::train`].
pub const MIN_TRAINING_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeHyperParams {
    /// Hidden layers on each side of the latent layer (1 or 2).
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AeHyperParams {
    fn default() -> Self {
        Self {
            hidden_layers: 1,
            hidden_width: 16,
            latent_dim: 4,
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 16,
        }
    }
}

impl AeHyperParams {
    /// Default search space: layers {1,2}, width {4,8,16,32}, latent {2,4,8},
    /// learning rate log-uniform in [1e-4, 1e-1]; epochs and batch size fixed.
    pub fn search_space(budget: usize, seed: u64) -> SearchSpace {
        SearchSpace::new(budget, seed)
            .categorical("hidden_layers", vec![ParamValue::Int(1), ParamValue::Int(2)])
            .categorical("hidden_width", [4, 8, 16, 32].map(ParamValue::Int).to_vec())
            .categorical("latent_dim", [2, 4, 8].map(ParamValue::Int).to_vec())
            .log_uniform("learning_rate", 1e-4, 1e-1)
    }

    /// Reads a configuration drawn from [`AeHyperParams::search_space`];
    /// missing entries keep their defaults.
    pub fn from_config(config: &Configuration) -> Self {
        let mut hp = Self::default();
        if let Some(v) = config.get("hidden_layers").and_then(ParamValue::as_usize) {
            hp.hidden_layers = v;
        }
        if let Some(v) = config.get("hidden_width").and_then(ParamValue::as_usize) {
            hp.hidden_width = v;
        }
        if let Some(v) = config.get("latent_dim").and_then(ParamValue::as_usize) {
            hp.latent_dim = v;
        }
        if let Some(v) = config.get("learning_rate").and_then(ParamValue::as_f64) {
            hp.learning_rate = v;
        }
        hp
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut encoder = vec![input_dim, self.hidden_width];
        if self.hidden_layers >= 2 {
            encoder.push((self.hidden_width / 2).max(self.latent_dim));
        }
        let mut sizes = encoder.clone();
        sizes.push(self.latent_dim);
        sizes.extend(encoder.iter().rev());
        sizes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub sizes: Vec<usize>,
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Full-data loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Forward/backward sample passes performed.
    pub sample_passes: u64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

impl Autoencoder {
    /// Network with the given layer sizes and seeded Glorot-uniform weights.
    pub fn from_sizes(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.first() != sizes.last() || sizes.contains(&0) {
            return invalid(format!("invalid auto-encoder layer sizes {sizes:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], &mut rng)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameters: per layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            p.extend(&l.weights);
            p.extend(&l.bias);
        }
        p
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return invalid("parameter vector has the wrong length");
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(acts.last().expect("nonempty"), &mut out);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        self.forward_all(x).pop().expect("nonempty")
    }

    fn sample_error(&self, x: &[f64]) -> f64 {
        let y = self.reconstruct(x);
        y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64
    }

    /// Per-sample reconstruction MSE, in input order.
    pub fn errors(&self, data: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(x) = data.iter().find(|x| x.len() != self.input_dim()) {
            return invalid(format!("expected {} features, got {}", self.input_dim(), x.len()));
        }
        Ok(data.iter().map(|x| self.sample_error(x)).collect())
    }

    /// Mean reconstruction loss over `batch` and its gradient, flattened like
    /// [`Autoencoder::parameters`].
    pub fn gradient(&self, batch: &[&[f64]]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.parameter_count()];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |at, l| {
                let start = *at;
                *at += l.weights.len() + l.bias.len();
                Some(start)
            })
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let d = self.input_dim() as f64;
        let mut loss = 0.0;
        for x in batch {
            let acts = self.forward_all(x);
            let out = acts.last().expect("nonempty");
            loss += out.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d * scale;
            // delta at the output layer (linear)
            let mut delta: Vec<f64> = out
                .iter()
                .zip(x.iter())
                .map(|(a, b)| 2.0 * (a - b) / d * scale)
                .collect();
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let off = offsets[li];
                for o in 0..layer.outputs {
                    let g = delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[off + o * layer.inputs..off + (o + 1) * layer.inputs];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += g * v;
                    }
                    grad[off + layer.weights.len() + o] += g;
                }
                if li > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for o in 0..layer.outputs {
                        let g = delta[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += g * w;
                        }
                    }
                    // rectifier derivative of the layer that produced `input`
                    for (p, a) in prev.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss, grad)
    }

    /// Trains a fresh network on `data`. Deterministic in `seed`.
    pub fn train(data: &[Vec<f64>], hp: &AeHyperParams, seed: u64) -> Result<(Self, TrainReport)> {
        if data.len() < MIN_TRAINING_SAMPLES {
            return invalid(format!(
                "auto-encoder training needs at least {MIN_TRAINING_SAMPLES} samples, got {}",
                data.len()
            ));
        }
        let dim = data[0].len();
        if dim == 0 || data.iter().any(|x| x.len() != dim) {
            return invalid("auto-encoder training data has inconsistent width");
        }
        if hp.epochs == 0 || hp.batch_size == 0 || !(hp.learning_rate > 0.0) {
            return invalid("auto-encoder hyperparameters out of range");
        }
        let mut model = Self::from_sizes(&hp.layer_sizes(dim), seed)?;
        let mut params = model.parameters();
        let mut adam = Adam::new(params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ae00);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut report = TrainReport::default();
        for _ in 0..hp.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(hp.batch_size) {
                let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
                let (_, grad) = model.gradient(&batch);
                adam.apply(&mut params, &grad, hp.learning_rate);
                model.set_parameters(&params)?;
                report.sample_passes += batch.len() as u64;
            }
            let loss = data.iter().map(|x| model.sample_error(x)).sum::<f64>() / data.len() as f64;
            report.epoch_losses.push(loss);
        }
        Ok((model, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn memorises_constant_data() {
        let v = vec![0.5, -1.0, 2.0, 0.0, 1.5];
        let data = vec![v; 12];
        let (model, _) = Autoencoder::train(&data, &AeHyperParams::default(), 1).unwrap();
        let errs = model.errors(&data).unwrap();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean < 1e-3, "mean error {mean}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = cloud(30, 6, 9);
        let hp = AeHyperParams {
            epochs: 20,
            ..Default::default()
        };
        let (a, ra) = Autoencoder::train(&data, &hp, 77).unwrap();
        let (b, rb) = Autoencoder::train(&data, &hp, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn zero_weights_error_is_mean_square() {
        let mut model = Autoencoder::from_sizes(&[3, 2, 3], 0).unwrap();
        let zeros = vec![0.0; model.parameter_count()];
        model.set_parameters(&zeros).unwrap();
        let x = vec![0.6, 0.8, 0.0];
        let errs = model.errors(&[x.clone(), vec![1.0, 0.0, 0.0]]).unwrap();
        assert!((errs[0] - (0.36 + 0.64) / 3.0).abs() < 1e-15);
        assert!((errs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn error_shape_and_dimension_check() {
        let model = Autoencoder::from_sizes(&[4, 2, 4], 0).unwrap();
        assert_eq!(model.errors(&cloud(7, 4, 1)).unwrap().len(), 7);
        assert!(model.errors(&[vec![1.0; 3]]).is_err());
        assert!(model.errors(&cloud(3, 4, 2)).unwrap().iter().all(|e| *e >= 0.0));
    }

    #[test]
    fn too_little_data() {
        assert!(Autoencoder::train(&cloud(9, 3, 0), &AeHyperParams::default(), 0).is_err());
    }

    #[test]
    fn layer_sizes_mirror() {
        let hp = AeHyperParams {
            hidden_layers: 2,
            hidden_width: 16,
            latent_dim: 4,
            ..Default::default()
        };
        assert_eq!(hp.layer_sizes(10), vec![10, 16, 8, 4, 8, 16, 10]);
        let one = AeHyperParams::default();
        assert_eq!(one.layer_sizes(10), vec![10, 16, 4, 16, 10]);
    }

    #[test]
    fn loss_mostly_decreases() {
        let data = cloud(40, 8, 3);
        let hp = AeHyperParams {
            learning_rate: 3e-3,
            ..Default::default()
        };
        let (_, report) = Autoencoder::train(&data, &hp, 5).unwrap();
        for pair in report.epoch_losses.windows(2) {
            assert!(pair[1] <= pair[0] * 1.05, "{} -> {}", pair[0], pair[1]);
        }
        assert!(report.epoch_losses.last() < report.epoch_losses.first());
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let model = Autoencoder::from_sizes(&[4, 2, 4], 3).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: Autoencoder = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
