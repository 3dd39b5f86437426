//! Lifelong learning loop: every `trigger_period` cycles the new triplets are
//! tested against the auto-encoder of every known task, labelled with the
//! detected (or a newly founded) task, and that task's learning models are
//! evolved from task-specific knowledge.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeStore, KnowledgeTriplet, TaskId};
use crate::learners::{AeHyperParams, Autoencoder, ScalerState, MIN_TRAINING_SAMPLES};
use crate::managing::{triplet_pairs, AdaptationOption, ModelRegistry, QualityModel, TrainingPair};
use crate::stats::{holm_decide, hyper_search, mann_whitney_u, ParamValue, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LllConfig {
    /// Cycles between activations.
    pub trigger_period: u64,
    /// Triplets tested per detection: the new ones padded with the most recent earlier ones.
    pub detection_window: usize,
    pub p_threshold: f64,
    /// Most recent task triplets used for evolution.
    pub miner_limit: usize,
    /// Operator queries when a classification task is founded.
    pub query_top_k: usize,
    pub ae_search_budget: usize,
    pub ae_epochs: usize,
    pub ae_batch_size: usize,
    /// Folds used to compute out-of-sample baseline errors of a new detector.
    pub baseline_folds: usize,
    pub model_search_budget: usize,
    /// SGD updates per regressor per training run during evolution.
    pub model_train_steps: u64,
    pub holdout_fraction: f64,
}

impl Default for LllConfig {
    fn default() -> Self {
        Self {
            trigger_period: 20,
            detection_window: 100,
            p_threshold: 0.025,
            miner_limit: 1000,
            query_top_k: 5,
            ae_search_budget: 20,
            ae_epochs: 200,
            ae_batch_size: 16,
            baseline_folds: 5,
            model_search_budget: 10,
            model_train_steps: 1000,
            holdout_fraction: 0.2,
        }
    }
}

impl LllConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.trigger_period == 0 {
            return bad("trigger period must be at least 1");
        }
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return bad("p threshold must lie in (0, 1)");
        }
        if (self.detection_window as u64) < self.trigger_period {
            return bad("detection window must cover at least one trigger period");
        }
        if self.miner_limit == 0 || self.ae_search_budget == 0 || self.model_search_budget == 0 {
            return bad("miner limit and search budgets must be positive");
        }
        if self.ae_epochs == 0 || self.ae_batch_size == 0 || self.baseline_folds < 2 {
            return bad("auto-encoder epochs, batch size and folds out of range");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout fraction must lie in (0, 1)");
        }
        if self.trigger_period < founding_minimum(self) as u64 {
            return bad("trigger period too short to train a detector");
        }
        Ok(())
    }
}

/// Mixes a seed with extra words; used to derive per-activation seeds.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x6a09_e667_f3bc_c909;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
    }
    h
}

/// Seeded shuffle split into (train, holdout) index sets.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let train = idx.split_off(k);
    (train, idx)
}

/// Auto-encoder plus the scaler snapshot its inputs go through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub scaler: ScalerState,
    pub autoencoder: Autoencoder,
    pub params: AeHyperParams,
}

impl Detector {
    pub fn errors(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.autoencoder.errors(&self.scaler.transform(inputs)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDetector {
    pub detector: Detector,
    pub baseline_errors: Vec<f64>,
    /// Auto-encoder sample passes spent.
    pub cost: u64,
}

/// Independent trainings of the final detector; the lowest training error
/// wins, which guards against an unlucky start with dead hidden units.
pub const FINAL_RESTARTS: u64 = 3;

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Smallest founding set for which both the holdout search and every baseline
/// fold keep enough training samples.
pub fn founding_minimum(config: &LllConfig) -> usize {
    (MIN_TRAINING_SAMPLES..)
        .find(|&n| {
            let (train, _) = holdout_split(n, config.holdout_fraction, 0);
            let largest_fold = n.div_ceil(config.baseline_folds.min(n));
            train.len() >= MIN_TRAINING_SAMPLES && n - largest_fold >= MIN_TRAINING_SAMPLES
        })
        .expect("unbounded search")
}

/// Trains a detector on founding data: hyperparameters by seeded search on a
/// holdout, baseline errors out-of-fold, final network on all data.
///
/// Folds are contiguous blocks and every fold refits its own scaler, so the
/// baseline errors carry the same out-of-sample effects as errors on later data.
pub fn train_detector(founding: &[Vec<f64>], config: &LllConfig, seed: u64) -> Result<TrainedDetector> {
    let mut cost = 0;
    let with_schedule = |hp: AeHyperParams| AeHyperParams {
        epochs: config.ae_epochs,
        batch_size: config.ae_batch_size,
        ..hp
    };
    let fit_and_score =
        |fit: &[Vec<f64>], held: &[Vec<f64>], hp: &AeHyperParams, seed: u64| -> Result<(Vec<f64>, u64)> {
            let scaler = ScalerState::fitted(fit)?;
            let (ae, report) = Autoencoder::train(&scaler.transform(fit)?, hp, seed)?;
            Ok((ae.errors(&scaler.transform(held)?)?, report.sample_passes))
        };

    let (train_idx, hold_idx) = holdout_split(founding.len(), config.holdout_fraction, seed);
    let train: Vec<Vec<f64>> = train_idx.iter().map(|&i| founding[i].clone()).collect();
    let hold: Vec<Vec<f64>> = hold_idx.iter().map(|&i| founding[i].clone()).collect();
    let space = AeHyperParams::search_space(config.ae_search_budget, derive_seed(seed, &[1]));
    let outcome = hyper_search(&space, |c| {
        let hp = with_schedule(AeHyperParams::from_config(c));
        let (errs, passes) = fit_and_score(&train, &hold, &hp, derive_seed(seed, &[2])).ok()?;
        cost += passes;
        Some(errs.iter().sum::<f64>() / errs.len() as f64)
    })?;
    let params = with_schedule(AeHyperParams::from_config(&outcome.best));

    let n = founding.len();
    let folds = config.baseline_folds.min(n);
    let mut baseline = Vec::with_capacity(n);
    for k in 0..folds {
        let block = k * n / folds..(k + 1) * n / folds;
        let fit: Vec<Vec<f64>> = (0..n)
            .filter(|i| !block.contains(i))
            .map(|i| founding[i].clone())
            .collect();
        let (errs, passes) = fit_and_score(&fit, &founding[block], &params, derive_seed(seed, &[3, k as u64]))?;
        cost += passes;
        baseline.extend(errs);
    }
    let scaler = ScalerState::fitted(founding)?;
    let scaled = scaler.transform(founding)?;
    let mut best: Option<(f64, Autoencoder)> = None;
    for restart in 0..FINAL_RESTARTS {
        let (ae, report) = Autoencoder::train(&scaled, &params, derive_seed(seed, &[4, restart]))?;
        cost += report.sample_passes;
        let loss = mean_of(&ae.errors(&scaled)?);
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, ae));
        }
    }
    let autoencoder = best.expect("at least one restart").1;
    Ok(TrainedDetector {
        detector: Detector {
            scaler,
            autoencoder,
            params,
        },
        baseline_errors: baseline,
        cost,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub p_values: BTreeMap<TaskId, f64>,
    /// `None` when every task was rejected and a new one must be founded.
    pub assigned: Option<TaskId>,
}

/// Compares detector errors on `window` with each task's baseline errors.
pub fn detect_tasks(window: &[Vec<f64>], tasks: &[(TaskId, &Detector, &[f64])], alpha: f64) -> Result<Detection> {
    let mut p_values = BTreeMap::new();
    for &(task, detector, baseline) in tasks {
        let errors = detector.errors(window)?;
        p_values.insert(task, mann_whitney_u(&errors, baseline)?.p_two_sided);
    }
    if p_values.is_empty() {
        return Ok(Detection {
            p_values,
            assigned: None,
        });
    }
    let ps: Vec<f64> = p_values.values().copied().collect();
    let rejected = holm_decide(&ps, alpha)?;
    let assigned = if rejected.iter().all(|&r| r) {
        None
    } else {
        // highest p, lowest id on ties
        p_values
            .iter()
            .fold(None, |best: Option<(TaskId, f64)>, (&t, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((t, p)),
            })
            .map(|(t, _)| t)
    };
    Ok(Detection { p_values, assigned })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LllEvent {
    pub cycle: u64,
    pub detected_task: TaskId,
    pub is_new: bool,
    pub p_values: BTreeMap<TaskId, f64>,
    pub training_time_ms: f64,
    /// Learning-model sample updates spent by the evolution.
    pub training_cost: u64,
    /// Auto-encoder sample passes spent founding a detector.
    pub detector_cost: u64,
}

/// What an evolution step may look at.
#[derive(Clone, Copy, Debug)]
pub struct EvolveContext<'a> {
    pub task: TaskId,
    pub is_new: bool,
    /// Cycles collected since the previous activation.
    pub new_cycles: &'a [u64],
    pub config: &'a LllConfig,
    pub seed: u64,
}

/// Case-specific part of the loop: detector inputs, knowledge mining and
/// model evolution.
pub trait TaskLearner {
    type Model;

    fn detection_input(&self, triplet: &KnowledgeTriplet) -> Vec<f64> {
        triplet.input.clone()
    }

    /// Mines task data, trains the task's models and installs them as active.
    /// Returns the training cost in sample updates.
    fn evolve(
        &mut self,
        ctx: EvolveContext<'_>,
        knowledge: &mut KnowledgeStore,
        registry: &mut ModelRegistry<Self::Model>,
    ) -> Result<u64>;
}

pub struct LifelongLoop {
    config: LllConfig,
    seed: u64,
    detectors: Vec<Detector>,
    events: Vec<LllEvent>,
    pending_novelty: bool,
}

impl LifelongLoop {
    pub fn new(config: LllConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            seed,
            detectors: Vec::new(),
            events: Vec::new(),
            pending_novelty: false,
        })
    }

    pub fn config(&self) -> &LllConfig {
        &self.config
    }

    pub fn events(&self) -> &[LllEvent] {
        &self.events
    }

    pub fn detector(&self, id: u32) -> Option<&Detector> {
        self.detectors.get(id as usize)
    }

    fn found(
        &mut self,
        knowledge: &mut KnowledgeStore,
        cycles: &[u64],
        inputs: &[Vec<f64>],
        seed: u64,
        cost: &mut u64,
    ) -> Result<TaskId> {
        let trained = train_detector(inputs, &self.config, seed)?;
        *cost = trained.cost;
        let detector_id = self.detectors.len() as u32;
        let last = *cycles.last().expect("founding set is nonempty");
        let task = knowledge.create_task(last, cycles, detector_id, trained.baseline_errors)?;
        self.detectors.push(trained.detector);
        Ok(task)
    }

    /// Called after `completed` cycles have run. Activates on multiples of the
    /// trigger period; otherwise does nothing.
    pub fn tick<L: TaskLearner>(
        &mut self,
        completed: u64,
        knowledge: &mut KnowledgeStore,
        registry: &mut ModelRegistry<L::Model>,
        learner: &mut L,
    ) -> Result<Option<LllEvent>> {
        if completed == 0 || completed % self.config.trigger_period != 0 {
            return Ok(None);
        }
        let started = Instant::now();
        let seed = derive_seed(self.seed, &[completed]);
        let period = self.config.trigger_period as usize;
        let fresh = knowledge.recent(period);
        if fresh.len() < period {
            return Err(Error::InvalidArgument(format!(
                "activation at {completed} needs {period} new triplets, found {}",
                fresh.len()
            )));
        }
        let new_cycles: Vec<u64> = fresh.iter().map(|t| t.cycle).collect();
        let new_inputs: Vec<Vec<f64>> = fresh.iter().map(|t| learner.detection_input(t)).collect();
        let window: Vec<Vec<f64>> = knowledge
            .recent(self.config.detection_window)
            .iter()
            .map(|t| learner.detection_input(t))
            .collect();

        let tasks: Vec<(TaskId, &Detector, &[f64])> = knowledge
            .tasks()
            .map(|t| {
                (
                    t.task_id,
                    &self.detectors[t.detector_id as usize],
                    t.baseline_errors.as_slice(),
                )
            })
            .collect();
        let detection = detect_tasks(&window, &tasks, self.config.p_threshold)?;
        let fallback = detection
            .p_values
            .iter()
            .fold(None::<(TaskId, f64)>, |best, (&t, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((t, p)),
            })
            .map(|(t, _)| t);
        // A new task is founded only when novelty persists over two
        // consecutive activations, so founding data never straddles a
        // regime change.
        let novel = detection.assigned.is_none();
        let assigned = if novel && (tasks.is_empty() || self.pending_novelty) {
            None
        } else {
            detection.assigned.or(fallback)
        };
        self.pending_novelty = novel && assigned.is_some();
        drop(tasks);
        let mut detector_cost = 0;
        let (task, is_new) = match assigned {
            None => (
                self.found(knowledge, &new_cycles, &new_inputs, seed, &mut detector_cost)?,
                true,
            ),
            Some(task) => {
                let labels: Vec<(u64, TaskId)> = new_cycles.iter().map(|&c| (c, task)).collect();
                knowledge.label_triplets(&labels)?;
                (task, false)
            }
        };
        debug!(
            "activation at {completed}: task {task} (new: {is_new}) p = {:?}",
            detection.p_values
        );
        let ctx = EvolveContext {
            task,
            is_new,
            new_cycles: &new_cycles,
            config: &self.config,
            seed,
        };
        let training_cost = learner.evolve(ctx, knowledge, registry)?;
        let event = LllEvent {
            cycle: completed,
            detected_task: task,
            is_new,
            p_values: detection.p_values,
            training_time_ms: started.elapsed().as_secs_f64() * 1e3,
            training_cost,
            detector_cost,
        };
        self.events.push(event.clone());
        Ok(Some(event))
    }
}

/// Regressor hyperparameters searched during evolution.
pub fn regressor_search_space(budget: usize, seed: u64) -> SearchSpace {
    SearchSpace::new(budget, seed)
        .log_uniform("eta0", 1e-3, 0.3)
        .log_uniform("alpha", 1e-7, 1e-2)
}

/// Evolves the network quality models: fetch the task's recent triplets,
/// search SGD hyperparameters on a holdout, retrain on all mined pairs.
#[derive(Clone, Debug)]
pub struct NetworkTaskLearner {
    options: Vec<AdaptationOption>,
    detect_on_qualities: bool,
}

impl NetworkTaskLearner {
    /// Without `detect_on_qualities` the detectors see only the monitored
    /// uncertainties, not the observed packet loss and energy.
    pub fn new(options: Vec<AdaptationOption>, detect_on_qualities: bool) -> Self {
        Self {
            options,
            detect_on_qualities,
        }
    }

    pub fn mine(&self, task: TaskId, knowledge: &KnowledgeStore, limit: usize) -> Result<Vec<TrainingPair>> {
        Ok(knowledge
            .fetch_task_triplets(task, limit)?
            .into_iter()
            .rev()
            .flat_map(|t| triplet_pairs(t, &self.options))
            .collect())
    }
}

fn tuned(base: &QualityModel, eta0: f64, alpha: f64) -> QualityModel {
    QualityModel {
        scaler: base.scaler.clone(),
        packet_loss: base.packet_loss.restarted(eta0, alpha),
        energy: base.energy.restarted(eta0, alpha),
    }
}

impl TaskLearner for NetworkTaskLearner {
    type Model = QualityModel;

    fn detection_input(&self, triplet: &KnowledgeTriplet) -> Vec<f64> {
        if self.detect_on_qualities {
            triplet.input.clone()
        } else {
            triplet.input[..triplet.input.len().saturating_sub(2)].to_vec()
        }
    }

    fn evolve(
        &mut self,
        ctx: EvolveContext<'_>,
        knowledge: &mut KnowledgeStore,
        registry: &mut ModelRegistry<QualityModel>,
    ) -> Result<u64> {
        let pairs = self.mine(ctx.task, knowledge, ctx.config.miner_limit)?;
        if pairs.is_empty() {
            warn!("task {} has no training data; models unchanged", ctx.task);
            return Ok(0);
        }
        let base = registry.get(ctx.task).unwrap_or_else(|| registry.active());
        let raw: Vec<Vec<f64>> = pairs.iter().map(|p| p.input.clone()).collect();
        let base = base.rescaled(ScalerState::fitted(&raw)?)?;

        let steps = ctx.config.model_train_steps;
        let (train_idx, hold_idx) = holdout_split(pairs.len(), ctx.config.holdout_fraction, ctx.seed);
        let train: Vec<TrainingPair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
        let hold: Vec<TrainingPair> = hold_idx.iter().map(|&i| pairs[i].clone()).collect();
        let mut cost = 0;
        let space = regressor_search_space(ctx.config.model_search_budget, derive_seed(ctx.seed, &[10]));
        let outcome = hyper_search(&space, |c| {
            let eta0 = c.get("eta0").and_then(ParamValue::as_f64)?;
            let alpha = c.get("alpha").and_then(ParamValue::as_f64)?;
            let mut m = tuned(&base, eta0, alpha);
            cost += m.fit_steps(&train, steps, derive_seed(ctx.seed, &[11])).ok()?;
            Some(m.validation_loss(&hold))
        })?;
        let eta0 = outcome.best["eta0"].as_f64().expect("searched");
        let alpha = outcome.best["alpha"].as_f64().expect("searched");
        let mut model = tuned(&base, eta0, alpha);
        cost += model.fit_steps(&pairs, steps, derive_seed(ctx.seed, &[12]))?;
        registry.install(ctx.task, model);
        Ok(cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cloud(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0..dim)
                    .map(|j| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        shift + z * (j as f64 * 0.3).sin() + 0.3 * e
                    })
                    .collect()
            })
            .collect()
    }

    fn fast_config() -> LllConfig {
        LllConfig {
            ae_search_budget: 4,
            ae_epochs: 60,
            ..LllConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(LllConfig::default().validate().is_ok());
        let bad = LllConfig {
            detection_window: 10,
            ..LllConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LllConfig {
            p_threshold: 1.0,
            ..LllConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn holdout_split_partitions() {
        let (a, b) = holdout_split(20, 0.2, 3);
        assert_eq!((a.len(), b.len()), (16, 4));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(holdout_split(20, 0.2, 3), (a, b));
    }

    #[test]
    fn same_distribution_is_assigned_shift_is_new() {
        let cfg = fast_config();
        let founding = gaussian_cloud(20, 6, 0.0, 1);
        let trained = train_detector(&founding, &cfg, 7).unwrap();
        assert_eq!(trained.baseline_errors.len(), 20);
        let tasks = [(1, &trained.detector, trained.baseline_errors.as_slice())];
        let same = detect_tasks(&gaussian_cloud(100, 6, 0.0, 2), &tasks, cfg.p_threshold).unwrap();
        assert_eq!(same.assigned, Some(1), "p = {:?}", same.p_values);
        let shifted = detect_tasks(&gaussian_cloud(100, 6, 5.0, 3), &tasks, cfg.p_threshold).unwrap();
        assert_eq!(shifted.assigned, None, "p = {:?}", shifted.p_values);
    }

    #[test]
    fn highest_p_wins_and_no_tasks_means_new() {
        let cfg = fast_config();
        let a = train_detector(&gaussian_cloud(40, 4, 0.0, 1), &cfg, 1).unwrap();
        let b = train_detector(&gaussian_cloud(40, 4, 6.0, 2), &cfg, 2).unwrap();
        let tasks = [
            (1, &a.detector, a.baseline_errors.as_slice()),
            (2, &b.detector, b.baseline_errors.as_slice()),
        ];
        let d = detect_tasks(&gaussian_cloud(100, 4, 6.0, 9), &tasks, 0.025).unwrap();
        assert_eq!(d.assigned, Some(2), "p = {:?}", d.p_values);
        assert!(detect_tasks(&gaussian_cloud(5, 4, 0.0, 1), &[], 0.025)
            .unwrap()
            .assigned
            .is_none());
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(1, &[20]);
        assert_ne!(a, derive_seed(1, &[40]));
        assert_ne!(a, derive_seed(2, &[20]));
        assert_eq!(a, derive_seed(1, &[20]));
        let _ = ChaCha8Rng::seed_from_u64(a).gen::<u8>();
    }
}
