//! MAPE-K managing system: preferences and utility, the model registry, and
//! the monitor/analyse/plan/execute cycle driven by quality predictions.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::knowledge::{KnowledgeTriplet, OptionQuality, TaskId, TripletOutput, TripletState};
use crate::learners::{ScalerState, SgdRegressor};

/// Energy at or below which the energy preference is maximal (mC).
pub const ENERGY_FULL_PREFERENCE: f64 = 13.0;
/// Energy at or above which the energy preference is zero (mC).
pub const ENERGY_ZERO_PREFERENCE: f64 = 13.4;
pub const WEIGHT_ENERGY: f64 = 0.2;
pub const WEIGHT_PACKET_LOSS: f64 = 0.8;

pub fn preference_energy(ec: f64) -> Result<f64> {
    if !(ec >= 0.0) || !ec.is_finite() {
        return invalid(format!("energy consumption {ec} out of range"));
    }
    Ok(if ec <= ENERGY_FULL_PREFERENCE {
        1.0
    } else if ec >= ENERGY_ZERO_PREFERENCE {
        0.0
    } else {
        (ENERGY_ZERO_PREFERENCE - ec) / (ENERGY_ZERO_PREFERENCE - ENERGY_FULL_PREFERENCE)
    })
}

pub fn preference_packet_loss(pl: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&pl) {
        return invalid(format!("packet loss {pl} out of range"));
    }
    Ok(1.0 - pl / 100.0)
}

pub fn utility(p_ec: f64, p_pl: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_ec) || !(0.0..=1.0).contains(&p_pl) {
        return invalid(format!("preferences ({p_ec}, {p_pl}) out of range"));
    }
    Ok(WEIGHT_ENERGY * p_ec + WEIGHT_PACKET_LOSS * p_pl)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    /// Percent.
    pub packet_loss: f64,
    /// Millicoulomb.
    pub energy: f64,
}

impl QualityEstimate {
    pub fn new(packet_loss: f64, energy: f64) -> Self {
        Self { packet_loss, energy }
    }

    /// Clamped into the valid quality ranges.
    pub fn clamped(&self) -> Self {
        let fix = |v: f64, hi: f64| if v.is_nan() { hi } else { v.clamp(0.0, hi) };
        Self {
            packet_loss: fix(self.packet_loss, 100.0),
            energy: fix(self.energy, f64::MAX),
        }
    }

    /// Utility of the clamped estimate.
    pub fn utility(&self) -> f64 {
        let q = self.clamped();
        let p_ec = preference_energy(q.energy).expect("clamped");
        let p_pl = preference_packet_loss(q.packet_loss).expect("clamped");
        utility(p_ec, p_pl).expect("preferences are in range")
    }

    pub fn with_option(&self, option_id: u32) -> OptionQuality {
        OptionQuality {
            option_id,
            packet_loss: self.packet_loss,
            energy: self.energy,
        }
    }
}

impl From<&OptionQuality> for QualityEstimate {
    fn from(q: &OptionQuality) -> Self {
        Self::new(q.packet_loss, q.energy)
    }
}

/// One network configuration: per-mote transmission power and, for every
/// dual-link mote, the percentage of traffic sent over its first link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationOption {
    pub option_id: u32,
    pub power: Vec<u8>,
    pub distribution: Vec<u8>,
}

/// Split percentages available to a dual-link mote.
pub const SPLIT_STEPS: [u8; 6] = [0, 20, 40, 60, 80, 100];

impl AdaptationOption {
    pub fn new(option_id: u32, power: Vec<u8>, distribution: Vec<u8>) -> Result<Self> {
        if let Some(p) = power.iter().find(|&&p| p > 15) {
            return invalid(format!("power setting {p} outside [0, 15]"));
        }
        if let Some(d) = distribution.iter().find(|&&d| d > 100) {
            return invalid(format!("split {d}% outside [0, 100]"));
        }
        Ok(Self {
            option_id,
            power,
            distribution,
        })
    }

    /// Split fractions followed by normalised power settings.
    pub fn features(&self) -> Vec<f64> {
        self.distribution
            .iter()
            .map(|&d| f64::from(d) / 100.0)
            .chain(self.power.iter().map(|&p| f64::from(p) / 15.0))
            .collect()
    }
}

/// Learner input for one option under the monitored uncertainties.
pub fn option_input(option: &AdaptationOption, uncertainties: &[f64]) -> Vec<f64> {
    let mut x = option.features();
    x.extend_from_slice(uncertainties);
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: Vec<f64>,
    pub target: QualityEstimate,
}

/// Scaler plus one regressor per quality attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub scaler: ScalerState,
    pub packet_loss: SgdRegressor,
    pub energy: SgdRegressor,
}

impl QualityModel {
    pub fn new(scaler: ScalerState, eta0: f64, alpha: f64) -> Self {
        let dim = scaler.dim();
        Self {
            scaler,
            packet_loss: SgdRegressor::new(dim, eta0).with_alpha(alpha),
            energy: SgdRegressor::new(dim, eta0).with_alpha(alpha),
        }
    }

    pub fn dim(&self) -> usize {
        self.scaler.dim()
    }

    /// The same prediction function expressed under another scaler.
    pub fn rescaled(&self, scaler: ScalerState) -> Result<Self> {
        if scaler.dim() != self.dim() {
            return invalid("scaler dimension does not match the model");
        }
        let (old_mean, old_scale) = self.scaler.effective();
        let (new_mean, new_scale) = scaler.effective();
        let convert = |r: &SgdRegressor| {
            let mut out = r.clone();
            for j in 0..r.weights.len() {
                out.bias += r.weights[j] * (new_mean[j] - old_mean[j]) / old_scale[j];
                out.weights[j] = r.weights[j] * new_scale[j] / old_scale[j];
            }
            out
        };
        Ok(Self {
            packet_loss: convert(&self.packet_loss),
            energy: convert(&self.energy),
            scaler,
        })
    }

    /// Raw (unclamped) prediction.
    pub fn predict(&self, input: &[f64]) -> QualityEstimate {
        let x = self.scaler.transform_one(input);
        QualityEstimate::new(self.packet_loss.predict(&x), self.energy.predict(&x))
    }

    fn split(&self, pairs: &[TrainingPair]) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        let raw: Vec<Vec<f64>> = pairs.iter().map(|p| p.input.clone()).collect();
        let xs = self.scaler.transform(&raw)?;
        let pl = pairs.iter().map(|p| p.target.packet_loss).collect();
        let ec = pairs.iter().map(|p| p.target.energy).collect();
        Ok((xs, pl, ec))
    }

    /// One in-order SGD pass per regressor. Returns the number of sample updates.
    pub fn partial_fit(&mut self, pairs: &[TrainingPair]) -> Result<u64> {
        let (xs, pl, ec) = self.split(pairs)?;
        let mut next = self.clone();
        let cost = next.packet_loss.partial_fit(&xs, &pl)? + next.energy.partial_fit(&xs, &ec)?;
        *self = next;
        Ok(cost)
    }

    /// Shuffled SGD for a fixed number of updates per regressor.
    pub fn fit_steps(&mut self, pairs: &[TrainingPair], steps: u64, seed: u64) -> Result<u64> {
        let (xs, pl, ec) = self.split(pairs)?;
        let mut next = self.clone();
        let cost = next.packet_loss.fit_steps(&xs, &pl, steps, seed)?
            + next.energy.fit_steps(&xs, &ec, steps, seed.wrapping_add(1))?;
        *self = next;
        Ok(cost)
    }

    /// Mean squared error of both regressors, each relative to the target variance
    /// so the two qualities weigh alike.
    pub fn validation_loss(&self, pairs: &[TrainingPair]) -> f64 {
        if pairs.is_empty() {
            return f64::INFINITY;
        }
        let n = pairs.len() as f64;
        let mut loss = 0.0;
        for get in [|q: &QualityEstimate| q.packet_loss, |q: &QualityEstimate| q.energy] {
            let ys: Vec<f64> = pairs.iter().map(|p| get(&p.target)).collect();
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            let mse = pairs
                .iter()
                .map(|p| (get(&self.predict(&p.input)) - get(&p.target)).powi(2))
                .sum::<f64>()
                / n;
            loss += mse / var.max(1e-6);
        }
        loss
    }
}

/// Current learning models of the managing system, one entry per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry<M> {
    entries: BTreeMap<TaskId, M>,
    active: TaskId,
}

impl<M> ModelRegistry<M> {
    pub fn new(task: TaskId, model: M) -> Self {
        Self {
            entries: BTreeMap::from([(task, model)]),
            active: task,
        }
    }

    pub fn active_id(&self) -> TaskId {
        self.active
    }

    pub fn active(&self) -> &M {
        &self.entries[&self.active]
    }

    pub fn active_mut(&mut self) -> &mut M {
        self.entries.get_mut(&self.active).expect("active entry exists")
    }

    pub fn get(&self, task: TaskId) -> Option<&M> {
        self.entries.get(&task)
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.entries.contains_key(&task)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.entries.keys().copied()
    }

    /// Replaces (or adds) the entry for `task` and makes it active.
    pub fn install(&mut self, task: TaskId, model: M) {
        self.entries.insert(task, model);
        self.active = task;
    }

    pub fn activate(&mut self, task: TaskId) -> Result<()> {
        if !self.entries.contains_key(&task) {
            return Err(Error::Registry(format!("no model for task {task}")));
        }
        self.active = task;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub option_id: u32,
    pub predicted: QualityEstimate,
    pub utility: f64,
    /// Raw predictions for every option, in option-id order.
    pub predictions: Vec<OptionQuality>,
}

/// Predicts every option with the active model and picks the highest
/// utility, lowest option id on ties.
pub fn analyze_plan(
    options: &[AdaptationOption],
    uncertainties: &[f64],
    registry: &ModelRegistry<QualityModel>,
) -> Result<Plan> {
    if options.is_empty() {
        return invalid("no adaptation options");
    }
    let model = registry.active();
    let mut predictions: Vec<OptionQuality> = Vec::with_capacity(options.len());
    let mut best: Option<(u32, f64, QualityEstimate)> = None;
    for option in options {
        let input = option_input(option, uncertainties);
        if input.len() != model.dim() {
            return Err(Error::Registry(format!(
                "model expects {} inputs, option {} gives {}",
                model.dim(),
                option.option_id,
                input.len()
            )));
        }
        let q = model.predict(&input);
        let u = q.utility();
        predictions.push(q.with_option(option.option_id));
        let better = match best {
            None => true,
            Some((id, bu, _)) => u > bu || (u == bu && option.option_id < id),
        };
        if better {
            best = Some((option.option_id, u, q));
        }
    }
    predictions.sort_by_key(|p| p.option_id);
    let (option_id, utility, predicted) = best.expect("options nonempty");
    Ok(Plan {
        option_id,
        predicted,
        utility,
        predictions,
    })
}

/// The system under management as seen by the feedback loop.
pub trait ManagedSystem {
    fn options(&self) -> &[AdaptationOption];

    /// Observes the uncertainties of `cycle`. Returns [`Error::EndOfRun`] when exhausted.
    fn monitor(&mut self, cycle: u64) -> Result<Vec<f64>>;

    /// Applies an option for the monitored cycle and observes its qualities.
    fn execute(&mut self, option_id: u32) -> Result<QualityEstimate>;

    /// What-if evaluation of an option under the monitored cycle's conditions.
    fn verify(&self, option_id: u32) -> Result<QualityEstimate>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapeConfig {
    /// Extra options verified each cycle and fed to the online update.
    pub explore_per_cycle: usize,
    /// Partial-fit the active model on each cycle's outcomes.
    pub online_update: bool,
}

impl Default for MapeConfig {
    fn default() -> Self {
        Self {
            explore_per_cycle: 8,
            online_update: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CycleRecord {
    pub triplet: KnowledgeTriplet,
    pub plan: Plan,
    pub observed: QualityEstimate,
    /// Sample updates spent by the online update.
    pub training_cost: u64,
    pub training_ms: f64,
}

/// Training pairs recorded in a network triplet: the executed option and any
/// explored ones.
pub fn triplet_pairs(triplet: &KnowledgeTriplet, options: &[AdaptationOption]) -> Vec<TrainingPair> {
    let TripletState::Network { verified, .. } = &triplet.state else {
        return Vec::new();
    };
    let uncertainties = &triplet.input[..triplet.input.len().saturating_sub(2)];
    verified
        .iter()
        .filter_map(|q| options.iter().find(|o| o.option_id == q.option_id).map(|o| (o, q)))
        .map(|(o, q)| TrainingPair {
            input: option_input(o, uncertainties),
            target: q.into(),
        })
        .collect()
}

pub struct MapeLoop {
    config: MapeConfig,
    rng: ChaCha8Rng,
}

impl MapeLoop {
    pub fn new(config: MapeConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &MapeConfig {
        &self.config
    }

    /// Runs one monitor-analyse-plan-execute cycle and returns its triplet.
    /// The triplet input is the uncertainties followed by the observed
    /// packet loss and energy.
    pub fn cycle<S: ManagedSystem>(
        &mut self,
        cycle: u64,
        system: &mut S,
        registry: &mut ModelRegistry<QualityModel>,
    ) -> Result<CycleRecord> {
        let uncertainties = system.monitor(cycle)?;
        let plan = analyze_plan(system.options(), &uncertainties, registry)?;
        let observed = system.execute(plan.option_id)?;

        let mut verified = vec![observed.with_option(plan.option_id)];
        let others: Vec<u32> = system
            .options()
            .iter()
            .map(|o| o.option_id)
            .filter(|&id| id != plan.option_id)
            .collect();
        let k = self.config.explore_per_cycle.min(others.len());
        let mut picks: Vec<usize> = index::sample(&mut self.rng, others.len(), k).into_vec();
        picks.sort_unstable();
        for i in picks {
            verified.push(system.verify(others[i])?.with_option(others[i]));
        }

        let mut input = uncertainties;
        input.push(observed.packet_loss);
        input.push(observed.energy);
        let model_task = registry.active_id();
        let triplet = KnowledgeTriplet::new(
            cycle,
            input,
            TripletState::Network {
                model_task,
                scaler_id: registry.active().scaler.count(),
                predictions: plan.predictions.clone(),
                verified,
            },
            TripletOutput::Adaptation {
                option_id: plan.option_id,
            },
        );
        let mut training_cost = 0;
        let started = Instant::now();
        if self.config.online_update {
            let pairs = triplet_pairs(&triplet, system.options());
            training_cost = registry.active_mut().partial_fit(&pairs)?;
        }
        let training_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(CycleRecord {
            triplet,
            plan,
            observed,
            training_cost,
            training_ms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn preference_examples() {
        assert!(close(preference_energy(12.5).unwrap(), 1.0));
        assert!(close(preference_energy(13.2).unwrap(), 0.5));
        assert!(close(preference_energy(13.4).unwrap(), 0.0));
        assert!(close(preference_energy(20.0).unwrap(), 0.0));
        assert!(close(preference_packet_loss(25.0).unwrap(), 0.75));
        assert!(preference_energy(-1.0).is_err());
        assert!(preference_packet_loss(100.5).is_err());
    }

    #[test]
    fn utility_examples() {
        assert!(close(utility(1.0, 1.0).unwrap(), 1.0));
        assert!(close(utility(1.0, 0.5).unwrap(), 0.6));
        assert!(close(utility(0.0, 0.0).unwrap(), 0.0));
        assert!(utility(1.1, 0.0).is_err());
    }

    #[test]
    fn option_validation() {
        assert!(AdaptationOption::new(0, vec![16], vec![]).is_err());
        assert!(AdaptationOption::new(0, vec![15], vec![120]).is_err());
        let o = AdaptationOption::new(0, vec![15, 0], vec![20, 100]).unwrap();
        assert_eq!(o.features(), vec![0.2, 1.0, 1.0, 0.0]);
    }

    fn fixed_model(w_pl: f64, w_ec: f64) -> ModelRegistry<QualityModel> {
        let mut m = QualityModel::new(ScalerState::new(2), 0.1, 0.0);
        m.packet_loss.weights = vec![w_pl, 0.0];
        m.energy.weights = vec![w_ec, 0.0];
        m.energy.bias = 12.0;
        ModelRegistry::new(0, m)
    }

    fn options(n: u32) -> Vec<AdaptationOption> {
        (0..n)
            .map(|i| AdaptationOption::new(i, vec![], vec![(i * 20) as u8]).unwrap())
            .collect()
    }

    #[test]
    fn singleton_and_dominance() {
        let reg = fixed_model(50.0, 0.0);
        let one = &options(1)[..];
        assert_eq!(analyze_plan(one, &[0.0], &reg).unwrap().option_id, 0);
        // option 0: pl 0, option 1: pl 10
        let plan = analyze_plan(&options(2), &[0.0], &reg).unwrap();
        assert_eq!(plan.option_id, 0);
        assert_eq!(plan.predictions.len(), 2);
    }

    #[test]
    fn ties_and_permutations() {
        let reg = fixed_model(0.0, 0.0);
        let mut opts = options(4);
        opts.reverse();
        assert_eq!(analyze_plan(&opts, &[1.0], &reg).unwrap().option_id, 0);
        let mut reg = fixed_model(-10.0, 0.0);
        reg.active_mut().packet_loss.bias = 50.0;
        let a = analyze_plan(&options(6), &[0.0], &reg).unwrap();
        let mut shuffled = options(6);
        shuffled.swap(0, 5);
        shuffled.swap(1, 3);
        assert_eq!(analyze_plan(&shuffled, &[0.0], &reg).unwrap(), a);
        assert_eq!(a.option_id, 5);
    }

    #[test]
    fn wild_predictions_are_clamped() {
        let reg = fixed_model(-1e9, 1e9);
        let plan = analyze_plan(&options(3), &[0.0], &reg).unwrap();
        assert!((0.0..=1.0).contains(&plan.utility));
    }

    #[test]
    fn rescaling_keeps_predictions() {
        let data = vec![vec![1.0, 10.0], vec![3.0, 14.0], vec![2.0, 9.0]];
        let mut m = QualityModel::new(ScalerState::fitted(&data).unwrap(), 0.1, 0.0);
        m.packet_loss.weights = vec![2.0, -1.0];
        m.packet_loss.bias = 5.0;
        m.energy.weights = vec![0.5, 0.25];
        let other = ScalerState::fitted(&[vec![7.0, -3.0], vec![9.0, 4.0]]).unwrap();
        let r = m.rescaled(other).unwrap();
        for x in [[0.0, 0.0], [5.0, 12.0], [-3.0, 40.0]] {
            let (a, b) = (m.predict(&x), r.predict(&x));
            assert!((a.packet_loss - b.packet_loss).abs() < 1e-9);
            assert!((a.energy - b.energy).abs() < 1e-9);
        }
    }

    #[test]
    fn registry_replacement() {
        let mut reg = ModelRegistry::new(0, "a");
        reg.install(2, "b");
        assert_eq!((reg.active_id(), *reg.active()), (2, "b"));
        reg.activate(0).unwrap();
        assert_eq!(*reg.active(), "a");
        assert!(reg.activate(7).is_err());
        assert_eq!(reg.active_id(), 0);
    }
}
