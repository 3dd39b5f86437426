//! Scenario runner: builds a case and variant from a [`ScenarioConfig`], runs
//! it cycle by cycle, and produces per-cycle metrics and a summary.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deltaiot::{DeltaIotSim, DriftProfile, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::gas::{self, GasSettings};
use crate::knowledge::{KnowledgeStore, TaskId};
use crate::learners::ScalerState;
use crate::lifelong::{derive_seed, LifelongLoop, LllConfig, LllEvent, NetworkTaskLearner};
use crate::managing::{
    option_input, triplet_pairs, ManagedSystem, MapeConfig, MapeLoop, ModelRegistry, QualityModel, TrainingPair,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Deltaiot,
    Gas,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BaselineTrueBest,
    RetrainAll,
    IncrementalNoLll,
    IncrementalWithLll,
    ReferenceOffline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BaselineTrueBest,
        Variant::RetrainAll,
        Variant::IncrementalNoLll,
        Variant::IncrementalWithLll,
        Variant::ReferenceOffline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineTrueBest => "baseline-true-best",
            Variant::RetrainAll => "retrain-all",
            Variant::IncrementalNoLll => "incremental-no-lll",
            Variant::IncrementalWithLll => "incremental-with-lll",
            Variant::ReferenceOffline => "reference-offline",
        }
    }

    pub fn valid_for(self, case: Case) -> bool {
        match self {
            Variant::BaselineTrueBest => case == Case::Deltaiot,
            Variant::ReferenceOffline => case == Case::Gas,
            _ => true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::Deltaiot => "deltaiot",
            Case::Gas => "gas",
        })
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deltaiot" => Ok(Case::Deltaiot),
            "gas" => Ok(Case::Gas),
            _ => Err(Error::Config(format!("unknown case {s}"))),
        }
    }
}

/// Settings of the network case beyond the drift profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSettings {
    /// Topology and calibration; the built-in network when absent.
    pub network: Option<NetworkConfig>,
    pub explore_per_cycle: usize,
    /// Drift-free cycles, with every option verified, used to train the
    /// initial model before deployment.
    pub warmup_cycles: u64,
    pub warmup_epochs: usize,
    pub eta0: f64,
    pub alpha: f64,
    /// Epochs per retrain of the retrain-all variant.
    pub retrain_epochs: usize,
    /// Cycles between retrains of the retrain-all variant.
    pub retrain_every: u64,
    /// Feed observed packet loss and energy to the task detectors as well as
    /// the uncertainties. They depend on the selected option, so any change
    /// of policy looks like a new task.
    pub detect_on_qualities: bool,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            network: None,
            explore_per_cycle: 1,
            warmup_cycles: 10,
            warmup_epochs: 5,
            eta0: 0.01,
            alpha: 1e-5,
            retrain_epochs: 5,
            retrain_every: 1,
            detect_on_qualities: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub case: Case,
    pub variant: Variant,
    /// Run length; 1500 for the network case, the whole stream for gas.
    #[serde(default)]
    pub cycles: Option<u64>,
    #[serde(default)]
    pub drift: DriftProfile,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lll: LllConfig,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default)]
    pub gas: GasSettings,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

pub const DEFAULT_NETWORK_CYCLES: u64 = 1500;

impl ScenarioConfig {
    /// Case defaults: sudden drift, a 0.025 threshold and detection on the
    /// fresh triplets only for the network; a 0.05 threshold for gas.
    pub fn new(case: Case, variant: Variant) -> Self {
        let (drift, p_threshold, detection_window) = match case {
            Case::Deltaiot => (DriftProfile::default_sudden(), 0.025, 20),
            Case::Gas => (DriftProfile::None, 0.05, LllConfig::default().detection_window),
        };
        Self {
            case,
            variant,
            cycles: None,
            drift,
            seed: 0,
            lll: LllConfig {
                p_threshold,
                detection_window,
                ..LllConfig::default()
            },
            network: NetworkSettings::default(),
            gas: GasSettings::default(),
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.variant.valid_for(self.case) {
            return Err(Error::Config(format!(
                "variant {} is not available for the {} case",
                self.variant, self.case
            )));
        }
        if self.cycles == Some(0) {
            return Err(Error::Config("a run needs at least one cycle".into()));
        }
        if self.network.retrain_every == 0 || self.network.warmup_cycles == 0 {
            return Err(Error::Config(
                "retrain cadence and warm-up length must be positive".into(),
            ));
        }
        self.lll.validate()?;
        match self.case {
            Case::Deltaiot => self
                .drift
                .validate(Some(self.cycles.unwrap_or(DEFAULT_NETWORK_CYCLES)))?,
            Case::Gas => {
                self.drift.validate(self.cycles)?;
                self.gas.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRow {
    pub cycle: u64,
    pub packet_loss: f64,
    pub energy: f64,
    pub utility: f64,
    pub selected_option: u32,
    pub signed_diff_pl: f64,
    pub task_id: TaskId,
    pub cumulative_training_ms: f64,
    pub cumulative_training_cost: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasRow {
    pub cycle: u64,
    pub predicted: u8,
    pub true_label: u8,
    pub correct: u8,
    pub task_id: TaskId,
    pub cumulative_training_ms: f64,
    pub cumulative_training_cost: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Metrics {
    Network(Vec<NetworkRow>),
    Gas(Vec<GasRow>),
}

impl Metrics {
    pub fn len(&self) -> usize {
        match self {
            Metrics::Network(r) => r.len(),
            Metrics::Gas(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cost_at(&self, i: usize) -> (u64, u64) {
        match self {
            Metrics::Network(r) => (r[i].cycle + 1, r[i].cumulative_training_cost),
            Metrics::Gas(r) => (r[i].cycle + 1, r[i].cumulative_training_cost),
        }
    }

    /// Writes the CSV; the wall-clock column is left out when `with_wall_clock` is false.
    pub fn write_csv<W: Write>(&self, out: W, with_wall_clock: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self {
            Metrics::Network(rows) => {
                let mut header = vec![
                    "cycle",
                    "packet_loss",
                    "energy",
                    "utility",
                    "selected_option",
                    "signed_diff_pl",
                    "task_id",
                ];
                if with_wall_clock {
                    header.push("cumulative_training_ms");
                }
                header.push("cumulative_training_cost");
                w.write_record(&header)?;
                for r in rows {
                    let mut rec = vec![
                        r.cycle.to_string(),
                        r.packet_loss.to_string(),
                        r.energy.to_string(),
                        r.utility.to_string(),
                        r.selected_option.to_string(),
                        r.signed_diff_pl.to_string(),
                        r.task_id.to_string(),
                    ];
                    if with_wall_clock {
                        rec.push(format!("{:.3}", r.cumulative_training_ms));
                    }
                    rec.push(r.cumulative_training_cost.to_string());
                    w.write_record(&rec)?;
                }
            }
            Metrics::Gas(rows) => {
                let mut header = vec!["cycle", "predicted", "true_label", "correct", "task_id"];
                if with_wall_clock {
                    header.push("cumulative_training_ms");
                }
                header.push("cumulative_training_cost");
                w.write_record(&header)?;
                for r in rows {
                    let mut rec = vec![
                        r.cycle.to_string(),
                        r.predicted.to_string(),
                        r.true_label.to_string(),
                        r.correct.to_string(),
                        r.task_id.to_string(),
                    ];
                    if with_wall_clock {
                        rec.push(format!("{:.3}", r.cumulative_training_ms));
                    }
                    rec.push(r.cumulative_training_cost.to_string());
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub median_packet_loss: f64,
    pub mean_packet_loss: f64,
    pub median_energy: f64,
    pub mean_energy: f64,
    pub median_utility: f64,
    pub mean_utility: f64,
    pub median_signed_diff_pl: f64,
    pub mean_signed_diff_pl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasSummary {
    pub mean_accuracy: f64,
    /// Accuracy over equal thirds of the run.
    pub zone_accuracy: [f64; 3],
    pub operator_queries: u64,
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub case: Case,
    pub variant: Variant,
    pub seed: u64,
    pub cycles: u64,
    pub task_count: usize,
    pub new_task_cycles: Vec<u64>,
    pub activations: usize,
    pub total_training_ms: f64,
    pub total_training_cost: u64,
    /// Auto-encoder sample passes, tracked apart from model training.
    pub detector_cost: u64,
    /// `(cycles completed, cumulative training cost)` at every trigger-period boundary.
    pub cost_curve: Vec<(u64, u64)>,
    pub network: Option<NetworkSummary>,
    pub gas: Option<GasSummary>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Metrics,
    pub summary: Summary,
    pub events: Vec<LllEvent>,
}

impl RunResult {
    /// Writes `metrics.csv`, `summary.json` and `events.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.metrics
            .write_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), true)?;
        let mut summary = BufWriter::new(File::create(dir.join("summary.json"))?);
        serde_json::to_writer_pretty(&mut summary, &self.summary)?;
        summary.write_all(b"\n")?;
        let mut events = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        for e in &self.events {
            serde_json::to_writer(&mut events, e)?;
            events.write_all(b"\n")?;
        }
        events.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Exponent `b` of a least-squares fit `cost = a * cycle^b` in log-log space,
/// ignoring points with zero cost.
pub fn power_law_exponent(curve: &[(u64, u64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(c, v)| *c > 0 && *v > 0)
        .map(|&(c, v)| ((c as f64).ln(), (v as f64).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn cost_curve(metrics: &Metrics, period: u64) -> Vec<(u64, u64)> {
    (0..metrics.len())
        .map(|i| metrics.cost_at(i))
        .filter(|(done, _)| done % period == 0)
        .collect()
}

pub fn run(config: &ScenarioConfig) -> Result<RunResult> {
    config.validate()?;
    let mut result = match config.case {
        Case::Deltaiot => run_network(config)?,
        Case::Gas => gas::run(config)?,
    };
    result.summary.cost_curve = cost_curve(&result.metrics, config.lll.trigger_period);
    if let Some(dir) = &config.output {
        result.write(dir)?;
    }
    Ok(result)
}

const SALT_WARMUP: u64 = 0x77;
const SALT_MAPE: u64 = 0x4d;
const SALT_LLL: u64 = 0x4c;
const SALT_RETRAIN: u64 = 0x52;

/// Feature names of a network triplet's input.
pub fn network_input_names(network: &Network) -> Vec<String> {
    let cfg = network.config();
    let mut names: Vec<String> = cfg.links.iter().map(|l| format!("snr_{}_{}", l.from, l.to)).collect();
    names.extend(cfg.motes.iter().map(|m| format!("load_{}", m.id)));
    names.push("packet_loss".into());
    names.push("energy".into());
    names
}

/// Initial model trained before deployment on drift-free cycles with every
/// option verified.
pub fn warmup_model(network: &Network, settings: &NetworkSettings, seed: u64) -> Result<QualityModel> {
    let seed = derive_seed(seed, &[SALT_WARMUP]);
    let mut pairs = Vec::new();
    for cycle in 0..settings.warmup_cycles {
        let u = network.gen_uncertainties(cycle, &DriftProfile::None, seed);
        let features = network.monitor_features(&u);
        for o in network.options() {
            pairs.push(TrainingPair {
                input: option_input(o, &features),
                target: network.simulate(o, &u)?,
            });
        }
    }
    retrained(&pairs, settings, settings.warmup_epochs, seed).map(|(m, _)| m)
}

/// Fresh scaler and zero-initialised regressors trained for `epochs` passes.
fn retrained(
    pairs: &[TrainingPair],
    settings: &NetworkSettings,
    epochs: usize,
    seed: u64,
) -> Result<(QualityModel, u64)> {
    let raw: Vec<Vec<f64>> = pairs.iter().map(|p| p.input.clone()).collect();
    let mut model = QualityModel::new(ScalerState::fitted(&raw)?, settings.eta0, settings.alpha);
    let cost = model.fit_steps(pairs, (epochs * pairs.len()) as u64, seed)?;
    Ok((model, cost))
}

fn run_network(config: &ScenarioConfig) -> Result<RunResult> {
    let settings = &config.network;
    let network = Network::new(settings.network.clone().unwrap_or_default())?;
    let cycles = config.cycles.unwrap_or(DEFAULT_NETWORK_CYCLES);
    let mut sim = DeltaIotSim::new(network.clone(), config.drift.clone(), config.seed, Some(cycles))?;
    let mut registry = ModelRegistry::new(0, warmup_model(&network, settings, config.seed)?);
    let mut knowledge = KnowledgeStore::new(network_input_names(&network));
    let mut mape = MapeLoop::new(
        MapeConfig {
            explore_per_cycle: settings.explore_per_cycle,
            online_update: config.variant != Variant::RetrainAll,
        },
        derive_seed(config.seed, &[SALT_MAPE]),
    );
    let mut lll = match config.variant {
        Variant::IncrementalWithLll => Some(LifelongLoop::new(
            config.lll.clone(),
            derive_seed(config.seed, &[SALT_LLL]),
        )?),
        _ => None,
    };
    let mut learner = NetworkTaskLearner::new(network.options().to_vec(), settings.detect_on_qualities);
    let mut history: Vec<TrainingPair> = Vec::new();

    let mut rows = Vec::with_capacity(cycles as usize);
    let (mut total_ms, mut total_cost, mut detector_cost) = (0.0, 0u64, 0u64);
    for cycle in 0..cycles {
        let (selected, observed, task_id) = if config.variant == Variant::BaselineTrueBest {
            sim.monitor(cycle)?;
            let (id, q, _) = sim.true_best()?;
            (id, q, 0)
        } else {
            let rec = mape.cycle(cycle, &mut sim, &mut registry)?;
            total_ms += rec.training_ms;
            total_cost += rec.training_cost;
            let task = match &rec.triplet.state {
                crate::knowledge::TripletState::Network { model_task, .. } => *model_task,
                _ => unreachable!("network cycles emit network triplets"),
            };
            if config.variant == Variant::RetrainAll {
                history.extend(triplet_pairs(&rec.triplet, network.options()));
            }
            knowledge.append_triplets(vec![rec.triplet])?;
            (rec.plan.option_id, rec.observed, task)
        };
        let (_, best, _) = sim.true_best()?;

        let done = cycle + 1;
        if config.variant == Variant::RetrainAll && done % settings.retrain_every == 0 {
            let started = Instant::now();
            let seed = derive_seed(config.seed, &[SALT_RETRAIN, done]);
            let (model, cost) = retrained(&history, settings, settings.retrain_epochs, seed)?;
            registry.install(0, model);
            total_cost += cost;
            total_ms += started.elapsed().as_secs_f64() * 1e3;
        }
        if let Some(lll) = lll.as_mut() {
            if let Some(event) = lll.tick(done, &mut knowledge, &mut registry, &mut learner)? {
                total_ms += event.training_time_ms;
                total_cost += event.training_cost;
                detector_cost += event.detector_cost;
            }
        }
        rows.push(NetworkRow {
            cycle,
            packet_loss: observed.packet_loss,
            energy: observed.energy,
            utility: observed.utility(),
            selected_option: selected,
            signed_diff_pl: observed.packet_loss - best.packet_loss,
            task_id,
            cumulative_training_ms: total_ms,
            cumulative_training_cost: total_cost,
        });
    }

    let col = |f: fn(&NetworkRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (pl, ec, ut, sd) = (
        col(|r| r.packet_loss),
        col(|r| r.energy),
        col(|r| r.utility),
        col(|r| r.signed_diff_pl),
    );
    let events = lll.map(|l| l.events().to_vec()).unwrap_or_default();
    let summary = Summary {
        case: config.case,
        variant: config.variant,
        seed: config.seed,
        cycles,
        task_count: knowledge.task_count(),
        new_task_cycles: events.iter().filter(|e| e.is_new).map(|e| e.cycle).collect(),
        activations: events.len(),
        total_training_ms: total_ms,
        total_training_cost: total_cost,
        detector_cost,
        cost_curve: Vec::new(),
        network: Some(NetworkSummary {
            median_packet_loss: median(&pl),
            mean_packet_loss: mean(&pl),
            median_energy: median(&ec),
            mean_energy: mean(&ec),
            median_utility: median(&ut),
            mean_utility: mean(&ut),
            median_signed_diff_pl: median(&sd),
            mean_signed_diff_pl: mean(&sd),
        }),
        gas: None,
    };
    Ok(RunResult {
        metrics: Metrics::Network(rows),
        summary,
        events,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub variant: Variant,
    pub seed: u64,
    pub median_packet_loss_delta: Option<f64>,
    pub mean_packet_loss_delta: Option<f64>,
    /// Drop of median utility relative to the reference, in percent.
    pub median_utility_drop_pct: Option<f64>,
    pub mean_accuracy_delta: Option<f64>,
    pub zone_accuracy: Option<[f64; 3]>,
    pub cost_exponent: Option<f64>,
    pub cost_growth: Option<String>,
    pub total_training_cost: u64,
    pub task_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub case: Case,
    pub reference: Variant,
    pub variants: Vec<VariantComparison>,
}

/// Exponent at or below which cumulative cost counts as linear growth.
pub const LINEAR_GROWTH_MAX_EXPONENT: f64 = 1.2;

/// Compares runs of one case against the first summary (or the true-best
/// baseline when present).
pub fn compare(summaries: &[Summary]) -> Result<ComparisonReport> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to compare".into()))?;
    if let Some(s) = summaries.iter().find(|s| s.case != first.case) {
        return Err(Error::InvalidArgument(format!(
            "cannot compare {} runs with {} runs",
            first.case, s.case
        )));
    }
    let reference = summaries
        .iter()
        .find(|s| s.variant == Variant::BaselineTrueBest)
        .unwrap_or(first);
    let variants = summaries
        .iter()
        .map(|s| {
            let net = s.network.as_ref().zip(reference.network.as_ref());
            let gas = s.gas.as_ref().zip(reference.gas.as_ref());
            let exponent = power_law_exponent(&s.cost_curve);
            VariantComparison {
                variant: s.variant,
                seed: s.seed,
                median_packet_loss_delta: net.map(|(a, b)| a.median_packet_loss - b.median_packet_loss),
                mean_packet_loss_delta: net.map(|(a, b)| a.mean_packet_loss - b.mean_packet_loss),
                median_utility_drop_pct: net
                    .map(|(a, b)| 100.0 * (b.median_utility - a.median_utility) / b.median_utility),
                mean_accuracy_delta: gas.map(|(a, b)| a.mean_accuracy - b.mean_accuracy),
                zone_accuracy: s.gas.as_ref().map(|g| g.zone_accuracy),
                cost_exponent: exponent,
                cost_growth: exponent.map(|e| {
                    if e <= LINEAR_GROWTH_MAX_EXPONENT {
                        "linear"
                    } else {
                        "superlinear"
                    }
                    .to_string()
                }),
                total_training_cost: s.total_training_cost,
                task_count: s.task_count,
            }
        })
        .collect();
    Ok(ComparisonReport {
        case: first.case,
        reference: reference.variant,
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn case_variant_compatibility() {
        assert!(ScenarioConfig::new(Case::Gas, Variant::BaselineTrueBest)
            .validate()
            .is_err());
        assert!(ScenarioConfig::new(Case::Deltaiot, Variant::ReferenceOffline)
            .validate()
            .is_err());
        assert!(ScenarioConfig::new(Case::Deltaiot, Variant::RetrainAll)
            .validate()
            .is_ok());
    }

    #[test]
    fn median_and_power_law() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let quad: Vec<(u64, u64)> = (1..50).map(|c| (c * 20, c * c * 400)).collect();
        assert!((power_law_exponent(&quad).unwrap() - 2.0).abs() < 1e-9);
        let lin: Vec<(u64, u64)> = (1..50).map(|c| (c * 20, c * 1000)).collect();
        assert!((power_law_exponent(&lin).unwrap() - 1.0).abs() < 1e-9);
        assert!(power_law_exponent(&[(20, 5)]).is_none());
    }

    #[test]
    fn true_best_baseline_has_zero_regret() {
        let mut cfg = ScenarioConfig::new(Case::Deltaiot, Variant::BaselineTrueBest);
        cfg.drift = DriftProfile::None;
        cfg.cycles = Some(100);
        let r = run(&cfg).unwrap();
        let Metrics::Network(rows) = &r.metrics else { panic!() };
        assert_eq!(rows.len(), 100);
        assert!(rows
            .iter()
            .all(|r| r.signed_diff_pl == 0.0 && r.cumulative_training_cost == 0));
    }

    #[test]
    fn identical_summaries_compare_to_zero() {
        let mut cfg = ScenarioConfig::new(Case::Deltaiot, Variant::IncrementalNoLll);
        cfg.cycles = Some(40);
        cfg.drift = DriftProfile::None;
        let s = run(&cfg).unwrap().summary;
        let report = compare(&[s.clone(), s]).unwrap();
        for v in &report.variants {
            assert_eq!(v.median_packet_loss_delta, Some(0.0));
            assert_eq!(v.mean_packet_loss_delta, Some(0.0));
            assert_eq!(v.median_utility_drop_pct, Some(0.0));
        }
    }
}
