//! Gas delivery case: replay of a sensor-array stream through a classifier,
//! with an operator who checks labels in batches.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeStore, KnowledgeTriplet, TaskId, TripletOutput, TripletState};
use crate::learners::{LinearSvc, ScalerState, SvcHyperParams, MIN_TRAINING_SAMPLES};
use crate::lifelong::{derive_seed, holdout_split, EvolveContext, LifelongLoop, TaskLearner};
use crate::managing::ModelRegistry;
use crate::scenario::{mean, GasRow, GasSummary, Metrics, RunResult, ScenarioConfig, Summary, Variant};
use crate::stats::hyper_search;

pub const SENSORS: usize = 16;
pub const FEATURES_PER_SENSOR: usize = 8;
pub const FEATURES: usize = SENSORS * FEATURES_PER_SENSOR;
pub const CLASSES: u8 = 6;

const CACHE_FILE: &str = "records.cache.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasRecord {
    pub features: Vec<f64>,
    /// Gas class in `1..=6`.
    pub true_label: u8,
    pub batch_id: u32,
    /// Replay position.
    pub cycle: u64,
}

/// Parses one `label[;concentration] index:value ...` line. Indices run from
/// 1 to 128; absent indices are 0.
pub fn parse_line(line: &str, path: &Path, line_no: usize) -> Result<(u8, Vec<f64>)> {
    let err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line_no,
        msg,
    };
    let mut tokens = line.split_whitespace();
    let head = tokens.next().ok_or_else(|| err("empty line".into()))?;
    let label_text = head.split(';').next().unwrap_or(head);
    let label: u8 = label_text
        .parse()
        .map_err(|_| err(format!("bad label {label_text:?}")))?;
    if !(1..=CLASSES).contains(&label) {
        return Err(err(format!("label {label} outside 1..={CLASSES}")));
    }
    let mut features = vec![0.0; FEATURES];
    let mut seen = [false; FEATURES];
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("expected index:value, got {tok:?}")))?;
        let idx: usize = idx.parse().map_err(|_| err(format!("bad index {idx:?}")))?;
        if !(1..=FEATURES).contains(&idx) {
            return Err(err(format!("index {idx} outside 1..={FEATURES}")));
        }
        if seen[idx - 1] {
            return Err(err(format!("index {idx} repeated")));
        }
        let val: f64 = val.parse().map_err(|_| err(format!("bad value {val:?}")))?;
        if !val.is_finite() {
            return Err(err(format!("non-finite value at index {idx}")));
        }
        seen[idx - 1] = true;
        features[idx - 1] = val;
    }
    Ok((label, features))
}

/// Batch files `batch<N>.dat` in `dir`, ordered by `N`.
pub fn batch_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(n) = name.strip_prefix("batch").and_then(|r| r.strip_suffix(".dat")) {
            if let Ok(n) = n.parse::<u32>() {
                files.push((n, path));
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Reads every batch file in `dir`, ordered by batch then line.
pub fn ingest(dir: &Path) -> Result<Vec<GasRecord>> {
    let files = batch_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no batch<N>.dat files in {}", dir.display())));
    }
    let mut records = Vec::new();
    for (batch_id, path) in files {
        let reader = BufReader::new(File::open(&path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (true_label, features) = parse_line(&line, &path, i + 1)?;
            records.push(GasRecord {
                features,
                true_label,
                batch_id,
                cycle: records.len() as u64,
            });
        }
    }
    info!("ingested {} gas records from {}", records.len(), dir.display());
    Ok(records)
}

/// Like [`ingest`], but reuses a JSON-lines cache in `dir` when it is newer
/// than every batch file, and refreshes it otherwise.
pub fn ingest_cached(dir: &Path) -> Result<Vec<GasRecord>> {
    let cache = dir.join(CACHE_FILE);
    let newest_batch = batch_files(dir)?
        .iter()
        .filter_map(|(_, p)| fs::metadata(p).and_then(|m| m.modified()).ok())
        .max();
    let fresh = match (fs::metadata(&cache).and_then(|m| m.modified()), newest_batch) {
        (Ok(c), Some(b)) => c >= b,
        _ => false,
    };
    if fresh {
        let mut records = Vec::new();
        for line in BufReader::new(File::open(&cache)?).lines() {
            records.push(serde_json::from_str(&line?)?);
        }
        return Ok(records);
    }
    let records = ingest(dir)?;
    let written = File::create(&cache).map_err(Error::from).and_then(|f| {
        let mut out = BufWriter::new(f);
        for r in &records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush().map_err(Error::from)
    });
    if let Err(e) = written {
        warn!("could not write record cache {}: {e}", cache.display());
    }
    Ok(records)
}

/// Seeded stand-in for the sensor-array dataset: class prototypes seen
/// through sensors whose gain decays and whose baseline creeps over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGas {
    pub records: usize,
    pub batches: u32,
    /// Spread of class prototypes relative to unit sensor noise.
    pub separation: f64,
    pub noise_std: f64,
    /// Baseline shift per sensor reached at the end of the stream, in noise units.
    pub final_offset: f64,
    /// Largest fractional sensor gain loss reached at the end of the stream.
    pub final_gain_loss: f64,
    /// Spread of the per-record concentration factor around 1.
    pub concentration_spread: f64,
    /// Share of each class response replaced by a fresh random response by
    /// the end of the stream.
    pub final_turnover: f64,
}

impl Default for SyntheticGas {
    fn default() -> Self {
        Self {
            records: 12_000,
            batches: 10,
            separation: 0.4,
            noise_std: 1.0,
            final_offset: 3.0,
            final_gain_loss: 0.3,
            concentration_spread: 0.3,
            final_turnover: 1.0,
        }
    }
}

impl SyntheticGas {
    pub fn validate(&self) -> Result<()> {
        if self.records == 0 || self.batches == 0 || self.batches as usize > self.records {
            return Err(Error::Config("synthetic gas needs records >= batches >= 1".into()));
        }
        let finite = [
            self.separation,
            self.noise_std,
            self.final_offset,
            self.final_gain_loss,
            self.concentration_spread,
            self.final_turnover,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0)
            || self.final_gain_loss >= 1.0
            || self.concentration_spread >= 1.0
            || self.final_turnover > 1.0
        {
            return Err(Error::Config("synthetic gas parameters out of range".into()));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<GasRecord>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw_prototypes = || -> Vec<Vec<f64>> {
            (0..CLASSES)
                .map(|_| {
                    (0..FEATURES)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            self.separation * z
                        })
                        .collect()
                })
                .collect()
        };
        let start = draw_prototypes();
        let end = draw_prototypes();
        // Every sensor loses between half and all of the final gain loss and
        // drifts its baseline by between half and all of the final offset.
        let gain_loss: Vec<f64> = (0..SENSORS)
            .map(|_| self.final_gain_loss * rng.gen_range(0.5..=1.0))
            .collect();
        let sensor_offset: Vec<f64> = (0..SENSORS)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * self.final_offset * rng.gen_range(0.5..=1.0)
            })
            .collect();
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let per_batch = self.records.div_ceil(self.batches as usize);
        let last = (self.records - 1).max(1) as f64;
        Ok((0..self.records)
            .map(|i| {
                let progress = i as f64 / last;
                let label = rng.gen_range(1..=CLASSES);
                let conc = 1.0 + rng.gen_range(-self.concentration_spread..=self.concentration_spread);
                let mix = self.final_turnover * progress;
                // Keeps the response norm constant while it turns over.
                let norm = ((1.0 - mix).powi(2) + mix * mix).sqrt();
                let c = label as usize - 1;
                let features = (0..FEATURES)
                    .map(|j| {
                        let gain = 1.0 - gain_loss[j / FEATURES_PER_SENSOR] * progress;
                        let response = ((1.0 - mix) * start[c][j] + mix * end[c][j]) / norm;
                        gain * conc * response
                            + progress * sensor_offset[j / FEATURES_PER_SENSOR]
                            + noise.sample(&mut rng)
                    })
                    .collect();
                GasRecord {
                    features,
                    true_label: label,
                    batch_id: (i / per_batch) as u32 + 1,
                    cycle: i as u64,
                }
            })
            .collect())
    }
}

/// Largest shift, over features, of the `window`-record moving average
/// between the first and last `span` records, in units of the feature's
/// standard deviation within the first window.
pub fn drift_visibility(records: &[GasRecord], window: usize, span: usize) -> f64 {
    let n = records.len();
    if window == 0 || n < window || span < window || 2 * span > n {
        return 0.0;
    }
    let dim = records[0].features.len();
    let mut best = 0.0f64;
    for j in 0..dim {
        let col: Vec<f64> = records.iter().map(|r| r.features[j]).collect();
        let ma: Vec<f64> = col
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        let head = mean(&ma[..span - window + 1]);
        let tail = mean(&ma[ma.len() - (span - window + 1)..]);
        let first = &col[..window];
        let m = mean(first);
        let sd = (first.iter().map(|v| (v - m).powi(2)).sum::<f64>() / window as f64).sqrt();
        if sd > 0.0 {
            best = best.max((tail - head).abs() / sd);
        }
    }
    best
}

/// Simulated operator: answers label queries from ground truth.
#[derive(Clone, Debug)]
pub struct Operator {
    labels: Vec<u8>,
    queries: u64,
}

impl Operator {
    pub fn new(records: &[GasRecord]) -> Self {
        Self {
            labels: records.iter().map(|r| r.true_label).collect(),
            queries: 0,
        }
    }

    /// True labels for the given record ids. Every id counts as one query.
    pub fn labels(&mut self, ids: &[u64]) -> Result<Vec<u8>> {
        let out = ids
            .iter()
            .map(|&id| {
                self.labels
                    .get(id as usize)
                    .copied()
                    .ok_or(Error::UnknownRecord(id as usize))
            })
            .collect::<Result<Vec<u8>>>()?;
        self.queries += ids.len() as u64;
        Ok(out)
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }
}

/// Classifier plus the scaler fitted on its training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasModel {
    pub scaler: ScalerState,
    pub svc: LinearSvc,
}

impl GasModel {
    pub fn fit(data: &[Vec<f64>], labels: &[u8], hp: &SvcHyperParams, seed: u64) -> Result<(Self, u64)> {
        let scaler = ScalerState::fitted(data)?;
        let (svc, cost) = LinearSvc::fit(&scaler.transform(data)?, labels, hp, seed)?;
        Ok((Self { scaler, svc }, cost))
    }

    /// The same decision function expressed on another scaler.
    pub fn rescaled(&self, scaler: ScalerState) -> Result<Self> {
        if scaler.dim() != self.scaler.dim() {
            return Err(Error::InvalidArgument(
                "scaler dimension does not match the model".into(),
            ));
        }
        let (old_mean, old_scale) = self.scaler.effective();
        let (new_mean, new_scale) = scaler.effective();
        let mut svc = self.svc.clone();
        for m in &mut svc.machines {
            for j in 0..m.weights.len() {
                m.bias += m.weights[j] * (new_mean[j] - old_mean[j]) / old_scale[j];
                m.weights[j] *= new_scale[j] / old_scale[j];
            }
        }
        Ok(Self { scaler, svc })
    }

    /// More SGD epochs on labelled data; the scaler is kept as is.
    pub fn partial_fit(&mut self, data: &[Vec<f64>], labels: &[u8], seed: u64) -> Result<u64> {
        self.svc.partial_fit(&self.scaler.transform(data)?, labels, seed)
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        self.svc.predict(&self.scaler.transform_one(x))
    }

    pub fn uncertainty(&self, x: &[f64]) -> f64 {
        self.svc.uncertainty(&self.scaler.transform_one(x))
    }

    pub fn accuracy(&self, data: &[Vec<f64>], labels: &[u8]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        data.iter().zip(labels).filter(|(x, l)| self.predict(x) == **l).count() as f64 / data.len() as f64
    }
}

pub fn feature_names() -> Vec<String> {
    (0..FEATURES)
        .map(|j| format!("s{}_f{}", j / FEATURES_PER_SENSOR + 1, j % FEATURES_PER_SENSOR + 1))
        .collect()
}

/// Classifies one record with the active model; the routing decision is the
/// predicted class.
pub fn gas_cycle(record: &GasRecord, registry: &ModelRegistry<GasModel>) -> Result<KnowledgeTriplet> {
    let model = registry.active();
    if model.svc.machines.is_empty() {
        return Err(Error::Registry("active classifier is untrained".into()));
    }
    let predicted = model.predict(&record.features);
    Ok(KnowledgeTriplet::new(
        record.cycle,
        record.features.clone(),
        TripletState::Classifier {
            model_task: registry.active_id(),
            predicted,
            verified: None,
            uncertainty: model.uncertainty(&record.features),
        },
        TripletOutput::Route { class: predicted },
    ))
}

/// Gas evolution. A new task asks the operator about the most uncertain
/// fresh inputs and fine-tunes the active classifier on them; a known task
/// retrains on its recent operator-verified triplets.
#[derive(Clone, Debug)]
pub struct GasTaskLearner {
    pub operator: Operator,
    pub query_top_k: usize,
    pub epochs: usize,
}

impl GasTaskLearner {
    /// Ids of the `k` fresh triplets the active model is least sure about.
    pub fn select_queries(
        &self,
        cycles: &[u64],
        knowledge: &KnowledgeStore,
        model: &GasModel,
        k: usize,
    ) -> Result<Vec<u64>> {
        let mut scored = cycles
            .iter()
            .map(|&c| {
                let t = knowledge.get(c).ok_or(Error::UnknownCycle(c))?;
                Ok((model.uncertainty(&t.input), c))
            })
            .collect::<Result<Vec<(f64, u64)>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
    }

    /// Up to `limit` of the task's most recent triplets carrying a verified label.
    pub fn mine_verified(task: TaskId, knowledge: &KnowledgeStore, limit: usize) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for t in knowledge.fetch_task_triplets(task, usize::MAX)? {
            if data.len() == limit {
                break;
            }
            if let Some(l) = t.verified_label() {
                data.push(t.input.clone());
                labels.push(l);
            }
        }
        data.reverse();
        labels.reverse();
        Ok((data, labels))
    }

    fn keep_active(task: TaskId, registry: &mut ModelRegistry<GasModel>) -> Result<()> {
        if registry.contains(task) {
            registry.activate(task)
        } else {
            let model = registry.active().clone();
            registry.install(task, model);
            Ok(())
        }
    }
}

impl TaskLearner for GasTaskLearner {
    type Model = GasModel;

    fn evolve(
        &mut self,
        ctx: EvolveContext<'_>,
        knowledge: &mut KnowledgeStore,
        registry: &mut ModelRegistry<GasModel>,
    ) -> Result<u64> {
        if ctx.is_new {
            let mut model = registry.active().clone();
            let ids = self.select_queries(ctx.new_cycles, knowledge, &model, self.query_top_k)?;
            let labels = self.operator.labels(&ids)?;
            let mut inputs = Vec::with_capacity(ids.len());
            for (&id, &label) in ids.iter().zip(&labels) {
                knowledge.set_verified_label(id, label)?;
                inputs.push(knowledge.get(id).ok_or(Error::UnknownCycle(id))?.input.clone());
            }
            let cost = model.partial_fit(&inputs, &labels, derive_seed(ctx.seed, &[1]))?;
            registry.install(ctx.task, model);
            return Ok(cost);
        }

        let (data, labels) = Self::mine_verified(ctx.task, knowledge, ctx.config.miner_limit)?;
        let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        if data.len() < MIN_TRAINING_SAMPLES || distinct < 2 {
            warn!("task {}: {} verified triplets, evolution skipped", ctx.task, data.len());
            Self::keep_active(ctx.task, registry)?;
            return Ok(0);
        }
        let base = registry
            .get(ctx.task)
            .unwrap_or_else(|| registry.active())
            .rescaled(ScalerState::fitted(&data)?)?;
        let tuned = |hp: &SvcHyperParams| GasModel {
            scaler: base.scaler.clone(),
            svc: base.svc.restarted(hp),
        };
        let (train_idx, hold_idx) = holdout_split(data.len(), ctx.config.holdout_fraction, derive_seed(ctx.seed, &[2]));
        let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<u8>) {
            (
                idx.iter().map(|&i| data[i].clone()).collect(),
                idx.iter().map(|&i| labels[i]).collect(),
            )
        };
        let (train, train_labels) = pick(&train_idx);
        let (hold, hold_labels) = pick(&hold_idx);
        let mut cost = 0;
        let space = SvcHyperParams::search_space(ctx.config.model_search_budget, derive_seed(ctx.seed, &[3]));
        let outcome = hyper_search(&space, |c| {
            let mut model = tuned(&SvcHyperParams::from_config(c, self.epochs));
            cost += model
                .partial_fit(&train, &train_labels, derive_seed(ctx.seed, &[4]))
                .ok()?;
            Some(1.0 - model.accuracy(&hold, &hold_labels))
        });
        let Ok(outcome) = outcome else {
            warn!("task {}: every classifier trial failed, evolution skipped", ctx.task);
            Self::keep_active(ctx.task, registry)?;
            return Ok(cost);
        };
        let mut model = tuned(&SvcHyperParams::from_config(&outcome.best, self.epochs));
        let n = model.partial_fit(&data, &labels, derive_seed(ctx.seed, &[5]))?;
        registry.install(ctx.task, model);
        Ok(cost + n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasSettings {
    /// Directory with `batch<N>.dat` files; the synthetic stream is used when
    /// absent.
    pub dataset_dir: Option<PathBuf>,
    pub synthetic: SyntheticGas,
    /// Cycles between operator label checks.
    pub verify_every: u64,
    pub svc: SvcHyperParams,
}

impl Default for GasSettings {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            synthetic: SyntheticGas::default(),
            verify_every: 100,
            svc: SvcHyperParams::default(),
        }
    }
}

impl GasSettings {
    pub fn validate(&self) -> Result<()> {
        if self.verify_every == 0 {
            return Err(Error::Config("verify_every must be at least 1".into()));
        }
        if !(self.svc.lambda > 0.0 && self.svc.eta0 > 0.0 && self.svc.epochs > 0) {
            return Err(Error::Config("classifier hyperparameters must be positive".into()));
        }
        self.synthetic.validate()
    }

    /// Dataset records when a directory is configured, otherwise the seeded
    /// synthetic stream. The flag tells which.
    pub fn load_records(&self, seed: u64) -> Result<(Vec<GasRecord>, bool)> {
        match &self.dataset_dir {
            Some(dir) => Ok((ingest_cached(dir)?, false)),
            None => Ok((self.synthetic.generate(derive_seed(seed, &[SALT_SYNTHETIC]))?, true)),
        }
    }
}

const SALT_SYNTHETIC: u64 = 0x53;
const SALT_INITIAL: u64 = 0x49;
const SALT_ONLINE: u64 = 0x4f;
const SALT_LLL: u64 = 0x4c;
const SALT_RETRAIN: u64 = 0x52;

pub fn run(config: &ScenarioConfig) -> Result<RunResult> {
    let settings = &config.gas;
    settings.validate()?;
    let (mut records, synthetic) = settings.load_records(config.seed)?;
    // Injected drift: the profile's offset is added to every feature.
    for r in &mut records {
        let offset = config.drift.offset(r.cycle);
        if offset != 0.0 {
            r.features.iter_mut().for_each(|v| *v += offset);
        }
    }
    let cycles = config.cycles.unwrap_or(records.len() as u64).min(records.len() as u64);
    if cycles == 0 {
        return Err(Error::Config("gas stream is empty".into()));
    }
    let first_batch = records[0].batch_id;
    let (initial, initial_labels): (Vec<Vec<f64>>, Vec<u8>) = records
        .iter()
        .take_while(|r| r.batch_id == first_batch)
        .map(|r| (r.features.clone(), r.true_label))
        .unzip();

    let started = Instant::now();
    let (model, mut total_cost) = GasModel::fit(
        &initial,
        &initial_labels,
        &settings.svc,
        derive_seed(config.seed, &[SALT_INITIAL]),
    )?;
    let mut total_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut registry = ModelRegistry::new(0, model);
    let mut knowledge = KnowledgeStore::new(feature_names());
    let mut checker = Operator::new(&records);
    let mut learner = GasTaskLearner {
        operator: Operator::new(&records),
        query_top_k: config.lll.query_top_k,
        epochs: settings.svc.epochs,
    };
    let mut lll = match config.variant {
        Variant::IncrementalWithLll => Some(LifelongLoop::new(
            config.lll.clone(),
            derive_seed(config.seed, &[SALT_LLL]),
        )?),
        _ => None,
    };
    let mut verified: Vec<(Vec<f64>, u8)> = Vec::new();

    let mut rows = Vec::with_capacity(cycles as usize);
    let mut detector_cost = 0;
    for record in &records[..cycles as usize] {
        let cycle = record.cycle;
        let triplet = gas_cycle(record, &registry)?;
        let (predicted, task_id) = match triplet.state {
            TripletState::Classifier {
                predicted, model_task, ..
            } => (predicted, model_task),
            TripletState::Network { .. } => unreachable!("gas cycles emit classifier triplets"),
        };
        knowledge.append_triplets(vec![triplet])?;
        let done = cycle + 1;

        if done % settings.verify_every == 0 && config.variant != Variant::ReferenceOffline {
            let ids: Vec<u64> = (done - settings.verify_every..done).collect();
            let labels = checker.labels(&ids)?;
            let mut inputs = Vec::with_capacity(ids.len());
            for (&id, &label) in ids.iter().zip(&labels) {
                knowledge.set_verified_label(id, label)?;
                inputs.push(records[id as usize].features.clone());
            }
            let started = Instant::now();
            let seed = derive_seed(config.seed, &[SALT_ONLINE, done]);
            match config.variant {
                Variant::RetrainAll => {
                    verified.extend(inputs.into_iter().zip(labels));
                    let (data, labels): (Vec<Vec<f64>>, Vec<u8>) = verified.iter().cloned().unzip();
                    let seed = derive_seed(config.seed, &[SALT_RETRAIN, done]);
                    match GasModel::fit(&data, &labels, &settings.svc, seed) {
                        Ok((model, cost)) => {
                            registry.install(0, model);
                            total_cost += cost;
                        }
                        Err(e) => warn!("retrain at cycle {done} skipped: {e}"),
                    }
                }
                _ => match GasModel::fit(&inputs, &labels, &settings.svc, seed) {
                    Ok((model, cost)) => {
                        registry.install(registry.active_id(), model);
                        total_cost += cost;
                    }
                    Err(e) => warn!("retrain at cycle {done} skipped: {e}"),
                },
            }
            total_ms += started.elapsed().as_secs_f64() * 1e3;
        }
        if let Some(lll) = lll.as_mut() {
            if let Some(event) = lll.tick(done, &mut knowledge, &mut registry, &mut learner)? {
                total_ms += event.training_time_ms;
                total_cost += event.training_cost;
                detector_cost += event.detector_cost;
            }
        }
        rows.push(GasRow {
            cycle,
            predicted,
            true_label: record.true_label,
            correct: u8::from(predicted == record.true_label),
            task_id,
            cumulative_training_ms: total_ms,
            cumulative_training_cost: total_cost,
        });
    }

    let hits: Vec<f64> = rows.iter().map(|r| f64::from(r.correct)).collect();
    let n = hits.len();
    let zone = |k: usize| {
        let (a, b) = (k * n / 3, (k + 1) * n / 3);
        if a == b {
            f64::NAN
        } else {
            mean(&hits[a..b])
        }
    };
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
        network: None,
        gas: Some(GasSummary {
            mean_accuracy: mean(&hits),
            zone_accuracy: [zone(0), zone(1), zone(2)],
            operator_queries: learner.operator.queries(),
            synthetic,
        }),
    };
    Ok(RunResult {
        metrics: Metrics::Gas(rows),
        summary,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::KnowledgeStore;

    fn small_stream(records: usize, seed: u64) -> Vec<GasRecord> {
        SyntheticGas {
            records,
            batches: 4,
            ..SyntheticGas::default()
        }
        .generate(seed)
        .unwrap()
    }

    fn split(records: &[GasRecord]) -> (Vec<Vec<f64>>, Vec<u8>) {
        records.iter().map(|r| (r.features.clone(), r.true_label)).unzip()
    }

    #[test]
    fn parses_sparse_lines() {
        let p = Path::new("batch1.dat");
        let (label, f) = parse_line("3 1:0.5 2:-1.2 128:0.1", p, 1).unwrap();
        assert_eq!(label, 3);
        assert_eq!(f.len(), FEATURES);
        assert_eq!((f[0], f[1], f[2], f[127]), (0.5, -1.2, 0.0, 0.1));
        let (label, f) = parse_line("6;50.000000 4:2", p, 1).unwrap();
        assert_eq!((label, f[3]), (6, 2.0));
    }

    #[test]
    fn parse_errors_carry_position() {
        let p = Path::new("batch7.dat");
        for bad in ["x 1:2", "7 1:2", "2 0:1", "2 129:1", "2 1:a", "2 1:1 1:2", "2 12"] {
            match parse_line(bad, p, 42) {
                Err(Error::Parse { path, line, .. }) => assert_eq!((path.as_str(), line), ("batch7.dat", 42), "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn ingest_orders_batches_numerically_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("batch10.dat"), "5 1:10\n").unwrap();
        fs::write(dir.path().join("batch2.dat"), "1 1:1\n\n2 1:2\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let records = ingest(dir.path()).unwrap();
        let got: Vec<(u32, u8, u64)> = records.iter().map(|r| (r.batch_id, r.true_label, r.cycle)).collect();
        assert_eq!(got, vec![(2, 1, 0), (2, 2, 1), (10, 5, 2)]);
        assert_eq!(ingest_cached(dir.path()).unwrap(), records);
        assert!(dir.path().join(CACHE_FILE).exists());
        assert_eq!(ingest_cached(dir.path()).unwrap(), records);
    }

    #[test]
    fn empty_batch_file_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("batch1.dat"), "").unwrap();
        assert!(ingest(dir.path()).unwrap().is_empty());
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(empty.path()), Err(Error::Config(_))));
    }

    #[test]
    fn bad_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("batch1.dat"), "1 1:1\n1 1:oops\n").unwrap();
        match ingest(dir.path()) {
            Err(Error::Parse { path, line, .. }) => {
                assert!(path.ends_with("batch1.dat"));
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn operator_answers_from_ground_truth() {
        let records = small_stream(50, 1);
        let mut op = Operator::new(&records);
        let ids = [3, 7, 11, 20, 49];
        let labels = op.labels(&ids).unwrap();
        assert_eq!(
            labels,
            ids.iter().map(|&i| records[i as usize].true_label).collect::<Vec<_>>()
        );
        assert!(op.labels(&[]).unwrap().is_empty());
        assert!(matches!(op.labels(&[50]), Err(Error::UnknownRecord(50))));
        assert_eq!(op.queries(), 5);
    }

    #[test]
    fn synthetic_stream_is_deterministic_and_well_formed() {
        let a = small_stream(400, 9);
        assert_eq!(a, small_stream(400, 9));
        assert_ne!(a, small_stream(400, 10));
        assert!(a
            .iter()
            .all(|r| r.features.len() == FEATURES && (1..=CLASSES).contains(&r.true_label)));
        assert_eq!(a.iter().map(|r| r.batch_id).max(), Some(4));
        assert!(a
            .windows(2)
            .all(|w| w[0].batch_id <= w[1].batch_id && w[0].cycle + 1 == w[1].cycle));
    }

    #[test]
    fn batch_one_classifier_fits_batch_one() {
        let records = SyntheticGas::default().generate(3).unwrap();
        let first: Vec<GasRecord> = records.iter().take_while(|r| r.batch_id == 1).cloned().collect();
        let (x, y) = split(&first);
        let (model, _) = GasModel::fit(&x, &y, &SvcHyperParams::default(), 1).unwrap();
        assert!(model.accuracy(&x, &y) >= 0.9, "{}", model.accuracy(&x, &y));
    }

    #[test]
    fn moving_average_drift_is_visible() {
        let records = SyntheticGas::default().generate(5).unwrap();
        let shift = drift_visibility(&records, 400, 2000);
        assert!(shift > 2.0, "{shift}");
        let still = SyntheticGas {
            final_offset: 0.0,
            final_gain_loss: 0.0,
            final_turnover: 0.0,
            ..SyntheticGas::default()
        }
        .generate(5)
        .unwrap();
        assert!(drift_visibility(&still, 400, 2000) < 1.0);
    }

    #[test]
    fn rescaled_model_keeps_decision_scores() {
        let records = small_stream(300, 2);
        let (x, y) = split(&records);
        let (model, _) = GasModel::fit(&x[..150], &y[..150], &SvcHyperParams::default(), 4).unwrap();
        let moved = model.rescaled(ScalerState::fitted(&x[150..]).unwrap()).unwrap();
        for r in &x {
            assert_eq!(model.predict(r), moved.predict(r));
            let (u, v) = (model.scaler.transform_one(r), moved.scaler.transform_one(r));
            for (m, n) in model.svc.machines.iter().zip(&moved.svc.machines) {
                let (p, q) = (m.score(&u), n.score(&v));
                assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn cycle_emits_prediction_and_route() {
        let records = small_stream(200, 4);
        let (x, y) = split(&records[..100]);
        let (model, _) = GasModel::fit(&x, &y, &SvcHyperParams::default(), 1).unwrap();
        let registry = ModelRegistry::new(0, model.clone());
        let t = gas_cycle(&records[150], &registry).unwrap();
        let expected = model.predict(&records[150].features);
        assert_eq!(t.output, TripletOutput::Route { class: expected });
        assert!(matches!(t.state, TripletState::Classifier { predicted, verified: None, .. } if predicted == expected));
        assert_eq!(t.cycle, 150);

        let untrained = GasModel {
            scaler: ScalerState::new(FEATURES),
            svc: LinearSvc {
                classes: Vec::new(),
                machines: Vec::new(),
                params: SvcHyperParams::default(),
                dim: FEATURES,
            },
        };
        assert!(matches!(
            gas_cycle(&records[0], &ModelRegistry::new(0, untrained)),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn new_task_queries_the_most_uncertain_five() {
        let records = small_stream(200, 6);
        let (x, y) = split(&records[..100]);
        let (model, _) = GasModel::fit(&x, &y, &SvcHyperParams::default(), 1).unwrap();
        let mut registry = ModelRegistry::new(0, model.clone());
        let mut knowledge = KnowledgeStore::new(feature_names());
        for r in &records[100..120] {
            knowledge
                .append_triplets(vec![gas_cycle(r, &registry).unwrap()])
                .unwrap();
        }
        let cycles: Vec<u64> = (100..120).collect();
        let task = knowledge.create_task(119, &cycles, 0, vec![1.0]).unwrap();
        let mut learner = GasTaskLearner {
            operator: Operator::new(&records),
            query_top_k: 5,
            epochs: 5,
        };
        let mut by_uncertainty: Vec<(f64, u64)> = cycles
            .iter()
            .map(|&c| (model.uncertainty(&records[c as usize].features), c))
            .collect();
        by_uncertainty.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut expected: Vec<u64> = by_uncertainty[..5].iter().map(|p| p.1).collect();
        expected.sort_unstable();

        let config = crate::lifelong::LllConfig::default();
        let ctx = EvolveContext {
            task,
            is_new: true,
            new_cycles: &cycles,
            config: &config,
            seed: 1,
        };
        learner.evolve(ctx, &mut knowledge, &mut registry).unwrap();
        assert_eq!(learner.operator.queries(), 5);
        let mut verified: Vec<u64> = cycles
            .iter()
            .copied()
            .filter(|&c| knowledge.get(c).unwrap().verified_label().is_some())
            .collect();
        verified.sort_unstable();
        assert_eq!(verified, expected);
        for &c in &verified {
            assert_eq!(
                knowledge.get(c).unwrap().verified_label(),
                Some(records[c as usize].true_label)
            );
        }
        assert_eq!(registry.active_id(), task);
    }
}
