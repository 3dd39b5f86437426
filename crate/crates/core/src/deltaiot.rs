//! Deterministic simulator of a 15-mote multi-hop IoT network.
//!
//! Every mote sends its own messages plus whatever it receives from its
//! children towards the gateway. A link loses packets with probability
//! `clamp((snr_ok - snr) / snr_range, 0, 1)`, where the SNR falls with
//! interference. Motes with two outgoing links split their traffic according
//! to the adaptation option. Interference and load are pure functions of
//! `(seed, cycle)`, so any cycle can be regenerated on demand.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::managing::{AdaptationOption, ManagedSystem, QualityEstimate, SPLIT_STEPS};

pub const GATEWAY: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoteSpec {
    pub id: u32,
    /// Mean messages generated per cycle.
    pub load_mean: f64,
    /// Transmission power setting, 0..=15.
    pub power: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: u32,
    pub to: u32,
    /// SNR at power setting 0 without interference (dB).
    pub base_snr: f64,
    /// Fraction of the drift interference that reaches this link.
    #[serde(default)]
    pub drift_exposure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// SNR at and above which a link loses nothing (dB).
    pub snr_ok: f64,
    /// SNR span over which loss grows from 0 to 1 (dB).
    pub snr_range: f64,
    /// SNR gained per power step (dB).
    pub power_gain_db: f64,
    /// Fixed cost per mote per cycle (mC).
    pub base_cost: f64,
    /// Cost per message per power step (mC).
    pub alpha: f64,
    /// Standard deviation of the slowly varying interference component (dB).
    pub smooth_std: f64,
    /// Cycles averaged by the slowly varying component.
    pub smooth_span: usize,
    /// Standard deviation of the per-cycle interference component (dB).
    pub jitter_std: f64,
    /// Bound on the absolute base interference (dB).
    pub interference_bound: f64,
    /// Standard deviation of per-mote load fluctuation (messages).
    pub load_std: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            snr_ok: 5.0,
            snr_range: 10.0,
            power_gain_db: 0.25,
            base_cost: 0.63,
            alpha: 0.0022,
            smooth_std: 1.0,
            smooth_span: 3,
            jitter_std: 0.6,
            interference_bound: 3.0,
            load_std: 1.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub motes: Vec<MoteSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub calibration: Calibration,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let motes = [
            (1, 6.0, 12),
            (2, 5.0, 13),
            (3, 5.0, 6),
            (4, 4.0, 10),
            (5, 5.0, 7),
            (6, 4.0, 12),
            (7, 6.0, 9),
            (8, 4.0, 6),
            (9, 5.0, 9),
            (10, 6.0, 8),
            (11, 4.0, 8),
            (12, 6.0, 9),
            (13, 5.0, 8),
            (14, 4.0, 8),
            (15, 4.0, 8),
        ]
        .map(|(id, load_mean, power)| MoteSpec { id, load_mean, power })
        .to_vec();
        let links = [
            (1, 0, 5.0, 0.0),
            (2, 0, 4.5, 0.0),
            (3, 0, 5.0, 0.0),
            (4, 1, 3.0, 0.0),
            (5, 1, 3.0, 0.0),
            (6, 2, 3.0, 0.0),
            (7, 2, 3.5, 1.0),
            (7, 3, 0.5, 0.0),
            (8, 3, 4.5, 0.0),
            (9, 4, 2.5, 0.0),
            (10, 4, 3.5, 1.0),
            (10, 5, 1.0, 0.0),
            (11, 6, 2.5, 0.0),
            (12, 6, 3.5, 1.0),
            (12, 8, 1.0, 0.0),
            (13, 8, 3.0, 0.0),
            (14, 9, 0.0, 0.0),
            (15, 13, 1.5, 0.0),
        ]
        .map(|(from, to, base_snr, drift_exposure)| LinkSpec {
            from,
            to,
            base_snr,
            drift_exposure,
        })
        .to_vec();
        Self {
            motes,
            links,
            calibration: Calibration::default(),
        }
    }
}

/// Interference added during part of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftWindow {
    pub start: u64,
    /// Last affected cycle (inclusive).
    pub end: u64,
    pub delta_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftProfile {
    #[default]
    None,
    Sudden {
        windows: Vec<DriftWindow>,
    },
    /// Offset growing by `slope` per cycle from `start` on.
    Incremental {
        slope: f64,
        start: u64,
    },
}

impl DriftProfile {
    /// Two recurring interference waves; the second is stronger.
    pub fn default_sudden() -> Self {
        Self::Sudden {
            windows: vec![
                DriftWindow {
                    start: 100,
                    end: 350,
                    delta_db: 8.0,
                },
                DriftWindow {
                    start: 750,
                    end: 1100,
                    delta_db: 11.0,
                },
            ],
        }
    }

    pub fn validate(&self, cycles: Option<u64>) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Incremental { slope, .. } if !slope.is_finite() => invalid("drift slope must be finite"),
            Self::Incremental { .. } => Ok(()),
            Self::Sudden { windows } => {
                let mut sorted: Vec<&DriftWindow> = windows.iter().collect();
                sorted.sort_by_key(|w| w.start);
                for w in &sorted {
                    if w.end < w.start || !w.delta_db.is_finite() {
                        return invalid(format!("bad drift window [{}, {}]", w.start, w.end));
                    }
                    if cycles.is_some_and(|n| w.start >= n) {
                        return invalid(format!("drift window starting at {} lies beyond the run", w.start));
                    }
                }
                if sorted.windows(2).any(|p| p[1].start <= p[0].end) {
                    return invalid("drift windows overlap");
                }
                Ok(())
            }
        }
    }

    /// Offset at `cycle`.
    pub fn offset(&self, cycle: u64) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Sudden { windows } => windows
                .iter()
                .find(|w| (w.start..=w.end).contains(&cycle))
                .map_or(0.0, |w| w.delta_db),
            Self::Incremental { slope, start } => slope * cycle.saturating_sub(*start) as f64,
        }
    }

    /// First cycles of the drift windows.
    pub fn onsets(&self) -> Vec<u64> {
        match self {
            Self::Sudden { windows } => windows.iter().map(|w| w.start).collect(),
            Self::Incremental { start, .. } => vec![*start],
            Self::None => Vec::new(),
        }
    }
}

/// Per-link interference (dB) and per-mote load (messages) of one cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uncertainties {
    pub interference: Vec<f64>,
    pub load: Vec<f64>,
}

fn mix(mut h: u64, parts: &[u64]) -> u64 {
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Standard normal draw addressed by `(seed, stream, index)`.
fn normal_at(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[stream, index]));
    StandardNormal.sample(&mut rng)
}

/// Moving average of `span` addressed normals, rescaled to unit variance.
fn smooth_at(seed: u64, stream: u64, cycle: u64, span: usize) -> f64 {
    let span = span.max(1) as u64;
    let sum: f64 = (0..span).map(|k| normal_at(seed, stream, cycle + k)).sum();
    sum / (span as f64).sqrt()
}

const STREAM_SMOOTH: u64 = 1 << 32;
const STREAM_JITTER: u64 = 2 << 32;
const STREAM_LOAD: u64 = 3 << 32;

#[derive(Clone, Debug)]
struct Link {
    spec: LinkSpec,
    from: usize,
    to: usize,
}

/// Validated network with precomputed routing order.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    links: Vec<Link>,
    /// Outgoing link indices per mote index (index 0 is the gateway).
    outgoing: Vec<Vec<usize>>,
    /// Mote indices with every child before its parents.
    order: Vec<usize>,
    dual: Vec<usize>,
    options: Vec<AdaptationOption>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let mut index = BTreeMap::from([(GATEWAY, 0usize)]);
        for (i, m) in config.motes.iter().enumerate() {
            if m.id == GATEWAY || index.insert(m.id, i + 1).is_some() {
                return Err(Error::Config(format!("duplicate or reserved mote id {}", m.id)));
            }
            if m.power > 15 || !(m.load_mean >= 0.0) {
                return Err(Error::Config(format!("mote {} has invalid power or load", m.id)));
            }
        }
        let n = config.motes.len() + 1;
        let mut links = Vec::new();
        let mut outgoing = vec![Vec::new(); n];
        for spec in &config.links {
            let (Some(&from), Some(&to)) = (index.get(&spec.from), index.get(&spec.to)) else {
                return Err(Error::Config(format!(
                    "link {}->{} names an unknown mote",
                    spec.from, spec.to
                )));
            };
            if from == 0 || from == to || !spec.base_snr.is_finite() {
                return Err(Error::Config(format!("invalid link {}->{}", spec.from, spec.to)));
            }
            outgoing[from].push(links.len());
            links.push(Link {
                spec: spec.clone(),
                from,
                to,
            });
        }
        let mut dual = Vec::new();
        for (m, out) in outgoing.iter().enumerate().skip(1) {
            match out.len() {
                0 => return Err(Error::Config(format!("mote {} has no route", config.motes[m - 1].id))),
                1 => {}
                2 => dual.push(m),
                _ => {
                    return Err(Error::Config(format!(
                        "mote {} has more than two links",
                        config.motes[m - 1].id
                    )))
                }
            }
        }
        // Kahn's algorithm on the child -> parent graph; leaves first.
        let mut indegree = vec![0usize; n];
        for l in &links {
            indegree[l.to] += 1;
        }
        let mut ready: Vec<usize> = (1..n).filter(|&m| indegree[m] == 0).collect();
        let mut order = Vec::with_capacity(n - 1);
        while let Some(m) = ready.pop() {
            order.push(m);
            for &li in &outgoing[m] {
                let p = links[li].to;
                indegree[p] -= 1;
                if indegree[p] == 0 && p != 0 {
                    ready.push(p);
                }
            }
        }
        if order.len() != n - 1 {
            return Err(Error::Config("routing graph has a cycle".into()));
        }
        let mut net = Self {
            config,
            links,
            outgoing,
            order,
            dual,
            options: Vec::new(),
        };
        net.options = net.enumerate_options();
        Ok(net)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(serde_json::from_str(&text)?)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn mote_count(&self) -> usize {
        self.config.motes.len()
    }

    /// Ids of the motes whose split is adaptable.
    pub fn dual_motes(&self) -> Vec<u32> {
        self.dual.iter().map(|&m| self.config.motes[m - 1].id).collect()
    }

    pub fn options(&self) -> &[AdaptationOption] {
        &self.options
    }

    fn enumerate_options(&self) -> Vec<AdaptationOption> {
        let power: Vec<u8> = self.config.motes.iter().map(|m| m.power).collect();
        let k = self.dual.len() as u32;
        let steps = SPLIT_STEPS.len();
        (0..steps.pow(k))
            .map(|id| {
                let mut rest = id;
                let distribution = (0..k)
                    .map(|_| {
                        let s = SPLIT_STEPS[rest % steps];
                        rest /= steps;
                        s
                    })
                    .collect();
                AdaptationOption {
                    option_id: id as u32,
                    power: power.clone(),
                    distribution,
                }
            })
            .collect()
    }

    /// Uncertainties of `cycle`, including the drift offset on exposed links.
    pub fn gen_uncertainties(&self, cycle: u64, profile: &DriftProfile, seed: u64) -> Uncertainties {
        let c = &self.config.calibration;
        let drift = profile.offset(cycle);
        let interference = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let i = i as u64;
                let base = c.smooth_std * smooth_at(seed, STREAM_SMOOTH + i, cycle, c.smooth_span)
                    + c.jitter_std * normal_at(seed, STREAM_JITTER + i, cycle);
                base.clamp(-c.interference_bound, c.interference_bound) + drift * l.spec.drift_exposure
            })
            .collect();
        let load = self
            .config
            .motes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let f = c.load_std * smooth_at(seed, STREAM_LOAD + i as u64, cycle, c.smooth_span);
                (m.load_mean + f).clamp(1.0, 10.0)
            })
            .collect();
        Uncertainties { interference, load }
    }

    fn check(&self, u: &Uncertainties) -> Result<()> {
        if u.interference.len() != self.links.len() || u.load.len() != self.mote_count() {
            return invalid("uncertainties do not match the topology");
        }
        Ok(())
    }

    /// Per-link SNR under the configured power settings.
    pub fn snr(&self, u: &Uncertainties) -> Vec<f64> {
        let c = &self.config.calibration;
        self.links
            .iter()
            .zip(&u.interference)
            .map(|(l, i)| {
                let power = self.config.motes[l.from - 1].power;
                l.spec.base_snr + c.power_gain_db * f64::from(power) - i
            })
            .collect()
    }

    pub fn loss_probability(&self, snr: f64) -> f64 {
        let c = &self.config.calibration;
        ((c.snr_ok - snr) / c.snr_range).clamp(0.0, 1.0)
    }

    /// Monitored features: link SNRs followed by mote loads.
    pub fn monitor_features(&self, u: &Uncertainties) -> Vec<f64> {
        let mut f = self.snr(u);
        f.extend_from_slice(&u.load);
        f
    }

    fn shares(&self, option: &AdaptationOption) -> Result<Vec<f64>> {
        if option.distribution.len() != self.dual.len() {
            return invalid(format!(
                "option {} sets {} splits, the topology has {} dual-link motes",
                option.option_id,
                option.distribution.len(),
                self.dual.len()
            ));
        }
        if option.distribution.iter().any(|&d| d > 100) {
            return invalid(format!("option {} has a split above 100%", option.option_id));
        }
        let mut share = vec![1.0; self.links.len()];
        for (&m, &pct) in self.dual.iter().zip(&option.distribution) {
            let first = f64::from(pct) / 100.0;
            share[self.outgoing[m][0]] = first;
            share[self.outgoing[m][1]] = 1.0 - first;
        }
        Ok(share)
    }

    /// Expected packet loss and energy of one cycle under `option`.
    pub fn simulate(&self, option: &AdaptationOption, u: &Uncertainties) -> Result<QualityEstimate> {
        self.check(u)?;
        let share = self.shares(option)?;
        let c = &self.config.calibration;
        let delivery: Vec<f64> = self.snr(u).iter().map(|&s| 1.0 - self.loss_probability(s)).collect();
        let n = self.mote_count() + 1;

        // messages transmitted per mote: own load plus what children deliver to it
        let mut sent = vec![0.0; n];
        for m in 1..n {
            sent[m] = u.load[m - 1];
        }
        for &m in &self.order {
            for &li in &self.outgoing[m] {
                let l = &self.links[li];
                sent[l.to] += sent[m] * share[li] * delivery[li];
            }
        }
        // end-to-end delivery probability, parents before children
        let mut reach = vec![0.0; n];
        reach[0] = 1.0;
        for &m in self.order.iter().rev() {
            reach[m] = self.outgoing[m]
                .iter()
                .map(|&li| share[li] * delivery[li] * reach[self.links[li].to])
                .sum();
        }
        let total: f64 = u.load.iter().sum();
        let arrived: f64 = (1..n).map(|m| u.load[m - 1] * reach[m]).sum();
        let packet_loss = if total > 0.0 {
            (100.0 * (1.0 - arrived / total)).clamp(0.0, 100.0)
        } else {
            0.0
        };
        let energy = (1..n)
            .map(|m| c.base_cost + c.alpha * f64::from(self.config.motes[m - 1].power) * sent[m])
            .sum();
        Ok(QualityEstimate { packet_loss, energy })
    }

    /// Exhaustive search for the highest true utility; lowest id on ties.
    pub fn true_best(&self, u: &Uncertainties) -> Result<(u32, QualityEstimate, f64)> {
        let mut best: Option<(u32, QualityEstimate, f64)> = None;
        for o in &self.options {
            let q = self.simulate(o, u)?;
            let util = q.utility();
            if best.map_or(true, |(_, _, b)| util > b) {
                best = Some((o.option_id, q, util));
            }
        }
        best.ok_or_else(|| Error::InvalidArgument("topology has no options".into()))
    }
}

/// The simulator as a managed system for the feedback loop.
#[derive(Clone, Debug)]
pub struct DeltaIotSim {
    network: Network,
    profile: DriftProfile,
    seed: u64,
    cycles: Option<u64>,
    current: Option<(u64, Uncertainties)>,
}

impl DeltaIotSim {
    pub fn new(network: Network, profile: DriftProfile, seed: u64, cycles: Option<u64>) -> Result<Self> {
        profile.validate(cycles)?;
        Ok(Self {
            network,
            profile,
            seed,
            cycles,
            current: None,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn profile(&self) -> &DriftProfile {
        &self.profile
    }

    /// Uncertainties of the last monitored cycle.
    pub fn current(&self) -> Option<&Uncertainties> {
        self.current.as_ref().map(|(_, u)| u)
    }

    fn current_or_err(&self) -> Result<&Uncertainties> {
        self.current()
            .ok_or_else(|| Error::InvalidArgument("no cycle has been monitored".into()))
    }

    fn option(&self, option_id: u32) -> Result<&AdaptationOption> {
        self.network
            .options
            .get(option_id as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown option {option_id}")))
    }

    pub fn true_best(&self) -> Result<(u32, QualityEstimate, f64)> {
        self.network.true_best(self.current_or_err()?)
    }
}

impl ManagedSystem for DeltaIotSim {
    fn options(&self) -> &[AdaptationOption] {
        &self.network.options
    }

    fn monitor(&mut self, cycle: u64) -> Result<Vec<f64>> {
        if self.cycles.is_some_and(|n| cycle >= n) {
            return Err(Error::EndOfRun);
        }
        let u = self.network.gen_uncertainties(cycle, &self.profile, self.seed);
        let features = self.network.monitor_features(&u);
        self.current = Some((cycle, u));
        Ok(features)
    }

    fn execute(&mut self, option_id: u32) -> Result<QualityEstimate> {
        self.verify(option_id)
    }

    fn verify(&self, option_id: u32) -> Result<QualityEstimate> {
        self.network.simulate(self.option(option_id)?, self.current_or_err()?)
    }
}
