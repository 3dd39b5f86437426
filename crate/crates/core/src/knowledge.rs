//! Knowledge manager: per-cycle knowledge triplets, their task labels and the
//! task records created by the task manager.
//!
//! Triplets are stored in cycle order. Input features are kept as plain
//! vectors; their names live once in the store's schema and are only expanded
//! into `{name: value}` maps for the JSON-lines checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub type TaskId = u32;

/// Predicted or verified qualities of one adaptation option.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionQuality {
    pub option_id: u32,
    pub packet_loss: f64,
    pub energy: f64,
}

/// Learner metadata captured at the time the cycle ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripletState {
    Network {
        /// Registry entry that made the predictions.
        model_task: TaskId,
        /// Number of samples the model's scaler had absorbed (snapshot identity).
        scaler_id: u64,
        predictions: Vec<OptionQuality>,
        /// Outcomes obtained this cycle: the executed option first, then any
        /// options verified for exploration.
        verified: Vec<OptionQuality>,
    },
    Classifier {
        model_task: TaskId,
        predicted: u8,
        verified: Option<u8>,
        uncertainty: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripletOutput {
    Adaptation { option_id: u32 },
    Route { class: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTriplet {
    pub cycle: u64,
    pub input: Vec<f64>,
    pub state: TripletState,
    pub output: TripletOutput,
    pub task_labels: BTreeSet<TaskId>,
}

impl KnowledgeTriplet {
    pub fn new(cycle: u64, input: Vec<f64>, state: TripletState, output: TripletOutput) -> Self {
        Self {
            cycle,
            input,
            state,
            output,
            task_labels: BTreeSet::new(),
        }
    }

    /// Operator-verified class label, when the triplet carries one.
    pub fn verified_label(&self) -> Option<u8> {
        match self.state {
            TripletState::Classifier { verified, .. } => verified,
            TripletState::Network { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub created_cycle: u64,
    /// Member cycles, ascending.
    pub triplet_ids: Vec<u64>,
    pub detector_id: u32,
    pub baseline_errors: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeStore {
    input_names: Vec<String>,
    triplets: Vec<KnowledgeTriplet>,
    tasks: BTreeMap<TaskId, TaskRecord>,
}

impl KnowledgeStore {
    pub fn new(input_names: Vec<String>) -> Self {
        Self {
            input_names,
            triplets: Vec::new(),
            tasks: BTreeMap::new(),
        }
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn last_cycle(&self) -> Option<u64> {
        self.triplets.last().map(|t| t.cycle)
    }

    pub fn triplets(&self) -> &[KnowledgeTriplet] {
        &self.triplets
    }

    /// The `n` most recent triplets in cycle order.
    pub fn recent(&self, n: usize) -> &[KnowledgeTriplet] {
        &self.triplets[self.triplets.len().saturating_sub(n)..]
    }

    fn position(&self, cycle: u64) -> Option<usize> {
        self.triplets.binary_search_by_key(&cycle, |t| t.cycle).ok()
    }

    pub fn get(&self, cycle: u64) -> Option<&KnowledgeTriplet> {
        self.position(cycle).map(|i| &self.triplets[i])
    }

    pub fn task(&self, task_id: TaskId) -> Option<&TaskRecord> {
        self.tasks.get(&task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn next_task_id(&self) -> TaskId {
        self.tasks.keys().next_back().map_or(1, |id| id + 1)
    }

    /// Appends unlabeled triplets. The whole batch is validated before any of
    /// it is stored.
    pub fn append_triplets(&mut self, triplets: Vec<KnowledgeTriplet>) -> Result<usize> {
        let mut last = self.last_cycle();
        for t in &triplets {
            if let Some(prev) = last {
                if t.cycle <= prev {
                    return Err(Error::Ordering {
                        cycle: t.cycle,
                        last: prev,
                    });
                }
            }
            if t.input.len() != self.input_names.len() {
                return Err(Error::InvalidArgument(format!(
                    "triplet at cycle {} has {} input features, schema has {}",
                    t.cycle,
                    t.input.len(),
                    self.input_names.len()
                )));
            }
            last = Some(t.cycle);
        }
        let n = triplets.len();
        self.triplets.extend(triplets.into_iter().map(|mut t| {
            t.task_labels.clear();
            t
        }));
        Ok(n)
    }

    /// Registers a new task founded on the given cycles and labels them.
    pub fn create_task(
        &mut self,
        created_cycle: u64,
        founding_cycles: &[u64],
        detector_id: u32,
        baseline_errors: Vec<f64>,
    ) -> Result<TaskId> {
        if founding_cycles.is_empty() {
            return Err(Error::InvalidArgument("a task needs founding triplets".into()));
        }
        if baseline_errors.is_empty() || baseline_errors.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidArgument(
                "baseline errors must be nonempty and non-negative".into(),
            ));
        }
        if let Some(&c) = founding_cycles.iter().find(|&&c| self.position(c).is_none()) {
            return Err(Error::UnknownCycle(c));
        }
        let task_id = self.next_task_id();
        self.tasks.insert(
            task_id,
            TaskRecord {
                task_id,
                created_cycle,
                triplet_ids: Vec::new(),
                detector_id,
                baseline_errors,
            },
        );
        let assignments: Vec<_> = founding_cycles.iter().map(|&c| (c, task_id)).collect();
        self.label_triplets(&assignments)?;
        Ok(task_id)
    }

    /// Adds task labels to stored triplets. Either every assignment is applied
    /// or none is.
    pub fn label_triplets(&mut self, assignments: &[(u64, TaskId)]) -> Result<()> {
        let mut resolved = Vec::with_capacity(assignments.len());
        for &(cycle, task_id) in assignments {
            if !self.tasks.contains_key(&task_id) {
                return Err(Error::UnknownTask(task_id));
            }
            let pos = self.position(cycle).ok_or(Error::UnknownCycle(cycle))?;
            resolved.push((pos, cycle, task_id));
        }
        for (pos, cycle, task_id) in resolved {
            if self.triplets[pos].task_labels.insert(task_id) {
                let members = &mut self.tasks.get_mut(&task_id).expect("checked above").triplet_ids;
                let at = members.partition_point(|&c| c < cycle);
                members.insert(at, cycle);
            }
        }
        Ok(())
    }

    /// The `limit` most recent triplets of a task, newest first.
    pub fn fetch_task_triplets(&self, task_id: TaskId, limit: usize) -> Result<Vec<&KnowledgeTriplet>> {
        let task = self.tasks.get(&task_id).ok_or(Error::UnknownTask(task_id))?;
        Ok(task
            .triplet_ids
            .iter()
            .rev()
            .take(limit)
            .map(|&c| self.get(c).expect("task members are stored"))
            .collect())
    }

    /// Records an operator-verified class label on a stored triplet.
    pub fn set_verified_label(&mut self, cycle: u64, label: u8) -> Result<()> {
        let pos = self.position(cycle).ok_or(Error::UnknownCycle(cycle))?;
        match &mut self.triplets[pos].state {
            TripletState::Classifier { verified, .. } => {
                *verified = Some(label);
                Ok(())
            }
            TripletState::Network { .. } => Err(Error::InvalidArgument(format!(
                "triplet at cycle {cycle} has no class label"
            ))),
        }
    }

    /// Writes every triplet as one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.triplets {
            let line = triplet_to_json(&self.input_names, t)?;
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads triplets written by [`KnowledgeStore::write_jsonl`]. Task labels are
    /// returned on the triplets; task records are not part of the format.
    pub fn read_jsonl<R: BufRead>(input_names: &[String], reader: R) -> Result<Vec<KnowledgeTriplet>> {
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: "<jsonl>".into(),
                line: i + 1,
                msg,
            };
            let raw: RawTriplet = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let input = input_names
                .iter()
                .map(|name| {
                    raw.input
                        .get(name)
                        .and_then(Value::as_f64)
                        .ok_or_else(|| parse_err(format!("missing input feature {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(KnowledgeTriplet {
                cycle: raw.cycle,
                input,
                state: raw.state,
                output: raw.output,
                task_labels: raw.tasks,
            });
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct RawTriplet {
    cycle: u64,
    input: Map<String, Value>,
    state: TripletState,
    output: TripletOutput,
    tasks: BTreeSet<TaskId>,
}

fn triplet_to_json(names: &[String], t: &KnowledgeTriplet) -> Result<RawTriplet> {
    let mut input = Map::new();
    for (name, v) in names.iter().zip(&t.input) {
        let num = serde_json::Number::from_f64(*v)
            .ok_or_else(|| Error::InvalidArgument(format!("non-finite input {name} at cycle {}", t.cycle)))?;
        input.insert(name.clone(), Value::Number(num));
    }
    Ok(RawTriplet {
        cycle: t.cycle,
        input,
        state: t.state.clone(),
        output: t.output.clone(),
        tasks: t.task_labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["snr".into(), "load".into()]
    }

    fn triplet(cycle: u64) -> KnowledgeTriplet {
        KnowledgeTriplet::new(
            cycle,
            vec![cycle as f64, 1.0],
            TripletState::Classifier {
                model_task: 0,
                predicted: 1,
                verified: None,
                uncertainty: 0.5,
            },
            TripletOutput::Route { class: 1 },
        )
    }

    fn store_with(cycles: std::ops::Range<u64>) -> KnowledgeStore {
        let mut store = KnowledgeStore::new(names());
        store.append_triplets(cycles.map(triplet).collect()).unwrap();
        store
    }

    #[test]
    fn append_and_retrieve() {
        let store = store_with(0..20);
        assert_eq!(store.len(), 20);
        for c in 0..20 {
            assert_eq!(store.get(c).unwrap().cycle, c);
            assert!(store.get(c).unwrap().task_labels.is_empty());
        }
    }

    #[test]
    fn append_empty_is_noop() {
        let mut store = store_with(0..3);
        assert_eq!(store.append_triplets(vec![]).unwrap(), 0);
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn append_out_of_order_rejected() {
        let mut store = store_with(0..11);
        let err = store.append_triplets(vec![triplet(5)]).unwrap_err();
        assert!(matches!(err, Error::Ordering { cycle: 5, last: 10 }));
        assert_eq!(store.len(), 11);
        // a batch that is unordered internally is rejected as a whole
        let err = store.append_triplets(vec![triplet(12), triplet(12)]).unwrap_err();
        assert!(matches!(err, Error::Ordering { .. }));
        assert_eq!(store.len(), 11);
    }

    #[test]
    fn append_wrong_width_rejected() {
        let mut store = store_with(0..1);
        let mut t = triplet(1);
        t.input.push(3.0);
        assert!(store.append_triplets(vec![t]).is_err());
    }

    #[test]
    fn labels_accumulate() {
        let mut store = store_with(0..20);
        let t1 = store
            .create_task(19, &(0..20).collect::<Vec<_>>(), 1, vec![0.1])
            .unwrap();
        assert_eq!(t1, 1);
        assert!(store.triplets().iter().all(|t| t.task_labels == BTreeSet::from([1])));
        let t2 = store.create_task(19, &[3], 2, vec![0.2]).unwrap();
        assert_eq!(t2, 2);
        assert_eq!(store.get(3).unwrap().task_labels, BTreeSet::from([1, 2]));
    }

    #[test]
    fn unknown_task_leaves_store_untouched() {
        let mut store = store_with(0..5);
        store.create_task(4, &[0], 1, vec![0.0]).unwrap();
        let err = store.label_triplets(&[(1, 1), (2, 99)]).unwrap_err();
        assert!(matches!(err, Error::UnknownTask(99)));
        assert!(store.get(1).unwrap().task_labels.is_empty());
        let err = store.label_triplets(&[(1, 1), (42, 1)]).unwrap_err();
        assert!(matches!(err, Error::UnknownCycle(42)));
        assert!(store.get(1).unwrap().task_labels.is_empty());
    }

    #[test]
    fn labeling_is_idempotent() {
        let mut store = store_with(0..5);
        store.create_task(4, &[0, 1], 1, vec![0.0]).unwrap();
        store.label_triplets(&[(2, 1), (2, 1)]).unwrap();
        store.label_triplets(&[(2, 1)]).unwrap();
        assert_eq!(store.task(1).unwrap().triplet_ids, vec![0, 1, 2]);
    }

    #[test]
    fn fetch_most_recent_first() {
        let mut store = store_with(0..1500);
        let all: Vec<u64> = (0..1500).collect();
        store.create_task(1499, &all, 1, vec![0.0]).unwrap();
        let got = store.fetch_task_triplets(1, 1000).unwrap();
        assert_eq!(got.len(), 1000);
        assert_eq!(got[0].cycle, 1499);
        assert_eq!(got[999].cycle, 500);

        store
            .create_task(1499, &(0..30).collect::<Vec<_>>(), 2, vec![0.0])
            .unwrap();
        assert_eq!(store.fetch_task_triplets(2, 1000).unwrap().len(), 30);
        assert!(store.fetch_task_triplets(2, 0).unwrap().is_empty());
        assert!(matches!(store.fetch_task_triplets(7, 10), Err(Error::UnknownTask(7))));
    }

    #[test]
    fn verified_label_write_back() {
        let mut store = store_with(0..3);
        store.set_verified_label(1, 4).unwrap();
        assert_eq!(store.get(1).unwrap().verified_label(), Some(4));
        assert!(store.set_verified_label(9, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut store = store_with(0..4);
        store.create_task(3, &[1, 2], 1, vec![0.3]).unwrap();
        let mut buf = Vec::new();
        store.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first["cycle"], 1);
        assert_eq!(first["input"]["snr"], 1.0);
        assert_eq!(first["tasks"], serde_json::json!([1]));
        let back = KnowledgeStore::read_jsonl(store.input_names(), buf.as_slice()).unwrap();
        assert_eq!(back, store.triplets());
    }
}
