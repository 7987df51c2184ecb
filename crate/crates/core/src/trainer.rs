//! The online training loop.
//!
//! Every training example is seen in exactly one batch. For each batch the
//! trainer takes `iterations` gradient steps, each on a freshly sampled
//! replay mini-batch, and only then writes the batch into episodic memory.
//! The snapshot used by the feature regularizers is the encoder as it stood
//! at the end of the previous task.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datasets::{LabeledSet, TaskData};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::memory::{EpisodicMemory, MemoryItem};
use crate::metrics::{embedding_drift, AccuracyMatrix, DriftLog, DriftPoint};
use crate::model::{Model, ModelSnapshot};
use crate::numerics::{l2_normalize, Matrix, Tape};
use crate::TaskId;

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Current batch only, no memory.
    Finetune,
    /// Experience replay.
    Er,
    /// Replay plus cosine alignment of memory features with the snapshot.
    Lfc,
    /// Replay plus squared distance to the snapshot's raw memory features.
    Rld,
    /// Replay plus the knowledge-invariant/spread-out regularizer.
    Kisp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Finetune, Method::Er, Method::Lfc, Method::Rld, Method::Kisp];

    pub fn uses_memory(self) -> bool {
        self != Method::Finetune
    }

    pub fn is_regularized(self) -> bool {
        matches!(self, Method::Lfc | Method::Rld | Method::Kisp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::Lfc => "lfc",
            Method::Rld => "rld",
            Method::Kisp => "kisp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// How test accuracy is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Argmax over every seen class.
    #[default]
    ClassIncremental,
    /// Argmax over the target task's classes only.
    TaskIncremental,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub method: Method,
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub iterations: usize,
    /// Per-task memory budget.
    pub memory_capacity: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub eval: EvalMode,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::Kisp,
            lambda: 1.0,
            tau: losses::DEFAULT_TAU,
            learning_rate: 0.05,
            batch_size: 10,
            replay_batch_size: 10,
            iterations: 1,
            memory_capacity: 20,
            hidden: vec![64],
            embedding_dim: 32,
            eval: EvalMode::ClassIncremental,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 || self.replay_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(1..=3).contains(&self.iterations) {
            return bad(format!("iterations must be 1, 2 or 3, got {}", self.iterations));
        }
        if !is_positive(self.learning_rate) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(is_positive(self.lambda) || self.lambda == 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !is_positive(self.tau) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        Ok(())
    }

    pub fn layer_sizes(&self, d_in: usize) -> Vec<usize> {
        let mut sizes = vec![d_in];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        sizes
    }
}

fn is_positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

/// Everything the online loop carries between batches.
#[derive(Debug, Clone)]
pub struct TrainerState {
    config: TrainerConfig,
    model: Model,
    snapshot: Option<ModelSnapshot>,
    memory: EpisodicMemory,
    current_task: Option<TaskId>,
    consumption: BTreeMap<u64, u32>,
    drift: DriftLog,
    drift_refs: HashMap<u64, Vec<f64>>,
    rng: ChaCha8Rng,
    updates: usize,
    snapshot_refreshes: usize,
}

impl TrainerState {
    pub fn new(config: TrainerConfig, d_in: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.layer_sizes(d_in), config.seed)?;
        let memory = EpisodicMemory::new(config.memory_capacity);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5151_7eed_0000_0001);
        Ok(Self {
            config,
            model,
            snapshot: None,
            memory,
            current_task: None,
            consumption: BTreeMap::new(),
            drift: DriftLog::default(),
            drift_refs: HashMap::new(),
            rng,
            updates: 0,
            snapshot_refreshes: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn snapshot(&self) -> Option<&ModelSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn memory(&self) -> &EpisodicMemory {
        &self.memory
    }

    pub fn current_task(&self) -> Option<TaskId> {
        self.current_task
    }

    pub fn drift_log(&self) -> &DriftLog {
        &self.drift
    }

    /// Gradient evaluations each training example took part in.
    pub fn consumption(&self) -> &BTreeMap<u64, u32> {
        &self.consumption
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn snapshot_refreshes(&self) -> usize {
        self.snapshot_refreshes
    }

    /// Adds the task's head and memory buffer and makes it current.
    pub fn begin_task(&mut self, task: TaskId, classes: Range<usize>) -> Result<()> {
        let expected_offset = self.model.heads().total_classes();
        if classes.start != expected_offset || classes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task {task} classes {classes:?} must start at {expected_offset}"
            )));
        }
        self.model.add_head(task, classes.len())?;
        self.memory.register_task(task, classes)?;
        self.current_task = Some(task);
        Ok(())
    }

    /// One online step over a batch of current-task examples.
    pub fn train_step(&mut self, batch: &LabeledSet) -> Result<LossBreakdown> {
        let task = self.current_task.ok_or(Error::NoHeads)?;
        let classes = self.model.heads().class_range(task).ok_or(Error::UnknownTask(task))?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(&label) = batch.y.iter().find(|y| !classes.contains(y)) {
            return Err(Error::LabelOutOfRange { label, classes: classes.end });
        }
        if let Some(id) = batch.ids.iter().find(|id| self.consumption.contains_key(id)) {
            return Err(Error::InvalidArgument(format!("example {id} was already consumed")));
        }

        let cfg = self.config.clone();
        let mut last = None;
        for _ in 0..cfg.iterations {
            let replay = if cfg.method.uses_memory() {
                self.memory.sample(cfg.replay_batch_size, &mut self.rng)?
            } else {
                Vec::new()
            };
            last = Some(self.update(batch, &replay)?);
            for &id in &batch.ids {
                *self.consumption.entry(id).or_insert(0) += 1;
            }
            self.log_drift(task)?;
        }

        if cfg.method.uses_memory() {
            self.write_memory(batch, task)?;
        }
        Ok(last.expect("iterations >= 1"))
    }

    fn update(&mut self, batch: &LabeledSet, replay: &[MemoryItem]) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let n = batch.len();
        let replay_x = if replay.is_empty() { None } else { Some(EpisodicMemory::stack_inputs(replay)?) };
        let inputs = match &replay_x {
            Some(rx) => Matrix::vstack(&[&batch.x, rx])?,
            None => batch.x.clone(),
        };
        let labels: Vec<usize> = batch.y.iter().copied().chain(replay.iter().map(|i| i.y)).collect();

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let x = tape.constant(inputs);
        let features = self.model.embed_on(&mut tape, &bound, x)?;
        let logits = self.model.logits_on(&mut tape, &bound, features)?;
        let ce = losses::cross_entropy_on(&mut tape, logits, &labels)?;

        let regularizer = match (&self.snapshot, &replay_x) {
            (Some(snap), Some(rx)) if cfg.method.is_regularized() => {
                let cur = tape.slice_rows(features, n, n + replay.len())?;
                let pre = snap.embed(rx)?;
                let reg = match cfg.method {
                    Method::Kisp => {
                        let pre = tape.constant(l2_normalize(&pre)?);
                        let cur = tape.l2_normalize(cur)?;
                        losses::kisp_on(&mut tape, pre, cur, cfg.tau)?
                    }
                    Method::Lfc => {
                        let pre = tape.constant(l2_normalize(&pre)?);
                        let cur = tape.l2_normalize(cur)?;
                        losses::lfc_on(&mut tape, pre, cur)?
                    }
                    Method::Rld => {
                        let pre = tape.constant(pre);
                        losses::rld_on(&mut tape, pre, cur)?
                    }
                    Method::Finetune | Method::Er => unreachable!("not regularized"),
                };
                Some(reg)
            }
            _ => None,
        };

        let (loss, reg_value) = match regularizer {
            Some(reg) => (losses::total_on(&mut tape, ce, reg, cfg.lambda)?, tape.value(reg).get(0, 0)),
            None => (ce, 0.0),
        };
        let breakdown = LossBreakdown {
            ce: tape.value(ce).get(0, 0),
            kisp: reg_value,
            total: tape.value(loss).get(0, 0),
            lambda: cfg.lambda,
        };
        let mut grads = tape.backward(loss)?;
        let lr = cfg.learning_rate;
        self.model.sgd_step(&bound, &mut grads, lr)?;
        self.updates += 1;
        Ok(breakdown)
    }

    fn write_memory(&mut self, batch: &LabeledSet, task: TaskId) -> Result<()> {
        let reference = self.model.embed(&batch.x)?;
        let items =
            (0..batch.len()).map(|i| MemoryItem { id: batch.ids[i], x: batch.x.row(i).to_vec(), y: batch.y[i], task });
        self.memory.write_batch(items)?;
        for (i, &id) in batch.ids.iter().enumerate() {
            self.drift_refs.insert(id, reference.row(i).to_vec());
        }
        let live: std::collections::HashSet<u64> = self.memory.iter().map(|i| i.id).collect();
        self.drift_refs.retain(|id, _| live.contains(id));
        Ok(())
    }

    fn log_drift(&mut self, task: TaskId) -> Result<()> {
        if self.memory.is_empty() {
            return Ok(());
        }
        let items = self.memory.all_items();
        let current = self.model.embed(&EpisodicMemory::stack_inputs(&items)?)?;
        let refs: Vec<&[f64]> = items.iter().map(|i| self.drift_refs[&i.id].as_slice()).collect();
        let reference = Matrix::from_rows(&refs)?;
        self.drift.push(DriftPoint {
            update: self.updates - 1,
            task,
            mean_cosine_distance: embedding_drift(&reference, &current)?,
        });
        Ok(())
    }

    /// Consumes a task's training stream batch by batch, then refreshes the
    /// snapshot from the live encoder.
    pub fn run_task(&mut self, train: &LabeledSet) -> Result<()> {
        for batch in train.batches(self.config.batch_size) {
            self.train_step(&batch)?;
        }
        self.snapshot = Some(self.model.snapshot());
        self.snapshot_refreshes += 1;
        Ok(())
    }

    /// Test accuracy on one task's examples.
    pub fn evaluate(&self, task: TaskId, test: &LabeledSet) -> Result<f64> {
        evaluate(&self.model, self.config.eval, task, test)
    }
}

pub fn evaluate(model: &Model, mode: EvalMode, task: TaskId, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let predicted = match mode {
        EvalMode::ClassIncremental => model.predict(&test.x)?,
        EvalMode::TaskIncremental => model.predict_within(&test.x, task)?,
    };
    let correct = predicted.iter().zip(&test.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Result of training over a whole stream.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub accuracy: AccuracyMatrix,
    pub drift: DriftLog,
    pub state: TrainerState,
}

impl RunOutcome {
    /// True iff every training example took part in exactly `iterations`
    /// gradient evaluations.
    pub fn single_pass_holds(&self, tasks: &[TaskData]) -> bool {
        let expected = self.state.config.iterations as u32;
        let total: usize = tasks.iter().map(|t| t.train.len()).sum();
        self.state.consumption.len() == total
            && tasks.iter().flat_map(|t| &t.train.ids).all(|id| self.state.consumption.get(id) == Some(&expected))
    }
}

/// Trains on each task in order and fills the accuracy matrix after each.
pub fn run_stream(config: &TrainerConfig, tasks: &[TaskData]) -> Result<RunOutcome> {
    let first = tasks.first().ok_or_else(|| Error::InvalidArgument("stream has no tasks".into()))?;
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        for c in t.classes.clone() {
            if !seen.insert(c) {
                return Err(Error::OverlappingClasses { class: c });
            }
        }
    }
    let mut state = TrainerState::new(config.clone(), first.train.x.cols())?;
    let mut accuracy = AccuracyMatrix::new();
    for (t, task) in tasks.iter().enumerate() {
        state.begin_task(task.task, task.classes.clone())?;
        state.run_task(&task.train)?;
        let model = &state.model;
        let row = tasks[..=t]
            .par_iter()
            .map(|seen| evaluate(model, config.eval, seen.task, &seen.test))
            .collect::<Result<Vec<_>>>()?;
        accuracy.push_row(row)?;
    }
    Ok(RunOutcome { accuracy, drift: state.drift.clone(), state })
}
