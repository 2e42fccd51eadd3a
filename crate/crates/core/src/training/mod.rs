//! Synchronous data-parallel SGD over simulated workers.
//!
//! Every step, each worker computes a gradient on its own shard, each layer
//! goes through the worker's compressor and the group all-reduce, and the
//! aggregated reconstruction is applied as `w ← w − η·ĝ`.

pub mod data;
pub mod model;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{CallContext, Ledger, WorkerGroup};
use crate::compress::{reshape_to_matrix, CompressorSpec, LayerCompressor, LayerShape, Round, StepOutput};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix};
use crate::rng::{derive_seed, tag, SeededRng};
use crate::tensor::NamedTensors;

pub use data::{Dataset, DatasetSpec, Split};
pub use model::{Activation, Model};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    /// `½‖W − T_i‖²` with targets `T_i = W* + noise·N(0, 1)`.
    Quadratic {
        #[serde(default = "default_quad_rows")]
        rows: usize,
        #[serde(default = "default_quad_cols")]
        cols: usize,
        #[serde(default = "default_quad_samples")]
        samples: usize,
        #[serde(default)]
        noise: f64,
    },
    /// Binary logistic regression; the dataset must have two classes.
    Logistic { dataset: DatasetSpec },
    Mlp {
        dataset: DatasetSpec,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

fn default_quad_rows() -> usize {
    16
}
fn default_quad_cols() -> usize {
    12
}
fn default_quad_samples() -> usize {
    256
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}

impl TaskSpec {
    pub fn quadratic(rows: usize, cols: usize) -> Self {
        TaskSpec::Quadratic { rows, cols, samples: default_quad_samples(), noise: 0.0 }
    }

    pub fn mlp(dataset: DatasetSpec) -> Self {
        TaskSpec::Mlp { dataset, hidden: default_hidden(), activation: Activation::Tanh }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Quadratic { .. } => "quadratic",
            TaskSpec::Logistic { .. } => "logistic",
            TaskSpec::Mlp { .. } => "mlp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Quadratic { rows, cols, samples, noise } => {
                if *rows == 0 || *cols == 0 || *samples == 0 {
                    return Err(Error::Config("quadratic needs positive rows, cols and samples".into()));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(Error::Config("quadratic noise must be finite and >= 0".into()));
                }
                Ok(())
            }
            TaskSpec::Logistic { dataset } => {
                dataset.validate()?;
                if dataset.classes() != 2 {
                    return Err(Error::Config("logistic regression needs a 2-class dataset".into()));
                }
                Ok(())
            }
            TaskSpec::Mlp { dataset, hidden, .. } => {
                dataset.validate()?;
                if hidden.contains(&0) {
                    return Err(Error::Config("hidden widths must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Generates or loads the data. Data depend only on `seed`.
    pub fn build(&self, seed: u64) -> Result<Task> {
        self.validate()?;
        match self {
            TaskSpec::Quadratic { rows, cols, samples, noise } => {
                let mut rng = SeededRng::derived(seed, 0, tag::DATA);
                let w_star = gaussian_matrix(&mut rng, *rows, *cols);
                let d = rows * cols;
                let mut targets = Vec::with_capacity(samples * d);
                for _ in 0..*samples {
                    targets.extend(w_star.data().iter().map(|w| w + noise * rng.normal()));
                }
                let train = Dataset::new(Matrix::new(*samples, d, targets)?, vec![0; *samples], 1)?;
                Task::new(Model::Quadratic { rows: *rows, cols: *cols }, Split { test: train.clone(), train })
            }
            TaskSpec::Logistic { dataset } => {
                let split = dataset.load(seed)?;
                Ok(Task {
                    name: self.name().into(),
                    model: Model::Logistic { dim: split.train.dim() },
                    split,
                    optimum: None,
                })
            }
            TaskSpec::Mlp { dataset, hidden, activation } => {
                let split = dataset.load(seed)?;
                let model = Model::mlp(split.train.dim(), hidden, split.train.classes, *activation);
                Ok(Task { name: self.name().into(), model, split, optimum: None })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub model: Model,
    pub split: Split,
    /// Closed-form minimiser of the training loss, when there is one.
    pub optimum: Option<Matrix>,
}

impl Task {
    /// Wraps a model and data directly. The quadratic's optimum is the mean target.
    pub fn new(model: Model, split: Split) -> Result<Self> {
        if split.train.dim() != model.input_dim() || split.test.dim() != model.input_dim() {
            return Err(Error::Shape("dataset width does not match the model".into()));
        }
        let optimum = match &model {
            Model::Quadratic { rows, cols } => {
                let n = split.train.len() as f64;
                let mut sum = vec![0.0; rows * cols];
                for i in 0..split.train.len() {
                    for (s, t) in sum.iter_mut().zip(split.train.x.row(i)) {
                        *s += t;
                    }
                }
                Some(Matrix::new(*rows, *cols, sum.iter().map(|s| s / n).collect())?)
            }
            _ => None,
        };
        let name = match &model {
            Model::Quadratic { .. } => "quadratic",
            Model::Logistic { .. } => "logistic",
            Model::Mlp { .. } => "mlp",
        };
        Ok(Self { name: name.into(), model, split, optimum })
    }

    /// `‖W − W*‖_F` for the quadratic task.
    pub fn distance_to_optimum(&self, params: &NamedTensors) -> Option<f64> {
        let opt = self.optimum.as_ref()?;
        let w = params.get("w")?.data();
        Some(w.iter().zip(opt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

/// Exact batch-mean loss and gradient on one worker's batch.
pub fn local_gradient(task: &Task, params: &NamedTensors, batch: &Dataset) -> Result<(f64, NamedTensors)> {
    task.model.loss_and_grad(params, batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Held-out loss and accuracy. The quadratic reports `½‖W − W*‖²`.
pub fn evaluate(task: &Task, params: &NamedTensors) -> Result<Evaluation> {
    if let Some(d) = task.distance_to_optimum(params) {
        return Ok(Evaluation { loss: 0.5 * d * d, accuracy: None });
    }
    let test = &task.split.test;
    let loss = task.model.loss(params, test)?;
    let pred = task.model.predict(params, &test.x)?;
    Ok(Evaluation { loss, accuracy: Some(accuracy(&pred, &test.y)) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Per-worker batch size.
    pub batch_size: usize,
    pub workers: usize,
    pub compressor: CompressorSpec,
    pub seed: u64,
    /// Route collectives through loopback TCP instead of in memory.
    #[serde(default)]
    pub loopback: bool,
}

impl TrainConfig {
    pub fn new(compressor: CompressorSpec, workers: usize, seed: u64) -> Self {
        Self { lr: 0.1, epochs: 1, batch_size: 32, workers, compressor, seed, loopback: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("epochs, batch_size and workers must be positive".into()));
        }
        self.compressor.validate()
    }
}

/// Which samples each worker uses at each step. Shards are fixed by the
/// master seed; every epoch each worker walks a fresh permutation of its
/// shard in disjoint batches, dropping the remainder.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    shards: Vec<Vec<usize>>,
    batch_size: usize,
    steps_per_epoch: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(samples: usize, workers: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let shards = data::shard(samples, workers, seed)?;
        let smallest = shards.iter().map(Vec::len).min().unwrap_or(0);
        let steps_per_epoch = smallest / batch_size.max(1);
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds the smallest shard ({smallest} samples)"
            )));
        }
        Ok(Self { shards, batch_size, steps_per_epoch, seed })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, worker: usize) -> &[usize] {
        &self.shards[worker]
    }

    pub fn epoch_order(&self, epoch: usize, worker: usize) -> Vec<usize> {
        let mut order = self.shards[worker].clone();
        SeededRng::derived(derive_seed(self.seed, worker as u64, tag::BATCH), epoch as u64, tag::BATCH)
            .shuffle(&mut order);
        order
    }

    /// Sample indices for `worker` at global step `step`.
    pub fn batch(&self, step: usize, worker: usize) -> Vec<usize> {
        let (epoch, s) = (step / self.steps_per_epoch, step % self.steps_per_epoch);
        self.epoch_order(epoch, worker)[s * self.batch_size..(s + 1) * self.batch_size].to_vec()
    }
}

/// Runs one layer through every worker's compressor and the collective until
/// all workers are done. Returns the per-worker outputs and the time spent in
/// collectives.
pub fn exchange_layer(
    group: &mut WorkerGroup,
    step: u64,
    layer: &str,
    compressor: &str,
    comps: &mut [Box<dyn LayerCompressor>],
    grads: &[Matrix],
) -> Result<(Vec<StepOutput>, Duration)> {
    if comps.len() != grads.len() {
        return Err(Error::Protocol(format!("{} compressors for {} gradients", comps.len(), grads.len())));
    }
    let mut msgs = comps.iter_mut().zip(grads).map(|(c, g)| c.begin(g)).collect::<Result<Vec<_>>>()?;
    let mut comm = Duration::ZERO;
    for round in 0.. {
        if round > 8 {
            return Err(Error::Protocol("compressor did not finish within 8 rounds".into()));
        }
        let op = format!("round{round}");
        let ctx = CallContext { step, layer, compressor, op: &op };
        let t = Instant::now();
        let agg = group.all_reduce_mean(&ctx, &msgs)?;
        comm += t.elapsed();
        let mut next = Vec::new();
        let mut done = Vec::new();
        for c in comps.iter_mut() {
            match c.absorb(agg.clone())? {
                Round::Send(m) => next.push(m),
                Round::Done(o) => done.push(o),
            }
        }
        if done.len() == comps.len() {
            return Ok((done, comm));
        }
        if next.len() != comps.len() {
            return Err(Error::Protocol("workers disagree on the number of rounds".into()));
        }
        msgs = next;
    }
    unreachable!()
}

/// What one worker did with one layer in one step, kept when tracing.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub worker: usize,
    pub layer: usize,
    pub grad: Matrix,
    pub error_before: Option<Matrix>,
    pub transmitted: Matrix,
    pub error_after: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    /// Mean of the workers' batch losses before the update.
    pub loss: f64,
    pub traces: Vec<LayerTrace>,
}

pub struct Trainer<'a> {
    task: &'a Task,
    cfg: TrainConfig,
    label: String,
    params: NamedTensors,
    shapes: Vec<LayerShape>,
    /// `[worker][layer]`.
    compressors: Vec<Vec<Box<dyn LayerCompressor>>>,
    group: WorkerGroup,
    plan: BatchPlan,
    step: u64,
    tracing: bool,
    compute: Duration,
}

impl<'a> Trainer<'a> {
    pub fn new(task: &'a Task, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = task.model.init(derive_seed(cfg.seed, 0, tag::INIT));
        let shapes: Vec<LayerShape> = params.iter().map(|(_, t)| LayerShape::of(t.shape())).collect();
        let mut compressors = Vec::with_capacity(cfg.workers);
        for _ in 0..cfg.workers {
            let per_layer = shapes
                .iter()
                .enumerate()
                .map(|(l, s)| cfg.compressor.build(s, derive_seed(cfg.seed, l as u64, tag::COMPRESSOR)))
                .collect::<Result<Vec<_>>>()?;
            compressors.push(per_layer);
        }
        let group = if cfg.loopback { WorkerGroup::loopback(cfg.workers)? } else { WorkerGroup::new(cfg.workers)? };
        let plan = BatchPlan::new(task.split.train.len(), cfg.workers, cfg.batch_size, cfg.seed)?;
        Ok(Self {
            task,
            label: cfg.compressor.label(),
            cfg,
            params,
            shapes,
            compressors,
            group,
            plan,
            step: 0,
            tracing: false,
            compute: Duration::ZERO,
        })
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn ledger(&self) -> &Ledger {
        self.group.ledger()
    }

    /// Compute time so far, collectives excluded.
    pub fn compute_time(&self) -> Duration {
        self.compute
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step as usize;
        let train = &self.task.split.train;
        let batches = (0..self.cfg.workers)
            .map(|w| train.subset(&self.plan.batch(step, w)))
            .collect::<Result<Vec<_>>>()?;
        let params = &self.params;
        let task = self.task;
        let results: Vec<(f64, NamedTensors)> =
            batches.par_iter().map(|b| local_gradient(task, params, b)).collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / self.cfg.workers as f64;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Numerical(format!("training loss {loss} at step {step}")));
        }

        let mut comm = Duration::ZERO;
        let mut traces = Vec::new();
        let mut updates = Vec::with_capacity(self.shapes.len());
        for (l, shape) in self.shapes.iter().enumerate() {
            let grads = results
                .iter()
                .map(|(_, g)| reshape_to_matrix(g.tensor(l)).map(|(m, _)| m))
                .collect::<Result<Vec<_>>>()?;
            let before: Vec<Option<Matrix>> = if self.tracing {
                self.compressors.iter().map(|c| c[l].error().cloned()).collect()
            } else {
                Vec::new()
            };
            let mut layer_comps: Vec<Box<dyn LayerCompressor>> =
                self.compressors.iter_mut().map(|c| std::mem::replace(&mut c[l], placeholder())).collect();
            let outcome =
                exchange_layer(&mut self.group, self.step, self.params.name(l), &self.label, &mut layer_comps, &grads);
            for (c, back) in self.compressors.iter_mut().zip(layer_comps) {
                c[l] = back;
            }
            let (outputs, spent) = outcome?;
            comm += spent;
            if self.tracing {
                for (w, (out, g)) in outputs.iter().zip(grads).enumerate() {
                    traces.push(LayerTrace {
                        worker: w,
                        layer: l,
                        grad: g,
                        error_before: before[w].clone(),
                        transmitted: out.transmitted.clone(),
                        error_after: self.compressors[w][l].error().cloned(),
                    });
                }
            }
            let update = outputs.into_iter().next().expect("at least one worker").update;
            updates.push(shape.restore(update)?);
        }

        let lr = self.cfg.lr;
        for (l, u) in updates.iter().enumerate() {
            for (p, g) in self.params.tensor_mut(l).data_mut().iter_mut().zip(u.data()) {
                *p -= lr * g;
            }
        }
        if !self.params.is_finite() {
            return Err(Error::Numerical(format!("parameters became non-finite at step {step}")));
        }
        self.compute += started.elapsed().saturating_sub(comm);
        self.step += 1;
        Ok(StepRecord { step: step as u64, loss, traces })
    }
}

/// Stand-in left in a compressor slot while the real one is lent out.
fn placeholder() -> Box<dyn LayerCompressor> {
    Box::new(crate::compress::IdentityCompressor::new((1, 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub distance_to_optimum: Option<f64>,
    pub payload_bits: u64,
    pub metadata_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

/// Deterministic summary of a run. Wall-clock time and the ledger are kept
/// out of the serialized form; see [`TrainingReport::save`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub task: String,
    pub compressor: String,
    pub method: String,
    pub workers: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochMetrics>,
    pub diverged: Option<Divergence>,
    pub final_params: Vec<(String, Vec<f64>)>,
    #[serde(skip)]
    pub compute_seconds: Vec<f64>,
    #[serde(skip)]
    pub ledger: Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub compute_seconds_per_epoch: Vec<f64>,
}

impl TrainingReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.distance_to_optimum)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_metrics_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.epochs {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `report.json`, `metrics.csv`, `ledger.csv` and `timing.json`
    /// (the only non-reproducible file) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        self.write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?)?;
        self.ledger.save_csv(&dir.join("ledger.csv"))?;
        let timing = Timing { compute_seconds_per_epoch: self.compute_seconds.clone() };
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
        Ok(())
    }
}

/// Trains for `cfg.epochs`. A numerical blow-up ends the run early and is
/// recorded in `diverged`; configuration problems are returned as errors.
pub fn train(task: &Task, cfg: &TrainConfig) -> Result<TrainingReport> {
    let mut trainer = Trainer::new(task, cfg.clone())?;
    let spe = trainer.plan().steps_per_epoch();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut compute_seconds = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let (mut payload_seen, mut meta_seen) = (0u64, 0u64);
    'outer: for epoch in 0..cfg.epochs {
        let before = trainer.compute_time();
        let mut loss_sum = 0.0;
        for _ in 0..spe {
            match trainer.step() {
                Ok(r) => loss_sum += r.loss,
                Err(Error::Numerical(reason)) => {
                    diverged = Some(Divergence { step: trainer.steps_done(), reason });
                    compute_seconds.push((trainer.compute_time() - before).as_secs_f64());
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        compute_seconds.push((trainer.compute_time() - before).as_secs_f64());
        let eval = match evaluate(task, trainer.params()) {
            Ok(e) => e,
            Err(Error::Numerical(reason)) => {
                diverged = Some(Divergence { step: trainer.steps_done(), reason });
                break;
            }
            Err(e) => return Err(e),
        };
        let (payload, meta) = (trainer.ledger().total_payload_bits(), trainer.ledger().total_metadata_bits());
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / spe as f64,
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
            distance_to_optimum: task.distance_to_optimum(trainer.params()),
            payload_bits: payload - payload_seen,
            metadata_bits: meta - meta_seen,
        });
        payload_seen = payload;
        meta_seen = meta;
    }
    Ok(TrainingReport {
        task: task.name.clone(),
        compressor: cfg.compressor.label(),
        method: cfg.compressor.method_name().into(),
        workers: cfg.workers,
        seed: cfg.seed,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        steps_per_epoch: spe,
        epochs,
        diverged,
        final_params: trainer.params().iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect(),
        compute_seconds,
        ledger: trainer.group.take_ledger(),
    })
}
