//! Experiment grids: a declarative spec expands into (compressor × seed)
//! cells, each trained (and optionally attacked) into its own directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackModel, AttackRow};
use crate::compress::CompressorSpec;
use crate::error::{Error, Result};
use crate::training::{self, TaskSpec, TrainConfig, TrainingReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub model: AttackModel,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Hidden width of the MLP victim.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_attack_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_tv")]
    pub tv_weight: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
}

fn default_classes() -> usize {
    10
}
fn default_hidden() -> usize {
    64
}
fn default_attack_steps() -> usize {
    AttackConfig::default().steps
}
fn default_step_size() -> f64 {
    AttackConfig::default().step_size
}
fn default_tv() -> f64 {
    AttackConfig::default().tv_weight
}
fn default_restarts() -> usize {
    AttackConfig::default().restarts
}
fn default_side() -> usize {
    8
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            model: AttackModel::Linear,
            classes: default_classes(),
            hidden: default_hidden(),
            steps: default_attack_steps(),
            step_size: default_step_size(),
            tv_weight: default_tv(),
            restarts: default_restarts(),
            height: default_side(),
            width: default_side(),
        }
    }
}

impl AttackSpec {
    pub fn config(&self) -> AttackConfig {
        AttackConfig {
            steps: self.steps,
            step_size: self.step_size,
            tv_weight: self.tv_weight,
            restarts: self.restarts,
            seed: 0,
            height: self.height,
            width: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        if self.classes < 2 || self.hidden == 0 {
            return Err(Error::Config("attack needs >= 2 classes and a positive hidden width".into()));
        }
        if self.model == AttackModel::Mlp
            && (self.height > attack::FD_MAX_SIDE || self.width > attack::FD_MAX_SIDE)
        {
            return Err(Error::Config(format!(
                "the MLP attack is limited to {0}x{0} images",
                attack::FD_MAX_SIDE
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: TaskSpec,
    pub compressors: Vec<CompressorSpec>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub loopback: bool,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

fn default_workers() -> usize {
    1
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_jobs() -> usize {
    1
}

/// Command-line values that replace those from the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub method: Option<String>,
    pub rank: Option<usize>,
    pub bits: Option<u32>,
    pub alpha: Option<f64>,
    pub topk: Option<f64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl ExperimentSpec {
    /// A one-cell quadratic run with the identity compressor.
    pub fn smoke(out: impl Into<PathBuf>) -> Self {
        Self {
            task: TaskSpec::quadratic(16, 12),
            compressors: vec![CompressorSpec::Identity],
            workers: default_workers(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            seeds: default_seeds(),
            out: out.into(),
            jobs: default_jobs(),
            loopback: false,
            attack: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    /// `--method` with its hyper-parameter flags replaces the compressor
    /// list; hyper-parameter flags alone patch every compressor they apply to.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(e) = o.epochs {
            self.epochs = e;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(m) = &o.method {
            let c = match m.as_str() {
                "identity" => CompressorSpec::Identity,
                "topk" => CompressorSpec::topk(o.topk.unwrap_or(0.01)),
                "powersgd" => CompressorSpec::powersgd(o.rank.unwrap_or(1)),
                "lqsgd" => {
                    let b = o.bits.unwrap_or(8);
                    CompressorSpec::LqSgd {
                        rank: o.rank.unwrap_or(1),
                        bits_p: b,
                        bits_q: b,
                        alpha: o.alpha.unwrap_or(1.0),
                        error_feedback: true,
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown method {other:?} (expected identity, topk, powersgd or lqsgd)"
                    )))
                }
            };
            self.compressors = vec![c];
            return Ok(());
        }
        for c in &mut self.compressors {
            match c {
                CompressorSpec::Identity => {}
                CompressorSpec::TopK { k_fraction, .. } => {
                    if let Some(k) = o.topk {
                        *k_fraction = k;
                    }
                }
                CompressorSpec::PowerSgd { rank, .. } => {
                    if let Some(r) = o.rank {
                        *rank = r;
                    }
                }
                CompressorSpec::LqSgd { rank, bits_p, bits_q, alpha, .. } => {
                    if let Some(r) = o.rank {
                        *rank = r;
                    }
                    if let Some(b) = o.bits {
                        *bits_p = b;
                        *bits_q = b;
                    }
                    if let Some(a) = o.alpha {
                        *alpha = a;
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks every cell before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.compressors.is_empty() {
            return Err(Error::Config("the compressor list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("the seed list is empty".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.task.validate()?;
        let mut labels = Vec::new();
        for c in &self.compressors {
            self.train_config(c, self.seeds[0]).validate()?;
            let l = c.label();
            if labels.contains(&l) {
                return Err(Error::Config(format!("compressor {l} is listed twice")));
            }
            labels.push(l);
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("the seed list has duplicates".into()));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self, c: &CompressorSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            workers: self.workers,
            compressor: c.clone(),
            seed,
            loopback: self.loopback,
        }
    }

    /// `(compressor, seed)` in file order.
    pub fn cells(&self) -> Vec<(&CompressorSpec, u64)> {
        self.compressors.iter().flat_map(|c| self.seeds.iter().map(move |&s| (c, s))).collect()
    }

    pub fn cell_dir(&self, c: &CompressorSpec, seed: u64) -> PathBuf {
        self.out.join(c.label()).join(format!("seed-{seed}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub compressor: String,
    pub method: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_accuracy: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_distance: Option<f64>,
    pub payload_bits: u64,
    pub metadata_bits: u64,
    pub diverged: bool,
}

impl SummaryRow {
    fn of(r: &TrainingReport) -> Self {
        let last = r.epochs.last();
        Self {
            compressor: r.compressor.clone(),
            method: r.method.clone(),
            seed: r.seed,
            epochs_run: r.epochs.len(),
            final_accuracy: r.final_accuracy(),
            final_test_loss: last.map(|e| e.test_loss),
            final_distance: r.final_distance(),
            payload_bits: r.epochs.iter().map(|e| e.payload_bits).sum(),
            metadata_bits: r.epochs.iter().map(|e| e.metadata_bits).sum(),
            diverged: r.diverged.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<SummaryRow>,
    pub attacks: Vec<AttackRow>,
}

impl ExperimentOutcome {
    pub fn all_diverged(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.diverged)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} jobs: {e}")))
}

/// Trains every cell (and attacks it, if configured). Writes, under `out`:
/// `spec.json`, `summary.csv`, optionally `attack.csv`, and one directory per
/// cell. Diverged cells are kept as marked rows.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let rows = run_training_grid(spec)?;
    let attacks = match &spec.attack {
        Some(a) => run_attack_grid(spec, a)?,
        None => Vec::new(),
    };
    Ok(ExperimentOutcome { rows, attacks })
}

fn prepare(spec: &ExperimentSpec) -> Result<()> {
    fs::create_dir_all(&spec.out)?;
    fs::write(spec.out.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}

pub fn run_training_grid(spec: &ExperimentSpec) -> Result<Vec<SummaryRow>> {
    spec.validate()?;
    prepare(spec)?;
    let cells = spec.cells();
    let rows = pool(spec.jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(c, seed)| {
                let task = spec.task.build(seed)?;
                let report = training::train(&task, &spec.train_config(c, seed))?;
                report.save(&spec.cell_dir(c, seed))?;
                Ok(SummaryRow::of(&report))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_rows(&spec.out.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// One attack trial per (compressor, seed); reconstructions are saved as PGM
/// next to the original.
pub fn run_attack_grid(spec: &ExperimentSpec, a: &AttackSpec) -> Result<Vec<AttackRow>> {
    spec.validate()?;
    a.validate()?;
    prepare(spec)?;
    let cfg = a.config();
    let cells = spec.cells();
    let rows = pool(spec.jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(c, seed)| {
                let trial = attack::attack_trial(c, a.model, a.classes, a.hidden, &cfg, seed)?;
                let dir = spec.cell_dir(c, seed);
                fs::create_dir_all(&dir)?;
                attack::write_pgm(&dir.join("attack_truth.pgm"), &trial.truth)?;
                attack::write_pgm(&dir.join("attack_reconstruction.pgm"), &trial.result.reconstruction)?;
                Ok(trial.row)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_rows(&spec.out.join("attack.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub compressor: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub payload_mb_per_epoch: f64,
    pub total_mb_per_epoch: f64,
    /// `None` when the report has no `timing.json` beside it.
    pub compute_s_per_epoch: Option<f64>,
    /// Identity payload per epoch over this payload per epoch, when an
    /// identity report is among the inputs.
    pub size_ratio_vs_identity: Option<f64>,
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

pub fn load_report(path: &Path) -> Result<TrainingReport> {
    let path = report_path(path);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{} is not a training report: {e}", path.display())))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One row per report: accuracy, MB per epoch, compute seconds per epoch.
/// Accepts report files or cell directories.
pub fn compare_report(paths: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if paths.is_empty() {
        return Err(Error::Config("compare needs at least one report".into()));
    }
    let mut loaded = Vec::with_capacity(paths.len());
    for p in paths {
        let report = load_report(p)?;
        let timing_path = report_path(p).with_file_name("timing.json");
        let timing = match fs::read_to_string(&timing_path) {
            Ok(t) => Some(
                serde_json::from_str::<training::Timing>(&t)
                    .map_err(|e| Error::Format(format!("{}: {e}", timing_path.display())))?,
            ),
            Err(_) => None,
        };
        loaded.push((report, timing));
    }
    let per_epoch = |r: &TrainingReport| {
        (
            mean(r.epochs.iter().map(|e| e.payload_bits as f64)).unwrap_or(0.0),
            mean(r.epochs.iter().map(|e| (e.payload_bits + e.metadata_bits) as f64)).unwrap_or(0.0),
        )
    };
    let identity = loaded.iter().find(|(r, _)| r.method == "identity").map(|(r, _)| per_epoch(r).0);
    Ok(loaded
        .iter()
        .map(|(r, t)| {
            let (payload, total) = per_epoch(r);
            CompareRow {
                compressor: r.compressor.clone(),
                seed: r.seed,
                accuracy: r.final_accuracy(),
                payload_mb_per_epoch: payload / 8.0 / 1e6,
                total_mb_per_epoch: total / 8.0 / 1e6,
                compute_s_per_epoch: t.as_ref().and_then(|t| mean(t.compute_seconds_per_epoch.iter().copied())),
                size_ratio_vs_identity: identity.filter(|_| payload > 0.0).map(|i| i / payload),
            }
        })
        .collect())
}

pub fn compare_markdown(rows: &[CompareRow]) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut s = String::from(
        "| compressor | seed | accuracy | payload MB/epoch | total MB/epoch | compute s/epoch | size ratio vs identity |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.6} | {:.6} | {} | {} |",
            r.compressor,
            r.seed,
            opt(r.accuracy, 4),
            r.payload_mb_per_epoch,
            r.total_mb_per_epoch,
            opt(r.compute_s_per_epoch, 4),
            opt(r.size_ratio_vs_identity, 2)
        );
    }
    s
}

pub fn compare_csv<W: std::io::Write>(rows: &[CompareRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_grid() {
        let spec = ExperimentSpec::from_toml(
            r#"
            workers = 4
            epochs = 2
            seeds = [1, 2]
            out = "runs/x"
            [task]
            kind = "mlp"
            hidden = [16]
            [task.dataset]
            kind = "blobs"
            train = 200
            test = 50
            [[compressors]]
            method = "identity"
            [[compressors]]
            method = "lqsgd"
            rank = 2
            [attack]
            steps = 10
            "#,
        )
        .unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.cells().len(), 4);
        assert_eq!(spec.cell_dir(&spec.compressors[1], 2), PathBuf::from("runs/x/lqsgd-r2-b8-a1/seed-2"));
        assert_eq!(spec.attack.as_ref().unwrap().steps, 10);
    }

    #[test]
    fn rejects_unknown_keys_and_empty_lists() {
        assert!(ExperimentSpec::from_toml("bogus = 1\ncompressors = []\n[task]\nkind = \"quadratic\"").is_err());
        let mut spec = ExperimentSpec::smoke("x");
        spec.compressors.clear();
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = ExperimentSpec::smoke("x");
        spec.compressors.push(CompressorSpec::Identity);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let mut spec = ExperimentSpec::smoke("x");
        spec.compressors = vec![CompressorSpec::lqsgd(1, 8, 1.0), CompressorSpec::topk(0.1)];
        spec.apply(&Overrides { rank: Some(4), topk: Some(0.2), seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(spec.compressors, vec![CompressorSpec::lqsgd(4, 8, 1.0), CompressorSpec::topk(0.2)]);
        assert_eq!(spec.seeds, vec![9]);
        spec.apply(&Overrides { method: Some("powersgd".into()), rank: Some(2), ..Default::default() }).unwrap();
        assert_eq!(spec.compressors, vec![CompressorSpec::powersgd(2)]);
        assert!(spec.apply(&Overrides { method: Some("sgd".into()), ..Default::default() }).is_err());
    }
}
