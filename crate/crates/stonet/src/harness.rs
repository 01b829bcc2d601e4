//! Training, architecture sweeps, and rollout evaluation.
//!
//! Three entry points, mirroring the experiment pipeline:
//!
//! - [`train`] fits an operator network to a record dataset with Adam on
//!   the MSE of *normalized* rate targets, over seeded shuffled
//!   mini-batches. It records the per-epoch mean loss and writes
//!   checkpoints (every `checkpoint_every` epochs plus one at the end).
//! - [`sweep`] trains every configuration of a small hyperparameter grid
//!   for a fixed budget and tabulates the final-window training loss,
//!   sorted by parameter count. Individual failures are recorded in the
//!   table; the sweep keeps going.
//! - [`evaluate`] rolls a trained model forward from each test
//!   scenario's initial state and aggregates error statistics against
//!   the recorded snapshots: per-snapshot histograms and
//!   mean-error-vs-time curves, for both the concentration and its
//!   rate.
//!
//! Metric definitions (also documented in the CSV headers):
//!
//! - Absolute error is `|ĉ − c|` at a node, straightforwardly.
//! - Relative concentration error divides by the per-snapshot max true
//!   concentration, floored at 0.1, so near-empty early snapshots do
//!   not explode the statistic and values stay comparable across time.
//! - Relative rate error divides by the per-transition max true rate
//!   magnitude, floored at 1e-3/h (rates live around 0.01–0.1/h).
//! - The initial snapshot is the rollout seed, not a prediction, so
//!   histograms and time series cover the predicted snapshots only.
//!
//! Everything is deterministic: weight init draws from the stream
//! `[seed, "init"]`, the epoch-`e` shuffle from `[seed, "shuffle", e]`,
//! and evaluation does not mutate anything, so repeated runs are
//! bit-identical.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape};
use crate::dataset::{concentration_rate, node_features, Dataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::operator::{
    normalize_features, rollout, Architecture, OperatorConfig, OperatorModel, OptimizerMeta,
    Rollout, save_checkpoint,
};
use crate::rng::{tag, StreamRng};
use crate::store::StoredScenario;

/// Floor of the relative-rate denominator (1/h).
pub const RATE_REL_FLOOR: f64 = 1e-3;

/// Floor of the relative-concentration denominator.
pub const C_REL_FLOOR: f64 = 0.1;

/// Learning-rate schedule over the epoch axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// The same rate every epoch.
    Constant {
        /// Learning rate.
        lr: f64,
    },
    /// Linear interpolation from `lr` (first epoch) to `lr_end` (last).
    Linear {
        /// Learning rate of epoch 0.
        lr: f64,
        /// Learning rate of the final epoch.
        lr_end: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant { lr: 1e-3 }
    }
}

impl LrSchedule {
    /// Rate used for `epoch` (0-based) of an `epochs`-epoch run.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Linear { lr, lr_end } => {
                if epochs <= 1 {
                    lr
                } else {
                    let f = epoch as f64 / (epochs - 1) as f64;
                    lr + (lr_end - lr) * f
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (lr, lr_end) = match *self {
            LrSchedule::Constant { lr } => (lr, lr),
            LrSchedule::Linear { lr, lr_end } => (lr, lr_end),
        };
        if !(lr.is_finite() && lr_end.is_finite()) || lr < 0.0 || lr_end < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative, got {lr} → {lr_end}"
            )));
        }
        Ok(())
    }
}

/// Training-run settings.
///
/// The default is the desk-scale run: width-50 operator, 2,000 epochs,
/// batches of 256, constant 1e-3 learning rate. `final_window` controls
/// the loss summary window; 20 matches the architecture-comparison
/// protocol, 100 the hyperparameter study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Passes over the training split.
    pub epochs: usize,
    /// Records per optimizer step (the last batch of an epoch may be
    /// smaller).
    pub batch_size: usize,
    /// Learning-rate schedule.
    pub schedule: LrSchedule,
    /// Seed of the init and shuffle streams.
    pub seed: u64,
    /// Dataset directory; used by the CLI to locate the records
    /// (the library call takes the loaded dataset directly).
    pub dataset: String,
    /// Network architecture to train.
    pub operator: OperatorConfig,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Epochs in the final-loss window.
    pub final_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 256,
            schedule: LrSchedule::default(),
            seed: 0,
            dataset: "dataset".into(),
            operator: OperatorConfig { width: 50, ..OperatorConfig::default() },
            checkpoint_every: 500,
            final_window: 100,
        }
    }
}

impl TrainConfig {
    /// Check invariants; called by [`train`].
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.final_window == 0 {
            return Err(Error::Config("final-loss window must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.operator.validate()
    }
}

/// What [`train`] hands back.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// The fitted network.
    pub model: OperatorModel,
    /// Mean loss per epoch (MSE on normalized rate targets).
    pub loss_history: Vec<f64>,
    /// Mean of the last `final_window` entries of `loss_history`.
    pub final_window_loss: f64,
    /// Completed optimizer steps.
    pub steps: u64,
}

/// Mean of the last `window` entries (or all of them, if fewer).
pub fn final_window_mean(history: &[f64], window: usize) -> f64 {
    let w = window.min(history.len()).max(1);
    let tail = &history[history.len() - w..];
    tail.iter().sum::<f64>() / w as f64
}

/// Seeded Fisher–Yates permutation of `0..n`.
fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if n < 2 {
        return order;
    }
    let mut rng = StreamRng::from_parts(&[seed, tag("shuffle"), epoch as u64]);
    let last = n - 1;
    for k in 0..last {
        let j = k + (rng.uniform() * (n - k) as f64) as usize;
        order.swap(k, j.min(last));
    }
    order
}

/// Fit an operator network to the training split of `dataset`.
///
/// Minimizes the MSE between the network output and the *normalized*
/// rate targets with Adam over shuffled mini-batches. When `out_dir`
/// is given, checkpoints land in `out_dir/epoch_{N:05}/` every
/// `checkpoint_every` epochs, the final state in `out_dir/final/`,
/// and the loss history in `out_dir/loss.csv`.
///
/// A non-finite loss aborts immediately, naming the epoch and batch;
/// the model is left at its state before the poisoned step.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    config.validate()?;
    let records = dataset.train();
    if records.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let n_u = config.operator.n_u;
    if records[0].u.len() != n_u {
        return Err(Error::Config(format!(
            "operator expects {n_u} branch features, dataset records carry {}",
            records[0].u.len()
        )));
    }
    if config.operator.n_x != 3 {
        return Err(Error::Config(format!(
            "records query (x, y, t), so n_x must be 3, got {}",
            config.operator.n_x
        )));
    }

    // Normalize features and targets once, up front.
    let n = records.len();
    let mut u = Array2::zeros((n, n_u));
    let mut x = Array2::zeros((n, 3));
    let mut target = Array2::zeros((n, 1));
    for (i, r) in records.iter().enumerate() {
        for (j, v) in r.u.iter().enumerate() {
            u[(i, j)] = *v;
        }
        for (j, v) in r.x.iter().enumerate() {
            x[(i, j)] = *v;
        }
        target[(i, 0)] = dataset.stats.normalize_target(r.target);
    }
    normalize_features(&dataset.stats, &mut u, &mut x)?;

    let mut rng = StreamRng::from_parts(&[config.seed, tag("init")]);
    let mut model = OperatorModel::new(&config.operator, &mut rng)?;
    let adam_config = AdamConfig { lr: config.schedule.lr_at(0, config.epochs), ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_config, &model.parameters());

    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        adam.config.lr = config.schedule.lr_at(epoch, config.epochs);
        let order = shuffled_indices(n, config.seed, epoch);
        let mut epoch_sse = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let bu = u.select(Axis(0), chunk);
            let bx = x.select(Axis(0), chunk);
            let bt = target.select(Axis(0), chunk);

            let mut tape = Tape::new();
            let staged = model.stage(&mut tape);
            let u_leaf = tape.leaf(bu);
            let x_leaf = tape.leaf(bx);
            let pred = model.forward_on_tape(&mut tape, &staged, u_leaf, x_leaf)?;
            let t_leaf = tape.leaf(bt);
            let loss = tape.mse(pred, t_leaf)?;
            let loss_val = tape.value(loss)[[0, 0]];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}, batch {batch}"
                )));
            }
            tape.backward(loss)?;
            let grads = staged.grads(&tape);
            let mut params = model.parameters_mut();
            adam.step(&mut params, &grads).map_err(|e| {
                Error::Numeric(format!("optimizer step failed at epoch {epoch}, batch {batch}: {e}"))
            })?;
            epoch_sse += loss_val * chunk.len() as f64;
        }
        loss_history.push(epoch_sse / n as f64);

        if let Some(dir) = out_dir {
            let due = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
            if due && epoch + 1 != config.epochs {
                let meta = optimizer_meta(&adam);
                save_checkpoint(&dir.join(format!("epoch_{:05}", epoch + 1)), &model, &dataset.stats, Some(meta))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final"), &model, &dataset.stats, Some(optimizer_meta(&adam)))?;
        let mut csv = String::from("# mean training loss per epoch (MSE on normalized rate targets)\nepoch,loss\n");
        for (e, l) in loss_history.iter().enumerate() {
            csv.push_str(&format!("{e},{l:.12e}\n"));
        }
        fs::write(dir.join("loss.csv"), csv)?;
    }

    let final_window_loss = final_window_mean(&loss_history, config.final_window);
    Ok(TrainResult { model, loss_history, final_window_loss, steps: adam.step })
}

fn optimizer_meta(adam: &AdamState) -> OptimizerMeta {
    OptimizerMeta { kind: "adam".into(), config: adam.config, steps: adam.step }
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep
// ---------------------------------------------------------------------------

/// Grid of configurations for [`sweep`].
///
/// Axes that an architecture does not have collapse before
/// enumeration — `root` is meaningless for the plain dot-product
/// network and `blocks` only exists for the stream architecture — so
/// the grid never trains the same network twice under different
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Architectures to cover.
    pub arches: Vec<Architecture>,
    /// Layer widths (also the embedding dimension).
    pub widths: Vec<usize>,
    /// Branch/trunk depths.
    pub depths: Vec<usize>,
    /// Root depths.
    pub roots: Vec<usize>,
    /// Stream block counts.
    pub blocks: Vec<usize>,
    /// Training budget per entry.
    pub epochs: usize,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Seed shared by every entry's training run.
    pub seed: u64,
    /// Final-loss window.
    pub final_window: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            arches: vec![Architecture::Stonet, Architecture::Endeeponet],
            widths: vec![50, 100],
            depths: vec![4, 8, 12],
            roots: vec![4, 8, 12],
            blocks: vec![4, 8],
            epochs: 500,
            batch_size: 256,
            seed: 0,
            final_window: 20,
        }
    }
}

impl SweepSpec {
    /// Enumerate the distinct configurations, in grid order.
    pub fn entries(&self, n_u: usize) -> Result<Vec<OperatorConfig>> {
        if self.arches.is_empty()
            || self.widths.is_empty()
            || self.depths.is_empty()
            || self.roots.is_empty()
            || self.blocks.is_empty()
        {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for &arch in &self.arches {
            for &width in &self.widths {
                for &depth in &self.depths {
                    for &root in &self.roots {
                        for &blocks in &self.blocks {
                            // Collapse axes the architecture does not have.
                            let root = if arch == Architecture::Deeponet { 1 } else { root };
                            let blocks = if arch == Architecture::Stonet { blocks } else { 1 };
                            let config = OperatorConfig {
                                arch,
                                width,
                                branch_depth: depth,
                                trunk_depth: depth,
                                root_depth: root,
                                blocks,
                                n_u,
                                n_x: 3,
                                ..OperatorConfig::default()
                            };
                            config.validate()?;
                            if seen.insert(config_hash(&config)?) {
                                entries.push(config);
                            }
                        }
                    }
                }
            }
        }
        Ok(entries)
    }
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Architecture of this entry.
    pub arch: Architecture,
    /// Width (embedding dimension).
    pub width: usize,
    /// Branch/trunk depth.
    pub depth: usize,
    /// Root depth (1 where the architecture has no root).
    pub root: usize,
    /// Stream blocks (1 where the architecture has none).
    pub blocks: usize,
    /// FNV-1a hash of the canonical architecture JSON, as 16 hex digits.
    pub config_hash: String,
    /// Trainable parameter count.
    pub n_params: usize,
    /// Mean training loss over the final window; absent if the run
    /// failed.
    pub final_window_loss: Option<f64>,
    /// Failure message of this entry, if any.
    pub error: Option<String>,
}

/// FNV-1a hash of the configuration's canonical JSON.
pub fn config_hash(config: &OperatorConfig) -> Result<u64> {
    let text = serde_json::to_string(config)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

/// Train every grid entry and tabulate the results, sorted by
/// parameter count (ties broken by the config hash).
///
/// `jobs` caps the worker threads; each entry trains with the same
/// seed and is internally deterministic, and rows are keyed by config
/// hash, so the table does not depend on scheduling. A failed entry
/// contributes a row with its error message; the sweep continues.
pub fn sweep(dataset: &Dataset, spec: &SweepSpec, jobs: usize) -> Result<Vec<SweepRow>> {
    if spec.epochs == 0 || spec.batch_size == 0 || spec.final_window == 0 {
        return Err(Error::Config("sweep budget fields must be at least 1".into()));
    }
    let n_u = dataset.manifest.config.n_u();
    let entries = spec.entries(n_u)?;

    let run_entry = |config: &OperatorConfig| -> SweepRow {
        let hash = config_hash(config).expect("architecture configs serialize");
        let train_config = TrainConfig {
            epochs: spec.epochs,
            batch_size: spec.batch_size,
            schedule: LrSchedule::default(),
            seed: spec.seed,
            dataset: String::new(),
            operator: config.clone(),
            checkpoint_every: 0,
            final_window: spec.final_window,
        };
        let (loss, error) = match train(dataset, &train_config, None) {
            Ok(result) => (Some(result.final_window_loss), None),
            Err(e) => (None, Some(e.to_string())),
        };
        SweepRow {
            arch: config.arch,
            width: config.width,
            depth: config.branch_depth,
            root: config.root_depth,
            blocks: config.blocks,
            config_hash: format!("{hash:016x}"),
            n_params: config.param_count(),
            final_window_loss: loss,
            error,
        }
    };

    let mut rows: Vec<SweepRow> = if jobs <= 1 {
        entries.iter().map(run_entry).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<SweepRow>>> =
            entries.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(entries.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= entries.len() {
                        break;
                    }
                    let row = run_entry(&entries[i]);
                    *slots[i].lock().expect("sweep slot lock") = Some(row);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("sweep slot lock").expect("worker filled slot"))
            .collect()
    };

    rows.sort_by(|a, b| a.n_params.cmp(&b.n_params).then_with(|| a.config_hash.cmp(&b.config_hash)));
    Ok(rows)
}

/// Render the sweep table as CSV (sorted rows in, sorted CSV out).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str("# architecture sweep, one row per configuration, sorted by parameter count\n");
    out.push_str("# final_window_loss: mean training loss (MSE on normalized rate targets) over the last configured epochs\n");
    out.push_str("# root applies to architectures with a root network, blocks to the stream architecture; both are 1 where unused\n");
    out.push_str("arch,width,depth,root,blocks,config_hash,n_params,final_window_loss,error\n");
    for r in rows {
        let loss = r.final_window_loss.map(|l| format!("{l:.12e}")).unwrap_or_default();
        let error = match &r.error {
            Some(e) => format!("\"{}\"", e.replace('"', "\"\"")),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{loss},{error}\n",
            arch_label(r.arch),
            r.width,
            r.depth,
            r.root,
            r.blocks,
            r.config_hash,
            r.n_params
        ));
    }
    out
}

fn arch_label(arch: Architecture) -> &'static str {
    match arch {
        Architecture::Deeponet => "deeponet",
        Architecture::Endeeponet => "endeeponet",
        Architecture::Stonet => "stonet",
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Histogram over `log10(error)`, 50 bins spanning 1e-10..1.
///
/// Values below the span (including exact zeros) land in `underflow`,
/// values at or above 1 — and non-finite ones — in `overflow`, so the
/// total mass always equals the number of recorded samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    /// `log10` of the left edge of the first bin.
    pub log10_lo: f64,
    /// `log10` of the right edge of the last bin.
    pub log10_hi: f64,
    /// Per-bin sample counts.
    pub counts: Vec<u64>,
    /// Samples below the first edge (including zero error).
    pub underflow: u64,
    /// Samples at or above the last edge, and non-finite ones.
    pub overflow: u64,
}

impl Default for ErrorHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl ErrorHistogram {
    /// Empty histogram with the standard span.
    pub fn new() -> Self {
        ErrorHistogram { log10_lo: -10.0, log10_hi: 0.0, counts: vec![0; 50], underflow: 0, overflow: 0 }
    }

    /// Count one error magnitude.
    pub fn record(&mut self, value: f64) {
        if !value.is_finite() {
            self.overflow += 1;
            return;
        }
        if value < 10f64.powf(self.log10_lo) {
            self.underflow += 1;
            return;
        }
        let span = self.log10_hi - self.log10_lo;
        let f = (value.log10() - self.log10_lo) / span;
        let idx = (f * self.counts.len() as f64).floor();
        if idx >= self.counts.len() as f64 {
            self.overflow += 1;
        } else {
            self.counts[idx as usize] += 1;
        }
    }

    /// Total recorded samples, bins plus both tails.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }
}

/// Rollout error statistics against recorded snapshots.
///
/// All per-snapshot vectors are aligned with `times_h`, which lists
/// the *predicted* snapshot times — the initial snapshot seeds the
/// rollout and is excluded. Histograms aggregate over scenarios and
/// nodes; means divide by `n_scenarios × n_nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Predicted snapshot times (hours).
    pub times_h: Vec<f64>,
    /// Scenarios evaluated.
    pub n_scenarios: usize,
    /// Nodes per scenario.
    pub n_nodes: usize,
    /// Concentration samples: scenarios × predicted snapshots × nodes.
    pub c_samples: u64,
    /// Rate samples (same count; transitions align with snapshots).
    pub rate_samples: u64,
    /// Absolute concentration error per snapshot.
    pub abs_c: Vec<ErrorHistogram>,
    /// Relative concentration error per snapshot (denominator:
    /// per-snapshot max true concentration, floored at 0.1).
    pub rel_c: Vec<ErrorHistogram>,
    /// Absolute rate error per transition (1/h).
    pub abs_rate: Vec<ErrorHistogram>,
    /// Relative rate error per transition (denominator: per-transition
    /// max true rate magnitude, floored at 1e-3/h).
    pub rel_rate: Vec<ErrorHistogram>,
    /// Mean absolute concentration error vs time.
    pub mean_abs_c: Vec<f64>,
    /// Mean relative concentration error vs time.
    pub mean_rel_c: Vec<f64>,
    /// Mean absolute rate error vs time.
    pub mean_abs_rate: Vec<f64>,
    /// Mean relative rate error vs time.
    pub mean_rel_rate: Vec<f64>,
    /// Training-loss summary carried over from the producing run, when
    /// known (evaluation itself does not set it).
    pub final_window_loss: Option<f64>,
}

/// Predicted concentration trajectory for one scenario, including the
/// initial state at index 0 (`c.len()` matches the snapshot count).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPrediction {
    /// Nodal concentration per snapshot time.
    pub c: Vec<Vec<f64>>,
}

impl ScenarioPrediction {
    /// Wrap a rollout's trajectory.
    pub fn from_rollout(roll: &Rollout) -> Self {
        ScenarioPrediction { c: roll.c.clone() }
    }
}

/// Branch-feature matrix for a stored scenario, matching what record
/// building feeds the network: permeability + boundary drive, plus the
/// initial snapshot's velocity when the model takes 6 features.
pub fn scenario_features(n_u: usize, scenario: &StoredScenario) -> Result<Array2<f64>> {
    let source = match n_u {
        4 => None,
        6 => Some(scenario.snapshots.first().ok_or_else(|| {
            Error::Config(format!("scenario {} has no snapshots", scenario.meta.scenario.index))
        })?),
        other => {
            return Err(Error::Config(format!(
                "stored scenarios provide 4 or 6 branch features, model wants {other}"
            )))
        }
    };
    node_features(&scenario.meta.grid, &scenario.meta.scenario, &scenario.k_field, source)
}

/// Roll the model forward from a stored scenario's initial state over
/// its recorded snapshot times (exact f64 path).
pub fn predict_scenario(
    model: &OperatorModel,
    stats: &NormalizationStats,
    scenario: &StoredScenario,
) -> Result<Rollout> {
    check_scenario(scenario)?;
    let u_nodes = scenario_features(model.config.n_u, scenario)?;
    rollout(
        model,
        stats,
        &scenario.meta.grid,
        &u_nodes,
        &scenario.snapshots[0].c,
        &scenario.meta.times_h,
    )
}

fn check_scenario(scenario: &StoredScenario) -> Result<()> {
    let n_times = scenario.meta.times_h.len();
    if scenario.snapshots.len() != n_times {
        return Err(Error::Format(format!(
            "scenario {} lists {} recording times but carries {} snapshots",
            scenario.meta.scenario.index,
            n_times,
            scenario.snapshots.len()
        )));
    }
    if n_times < 2 {
        return Err(Error::Config(format!(
            "scenario {} has {} snapshots; evaluation needs the initial state plus at least one more",
            scenario.meta.scenario.index, n_times
        )));
    }
    Ok(())
}

/// Evaluate a trained model on held-out scenarios: per scenario, roll
/// forward from the initial snapshot, then aggregate concentration and
/// rate errors against the recorded series. Does not mutate the model;
/// repeated calls are bit-identical.
pub fn evaluate(
    model: &OperatorModel,
    stats: &NormalizationStats,
    scenarios: &[StoredScenario],
) -> Result<Metrics> {
    let mut predictions = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        let roll = predict_scenario(model, stats, scenario)?;
        predictions.push(ScenarioPrediction { c: roll.c });
    }
    metrics_from_predictions(&predictions, scenarios)
}

/// Score externally produced trajectories against recorded snapshots.
///
/// This is [`evaluate`] with the rollout factored out, so oracle
/// trajectories (for instance, integrated true rates) can be scored by
/// the same arithmetic.
pub fn metrics_from_predictions(
    predictions: &[ScenarioPrediction],
    scenarios: &[StoredScenario],
) -> Result<Metrics> {
    if scenarios.is_empty() {
        return Err(Error::Config("evaluation needs at least one scenario".into()));
    }
    if predictions.len() != scenarios.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} scenarios",
            predictions.len(),
            scenarios.len()
        )));
    }
    for s in scenarios {
        check_scenario(s)?;
        if s.meta.times_h != scenarios[0].meta.times_h {
            return Err(Error::Config(format!(
                "scenario {} records different times than scenario {}; evaluate them separately",
                s.meta.scenario.index, scenarios[0].meta.scenario.index
            )));
        }
        if s.meta.grid != scenarios[0].meta.grid {
            return Err(Error::Config(format!(
                "scenario {} lives on a different grid than scenario {}",
                s.meta.scenario.index, scenarios[0].meta.scenario.index
            )));
        }
    }

    let times = &scenarios[0].meta.times_h;
    let steps = times.len() - 1;
    let n_nodes = scenarios[0].snapshots[0].c.len();

    let mut abs_c = vec![ErrorHistogram::new(); steps];
    let mut rel_c = vec![ErrorHistogram::new(); steps];
    let mut abs_rate = vec![ErrorHistogram::new(); steps];
    let mut rel_rate = vec![ErrorHistogram::new(); steps];
    let mut sum_abs_c = vec![0.0; steps];
    let mut sum_rel_c = vec![0.0; steps];
    let mut sum_abs_rate = vec![0.0; steps];
    let mut sum_rel_rate = vec![0.0; steps];

    for (pred, scenario) in predictions.iter().zip(scenarios) {
        if pred.c.len() != times.len() {
            return Err(Error::Shape(format!(
                "prediction for scenario {} covers {} snapshots, the record has {}",
                scenario.meta.scenario.index,
                pred.c.len(),
                times.len()
            )));
        }
        let true_rates = concentration_rate(&scenario.snapshots)?;
        for k in 0..steps {
            let truth = &scenario.snapshots[k + 1].c;
            let guess = &pred.c[k + 1];
            if guess.len() != n_nodes || truth.len() != n_nodes {
                return Err(Error::Shape(format!(
                    "snapshot {} of scenario {} covers {} predicted / {} true nodes, expected {n_nodes}",
                    k + 1,
                    scenario.meta.scenario.index,
                    guess.len(),
                    truth.len()
                )));
            }
            let dt_h = times[k + 1] - times[k];
            let c_den = truth.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(C_REL_FLOOR);
            let rate_den = true_rates[k]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(RATE_REL_FLOOR);
            for node in 0..n_nodes {
                let err = (guess[node] - truth[node]).abs();
                abs_c[k].record(err);
                rel_c[k].record(err / c_den);
                sum_abs_c[k] += err;
                sum_rel_c[k] += err / c_den;

                let pred_rate = (pred.c[k + 1][node] - pred.c[k][node]) / dt_h;
                let rate_err = (pred_rate - true_rates[k][node]).abs();
                abs_rate[k].record(rate_err);
                rel_rate[k].record(rate_err / rate_den);
                sum_abs_rate[k] += rate_err;
                sum_rel_rate[k] += rate_err / rate_den;
            }
        }
    }

    let samples_per_step = (scenarios.len() * n_nodes) as f64;
    let scale = |sums: Vec<f64>| sums.into_iter().map(|s| s / samples_per_step).collect();
    let total = (scenarios.len() * steps * n_nodes) as u64;
    Ok(Metrics {
        times_h: times[1..].to_vec(),
        n_scenarios: scenarios.len(),
        n_nodes,
        c_samples: total,
        rate_samples: total,
        abs_c,
        rel_c,
        abs_rate,
        rel_rate,
        mean_abs_c: scale(sum_abs_c),
        mean_rel_c: scale(sum_rel_c),
        mean_abs_rate: scale(sum_abs_rate),
        mean_rel_rate: scale(sum_rel_rate),
        final_window_loss: None,
    })
}

/// Render the per-time error means as CSV.
pub fn metrics_csv(metrics: &Metrics) -> String {
    let mut out = String::new();
    out.push_str("# rollout error vs time, averaged over scenarios and nodes\n");
    out.push_str("# rel c denominator: per-snapshot max true concentration, floored at 0.1\n");
    out.push_str("# rel rate denominator: per-transition max true rate magnitude, floored at 1e-3 (1/h)\n");
    out.push_str("t_h,mean_abs_c,mean_rel_c,mean_abs_rate,mean_rel_rate\n");
    for (k, t) in metrics.times_h.iter().enumerate() {
        out.push_str(&format!(
            "{t},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            metrics.mean_abs_c[k], metrics.mean_rel_c[k], metrics.mean_abs_rate[k], metrics.mean_rel_rate[k]
        ));
    }
    out
}

/// Write `metrics.json`, `metrics.csv`, and a gnuplot script that
/// plots the error-vs-time curves from the CSV.
pub fn write_metrics(dir: &Path, metrics: &Metrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    fs::write(dir.join("metrics.json"), text)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(metrics))?;

    let mut gp = fs::File::create(dir.join("plot_metrics.gp"))?;
    writeln!(gp, "# gnuplot script; run `gnuplot plot_metrics.gp` in this directory")?;
    writeln!(gp, "set datafile separator comma")?;
    writeln!(gp, "set terminal pngcairo size 960,640")?;
    writeln!(gp, "set output 'error_vs_time.png'")?;
    writeln!(gp, "set logscale y")?;
    writeln!(gp, "set xlabel 'time (h)'")?;
    writeln!(gp, "set ylabel 'mean error'")?;
    writeln!(gp, "set key left top")?;
    writeln!(gp, "plot 'metrics.csv' using 1:2 with linespoints title 'abs c', \\")?;
    writeln!(gp, "     '' using 1:3 with linespoints title 'rel c', \\")?;
    writeln!(gp, "     '' using 1:4 with linespoints title 'abs rate (1/h)', \\")?;
    writeln!(gp, "     '' using 1:5 with linespoints title 'rel rate'")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetConfig, DatasetManifest, TrainingRecord};
    use crate::grid::Grid;
    use crate::operator::{integrate_rates, load_checkpoint};
    use crate::scenario::{sample_scenario, PermeabilityField, RevSpec};
    use crate::simulator::{Snapshot, SolverConfig};
    use crate::store::{BinShapes, StoreMeta};

    /// Records with a smooth learnable signal in physical-looking units.
    fn tiny_records(n: usize, seed: u64) -> Vec<TrainingRecord> {
        let mut rng = StreamRng::from_parts(&[seed, tag("tiny records")]);
        (0..n)
            .map(|_| {
                let kxx = rng.uniform_in(1e-13, 5e-13);
                let kyy = rng.uniform_in(1e-13, 5e-13);
                let kxy = rng.uniform_in(-2e-14, 2e-14);
                let x = rng.uniform_in(0.0, 0.7);
                let y = rng.uniform_in(0.0, 0.5);
                let t = rng.uniform_in(4.0, 36.0);
                let c_now = rng.uniform();
                let target = 0.04 * (kxx / 5e-13) * (1.0 - x / 0.7) + 0.01 * (t / 36.0) * (y / 0.5);
                TrainingRecord { u: vec![kxx, kyy, kxy, 4000.0], x: [x, y, t], c_now, target }
            })
            .collect()
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let records = tiny_records(n, seed);
        let config = DatasetConfig::default();
        let stats = NormalizationStats::from_records(&records, config.stat_fields())
            .expect("stats of synthetic records");
        let manifest = DatasetManifest {
            train_scenarios: vec![0],
            test_scenarios: vec![],
            n_train_records: records.len(),
            n_test_records: 0,
            record_stride: config.n_u() + 5,
            record_fields: config.feature_names(),
            stats: "stats.json".into(),
            config,
        };
        Dataset { manifest, stats, records }
    }

    fn tiny_operator(arch: Architecture) -> OperatorConfig {
        OperatorConfig {
            arch,
            width: 8,
            branch_depth: 2,
            trunk_depth: 2,
            root_depth: 2,
            blocks: 2,
            ..OperatorConfig::default()
        }
    }

    fn quick_train_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed,
            operator: tiny_operator(Architecture::Stonet),
            checkpoint_every: 0,
            final_window: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_the_loss_on_a_learnable_signal() {
        let dataset = tiny_dataset(200, 11);
        let config = quick_train_config(40, 3);
        let result = train(&dataset, &config, None).expect("training runs");

        assert_eq!(result.loss_history.len(), 40);
        assert!(result.loss_history.iter().all(|l| l.is_finite()));
        let final_mean = final_window_mean(&result.loss_history, 5);
        assert!(
            final_mean < result.loss_history[0],
            "final window {final_mean:.3e} should beat the first epoch {:.3e}",
            result.loss_history[0]
        );
        assert!((result.final_window_loss - final_mean).abs() <= 1e-15);
        // 200 records in batches of 32 → 7 steps per epoch.
        assert_eq!(result.steps, 40 * 7);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let dataset = tiny_dataset(120, 4);
        let config = quick_train_config(6, 42);
        let a = train(&dataset, &config, None).expect("first run");
        let b = train(&dataset, &config, None).expect("second run");

        assert_eq!(a.loss_history, b.loss_history);
        for (pa, pb) in a.model.parameters().iter().zip(b.model.parameters().iter()) {
            assert_eq!(pa, pb, "identical seeds must give bitwise identical weights");
        }

        let other = train(&dataset, &quick_train_config(6, 43), None).expect("third run");
        assert_ne!(a.loss_history, other.loss_history, "a different seed should train differently");
    }

    #[test]
    fn zero_learning_rate_freezes_the_model() {
        let dataset = tiny_dataset(100, 9);
        let mut config = quick_train_config(4, 1);
        config.schedule = LrSchedule::Constant { lr: 0.0 };

        let reference = {
            let mut rng = StreamRng::from_parts(&[config.seed, tag("init")]);
            OperatorModel::new(&config.operator, &mut rng).expect("reference init")
        };
        let result = train(&dataset, &config, None).expect("zero-lr training runs");

        for (pa, pb) in result.model.parameters().iter().zip(reference.parameters().iter()) {
            assert_eq!(pa, pb, "lr = 0 must leave every parameter untouched");
        }
        let first = result.loss_history[0];
        for l in &result.loss_history {
            // Shuffling regroups the batches, so the mean is only
            // reassociated — identical up to rounding.
            assert!((l - first).abs() <= 1e-12 * first.abs(), "loss should stay constant at lr 0");
        }
    }

    #[test]
    fn non_finite_loss_aborts_naming_the_batch() {
        let mut dataset = tiny_dataset(64, 2);
        // Stats were measured on the clean records; poisoning a record
        // afterwards leaves them finite, so the NaN reaches the loss.
        dataset.records[70 % 64].target = f64::NAN;
        let mut config = quick_train_config(2, 0);
        config.batch_size = 64;

        let err = train(&dataset, &config, None).expect_err("NaN target must abort");
        let text = err.to_string();
        assert!(text.contains("epoch 0"), "message should name the epoch: {text}");
        assert!(text.contains("batch 0"), "message should name the batch: {text}");
    }

    #[test]
    fn mismatched_feature_width_is_rejected_up_front() {
        let dataset = tiny_dataset(32, 5);
        let mut config = quick_train_config(1, 0);
        config.operator.n_u = 6;
        let err = train(&dataset, &config, None).expect_err("4-feature records, 6-feature model");
        assert!(err.to_string().contains("branch features"), "unexpected message: {err}");
    }

    #[test]
    fn checkpoints_and_loss_history_land_on_disk() {
        let dir = tempfile::tempdir().expect("tempdir");
        let dataset = tiny_dataset(96, 7);
        let mut config = quick_train_config(5, 21);
        config.checkpoint_every = 2;

        let result = train(&dataset, &config, Some(dir.path())).expect("training runs");

        assert!(dir.path().join("epoch_00002").is_dir());
        assert!(dir.path().join("epoch_00004").is_dir());
        let (loaded, stats, optimizer) =
            load_checkpoint(&dir.path().join("final")).expect("final checkpoint loads");
        assert_eq!(stats, dataset.stats);
        for (pa, pb) in loaded.parameters().iter().zip(result.model.parameters().iter()) {
            assert_eq!(pa, pb, "final checkpoint must hold the returned weights");
        }
        let meta = optimizer.expect("trained checkpoints carry optimizer metadata");
        assert_eq!(meta.kind, "adam");
        assert_eq!(meta.steps, result.steps);

        let loss_csv = fs::read_to_string(dir.path().join("loss.csv")).expect("loss.csv");
        let data_lines = loss_csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).count();
        assert_eq!(data_lines, 5);
    }

    #[test]
    fn schedules_interpolate_and_validate() {
        let lin = LrSchedule::Linear { lr: 1e-3, lr_end: 1e-5 };
        assert_eq!(lin.lr_at(0, 11), 1e-3);
        assert!((lin.lr_at(10, 11) - 1e-5).abs() < 1e-18);
        assert!((lin.lr_at(5, 11) - (1e-3 + 1e-5) / 2.0).abs() < 1e-9);
        assert_eq!(LrSchedule::default().lr_at(7, 10), 1e-3);

        let mut config = quick_train_config(1, 0);
        config.schedule = LrSchedule::Constant { lr: -1.0 };
        assert!(config.validate().is_err(), "negative learning rate must be rejected");
    }

    #[test]
    fn sweep_grid_enumerates_each_architecture_once() {
        // Unused axes collapse: the stream architecture spans all four
        // axes, the root-fusion one ignores blocks, the dot-product
        // one ignores root and blocks.
        let spec = SweepSpec {
            arches: vec![Architecture::Stonet, Architecture::Endeeponet, Architecture::Deeponet],
            widths: vec![8, 16],
            depths: vec![2, 3],
            roots: vec![2, 3],
            blocks: vec![1, 2],
            ..SweepSpec::default()
        };
        let entries = spec.entries(4).expect("grid enumerates");
        let stonet = entries.iter().filter(|c| c.arch == Architecture::Stonet).count();
        let endeep = entries.iter().filter(|c| c.arch == Architecture::Endeeponet).count();
        let deep = entries.iter().filter(|c| c.arch == Architecture::Deeponet).count();
        assert_eq!(stonet, 16, "2 widths × 2 depths × 2 roots × 2 blocks");
        assert_eq!(endeep, 8, "blocks axis collapses");
        assert_eq!(deep, 2, "root and blocks axes collapse");

        // The default grid covers both remaining architectures fully.
        let default_entries = SweepSpec::default().entries(4).expect("default grid");
        assert_eq!(default_entries.len(), 2 * 3 * 3 * 2 + 2 * 3 * 3);

        // Parameter counts grow strictly with width, everything else fixed.
        for &(depth, root, blocks) in &[(2usize, 2usize, 1usize), (3, 3, 2)] {
            let count = |width| {
                OperatorConfig {
                    arch: Architecture::Stonet,
                    width,
                    branch_depth: depth,
                    trunk_depth: depth,
                    root_depth: root,
                    blocks,
                    ..OperatorConfig::default()
                }
                .param_count()
            };
            assert!(count(16) > count(8));
            assert!(count(50) > count(16));
        }
    }

    #[test]
    fn sweep_tabulates_sorted_rows_and_survives_failures() {
        let dataset = tiny_dataset(64, 13);
        let spec = SweepSpec {
            arches: vec![Architecture::Stonet, Architecture::Endeeponet],
            widths: vec![8],
            depths: vec![2],
            roots: vec![2, 3],
            blocks: vec![1, 2],
            epochs: 2,
            batch_size: 32,
            seed: 1,
            final_window: 2,
        };
        let rows = sweep(&dataset, &spec, 1).expect("sweep runs");
        assert_eq!(rows.len(), 4 + 2, "4 stream entries, 2 root-fusion entries");
        assert!(rows.windows(2).all(|w| w[0].n_params <= w[1].n_params), "sorted by size");
        assert!(rows.iter().all(|r| r.error.is_none() && r.final_window_loss.is_some()));
        assert!(rows.iter().all(|r| r.config_hash.len() == 16));
        let distinct: HashSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
        assert_eq!(distinct.len(), rows.len(), "config hashes are unique");

        // Same spec, two workers: scheduling must not change the table.
        let parallel = sweep(&dataset, &spec, 2).expect("parallel sweep runs");
        assert_eq!(rows, parallel);

        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + rows.len());
        assert!(csv.contains("arch,width,depth,root,blocks,config_hash,n_params"));

        // A dataset/architecture mismatch is recorded, not fatal.
        let mut bad = spec.clone();
        bad.widths = vec![0];
        let rows = sweep(&dataset, &bad, 1).expect("sweep enumerates before validating entries");
        assert!(rows.is_empty() || rows.iter().all(|r| r.error.is_some()), "width 0 cannot train");
    }

    // ------------------------------------------------------------------
    // Evaluation
    // ------------------------------------------------------------------

    /// Synthetic stored scenario on a small grid: concentration grows
    /// linearly in time with a gentle spatial profile, `c(x, t) =
    /// (t/40h) · (0.8 + 0.2·(1 − x/Lx))`, so rates are constant in
    /// time and nonzero everywhere.
    fn synthetic_scenario(index: u64) -> StoredScenario {
        let grid = Grid::new(4, 3, 0.7 / 4.0, 0.5 / 3.0).expect("grid");
        let times_h: Vec<f64> = (0..10).map(|k| 4.0 * k as f64).collect();
        let n = grid.n_nodes();
        let shape: Vec<f64> = (0..n)
            .map(|node| {
                let (x, _) = grid.node_pos(node);
                0.8 + 0.2 * (1.0 - x / 0.7)
            })
            .collect();
        let snapshots: Vec<Snapshot> = times_h
            .iter()
            .map(|&t| Snapshot {
                t_h: t,
                c: shape.iter().map(|s| s * t / 40.0).collect(),
                p: vec![0.0; n],
                v: vec![[0.0, 0.0]; grid.n_quad()],
            })
            .collect();
        let k_field = PermeabilityField::uniform_isotropic(grid.n_quad(), 1e-13);
        StoredScenario {
            meta: StoreMeta {
                scenario: sample_scenario(777, index),
                grid,
                rev: RevSpec::default(),
                config: SolverConfig::default(),
                times_h,
                shapes: BinShapes {
                    c: vec![n],
                    p: vec![n],
                    v: vec![4 * 3, 2],
                    kfield: vec![4 * 3, 3],
                },
            },
            snapshots,
            k_field,
        }
    }

    /// Prediction built by scaling the true rates and re-integrating.
    fn rate_scaled_prediction(scenario: &StoredScenario, factor: f64) -> ScenarioPrediction {
        let rates: Vec<Vec<f64>> = concentration_rate(&scenario.snapshots)
            .expect("true rates")
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * factor).collect())
            .collect();
        let dt_h = scenario.meta.times_h[1] - scenario.meta.times_h[0];
        let mut c = vec![scenario.snapshots[0].c.clone()];
        c.extend(integrate_rates(&scenario.snapshots[0].c, &rates, dt_h).expect("integration"));
        ScenarioPrediction { c }
    }

    #[test]
    fn oracle_rates_score_as_numerically_zero_error() {
        let scenarios: Vec<StoredScenario> = (0..2).map(synthetic_scenario).collect();
        let predictions: Vec<ScenarioPrediction> =
            scenarios.iter().map(|s| rate_scaled_prediction(s, 1.0)).collect();
        let metrics = metrics_from_predictions(&predictions, &scenarios).expect("metrics");

        for k in 0..metrics.times_h.len() {
            assert!(metrics.mean_abs_c[k] < 1e-10, "abs c at step {k}: {}", metrics.mean_abs_c[k]);
            assert!(metrics.mean_rel_c[k] < 1e-10);
            assert!(metrics.mean_abs_rate[k] < 1e-10);
            assert!(metrics.mean_rel_rate[k] < 1e-10);
        }
    }

    #[test]
    fn one_percent_rate_noise_lands_near_one_percent_relative_error() {
        let scenarios: Vec<StoredScenario> = (0..2).map(synthetic_scenario).collect();
        let predictions: Vec<ScenarioPrediction> =
            scenarios.iter().map(|s| rate_scaled_prediction(s, 1.01)).collect();
        let metrics = metrics_from_predictions(&predictions, &scenarios).expect("metrics");

        for k in 0..metrics.times_h.len() {
            let rel = metrics.mean_rel_c[k];
            assert!((0.005..=0.02).contains(&rel), "rel c at step {k}: {rel}");
            let rel_rate = metrics.mean_rel_rate[k];
            assert!((0.005..=0.02).contains(&rel_rate), "rel rate at step {k}: {rel_rate}");
        }
    }

    #[test]
    fn histogram_mass_accounts_for_every_sample() {
        let scenarios: Vec<StoredScenario> = (0..3).map(synthetic_scenario).collect();
        let predictions: Vec<ScenarioPrediction> =
            scenarios.iter().map(|s| rate_scaled_prediction(s, 1.05)).collect();
        let metrics = metrics_from_predictions(&predictions, &scenarios).expect("metrics");

        let n_nodes = scenarios[0].snapshots[0].c.len();
        let expected = (3 * (10 - 1) * n_nodes) as u64;
        assert_eq!(metrics.c_samples, expected);
        let mass = |hists: &[ErrorHistogram]| hists.iter().map(ErrorHistogram::total).sum::<u64>();
        assert_eq!(mass(&metrics.abs_c), expected);
        assert_eq!(mass(&metrics.rel_c), expected);
        assert_eq!(mass(&metrics.abs_rate), expected);
        assert_eq!(mass(&metrics.rel_rate), expected);
        // Per-snapshot histograms each hold scenarios × nodes samples.
        for h in &metrics.abs_c {
            assert_eq!(h.total(), (3 * n_nodes) as u64);
        }
    }

    #[test]
    fn histogram_bins_catch_tails_and_zeros() {
        let mut h = ErrorHistogram::new();
        h.record(0.0); // below the span
        h.record(1e-11); // below the span
        h.record(1e-5); // inside
        h.record(0.999); // last bin
        h.record(1.0); // at the top edge
        h.record(25.0); // above
        h.record(f64::NAN); // non-finite
        assert_eq!(h.underflow, 2);
        assert_eq!(h.overflow, 3);
        assert_eq!(h.counts.iter().sum::<u64>(), 2);
        assert_eq!(h.total(), 7);
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let scenarios: Vec<StoredScenario> = (0..2).map(synthetic_scenario).collect();
        let stats = identity_stats(4);
        let mut rng = StreamRng::from_parts(&[5, tag("eval model")]);
        let model =
            OperatorModel::new(&tiny_operator(Architecture::Stonet), &mut rng).expect("model");
        let before: Vec<Array2<f64>> = model.parameters().iter().map(|p| (*p).clone()).collect();

        let a = evaluate(&model, &stats, &scenarios).expect("first evaluation");
        let b = evaluate(&model, &stats, &scenarios).expect("second evaluation");
        assert_eq!(
            serde_json::to_string(&a).expect("serialize"),
            serde_json::to_string(&b).expect("serialize"),
            "evaluation must be bit-identical on repeat"
        );
        for (p, q) in model.parameters().iter().zip(&before) {
            assert_eq!(*p, q, "evaluation must not touch the model");
        }
        assert_eq!(a.times_h, &scenarios[0].meta.times_h[1..]);
    }

    #[test]
    fn evaluation_refuses_broken_scenarios() {
        let stats = identity_stats(4);
        let mut rng = StreamRng::from_parts(&[6, tag("eval model")]);
        let model =
            OperatorModel::new(&tiny_operator(Architecture::Endeeponet), &mut rng).expect("model");

        // Missing snapshots: the meta lists more times than are present.
        let mut broken = synthetic_scenario(0);
        broken.snapshots.truncate(4);
        let err = evaluate(&model, &stats, &[broken]).expect_err("must refuse");
        assert!(err.to_string().contains("snapshots"), "unexpected message: {err}");

        // A model wanting a feature count scenarios cannot provide.
        let mut five = tiny_operator(Architecture::Endeeponet);
        five.n_u = 5;
        let mut rng = StreamRng::from_parts(&[7, tag("eval model")]);
        let odd = OperatorModel::new(&five, &mut rng).expect("model");
        let err = evaluate(&odd, &identity_stats(5), &[synthetic_scenario(0)])
            .expect_err("5 branch features do not exist");
        assert!(err.to_string().contains("branch features"), "unexpected message: {err}");
    }

    #[test]
    fn metrics_files_round_trip_and_document_the_denominators() {
        let dir = tempfile::tempdir().expect("tempdir");
        let scenarios: Vec<StoredScenario> = (0..2).map(synthetic_scenario).collect();
        let predictions: Vec<ScenarioPrediction> =
            scenarios.iter().map(|s| rate_scaled_prediction(s, 1.01)).collect();
        let metrics = metrics_from_predictions(&predictions, &scenarios).expect("metrics");

        write_metrics(dir.path(), &metrics).expect("write");
        let text = fs::read_to_string(dir.path().join("metrics.json")).expect("metrics.json");
        let back: Metrics = serde_json::from_str(&text).expect("parse");
        assert_eq!(back, metrics);

        let csv = fs::read_to_string(dir.path().join("metrics.csv")).expect("metrics.csv");
        assert!(csv.contains("floored at 0.1"), "c denominator documented");
        assert!(csv.contains("floored at 1e-3"), "rate denominator documented");
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + metrics.times_h.len());

        let gp = fs::read_to_string(dir.path().join("plot_metrics.gp")).expect("script");
        assert!(gp.contains("metrics.csv"));
    }

    fn identity_stats(n_u: usize) -> NormalizationStats {
        let mut fields: Vec<String> = (0..n_u).map(|i| format!("u{i}")).collect();
        fields.extend(["x".into(), "y".into(), "t_h".into(), "target".into()]);
        let n = fields.len();
        NormalizationStats { fields, mean: vec![0.0; n], std: vec![1.0; n] }
    }
}
