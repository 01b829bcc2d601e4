//! From simulation snapshots to training records.
//!
//! The surrogate learns the concentration *rate*: given the equivalent
//! permeability at a query location, the boundary drive, and a space-time
//! query point, predict `ċ` in 1/h. This module turns recorded snapshot
//! series into flat record lists:
//!
//! 1. backward-difference rates between consecutive snapshots,
//! 2. node subsampling per (scenario, snapshot) — most points drawn with
//!    probability proportional to concentration (plus a small floor so
//!    empty early snapshots still sample), the rest uniformly from the
//!    remainder,
//! 3. feature assembly: `u = (kxx, kyy, kxy, Δp)` (optionally the local
//!    Darcy velocity), `x = (x, y, t)` with `t` in hours, the previous
//!    concentration `c_now`, and the rate target,
//! 4. per-feature normalization statistics over the training split, and
//! 5. a boring on-disk format: `manifest.json`, `stats.json`, and
//!    `records.bin` (raw little-endian `f64`, fixed stride documented in
//!    the manifest; features stored in physical units, normalization is
//!    applied by the consumer).
//!
//! Records store times in hours so the targets land around 0.01–0.1/h
//! without any hidden rescaling of the physics.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{tag, StreamRng};
use crate::scenario::{PermeabilityField, ScenarioParams};
use crate::simulator::Snapshot;
use crate::store::StoredScenario;

/// Floor added to the concentration when weighting the dense draw.
pub const SAMPLING_FLOOR: f64 = 1e-3;

/// Guard applied to per-feature standard deviations.
pub const STD_GUARD: f64 = 1e-12;

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    /// Branch features: `kxx, kyy, kxy` (m²) at the query node and the
    /// boundary drive `Δp = p_left − p_right` (Pa); `vx, vy` (m/s)
    /// appended when velocity features are enabled.
    pub u: Vec<f64>,
    /// Trunk query: `x` (m), `y` (m), `t` (h).
    pub x: [f64; 3],
    /// Concentration at the query node one snapshot earlier.
    pub c_now: f64,
    /// Backward-difference rate `ċ` at the query (1/h).
    pub target: f64,
}

/// Build-time settings of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Concentration-weighted picks per (scenario, snapshot).
    pub n_dense: usize,
    /// Uniform picks from the remaining nodes.
    pub n_uniform: usize,
    /// Seed of the per-(scenario, snapshot) sampling streams.
    pub seed: u64,
    /// Append the local Darcy velocity (at the earlier snapshot) to `u`.
    pub with_velocity: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_dense: 1000, n_uniform: 500, seed: 0, with_velocity: false }
    }
}

impl DatasetConfig {
    /// Number of branch features per record.
    pub fn n_u(&self) -> usize {
        if self.with_velocity {
            6
        } else {
            4
        }
    }

    /// Feature names, `u` first, then the query coordinates.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec!["kxx".into(), "kyy".into(), "kxy".into(), "delta_p".into()];
        if self.with_velocity {
            names.push("vx".into());
            names.push("vy".into());
        }
        names.extend(["x".into(), "y".into(), "t_h".into()]);
        names
    }

    /// Names of everything normalization covers: the features followed
    /// by the regression target (training standardizes the rate too, so
    /// prediction must undo it).
    pub fn stat_fields(&self) -> Vec<String> {
        let mut names = self.feature_names();
        names.push("target".into());
        names
    }
}

/// What a dataset was built from, stored as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Build settings.
    pub config: DatasetConfig,
    /// Scenario indices of the training split, ascending.
    pub train_scenarios: Vec<u64>,
    /// Scenario indices of the held-out split, ascending.
    pub test_scenarios: Vec<u64>,
    /// Records belonging to the training split (they come first in
    /// `records.bin`).
    pub n_train_records: usize,
    /// Records belonging to the held-out split.
    pub n_test_records: usize,
    /// Values per record in `records.bin`: `u`, `x`, `c_now`, `target`.
    pub record_stride: usize,
    /// Field names of one record, in storage order.
    pub record_fields: Vec<String>,
    /// File holding the normalization statistics.
    pub stats: String,
}

impl DatasetManifest {
    /// Record count a uniform build produces.
    pub fn expected_records(n_scenarios: usize, n_snapshots: usize, points: usize) -> usize {
        n_scenarios * (n_snapshots - 1) * points
    }
}

/// Per-feature first and second moments of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    /// Feature names, aligned with `mean` and `std`.
    pub fields: Vec<String>,
    /// Per-feature mean.
    pub mean: Vec<f64>,
    /// Per-feature standard deviation, floored at [`STD_GUARD`].
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Measure the `u ++ x ++ target` columns of `records`.
    pub fn from_records(records: &[TrainingRecord], fields: Vec<String>) -> Result<Self> {
        let n = fields.len();
        if records.is_empty() {
            return Err(Error::Config("cannot take statistics of an empty record set".into()));
        }
        // Two passes: the textbook E[x²] − E[x]² form cancels
        // catastrophically and would turn constant features into small
        // nonzero stds instead of hitting the guard.
        let count = records.len() as f64;
        let columns = |r: &TrainingRecord| {
            r.u.iter().chain(r.x.iter()).chain(std::iter::once(&r.target)).copied().collect::<Vec<f64>>()
        };
        let mut mean = vec![0.0f64; n];
        for r in records {
            for (acc, v) in mean.iter_mut().zip(columns(r)) {
                *acc += v;
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0f64; n];
        for r in records {
            for (i, (acc, v)) in var.iter_mut().zip(columns(r)).enumerate() {
                *acc += (v - mean[i]) * (v - mean[i]);
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_GUARD)).collect();
        Ok(NormalizationStats { fields, mean, std })
    }

    /// `(v - mean) / std`, column by column. `values` must hold the
    /// leading columns in `fields` order (features alone, or features
    /// plus target).
    pub fn normalize(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i];
        }
    }

    /// Inverse of [`Self::normalize`].
    pub fn denormalize(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i] + self.mean[i];
        }
    }

    /// Standardize one regression target (the trailing statistics
    /// column).
    pub fn normalize_target(&self, target: f64) -> f64 {
        let i = self.mean.len() - 1;
        (target - self.mean[i]) / self.std[i]
    }

    /// Map one network output back to a physical rate (1/h).
    pub fn denormalize_target(&self, predicted: f64) -> f64 {
        let i = self.mean.len() - 1;
        predicted * self.std[i] + self.mean[i]
    }
}

/// A built dataset: records (training split first) plus its paperwork.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Provenance and layout.
    pub manifest: DatasetManifest,
    /// Training-split feature statistics.
    pub stats: NormalizationStats,
    /// All records, training split first.
    pub records: Vec<TrainingRecord>,
}

impl Dataset {
    /// Records of the training split.
    pub fn train(&self) -> &[TrainingRecord] {
        &self.records[..self.manifest.n_train_records]
    }

    /// Records of the held-out split.
    pub fn test(&self) -> &[TrainingRecord] {
        &self.records[self.manifest.n_train_records..]
    }
}

/// Backward-difference concentration rates between consecutive snapshots.
///
/// Entry `k - 1` of the result is `(c(t_k) − c(t_{k−1})) / (t_k − t_{k−1})`
/// in 1/h, for every `k ≥ 1`. At least two snapshots are required.
pub fn concentration_rate(snapshots: &[Snapshot]) -> Result<Vec<Vec<f64>>> {
    if snapshots.len() < 2 {
        return Err(Error::Config(format!(
            "rates need at least two snapshots, got {}",
            snapshots.len()
        )));
    }
    let mut rates = Vec::with_capacity(snapshots.len() - 1);
    for pair in snapshots.windows(2) {
        let dt_h = pair[1].t_h - pair[0].t_h;
        // Also refuses NaN times.
        if dt_h <= 0.0 || dt_h.is_nan() {
            return Err(Error::Config(format!(
                "snapshot times must increase, got {} h after {} h",
                pair[1].t_h, pair[0].t_h
            )));
        }
        rates.push(
            pair[1].c.iter().zip(&pair[0].c).map(|(a, b)| (a - b) / dt_h).collect::<Vec<f64>>(),
        );
    }
    Ok(rates)
}

/// Pick `n_dense + n_uniform` distinct node indices from one snapshot.
///
/// The dense part is drawn without replacement with probability
/// proportional to `max(c, 0) + SAMPLING_FLOOR` (weighted reservoir keys);
/// the uniform part is drawn without replacement from the remaining
/// nodes. The result is sorted ascending. Identical `rng` streams give
/// identical sets.
pub fn importance_sample(
    c: &[f64],
    n_dense: usize,
    n_uniform: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let n = c.len();
    let want = n_dense + n_uniform;
    if want > n {
        return Err(Error::Config(format!(
            "requested {want} sample points ({n_dense} dense + {n_uniform} uniform) from {n} nodes"
        )));
    }

    // Dense picks: the n_dense largest keys ln(u)/w — the standard
    // exponential-race construction of weighted sampling without
    // replacement. The floor keeps every weight positive, so all-zero
    // early snapshots degenerate to a uniform draw.
    let mut keys: Vec<(f64, usize)> = c
        .iter()
        .enumerate()
        .map(|(i, &ci)| {
            let w = ci.max(0.0) + SAMPLING_FLOOR;
            (rng.uniform().max(f64::MIN_POSITIVE).ln() / w, i)
        })
        .collect();
    keys.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut chosen = vec![false; n];
    for &(_, i) in keys.iter().take(n_dense) {
        chosen[i] = true;
    }

    // Uniform picks: partial Fisher-Yates over the remainder.
    let mut rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    let last = rest.len().saturating_sub(1);
    for k in 0..n_uniform {
        let j = k + (rng.uniform() * (rest.len() - k) as f64) as usize;
        rest.swap(k, j.min(last));
        chosen[rest[k]] = true;
    }

    Ok((0..n).filter(|&i| chosen[i]).collect())
}

/// Interpolate a quadrature-point field to the nodes: each node averages
/// the nearest quadrature value of every element touching it (equal
/// weights — the elements are congruent).
pub fn quad_to_nodes(grid: &Grid, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != grid.n_quad() {
        return Err(Error::Shape(format!(
            "field covers {} points, grid has {} quadrature points",
            values.len(),
            grid.n_quad()
        )));
    }
    let mut out = vec![0.0f64; grid.n_nodes()];
    for iy in 0..=grid.ny {
        for ix in 0..=grid.nx {
            let mut acc = 0.0;
            let mut count = 0usize;
            for ey in iy.saturating_sub(1)..=iy.min(grid.ny - 1) {
                for ex in ix.saturating_sub(1)..=ix.min(grid.nx - 1) {
                    let e = ey * grid.nx + ex;
                    // Local quadrature point on the node's side of the
                    // element: xi index from x-side, eta index from y-side.
                    let qx = usize::from(ix == ex + 1);
                    let qy = usize::from(iy == ey + 1);
                    acc += values[4 * e + 2 * qy + qx];
                    count += 1;
                }
            }
            out[grid.node_index(ix, iy)] = acc / count as f64;
        }
    }
    Ok(out)
}

/// Assemble records for one scenario.
///
/// `samples[k - 1]` lists the node indices drawn for target snapshot `k`
/// (so `samples.len() == snapshots.len() - 1`); each sampled node becomes
/// one record with `x = (node position, t_k)`, `c_now = c(t_{k−1})`, and
/// the backward rate as target. Time zero never produces targets.
pub fn build_records(
    grid: &Grid,
    scenario: &ScenarioParams,
    snapshots: &[Snapshot],
    k_field: &PermeabilityField,
    samples: &[Vec<usize>],
    config: &DatasetConfig,
) -> Result<Vec<TrainingRecord>> {
    let rates = concentration_rate(snapshots)?;
    if samples.len() != rates.len() {
        return Err(Error::Shape(format!(
            "{} sample sets for {} target snapshots",
            samples.len(),
            rates.len()
        )));
    }

    let mut records = Vec::with_capacity(samples.iter().map(Vec::len).sum());
    for (k_prev, (sample, rate)) in samples.iter().zip(&rates).enumerate() {
        let before = &snapshots[k_prev];
        let t_h = snapshots[k_prev + 1].t_h;
        // Velocity features describe the state the transition started
        // from, like c_now.
        let source = config.with_velocity.then_some(before);
        let feats = node_features(grid, scenario, k_field, source)?;
        for &node in sample {
            if node >= grid.n_nodes() {
                return Err(Error::Shape(format!(
                    "sampled node {node} outside the {}-node grid",
                    grid.n_nodes()
                )));
            }
            let (x, y) = grid.node_pos(node);
            records.push(TrainingRecord {
                u: feats.row(node).to_vec(),
                x: [x, y, t_h],
                c_now: before.c[node],
                target: rate[node],
            });
        }
    }
    Ok(records)
}

/// Branch features at every node as one `[n_nodes, n_u]` matrix:
/// `kxx, kyy, kxy` interpolated from the quadrature permeability,
/// the boundary drive `Δp`, and — when `velocity_source` is given —
/// `vx, vy` interpolated from that snapshot's quadrature velocities.
///
/// This is the single assembly point for network inputs: record
/// building samples rows out of it, and rollout feeds it whole.
pub fn node_features(
    grid: &Grid,
    scenario: &ScenarioParams,
    k_field: &PermeabilityField,
    velocity_source: Option<&Snapshot>,
) -> Result<Array2<f64>> {
    if k_field.len() != grid.n_quad() {
        return Err(Error::Shape(format!(
            "permeability covers {} points, grid has {} quadrature points",
            k_field.len(),
            grid.n_quad()
        )));
    }
    let kxx = quad_to_nodes(grid, &k_field.kxx)?;
    let kyy = quad_to_nodes(grid, &k_field.kyy)?;
    let kxy = quad_to_nodes(grid, &k_field.kxy)?;
    let delta_p = scenario.delta_p_pa();
    let (vx, vy) = match velocity_source {
        Some(snap) => {
            let fx: Vec<f64> = snap.v.iter().map(|v| v[0]).collect();
            let fy: Vec<f64> = snap.v.iter().map(|v| v[1]).collect();
            (quad_to_nodes(grid, &fx)?, quad_to_nodes(grid, &fy)?)
        }
        None => (Vec::new(), Vec::new()),
    };

    let n = grid.n_nodes();
    let n_u = if velocity_source.is_some() { 6 } else { 4 };
    let mut out = Array2::zeros((n, n_u));
    for node in 0..n {
        out[(node, 0)] = kxx[node];
        out[(node, 1)] = kyy[node];
        out[(node, 2)] = kxy[node];
        out[(node, 3)] = delta_p;
        if velocity_source.is_some() {
            out[(node, 4)] = vx[node];
            out[(node, 5)] = vy[node];
        }
    }
    Ok(out)
}

/// Build a complete dataset from simulated scenarios.
///
/// Training scenarios come first in the record order; statistics are
/// measured on the training split only. The split must be disjoint by
/// scenario index.
pub fn build_dataset(
    grid: &Grid,
    train: &[StoredScenario],
    test: &[StoredScenario],
    config: &DatasetConfig,
) -> Result<Dataset> {
    let train_ids: Vec<u64> = train.iter().map(|s| s.meta.scenario.index).collect();
    let test_ids: Vec<u64> = test.iter().map(|s| s.meta.scenario.index).collect();
    for id in &test_ids {
        if train_ids.contains(id) {
            return Err(Error::Config(format!(
                "scenario {id} appears in both the training and the held-out split"
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let mut records = Vec::new();
    let mut n_train_records = 0;
    for (split, stored) in [(0u64, train), (1u64, test)] {
        for s in stored {
            let scenario = &s.meta.scenario;
            let mut samples = Vec::with_capacity(s.snapshots.len().saturating_sub(1));
            for k in 1..s.snapshots.len() {
                let mut rng = StreamRng::from_parts(&[
                    config.seed,
                    scenario.index,
                    k as u64,
                    tag("node_sampling"),
                ]);
                samples.push(importance_sample(
                    &s.snapshots[k].c,
                    config.n_dense,
                    config.n_uniform,
                    &mut rng,
                )?);
            }
            let mut built =
                build_records(grid, scenario, &s.snapshots, &s.k_field, &samples, config)?;
            if split == 0 {
                n_train_records += built.len();
            }
            records.append(&mut built);
        }
    }

    let stats =
        NormalizationStats::from_records(&records[..n_train_records], config.stat_fields())?;
    let manifest = DatasetManifest {
        config: config.clone(),
        train_scenarios: train_ids,
        test_scenarios: test_ids,
        n_train_records,
        n_test_records: records.len() - n_train_records,
        record_stride: config.n_u() + 5,
        record_fields: {
            let mut f = config.feature_names();
            f.push("c_now".into());
            f.push("target".into());
            f
        },
        stats: "stats.json".into(),
    };
    Ok(Dataset { manifest, stats, records })
}

/// Persist a dataset as `manifest.json`, `stats.json`, `records.bin`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.records.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    let stride = dataset.manifest.record_stride;
    let n_u = stride - 5;
    for (i, r) in dataset.records.iter().enumerate() {
        if r.u.len() != n_u {
            return Err(Error::Shape(format!(
                "record {i} has {} branch features, manifest stride implies {n_u}",
                r.u.len()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    let mut manifest_text = serde_json::to_string_pretty(&dataset.manifest)?;
    manifest_text.push('\n');
    fs::write(dir.join("manifest.json"), manifest_text)?;
    let mut stats_text = serde_json::to_string_pretty(&dataset.stats)?;
    stats_text.push('\n');
    fs::write(dir.join(&dataset.manifest.stats), stats_text)?;

    let mut out = BufWriter::new(fs::File::create(dir.join("records.bin"))?);
    for r in &dataset.records {
        for v in r.u.iter().chain(r.x.iter()).chain([&r.c_now, &r.target]) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read back a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let stats: NormalizationStats =
        serde_json::from_str(&fs::read_to_string(dir.join(&manifest.stats))?)?;

    let stride = manifest.record_stride;
    if stride < 5 {
        return Err(Error::Format(format!(
            "manifest stride {stride} cannot hold x, c_now, and target"
        )));
    }
    let n_records = manifest.n_train_records + manifest.n_test_records;
    let path = dir.join("records.bin");
    let mut bytes = Vec::new();
    fs::File::open(&path)?.read_to_end(&mut bytes)?;
    let expected = n_records * stride * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} ends at byte {}, expected {expected} ({n_records} records of stride {stride})",
            path.display(),
            bytes.len()
        )));
    }

    let n_u = stride - 5;
    let mut records = Vec::with_capacity(n_records);
    for chunk in bytes.chunks_exact(stride * 8) {
        let vals: Vec<f64> =
            chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        records.push(TrainingRecord {
            u: vals[..n_u].to_vec(),
            x: [vals[n_u], vals[n_u + 1], vals[n_u + 2]],
            c_now: vals[n_u + 3],
            target: vals[n_u + 4],
        });
    }
    Ok(Dataset { manifest, stats, records })
}
