//! On-disk snapshot store: one directory per simulated scenario.
//!
//! The layout is deliberately boring so that any language can read it:
//!
//! * `meta.json` — scenario parameters, grid, solver configuration,
//!   recorded times, and the shapes of every binary file.
//! * `c_t<h>.bin`, `p_t<h>.bin` — nodal concentration / total pressure at
//!   recording time `<h>` hours, raw little-endian `f64` in row-major node
//!   order (x fastest, matching [`Grid::node_index`]).
//! * `v_t<h>.bin` — Darcy velocity at every quadrature point, `[n_quad, 2]`
//!   row-major (vx, vy per point, global quadrature order).
//! * `kfield.bin` — equivalent permeability, `[n_quad, 3]` row-major
//!   (kxx, kyy, kxy per point).
//!
//! `<h>` is the recording time in hours, printed without trailing zeros
//! (`0`, `4`, `0.5`). Writing the same simulation twice produces
//! byte-identical directories — nothing here depends on wall-clock time or
//! iteration order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scenario::{PermeabilityField, RevSpec, ScenarioParams};
use crate::simulator::{Snapshot, SolverConfig, TimeSeries};

/// Shapes of the binary files, recorded for self-description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinShapes {
    /// Concentration files: `[n_nodes]`.
    pub c: Vec<usize>,
    /// Pressure files: `[n_nodes]`.
    pub p: Vec<usize>,
    /// Velocity files: `[n_quad, 2]`.
    pub v: Vec<usize>,
    /// Permeability file: `[n_quad, 3]`.
    pub kfield: Vec<usize>,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    /// The simulated scenario.
    pub scenario: ScenarioParams,
    /// Discretization the fields live on.
    pub grid: Grid,
    /// Permeability upscaling window.
    pub rev: RevSpec,
    /// Solver settings the run used.
    pub config: SolverConfig,
    /// Recording times (hours), oldest first.
    pub times_h: Vec<f64>,
    /// Shapes of the `.bin` files.
    pub shapes: BinShapes,
}

/// A scenario read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredScenario {
    /// Parsed `meta.json`.
    pub meta: StoreMeta,
    /// Recorded states, oldest first (same shape as the simulator output).
    pub snapshots: Vec<Snapshot>,
    /// Equivalent permeability at every quadrature point.
    pub k_field: PermeabilityField,
}

/// Time label used in snapshot file names: hours without trailing zeros.
fn hour_label(t_h: f64) -> String {
    if (t_h - t_h.round()).abs() < 1e-9 {
        format!("{}", t_h.round() as i64)
    } else {
        format!("{t_h}")
    }
}

/// Path of one snapshot file, e.g. `c_t4.bin`.
fn bin_path(dir: &Path, prefix: &str, t_h: f64) -> PathBuf {
    dir.join(format!("{prefix}_t{}.bin", hour_label(t_h)))
}

/// Write `values` as raw little-endian f64.
fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read exactly `expected` little-endian f64 values.
fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {} ({} f64 values)",
            path.display(),
            bytes.len(),
            expected * 8,
            expected
        )));
    }
    Ok(bytes.chunks_exact(8).map(|ch| f64::from_le_bytes(ch.try_into().unwrap())).collect())
}

/// Write one simulated scenario into `dir` (created if missing).
///
/// Existing files of the same names are overwritten. The snapshots must
/// match the grid's node and quadrature counts, and `k_field` must cover
/// every quadrature point.
pub fn write_scenario(
    dir: &Path,
    series: &TimeSeries,
    grid: &Grid,
    rev: &RevSpec,
    config: &SolverConfig,
    k_field: &PermeabilityField,
) -> Result<()> {
    let n_nodes = grid.n_nodes();
    let n_quad = grid.n_quad();
    for s in &series.snapshots {
        if s.c.len() != n_nodes || s.p.len() != n_nodes || s.v.len() != n_quad {
            return Err(Error::Shape(format!(
                "snapshot at t = {} h has shapes c:{} p:{} v:{}, grid wants {n_nodes}/{n_nodes}/{n_quad}",
                s.t_h,
                s.c.len(),
                s.p.len(),
                s.v.len()
            )));
        }
    }
    if k_field.len() != n_quad {
        return Err(Error::Shape(format!(
            "permeability covers {} points, grid has {n_quad} quadrature points",
            k_field.len()
        )));
    }

    fs::create_dir_all(dir)?;
    let meta = StoreMeta {
        scenario: series.scenario,
        grid: grid.clone(),
        rev: rev.clone(),
        config: config.clone(),
        times_h: series.snapshots.iter().map(|s| s.t_h).collect(),
        shapes: BinShapes {
            c: vec![n_nodes],
            p: vec![n_nodes],
            v: vec![n_quad, 2],
            kfield: vec![n_quad, 3],
        },
    };
    let mut meta_text = serde_json::to_string_pretty(&meta)?;
    meta_text.push('\n');
    fs::write(dir.join("meta.json"), meta_text)?;

    for s in &series.snapshots {
        write_f64s(&bin_path(dir, "c", s.t_h), s.c.iter().copied())?;
        write_f64s(&bin_path(dir, "p", s.t_h), s.p.iter().copied())?;
        write_f64s(&bin_path(dir, "v", s.t_h), s.v.iter().flat_map(|v| [v[0], v[1]]))?;
    }
    write_f64s(
        &dir.join("kfield.bin"),
        (0..n_quad).flat_map(|i| [k_field.kxx[i], k_field.kyy[i], k_field.kxy[i]]),
    )?;
    Ok(())
}

/// Read a scenario directory written by [`write_scenario`].
///
/// Shape or size mismatches between `meta.json` and the binary files are
/// reported as [`Error::Format`] naming the offending file.
pub fn read_scenario(dir: &Path) -> Result<StoredScenario> {
    let meta_path = dir.join("meta.json");
    let meta: StoreMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let n_nodes = meta.grid.n_nodes();
    let n_quad = meta.grid.n_quad();
    if meta.shapes.c != [n_nodes]
        || meta.shapes.p != [n_nodes]
        || meta.shapes.v != [n_quad, 2]
        || meta.shapes.kfield != [n_quad, 3]
    {
        return Err(Error::Format(format!(
            "{}: recorded shapes {:?} do not match the recorded grid ({n_nodes} nodes, {n_quad} quadrature points)",
            meta_path.display(),
            meta.shapes
        )));
    }

    let mut snapshots = Vec::with_capacity(meta.times_h.len());
    for &t_h in &meta.times_h {
        let c = read_f64s(&bin_path(dir, "c", t_h), n_nodes)?;
        let p = read_f64s(&bin_path(dir, "p", t_h), n_nodes)?;
        let flat = read_f64s(&bin_path(dir, "v", t_h), n_quad * 2)?;
        let v = flat.chunks_exact(2).map(|ch| [ch[0], ch[1]]).collect();
        snapshots.push(Snapshot { t_h, c, p, v });
    }
    let flat = read_f64s(&dir.join("kfield.bin"), n_quad * 3)?;
    let mut k_field = PermeabilityField {
        kxx: Vec::with_capacity(n_quad),
        kyy: Vec::with_capacity(n_quad),
        kxy: Vec::with_capacity(n_quad),
    };
    for ch in flat.chunks_exact(3) {
        k_field.kxx.push(ch[0]);
        k_field.kyy.push(ch[1]);
        k_field.kxy.push(ch[2]);
    }
    Ok(StoredScenario { meta, snapshots, k_field })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::DeterministicParams;
    use crate::scenario::{equivalent_permeability, sample_fractures, sample_scenario};
    use crate::simulator::run_simulation;

    /// Short desk-scale run plus its permeability field.
    fn small_run() -> (Grid, TimeSeries, PermeabilityField, RevSpec, SolverConfig) {
        let grid = Grid::desk_scale();
        let params = DeterministicParams::default();
        let scenario = sample_scenario(99, 2);
        let rev = RevSpec::default();
        let config = SolverConfig { t_end: 14_400.0, ..Default::default() };
        let series = run_simulation(&scenario, &grid, &params, &rev, &config).unwrap();
        let fractures = sample_fractures(&scenario, &grid);
        let k = equivalent_permeability(&fractures, &grid, &rev, params.k_r).unwrap();
        (grid, series, k, rev, config)
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let (grid, series, k, rev, config) = small_run();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario_0002");
        write_scenario(&path, &series, &grid, &rev, &config, &k).unwrap();

        let back = read_scenario(&path).unwrap();
        assert_eq!(back.meta.scenario, series.scenario);
        assert_eq!(back.meta.grid, grid);
        assert_eq!(back.meta.config, config);
        assert_eq!(back.meta.times_h, vec![0.0, 4.0]);
        assert_eq!(back.snapshots, series.snapshots);
        assert_eq!(back.k_field, k);
    }

    #[test]
    fn files_follow_the_documented_names() {
        let (grid, series, k, rev, config) = small_run();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s");
        write_scenario(&path, &series, &grid, &rev, &config, &k).unwrap();
        for name in ["meta.json", "c_t0.bin", "c_t4.bin", "p_t0.bin", "p_t4.bin", "v_t0.bin",
            "v_t4.bin", "kfield.bin"]
        {
            assert!(path.join(name).is_file(), "{name} missing");
        }
        // Written twice, the bytes are identical (no timestamps anywhere).
        let first = fs::read(path.join("meta.json")).unwrap();
        write_scenario(&path, &series, &grid, &rev, &config, &k).unwrap();
        assert_eq!(first, fs::read(path.join("meta.json")).unwrap());
    }

    #[test]
    fn fractional_hours_get_plain_decimal_labels() {
        assert_eq!(hour_label(0.0), "0");
        assert_eq!(hour_label(4.0), "4");
        assert_eq!(hour_label(36.0), "36");
        assert_eq!(hour_label(0.5), "0.5");
        assert_eq!(hour_label(1.25), "1.25");
    }

    #[test]
    fn truncated_file_is_reported_by_name() {
        let (grid, series, k, rev, config) = small_run();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s");
        write_scenario(&path, &series, &grid, &rev, &config, &k).unwrap();
        let victim = path.join("p_t4.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 8]).unwrap();
        let err = read_scenario(&path).unwrap_err().to_string();
        assert!(err.contains("p_t4.bin"), "unhelpful error: {err}");
    }

    #[test]
    fn shape_and_input_mismatches_are_refused() {
        let (grid, mut series, k, rev, config) = small_run();
        let dir = tempfile::tempdir().unwrap();

        // Truncated snapshot refuses to write.
        series.snapshots[0].c.pop();
        assert!(write_scenario(&dir.path().join("x"), &series, &grid, &rev, &config, &k).is_err());
        series.snapshots[0].c.push(0.0);

        // Wrong-size permeability refuses to write.
        let short = PermeabilityField::uniform_isotropic(grid.n_quad() - 1, 1e-11);
        assert!(
            write_scenario(&dir.path().join("y"), &series, &grid, &rev, &config, &short).is_err()
        );

        // meta.json that contradicts its own binaries is caught on read.
        let path = dir.path().join("z");
        write_scenario(&path, &series, &grid, &rev, &config, &k).unwrap();
        let meta_path = path.join("meta.json");
        let doctored = fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"t_end\": 14400.0", "\"t_end\": 28800.0");
        fs::write(&meta_path, doctored).unwrap();
        // Doctoring the config is legal (it does not describe the files)...
        assert!(read_scenario(&path).is_ok());
        // ...but doctoring a shape is not.
        let broken = fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"kfield\": [", "\"kfield\": [7, ");
        fs::write(&meta_path, broken).unwrap();
        assert!(read_scenario(&path).is_err());
    }
}
