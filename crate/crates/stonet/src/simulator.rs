//! Time integration of the coupled flow-transport problem.
//!
//! One simulation advances the brine concentration from `c = 0` everywhere
//! through `t_end` seconds of physical time in fixed implicit increments.
//! Each step applies the sequential (Boussinesq) coupling:
//!
//! 1. density is evaluated from the current concentration,
//! 2. the pressure field and Darcy velocity are re-solved
//!    ([`crate::pressure::solve_pressure`], warm-started from the previous
//!    step), and
//! 3. the concentration takes one backward-Euler transport step
//!    ([`crate::transport::step_transport`]) under that velocity.
//!
//! The density feedback is weak (the brine is 0.4% heavier than fresh
//! water), so one pass per step is accurate; an optional fixed-point
//! (Picard) mode repeats the pressure/transport pair within a step until
//! the new concentration stops moving, which serves as a check on the
//! sequential error more than as a production setting.
//!
//! Snapshots of the state are recorded on a fixed interval (4 h by
//! default, giving times 0, 4, ..., 36 h at the default 36-h horizon).
//! Every snapshot is self-consistent: its pressure and velocity are solved
//! from its own concentration, which costs one extra pressure solve at the
//! final time and nothing anywhere else (the step loop already solves the
//! pressure at every snapshot instant before advancing past it).
//!
//! Runs are bitwise deterministic: the fracture field is drawn from
//! counter-based streams keyed by the scenario, and every loop in the
//! solver chain has a fixed evaluation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::physics::DeterministicParams;
use crate::pressure::{solve_pressure, total_pressure, PressureConfig, PressureSolution};
use crate::scenario::{
    boundary_pressure_profiles, equivalent_permeability, sample_fractures, RevSpec,
    ScenarioParams,
};
use crate::transport::{step_transport, TransportConfig};

/// Settings of one coupled simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Time-step length (s).
    pub dt: f64,
    /// Physical end time (s); must be an integral number of steps.
    pub t_end: f64,
    /// Snapshot recording interval (s); must be an integral number of
    /// steps. Time zero is always recorded.
    pub snapshot_every: f64,
    /// Repeat the pressure/transport pair within each step until the new
    /// concentration moves less than `picard_tol` in max norm.
    pub picard: bool,
    /// Iteration cap of the fixed-point mode.
    pub picard_max_iter: usize,
    /// Convergence tolerance of the fixed-point mode (absolute, on c).
    pub picard_tol: f64,
    /// Pressure-solver settings.
    pub pressure: PressureConfig,
    /// Transport-stage settings.
    pub transport: TransportConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt: 1200.0,
            t_end: 129_600.0,
            snapshot_every: 14_400.0,
            picard: false,
            picard_max_iter: 5,
            picard_tol: 1e-8,
            pressure: PressureConfig::default(),
            transport: TransportConfig::default(),
        }
    }
}

impl SolverConfig {
    /// Validate the settings.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        integral_multiple(self.t_end, self.dt, "t_end")?;
        if !(self.snapshot_every > 0.0 && self.snapshot_every.is_finite()) {
            return Err(Error::Config(format!(
                "snapshot_every must be positive, got {}",
                self.snapshot_every
            )));
        }
        integral_multiple(self.snapshot_every, self.dt, "snapshot_every")?;
        if self.picard && self.picard_max_iter == 0 {
            return Err(Error::Config("picard_max_iter must be at least 1".into()));
        }
        if !(self.picard_tol > 0.0 && self.picard_tol.is_finite()) {
            return Err(Error::Config(format!(
                "picard_tol must be positive, got {}",
                self.picard_tol
            )));
        }
        self.pressure.validate()?;
        self.transport.validate()?;
        Ok(())
    }

    /// Number of time steps (`t_end / dt`).
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Steps between snapshots (`snapshot_every / dt`).
    pub fn snapshot_stride(&self) -> usize {
        (self.snapshot_every / self.dt).round() as usize
    }
}

/// Check that `whole` is an integral multiple of `part` (to rounding).
fn integral_multiple(whole: f64, part: f64, name: &str) -> Result<()> {
    let ratio = whole / part;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
        return Err(Error::Config(format!(
            "{name} = {whole} is not a whole number of dt = {part} steps"
        )));
    }
    Ok(())
}

/// State of the simulation at one recorded instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Recording time (hours).
    pub t_h: f64,
    /// Nodal mass fraction.
    pub c: Vec<f64>,
    /// Nodal total pressure (Pa), solved from this snapshot's `c`.
    pub p: Vec<f64>,
    /// Darcy velocity at every quadrature point (m/s), same solve as `p`.
    pub v: Vec<[f64; 2]>,
}

/// Per-step solver health, kept for every step (not only snapshots).
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// 1-based step index.
    pub step: usize,
    /// Time at the end of the step (s).
    pub t_s: f64,
    /// Pressure CG iterations (last pass when iterating).
    pub pressure_iterations: usize,
    /// Pressure relative residual (last pass when iterating).
    pub pressure_residual: f64,
    /// Transport linear iterations, summed over the solves of the step.
    pub transport_iterations: usize,
    /// Worst transport relative residual of the step.
    pub transport_residual: f64,
    /// Normalized mass-budget defect of the step.
    pub mass_balance_defect: f64,
    /// Extremes of the new concentration.
    pub c_min: f64,
    /// See `c_min`.
    pub c_max: f64,
    /// Pressure/transport passes taken (1 = plain sequential).
    pub picard_iterations: usize,
}

/// Full record of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    /// The scenario that was simulated.
    pub scenario: ScenarioParams,
    /// Recorded states, oldest first.
    pub snapshots: Vec<Snapshot>,
    /// Solver health of every step.
    pub diagnostics: Vec<StepDiagnostics>,
}

impl TimeSeries {
    /// Recording times in hours, oldest first.
    pub fn times_h(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t_h).collect()
    }
}

/// Prefix a step index onto a solver error bubbling out of the step loop.
fn at_step(step: usize, t_s: f64, err: Error) -> Error {
    match err {
        Error::SolverStalled { context, iterations, final_residual, tolerance, history } => {
            Error::SolverStalled {
                context: format!("step {step} (t = {t_s} s), {context}"),
                iterations,
                final_residual,
                tolerance,
                history,
            }
        }
        other => Error::Numeric(format!("step {step} (t = {t_s} s): {other}")),
    }
}

/// Run one coupled simulation of `scenario` on `grid`.
///
/// Draws the fracture field and boundary pressures from the scenario,
/// upscales permeability over `rev` windows, and integrates from `c = 0`
/// through `config.t_end`. Returns the recorded snapshots plus per-step
/// diagnostics; solver failures come back tagged with the failing step.
pub fn run_simulation(
    scenario: &ScenarioParams,
    grid: &Grid,
    params: &DeterministicParams,
    rev: &RevSpec,
    config: &SolverConfig,
) -> Result<TimeSeries> {
    config.validate()?;
    params.validate()?;

    let fractures = sample_fractures(scenario, grid);
    let k_field = equivalent_permeability(&fractures, grid, rev, params.k_r)?;
    let boundary = boundary_pressure_profiles(scenario, params.rho0_g());

    let n_steps = config.n_steps();
    let stride = config.snapshot_stride();
    let mut snapshots = Vec::with_capacity(n_steps / stride + 1);
    let mut diagnostics = Vec::with_capacity(n_steps);

    let mut c = vec![0.0f64; grid.n_nodes()];
    let mut warm: Option<Vec<f64>> = None;

    let record = |snapshots: &mut Vec<Snapshot>, t_s: f64, c: &[f64], psol: &PressureSolution| {
        snapshots.push(Snapshot {
            t_h: t_s / 3600.0,
            c: c.to_vec(),
            p: total_pressure(grid, params, &boundary, &psol.delta_p),
            v: psol.velocity.clone(),
        });
    };

    for step in 1..=n_steps {
        let t_new = step as f64 * config.dt;

        // First pass: density and velocity from the step's starting state.
        let mut psol = solve_pressure(
            grid, params, &k_field, &boundary, &c, None, warm.as_deref(),
            &config.pressure,
        )
        .map_err(|e| at_step(step, t_new, e))?;

        // The starting state of this step is a snapshot instant whenever
        // `step - 1` lands on the stride (time zero included).
        if (step - 1) % stride == 0 {
            record(&mut snapshots, t_new - config.dt, &c, &psol);
        }

        let mut tstep = step_transport(
            grid, params, &config.transport, &c, &psol.velocity, &psol.nodal_flux,
            config.dt,
        )
        .map_err(|e| at_step(step, t_new, e))?;

        // Optional fixed-point passes: refresh the velocity with the
        // density of the latest iterate and redo the transport step (the
        // time level of `c` itself stays put) until c stops moving.
        let mut passes = 1;
        if config.picard {
            while passes < config.picard_max_iter {
                let prev = tstep.c.clone();
                psol = solve_pressure(
                    grid, params, &k_field, &boundary, &prev, None,
                    Some(&psol.delta_p), &config.pressure,
                )
                .map_err(|e| at_step(step, t_new, e))?;
                tstep = step_transport(
                    grid, params, &config.transport, &c, &psol.velocity,
                    &psol.nodal_flux, config.dt,
                )
                .map_err(|e| at_step(step, t_new, e))?;
                passes += 1;
                let moved = tstep
                    .c
                    .iter()
                    .zip(&prev)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if moved <= config.picard_tol {
                    break;
                }
            }
        }

        let (mut c_min, mut c_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &tstep.c {
            c_min = c_min.min(v);
            c_max = c_max.max(v);
        }
        diagnostics.push(StepDiagnostics {
            step,
            t_s: t_new,
            pressure_iterations: psol.iterations,
            pressure_residual: psol.relative_residual,
            transport_iterations: tstep.iterations,
            transport_residual: tstep.relative_residual,
            mass_balance_defect: tstep.mass_balance_defect,
            c_min,
            c_max,
            picard_iterations: passes,
        });

        warm = Some(psol.delta_p);
        c = tstep.c;
    }

    // Final instant: one extra pressure solve so the last snapshot's p and
    // v are consistent with its own concentration.
    if n_steps.is_multiple_of(stride) {
        let psol = solve_pressure(
            grid, params, &k_field, &boundary, &c, None, warm.as_deref(),
            &config.pressure,
        )
        .map_err(|e| at_step(n_steps, config.t_end, e))?;
        record(&mut snapshots, config.t_end, &c, &psol);
    }

    Ok(TimeSeries { scenario: *scenario, snapshots, diagnostics })
}
