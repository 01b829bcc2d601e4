//! Finite-element pressure solver for Boussinesq Darcy flow.
//!
//! The incompressibility constraint `div v = 0` with
//! `v = -(k/mu)(grad p - rho(c) g)` is discretized with bilinear (Q1)
//! elements and 2x2 Gauss quadrature. The solver works in the *deviation*
//! variable
//!
//! ```text
//! dp(x, y) = p(x, y) - (p_left_offset + rho0 g y)
//! ```
//!
//! i.e. pressure minus the fresh-water hydrostatic column anchored at the
//! left boundary. In this variable the buoyancy drive is
//! `(rho(c) - rho0) g`, which vanishes identically for fresh water, so a
//! hydrostatic configuration produces a zero right-hand side, a zero
//! solution, and an *exactly* zero velocity - no cancellation of
//! order-10^4 Pa hydrostatic gradients ever happens in floating point.
//!
//! Boundary conditions: Dirichlet pressure profiles on the left and right
//! edges, natural no-flow on top and bottom. Dirichlet nodes are
//! eliminated from the system (the reduced matrix stays symmetric positive
//! definite) and solved with Jacobi-preconditioned conjugate gradients.
//!
//! Besides the pressure, the solver returns the Darcy velocity at every
//! quadrature point and the *consistent nodal flux*
//! `q_i = integral grad N_i . v dOmega`. Galerkin orthogonality makes
//! `q_i` vanish at free nodes up to solver tolerance, so the boundary
//! values are discrete in/outflow rates that the transport stage can use
//! to build an exactly mass-conserving outflow term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{solve_cg_jacobi, CsrBuilder};
use crate::physics::{DeterministicParams, SymTensor2};
use crate::scenario::{BoundaryPressure, PermeabilityField};

/// Iterative-solver settings for the pressure system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PressureConfig {
    /// Relative residual tolerance of the CG solve.
    pub tol_rel: f64,
    /// Iteration cap of the CG solve.
    pub max_iter: usize,
}

impl Default for PressureConfig {
    fn default() -> Self {
        PressureConfig { tol_rel: 1e-10, max_iter: 20_000 }
    }
}

impl PressureConfig {
    /// Validate the settings.
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_rel < 1.0) {
            return Err(Error::Config(format!("tol_rel must be in (0,1), got {}", self.tol_rel)));
        }
        Ok(())
    }
}

/// Output of one pressure solve.
#[derive(Debug, Clone)]
pub struct PressureSolution {
    /// Nodal pressure deviation from the left hydrostatic column (Pa).
    pub delta_p: Vec<f64>,
    /// Darcy velocity at every quadrature point (m/s).
    pub velocity: Vec<[f64; 2]>,
    /// Consistent nodal flux `q_i = integral grad N_i . v` (m^2/s per unit
    /// thickness). Zero at free nodes up to solver tolerance; positive at
    /// outflow boundary nodes.
    pub nodal_flux: Vec<f64>,
    /// CG iterations consumed.
    pub iterations: usize,
    /// Final relative residual of the reduced system.
    pub relative_residual: f64,
}

/// Dirichlet values of the deviation variable on a vertical boundary.
fn dirichlet_value(boundary: &BoundaryPressure, params: &DeterministicParams, y: f64, left: bool) -> f64 {
    let hydro = boundary.p_left_offset_pa + params.rho0_g() * y;
    if left {
        boundary.left(y) - hydro
    } else {
        boundary.right(y) - hydro
    }
}

/// Solve the pressure equation for a given nodal concentration field.
///
/// * `c_nodal` - concentration at every grid node (interpolated to
///   quadrature points for the buoyancy term).
/// * `source` - optional volumetric source `f(x, y)` added to the weak
///   form as `integral N_i f` (used by manufactured-solution tests).
/// * `warm_start` - optional previous nodal `delta_p` to seed CG.
#[allow(clippy::too_many_arguments)]
pub fn solve_pressure(
    grid: &Grid,
    params: &DeterministicParams,
    k_field: &PermeabilityField,
    boundary: &BoundaryPressure,
    c_nodal: &[f64],
    source: Option<&dyn Fn(f64, f64) -> f64>,
    warm_start: Option<&[f64]>,
    cfg: &PressureConfig,
) -> Result<PressureSolution> {
    let n_nodes = grid.n_nodes();
    if c_nodal.len() != n_nodes {
        return Err(Error::Shape(format!(
            "concentration has {} entries but grid has {n_nodes} nodes",
            c_nodal.len()
        )));
    }
    if k_field.len() != grid.n_quad() {
        return Err(Error::Shape(format!(
            "permeability covers {} points but grid has {} quadrature points",
            k_field.len(),
            grid.n_quad()
        )));
    }

    // Dirichlet bookkeeping: left and right vertical edges.
    let mut dirichlet = vec![f64::NAN; n_nodes];
    let mut free_index = vec![usize::MAX; n_nodes];
    for iy in 0..=grid.ny {
        for &(ix, left) in &[(0usize, true), (grid.nx, false)] {
            let node = grid.node_index(ix, iy);
            let (_, y) = grid.node_pos(node);
            dirichlet[node] = dirichlet_value(boundary, params, y, left);
        }
    }
    let mut n_free = 0;
    for node in 0..n_nodes {
        if dirichlet[node].is_nan() {
            free_index[node] = n_free;
            n_free += 1;
        }
    }

    // Reference-element shape data at the four quadrature points.
    let mut shape_n = [[0.0f64; 4]; 4];
    let mut shape_g = [[[0.0f64; 2]; 4]; 4];
    for q in 0..4 {
        let (xi, eta) = Grid::quad_ref(q);
        shape_n[q] = Grid::shape(xi, eta);
        for (a, g) in grid.shape_grad(xi, eta).iter().enumerate() {
            shape_g[q][a] = [g.0, g.1];
        }
    }
    let w = grid.quad_weight();
    let inv_mu = 1.0 / params.mu;

    let mut builder = CsrBuilder::with_capacity(n_free, 16 * grid.n_elements());
    let mut rhs = vec![0.0f64; n_free];

    for e in 0..grid.n_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..4 {
            let gq = 4 * e + q;
            let k = SymTensor2 {
                xx: k_field.kxx[gq],
                yy: k_field.kyy[gq],
                xy: k_field.kxy[gq],
            };
            let nv = &shape_n[q];
            let gv = &shape_g[q];
            // Buoyancy drive (rho - rho0) g at the quadrature point.
            let c_q: f64 = (0..4).map(|a| nv[a] * c_nodal[nodes[a]]).sum();
            let drive_y = (params.density_of(c_q) - params.rho0) * params.g;
            let f_q = source.map(|f| {
                let (x, y) = grid.quad_pos(gq);
                f(x, y)
            });
            for a in 0..4 {
                let ia = nodes[a];
                if free_index[ia] == usize::MAX {
                    continue;
                }
                let row = free_index[ia];
                // grad N_a . (k/mu) (0, drive_y)
                let k_drive = k.mul_vec([0.0, drive_y]);
                rhs[row] += w * inv_mu * (gv[a][0] * k_drive[0] + gv[a][1] * k_drive[1]);
                if let Some(f) = f_q {
                    rhs[row] += w * nv[a] * f;
                }
                for b in 0..4 {
                    let ib = nodes[b];
                    let k_gb = k.mul_vec(gv[b]);
                    let entry = w * inv_mu * (gv[a][0] * k_gb[0] + gv[a][1] * k_gb[1]);
                    if free_index[ib] == usize::MAX {
                        rhs[row] -= entry * dirichlet[ib];
                    } else {
                        builder.push(row, free_index[ib], entry);
                    }
                }
            }
        }
    }
    let a = builder.build();

    let warm: Option<Vec<f64>> = warm_start.map(|full| {
        (0..n_nodes)
            .filter(|&i| free_index[i] != usize::MAX)
            .map(|i| full[i])
            .collect()
    });
    let sol = solve_cg_jacobi(&a, &rhs, warm.as_deref(), cfg.tol_rel, cfg.max_iter)?;

    // Scatter back to the full nodal vector.
    let mut delta_p = vec![0.0f64; n_nodes];
    for node in 0..n_nodes {
        delta_p[node] = if free_index[node] == usize::MAX {
            dirichlet[node]
        } else {
            sol.x[free_index[node]]
        };
    }

    // Darcy velocity at quadrature points and consistent nodal flux.
    let mut velocity = vec![[0.0f64; 2]; grid.n_quad()];
    let mut nodal_flux = vec![0.0f64; n_nodes];
    for e in 0..grid.n_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..4 {
            let gq = 4 * e + q;
            let k = SymTensor2 {
                xx: k_field.kxx[gq],
                yy: k_field.kyy[gq],
                xy: k_field.kxy[gq],
            };
            let nv = &shape_n[q];
            let gv = &shape_g[q];
            let mut grad = [0.0f64; 2];
            let mut c_q = 0.0;
            for a in 0..4 {
                grad[0] += gv[a][0] * delta_p[nodes[a]];
                grad[1] += gv[a][1] * delta_p[nodes[a]];
                c_q += nv[a] * c_nodal[nodes[a]];
            }
            let drive_y = (params.density_of(c_q) - params.rho0) * params.g;
            let kv = k.mul_vec([grad[0], grad[1] - drive_y]);
            let v = [-kv[0] * inv_mu, -kv[1] * inv_mu];
            velocity[gq] = v;
            for a in 0..4 {
                nodal_flux[nodes[a]] += w * (gv[a][0] * v[0] + gv[a][1] * v[1]);
            }
        }
    }

    Ok(PressureSolution {
        delta_p,
        velocity,
        nodal_flux,
        iterations: sol.iterations,
        relative_residual: sol.relative_residual,
    })
}

/// Total pressure (Pa) from the deviation variable.
pub fn total_pressure(
    grid: &Grid,
    params: &DeterministicParams,
    boundary: &BoundaryPressure,
    delta_p: &[f64],
) -> Vec<f64> {
    let mut p = vec![0.0f64; grid.n_nodes()];
    for node in 0..grid.n_nodes() {
        let (_, y) = grid.node_pos(node);
        p[node] = delta_p[node] + boundary.p_left_offset_pa + params.rho0_g() * y;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{self, sample_fractures, sample_scenario, RevSpec};

    fn default_boundary(p_right_offset: f64) -> BoundaryPressure {
        let params = DeterministicParams::default();
        BoundaryPressure {
            p_left_offset_pa: scenario::P_LEFT_OFFSET_PA,
            p_right_offset_pa: p_right_offset,
            gradient_pa_per_m: params.rho0_g(),
        }
    }

    #[test]
    fn hydrostatic_fresh_water_is_exactly_at_rest() {
        // Equal boundary offsets and c = 0: the deviation formulation yields
        // a zero system, so pressure and velocity are exact zeros even over
        // a rough random permeability field.
        let grid = Grid::desk_scale();
        let params = DeterministicParams::default();
        let mut sc = sample_scenario(600, 0);
        sc.p_right_offset_pa = sc.p_left_offset_pa;
        let field = sample_fractures(&sc, &grid);
        let k = scenario::equivalent_permeability(&field, &grid, &RevSpec::default(), params.k_r)
            .unwrap();
        let boundary = scenario::boundary_pressure_profiles(&sc, params.rho0_g());
        let c = vec![0.0; grid.n_nodes()];
        let sol = solve_pressure(
            &grid, &params, &k, &boundary, &c, None, None, &PressureConfig::default(),
        )
        .unwrap();
        assert!(sol.delta_p.iter().all(|&v| v == 0.0));
        assert!(sol.velocity.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
        assert!(sol.nodal_flux.iter().all(|&q| q == 0.0));
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn uniform_isotropic_drive_recovers_linear_pressure() {
        // dp = -Delta_p x / Lx is linear, so Q1 elements reproduce it to
        // solver tolerance. v_x = (k_r/mu) Delta_p / Lx:
        // 5.7e-11 / 1.002e-3 * 20 / 0.7 = 1.62532e-6 m/s.
        let grid = Grid::full_scale();
        let params = DeterministicParams::default();
        let k = PermeabilityField::uniform_isotropic(grid.n_quad(), params.k_r);
        let boundary = default_boundary(scenario::P_LEFT_OFFSET_PA - 20.0);
        let c = vec![0.0; grid.n_nodes()];
        let sol = solve_pressure(
            &grid, &params, &k, &boundary, &c, None, None, &PressureConfig::default(),
        )
        .unwrap();
        let vx_expected = params.k_r / params.mu * 20.0 / grid.lx();
        assert!((vx_expected - 1.625_320_787e-6).abs() < 1e-15);
        for iy in 0..=grid.ny {
            for ix in 0..=grid.nx {
                let node = grid.node_index(ix, iy);
                let (x, _) = grid.node_pos(node);
                let expected = -20.0 * x / grid.lx();
                assert!(
                    (sol.delta_p[node] - expected).abs() < 1e-8,
                    "node ({ix},{iy}): {} vs {expected}",
                    sol.delta_p[node]
                );
            }
        }
        for v in &sol.velocity {
            assert!((v[0] - vx_expected).abs() < 1e-15 * 1e6);
            assert!(v[1].abs() < 1e-17);
        }
        // Outflow through the right edge balances inflow through the left.
        let mut left = 0.0;
        let mut right = 0.0;
        for iy in 0..=grid.ny {
            left += sol.nodal_flux[grid.node_index(0, iy)];
            right += sol.nodal_flux[grid.node_index(grid.nx, iy)];
        }
        let expected_rate = vx_expected * grid.ly();
        assert!((right - expected_rate).abs() < 1e-8 * expected_rate);
        // Left inflow balances right outflow up to the residual that CG
        // leaves at the free (wall) nodes.
        assert!((left + right).abs() < 1e-7 * expected_rate);
    }

    #[test]
    fn full_tensor_patch_test_is_exact() {
        // Linear field dp = a x + b y with b = -kxy a / kyy gives v_y = 0,
        // so the no-flow walls are exactly satisfied and the FEM solution
        // must reproduce the field to solver tolerance. This exercises the
        // off-diagonal permeability path in assembly with a known answer.
        let grid = Grid::new(35, 25, 0.02, 0.02).unwrap();
        let params = DeterministicParams::default();
        let (kxx, kyy, kxy) = (2.0e-10, 5.0e-11, 1.0e-11);
        let k = PermeabilityField {
            kxx: vec![kxx; grid.n_quad()],
            kyy: vec![kyy; grid.n_quad()],
            kxy: vec![kxy; grid.n_quad()],
        };
        let a = -20.0 / grid.lx();
        let b = -kxy * a / kyy;
        let boundary = BoundaryPressure {
            p_left_offset_pa: scenario::P_LEFT_OFFSET_PA,
            p_right_offset_pa: scenario::P_LEFT_OFFSET_PA + a * grid.lx(),
            gradient_pa_per_m: params.rho0_g() + b,
        };
        let c = vec![0.0; grid.n_nodes()];
        let sol = solve_pressure(
            &grid, &params, &k, &boundary, &c, None, None, &PressureConfig::default(),
        )
        .unwrap();
        for iy in 0..=grid.ny {
            for ix in 0..=grid.nx {
                let node = grid.node_index(ix, iy);
                let (x, y) = grid.node_pos(node);
                let expected = a * x + b * y;
                assert!(
                    (sol.delta_p[node] - expected).abs() < 1e-7,
                    "node ({ix},{iy}): {} vs {expected}",
                    sol.delta_p[node]
                );
            }
        }
        // Velocity accuracy is limited by the CG residual (1e-10 relative),
        // not machine epsilon: gradients amplify the nodal error by 1/h.
        let vx_expected = -(kxx * a + kxy * b) / params.mu;
        for v in &sol.velocity {
            assert!((v[0] - vx_expected).abs() < 1e-6 * vx_expected.abs());
            assert!(v[1].abs() < 1e-6 * vx_expected.abs());
        }
    }

    #[test]
    fn manufactured_solution_error_is_small_and_flux_consistent() {
        // dp* = sin(pi x / Lx) cos(pi y / Ly) vanishes on the vertical
        // edges and has zero normal derivative on the walls. With uniform
        // isotropic k the required source is
        // f = (k/mu) ((pi/Lx)^2 + (pi/Ly)^2) dp*.
        let grid = Grid::new(35, 25, 0.02, 0.02).unwrap();
        let params = DeterministicParams::default();
        let k = PermeabilityField::uniform_isotropic(grid.n_quad(), params.k_r);
        let boundary = default_boundary(scenario::P_LEFT_OFFSET_PA);
        let c = vec![0.0; grid.n_nodes()];
        let (lx, ly) = (grid.lx(), grid.ly());
        let kmu = params.k_r / params.mu;
        let lam = (std::f64::consts::PI / lx).powi(2) + (std::f64::consts::PI / ly).powi(2);
        let source = move |x: f64, y: f64| {
            kmu * lam
                * (std::f64::consts::PI * x / lx).sin()
                * (std::f64::consts::PI * y / ly).cos()
        };
        let sol = solve_pressure(
            &grid, &params, &k, &boundary, &c, Some(&source), None,
            &PressureConfig::default(),
        )
        .unwrap();
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        for iy in 0..=grid.ny {
            for ix in 0..=grid.nx {
                let node = grid.node_index(ix, iy);
                let (x, y) = grid.node_pos(node);
                let exact = (std::f64::consts::PI * x / lx).sin()
                    * (std::f64::consts::PI * y / ly).cos();
                err2 += (sol.delta_p[node] - exact).powi(2);
                ref2 += exact * exact;
            }
        }
        let rel = (err2 / ref2).sqrt();
        assert!(rel < 5e-3, "relative L2 error {rel}");
        // At free nodes the discrete equation reads
        // integral grad N_i . (k/mu) grad dp = integral N_i f, and the
        // consistent flux is q_i = -integral grad N_i . (k/mu) grad dp,
        // so q_i + load_i vanishes to solver tolerance.
        let w = grid.quad_weight();
        let mut load = vec![0.0f64; grid.n_nodes()];
        for e in 0..grid.n_elements() {
            let nodes = grid.element_nodes(e);
            for q in 0..4 {
                let (xi, eta) = Grid::quad_ref(q);
                let nv = Grid::shape(xi, eta);
                let (x, y) = grid.quad_pos(4 * e + q);
                for a in 0..4 {
                    load[nodes[a]] += w * nv[a] * source(x, y);
                }
            }
        }
        for iy in 1..grid.ny {
            for ix in 1..grid.nx {
                let node = grid.node_index(ix, iy);
                assert!(
                    (sol.nodal_flux[node] + load[node]).abs() < 1e-14,
                    "flux at ({ix},{iy}): {} vs -load {}",
                    sol.nodal_flux[node],
                    -load[node]
                );
            }
        }
    }

    #[test]
    fn random_field_flux_balances_and_warm_start_converges_fast() {
        let grid = Grid::desk_scale();
        let params = DeterministicParams::default();
        let sc = sample_scenario(601, 2);
        let field = sample_fractures(&sc, &grid);
        let k = scenario::equivalent_permeability(&field, &grid, &RevSpec::default(), params.k_r)
            .unwrap();
        let boundary = scenario::boundary_pressure_profiles(&sc, params.rho0_g());
        let c = vec![0.0; grid.n_nodes()];
        let cfg = PressureConfig::default();
        let sol = solve_pressure(&grid, &params, &k, &boundary, &c, None, None, &cfg).unwrap();
        // Interior consistent flux vanishes to solver tolerance.
        let flux_scale: f64 = sol
            .nodal_flux
            .iter()
            .fold(0.0f64, |acc, q| acc.max(q.abs()));
        assert!(flux_scale > 0.0);
        for iy in 1..grid.ny {
            for ix in 1..grid.nx {
                let q = sol.nodal_flux[grid.node_index(ix, iy)];
                assert!(q.abs() < 1e-7 * flux_scale, "interior flux {q:e} at ({ix},{iy})");
            }
        }
        // Global balance: sum of all consistent fluxes is exactly ~0 because
        // the shape-function gradients sum to zero pointwise.
        let total: f64 = sol.nodal_flux.iter().sum();
        assert!(total.abs() < 1e-16 * flux_scale / 1e-3);
        // Left inflow balances right outflow.
        let mut left = 0.0;
        let mut right = 0.0;
        for iy in 0..=grid.ny {
            left += sol.nodal_flux[grid.node_index(0, iy)];
            right += sol.nodal_flux[grid.node_index(grid.nx, iy)];
        }
        assert!(right > 0.0, "flow should exit on the low-pressure side");
        assert!((left + right).abs() < 1e-6 * right.abs());
        // Warm start from the converged solution finishes immediately.
        let warm = solve_pressure(
            &grid, &params, &k, &boundary, &c, None, Some(&sol.delta_p), &cfg,
        )
        .unwrap();
        assert_eq!(warm.iterations, 0);
        assert!(warm.iterations < sol.iterations);
    }

    #[test]
    fn buoyant_plume_sinks() {
        // A brine blob in the middle of the tank with equal boundary
        // offsets: flow must descend through the blob (positive v_y at its
        // center, y pointing down).
        let grid = Grid::desk_scale();
        let params = DeterministicParams::default();
        let k = PermeabilityField::uniform_isotropic(grid.n_quad(), params.k_r);
        let boundary = default_boundary(scenario::P_LEFT_OFFSET_PA);
        let mut c = vec![0.0; grid.n_nodes()];
        for (node, cn) in c.iter_mut().enumerate() {
            let (x, y) = grid.node_pos(node);
            let r2 = ((x - 0.35) / 0.08).powi(2) + ((y - 0.25) / 0.08).powi(2);
            *cn = (-r2).exp();
        }
        let sol = solve_pressure(
            &grid, &params, &k, &boundary, &c, None, None, &PressureConfig::default(),
        )
        .unwrap();
        // Velocity at the quadrature point nearest the blob center.
        let mut best = (f64::INFINITY, 0usize);
        for gq in 0..grid.n_quad() {
            let (x, y) = grid.quad_pos(gq);
            let d = (x - 0.35).powi(2) + (y - 0.25).powi(2);
            if d < best.0 {
                best = (d, gq);
            }
        }
        let v = sol.velocity[best.1];
        assert!(v[1] > 0.0, "plume center velocity {v:?} should point down (+y)");
        let speed = v[0].hypot(v[1]);
        assert!(speed > 1e-9, "buoyant speed {speed:e} unexpectedly small");
        assert!(speed < 1e-4, "buoyant speed {speed:e} unphysically large");
    }

    #[test]
    fn total_pressure_restores_hydrostatic_column() {
        let grid = Grid::desk_scale();
        let params = DeterministicParams::default();
        let boundary = default_boundary(scenario::P_LEFT_OFFSET_PA);
        let delta_p = vec![0.0; grid.n_nodes()];
        let p = total_pressure(&grid, &params, &boundary, &delta_p);
        let bottom_left = grid.node_index(0, grid.ny);
        assert!((p[bottom_left] - (4996.0 + 9792.342 * 0.5)).abs() < 1e-6);
        assert_eq!(p[grid.node_index(0, 0)], 4996.0);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let grid = Grid::desk_scale();
        let params = DeterministicParams::default();
        let k = PermeabilityField::uniform_isotropic(grid.n_quad(), params.k_r);
        let boundary = default_boundary(4980.0);
        let err = solve_pressure(
            &grid, &params, &k, &boundary, &[0.0; 3], None, None,
            &PressureConfig::default(),
        );
        assert!(err.is_err());
        let k_bad = PermeabilityField::uniform_isotropic(5, params.k_r);
        let c = vec![0.0; grid.n_nodes()];
        assert!(solve_pressure(
            &grid, &params, &k_bad, &boundary, &c, None, None,
            &PressureConfig::default(),
        )
        .is_err());
    }
}
