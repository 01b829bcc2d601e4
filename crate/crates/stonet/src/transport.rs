//! Finite-element solute transport: advection, dispersion, stabilization.
//!
//! One backward-Euler step of the conservative transport equation
//!
//! ```text
//! phi d(rho c)/dt + div(rho c v) - div(rho D(v) grad c) = 0
//! ```
//!
//! on Q1 elements with 2x2 Gauss quadrature. The density stays *inside*
//! the derivatives but is lagged at the previous concentration
//! (`rho_q = rho(c^n)` at quadrature points), which linearizes the step
//! while preserving a discrete mass budget exactly.
//!
//! Three spatial schemes are available (see [`TransportScheme`]):
//!
//! * **Flux-limited** (default): algebraic flux correction. A low-order
//!   operator — lumped mass plus the symmetric artificial diffusion
//!   `d_ij = max(s_ij, s_ji, 0)` that removes every bound-violating
//!   off-diagonal from the spatial operator — is solved implicitly and is
//!   provably bounded; a Zalesak limiter then re-adds as much of the
//!   antidiffusive difference to the consistent-mass Galerkin operator as
//!   the local extrema of the old and low-order solutions allow. Sharp
//!   fronts stay within the data bounds by construction while the scheme
//!   remains second-order where the solution is smooth. This is the only
//!   scheme that holds the `c ∈ [-1e-3, 1+1e-3]` invariant on this
//!   problem: the source band enters as a concentration discontinuity one
//!   or two cells wide at mesh Peclet numbers of 4-10, where every linear
//!   stabilized scheme over- and undershoots at the percent level.
//! * **SUPG**: streamline-upwind Petrov-Galerkin. The test function is
//!   augmented by `tau (v . grad N_i)` against the strong residual
//!   `phi rho dc/dt + rho v . grad c` (diffusion and density-gradient
//!   terms are dropped, as usual for bilinear elements), with the optimal
//!   1-D parameter `tau = h/(2|v|) (coth Pe - 1/Pe)` measured along the
//!   flow direction. Crisp and cheap, but not monotone.
//! * **Galerkin**: no stabilization, for comparison runs.
//!
//! Boundary conditions:
//! * left edge - Dirichlet: `c = 1` on the source band, `c = 0`
//!   elsewhere;
//! * right edge - advective outflow, lumped per node as
//!   `q_i rho(c_i^n) c_i^{n+1}` with `q_i` the consistent nodal flux from
//!   the pressure solve (this exact pairing preserves constants and makes
//!   the outflow appear verbatim in the mass budget);
//! * top/bottom - no flow (natural).
//!
//! Every step reports its mass budget: with `DM` the lagged-density mass
//! increment, `F_out` the outflow rate, and `R` the sum of Dirichlet
//! reactions (the flux the boundary must supply to hold its values),
//! assembly guarantees `DM = dt (R - F_out)` up to the linear-solver
//! residual. Both the SUPG weighting and the flux-limited correction
//! leave that identity intact: the SUPG test gradients sum to zero over
//! each element, and the limited antidiffusive fluxes are antisymmetric
//! pair transfers that cancel in the total.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{solve_bicgstab_ilu0, Csr, CsrBuilder};
use crate::physics::DeterministicParams;
use serde::{Deserialize, Serialize};

/// Spatial discretization family for the advective term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScheme {
    /// Bounded algebraic flux correction (lumped low-order operator plus
    /// Zalesak-limited antidiffusion). The default; the only scheme that
    /// keeps concentrations within `[-1e-3, 1+1e-3]` at the production
    /// mesh Peclet numbers.
    FluxLimited,
    /// Streamline-upwind Petrov-Galerkin: linear, crisp, not monotone
    /// (sharp fronts over- and undershoot at the percent level).
    Supg,
    /// Plain Galerkin without stabilization, for comparison runs.
    Galerkin,
}

/// Settings for the transport stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    /// Relative residual tolerance of the BiCGSTAB solve. Kept well below
    /// the mass-balance target so the budget defect is solver-dominated.
    pub tol_rel: f64,
    /// Iteration cap of the BiCGSTAB solve.
    pub max_iter: usize,
    /// Spatial scheme (see [`TransportScheme`]).
    pub scheme: TransportScheme,
    /// Lump the time-derivative mass matrix (row sums onto the diagonal).
    /// Applies to the linear schemes only — the flux-limited scheme lumps
    /// its low-order operator and recovers the consistent mass through the
    /// limited antidiffusion. Lumping keeps the linear schemes closer to
    /// monotone near under-resolved fronts: the consistent mass matrix
    /// violates the discrete maximum principle whenever `dt` is below
    /// roughly `h^2/(6 D)`, which holds for the production step size.
    /// Either choice preserves the mass budget exactly (row and column
    /// sums are unchanged).
    pub lumped_mass: bool,
    /// Dirichlet source band `[y_min, y_max]` on the left edge (m).
    pub band_y: (f64, f64),
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            tol_rel: 1e-12,
            max_iter: 20_000,
            scheme: TransportScheme::FluxLimited,
            lumped_mass: true,
            band_y: (0.20, 0.30),
        }
    }
}

impl TransportConfig {
    /// Validate the settings.
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_rel < 1.0) {
            return Err(Error::Config(format!("tol_rel must be in (0,1), got {}", self.tol_rel)));
        }
        if self.band_y.0 > self.band_y.1 {
            return Err(Error::Config(format!(
                "source band is inverted: {:?}",
                self.band_y
            )));
        }
        Ok(())
    }

    /// Dirichlet concentration on the left edge at depth `y`.
    pub fn left_value(&self, y: f64) -> f64 {
        const EDGE_TOL: f64 = 1e-9;
        if y >= self.band_y.0 - EDGE_TOL && y <= self.band_y.1 + EDGE_TOL {
            1.0
        } else {
            0.0
        }
    }
}

/// Result of one transport step.
#[derive(Debug, Clone)]
pub struct TransportStep {
    /// Concentration at the new time level.
    pub c: Vec<f64>,
    /// BiCGSTAB iterations consumed.
    pub iterations: usize,
    /// Final relative residual of the linear solve.
    pub relative_residual: f64,
    /// Lagged-density mass increment `DM = integral phi rho(c^n)(c^{n+1}-c^n)`
    /// (kg per unit thickness).
    pub mass_change: f64,
    /// Advective outflow rate through the right edge (kg/s per unit
    /// thickness), evaluated at the new concentration.
    pub outflow_rate: f64,
    /// Sum of Dirichlet reactions: the rate at which the left boundary
    /// supplies solute mass to hold its prescribed values (kg/s per unit
    /// thickness).
    pub boundary_supply_rate: f64,
    /// Defect of the budget identity `DM = dt (R - F_out)`, relative to the
    /// larger of the solute inventory and the boundary turnover of this
    /// step; bounded by the linear-solver residual.
    pub mass_balance_defect: f64,
}

/// Optimal 1-D SUPG multiplier `coth(Pe) - 1/Pe`, series-expanded for
/// small arguments.
fn supg_xi(pe: f64) -> f64 {
    if pe < 1e-4 {
        pe / 3.0 - pe.powi(3) / 45.0
    } else if pe > 50.0 {
        1.0 - 1.0 / pe
    } else {
        1.0 / pe.tanh() - 1.0 / pe
    }
}

/// Solute mass `integral phi rho(c) c` by quadrature (kg per unit
/// thickness).
pub fn solute_mass(grid: &Grid, params: &DeterministicParams, c: &[f64]) -> f64 {
    let w = grid.quad_weight();
    let mut shape_n = [[0.0f64; 4]; 4];
    for (q, nv) in shape_n.iter_mut().enumerate() {
        let (xi, eta) = Grid::quad_ref(q);
        *nv = Grid::shape(xi, eta);
    }
    let mut mass = 0.0;
    for e in 0..grid.n_elements() {
        let nodes = grid.element_nodes(e);
        for nv in &shape_n {
            let c_q: f64 = (0..4).map(|a| nv[a] * c[nodes[a]]).sum();
            mass += w * params.phi * params.density_of(c_q) * c_q;
        }
    }
    mass
}

/// Initial concentration consistent with the left-edge Dirichlet data:
/// the source band at 1, everything else at 0.
pub fn initial_concentration(grid: &Grid, cfg: &TransportConfig) -> Vec<f64> {
    let mut c = vec![0.0; grid.n_nodes()];
    for iy in 0..=grid.ny {
        let node = grid.node_index(0, iy);
        let (_, y) = grid.node_pos(node);
        c[node] = cfg.left_value(y);
    }
    c
}

/// What a scheme-specific solve hands back to the shared budget code.
struct StepCore {
    c: Vec<f64>,
    iterations: usize,
    relative_residual: f64,
    outflow_rate: f64,
    boundary_supply_rate: f64,
}

/// Reference-element shape data shared by the assembly routines.
struct ShapeTables {
    /// Shape values at the four quadrature points.
    n: [[f64; 4]; 4],
    /// Physical shape gradients at the four quadrature points.
    g: [[[f64; 2]; 4]; 4],
    /// Physical shape gradients at the element center (directional size).
    center_g: [[f64; 2]; 4],
}

impl ShapeTables {
    fn new(grid: &Grid) -> Self {
        let mut n = [[0.0f64; 4]; 4];
        let mut g = [[[0.0f64; 2]; 4]; 4];
        for q in 0..4 {
            let (xi, eta) = Grid::quad_ref(q);
            n[q] = Grid::shape(xi, eta);
            for (a, gr) in grid.shape_grad(xi, eta).iter().enumerate() {
                g[q][a] = [gr.0, gr.1];
            }
        }
        let mut center_g = [[0.0f64; 2]; 4];
        for (a, gr) in grid.shape_grad(0.0, 0.0).iter().enumerate() {
            center_g[a] = [gr.0, gr.1];
        }
        ShapeTables { n, g, center_g }
    }
}

/// Advance the concentration by one time step of length `dt` seconds.
///
/// * `velocity` - Darcy velocity at every quadrature point (from
///   [`crate::pressure::solve_pressure`], or synthetic in tests).
/// * `nodal_flux` - consistent nodal flux `q_i`; only right-edge entries
///   are read (lumped outflow).
#[allow(clippy::too_many_arguments)]
pub fn step_transport(
    grid: &Grid,
    params: &DeterministicParams,
    cfg: &TransportConfig,
    c_old: &[f64],
    velocity: &[[f64; 2]],
    nodal_flux: &[f64],
    dt: f64,
) -> Result<TransportStep> {
    cfg.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let n_nodes = grid.n_nodes();
    if c_old.len() != n_nodes {
        return Err(Error::Shape(format!(
            "concentration has {} entries, grid has {n_nodes} nodes",
            c_old.len()
        )));
    }
    if velocity.len() != grid.n_quad() {
        return Err(Error::Shape(format!(
            "velocity covers {} points, grid has {} quadrature points",
            velocity.len(),
            grid.n_quad()
        )));
    }
    if nodal_flux.len() != n_nodes {
        return Err(Error::Shape(format!(
            "nodal flux has {} entries, grid has {n_nodes} nodes",
            nodal_flux.len()
        )));
    }

    // Dirichlet data on the left edge.
    let mut dirichlet = vec![f64::NAN; n_nodes];
    for iy in 0..=grid.ny {
        let node = grid.node_index(0, iy);
        let (_, y) = grid.node_pos(node);
        dirichlet[node] = cfg.left_value(y);
    }

    let tables = ShapeTables::new(grid);
    let core = match cfg.scheme {
        TransportScheme::FluxLimited => flux_limited_step(
            grid, params, cfg, c_old, velocity, nodal_flux, &dirichlet, &tables, dt,
        )?,
        TransportScheme::Supg | TransportScheme::Galerkin => linear_step(
            grid, params, cfg, c_old, velocity, nodal_flux, &dirichlet, &tables, dt,
        )?,
    };
    if core.c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("transport produced non-finite concentration".into()));
    }

    // Mass budget: lagged-density increment by the same quadrature the
    // operators were assembled with.
    let w = grid.quad_weight();
    let mut mass_change = 0.0;
    for e in 0..grid.n_elements() {
        let nodes = grid.element_nodes(e);
        for nv in &tables.n {
            let mut c_old_q = 0.0;
            let mut c_new_q = 0.0;
            for a in 0..4 {
                c_old_q += nv[a] * c_old[nodes[a]];
                c_new_q += nv[a] * core.c[nodes[a]];
            }
            mass_change += w * params.phi * params.density_of(c_old_q) * (c_new_q - c_old_q);
        }
    }
    let defect = mass_change - dt * (core.boundary_supply_rate - core.outflow_rate);
    let scale = solute_mass(grid, params, c_old)
        .abs()
        .max(solute_mass(grid, params, &core.c).abs())
        .max(dt * (core.boundary_supply_rate.abs() + core.outflow_rate.abs()))
        .max(1e-300);
    let mass_balance_defect = (defect / scale).abs();

    Ok(TransportStep {
        c: core.c,
        iterations: core.iterations,
        relative_residual: core.relative_residual,
        mass_change,
        outflow_rate: core.outflow_rate,
        boundary_supply_rate: core.boundary_supply_rate,
        mass_balance_defect,
    })
}

/// One step of the linear schemes (SUPG or plain Galerkin): assemble the
/// combined system `(M/dt + S) c = M/dt c_old`, constrain, solve.
#[allow(clippy::too_many_arguments)]
fn linear_step(
    grid: &Grid,
    params: &DeterministicParams,
    cfg: &TransportConfig,
    c_old: &[f64],
    velocity: &[[f64; 2]],
    nodal_flux: &[f64],
    dirichlet: &[f64],
    tables: &ShapeTables,
    dt: f64,
) -> Result<StepCore> {
    let n_nodes = grid.n_nodes();
    let w = grid.quad_weight();
    let inv_dt = 1.0 / dt;
    // Representative diagonal magnitude used to scale Dirichlet rows so the
    // relative residual of the mixed system stays meaningful.
    let row_scale = params.phi * params.rho0 * grid.dx * grid.dy * inv_dt;

    let mut full = CsrBuilder::with_capacity(n_nodes, 16 * 4 * grid.n_elements() + 2 * grid.ny + 2);
    let mut constrained = CsrBuilder::with_capacity(n_nodes, 16 * 4 * grid.n_elements());
    let mut b_full = vec![0.0f64; n_nodes];

    for e in 0..grid.n_elements() {
        let nodes = grid.element_nodes(e);
        let c_nodes: [f64; 4] = [
            c_old[nodes[0]],
            c_old[nodes[1]],
            c_old[nodes[2]],
            c_old[nodes[3]],
        ];

        // Element-average velocity and dispersion for the SUPG parameter.
        let mut tau = 0.0;
        if cfg.scheme == TransportScheme::Supg {
            let mut v_bar = [0.0f64; 2];
            for q in 0..4 {
                v_bar[0] += 0.25 * velocity[4 * e + q][0];
                v_bar[1] += 0.25 * velocity[4 * e + q][1];
            }
            let speed = v_bar[0].hypot(v_bar[1]);
            if speed > 1e-30 {
                let s_hat = [v_bar[0] / speed, v_bar[1] / speed];
                let mut d_bar_xx = 0.0;
                let mut d_bar_yy = 0.0;
                let mut d_bar_xy = 0.0;
                for q in 0..4 {
                    let d = params.dispersion_tensor(velocity[4 * e + q]);
                    d_bar_xx += 0.25 * d.xx;
                    d_bar_yy += 0.25 * d.yy;
                    d_bar_xy += 0.25 * d.xy;
                }
                let d_flow = d_bar_xx * s_hat[0] * s_hat[0]
                    + 2.0 * d_bar_xy * s_hat[0] * s_hat[1]
                    + d_bar_yy * s_hat[1] * s_hat[1];
                let denom: f64 = tables
                    .center_g
                    .iter()
                    .map(|g| (s_hat[0] * g[0] + s_hat[1] * g[1]).abs())
                    .sum();
                let h_dir = 2.0 / denom;
                let pe = speed * h_dir / (2.0 * d_flow);
                tau = h_dir / (2.0 * speed) * supg_xi(pe);
            }
        }

        for q in 0..4 {
            let gq = 4 * e + q;
            let v = velocity[gq];
            let nv = &tables.n[q];
            let gv = &tables.g[q];
            let c_q: f64 = (0..4).map(|a| nv[a] * c_nodes[a]).sum();
            let rho_q = params.density_of(c_q);
            let d = params.dispersion_tensor(v);

            for a in 0..4 {
                let ia = nodes[a];
                let v_grad_na = v[0] * gv[a][0] + v[1] * gv[a][1];
                let supg_test = tau * v_grad_na;
                let free = dirichlet[ia].is_nan();
                // Lagged time level on the right-hand side. The SUPG part
                // of the weighting always stays consistent (it weights the
                // strong residual); the Galerkin part is lumped on demand.
                b_full[ia] += w * supg_test * params.phi * rho_q * inv_dt * c_q;
                if cfg.lumped_mass {
                    let m_a = w * params.phi * rho_q * inv_dt * nv[a];
                    b_full[ia] += m_a * c_nodes[a];
                    full.push(ia, ia, m_a);
                    if free {
                        constrained.push(ia, ia, m_a);
                    }
                } else {
                    b_full[ia] += w * nv[a] * params.phi * rho_q * inv_dt * c_q;
                }
                for b in 0..4 {
                    let ib = nodes[b];
                    let d_gb = [
                        d.xx * gv[b][0] + d.xy * gv[b][1],
                        d.xy * gv[b][0] + d.yy * gv[b][1],
                    ];
                    let v_grad_nb = v[0] * gv[b][0] + v[1] * gv[b][1];
                    let time_ab = if cfg.lumped_mass {
                        0.0
                    } else {
                        params.phi * rho_q * inv_dt * nv[a] * nv[b]
                    };
                    let galerkin = w
                        * (time_ab
                            + rho_q * (gv[a][0] * d_gb[0] + gv[a][1] * d_gb[1])
                            - rho_q * v_grad_na * nv[b]);
                    let supg = w * supg_test * rho_q * (params.phi * inv_dt * nv[b] + v_grad_nb);
                    let entry = galerkin + supg;
                    full.push(ia, ib, entry);
                    if free {
                        constrained.push(ia, ib, entry);
                    }
                }
            }
        }
    }

    // Lumped advective outflow on the right edge.
    for iy in 0..=grid.ny {
        let node = grid.node_index(grid.nx, iy);
        let coeff = nodal_flux[node] * params.density_of(c_old[node]);
        full.push(node, node, coeff);
        constrained.push(node, node, coeff);
    }

    // Dirichlet rows in the constrained system.
    let mut b_constrained = b_full.clone();
    for (node, g) in dirichlet.iter().enumerate() {
        if !g.is_nan() {
            constrained.push(node, node, row_scale);
            b_constrained[node] = row_scale * g;
        }
    }

    let a_full: Csr = full.build();
    let a_constrained: Csr = constrained.build();

    let sol = solve_bicgstab_ilu0(
        &a_constrained,
        &b_constrained,
        Some(c_old),
        cfg.tol_rel,
        cfg.max_iter,
    )?;
    let c_new = sol.x;

    let mut outflow_rate = 0.0;
    for iy in 0..=grid.ny {
        let node = grid.node_index(grid.nx, iy);
        outflow_rate += nodal_flux[node] * params.density_of(c_old[node]) * c_new[node];
    }
    let residual_full = a_full.mul_vec(&c_new);
    let mut boundary_supply_rate = 0.0;
    for (node, g) in dirichlet.iter().enumerate() {
        if !g.is_nan() {
            boundary_supply_rate += residual_full[node] - b_full[node];
        }
    }

    Ok(StepCore {
        c: c_new,
        iterations: sol.iterations,
        relative_residual: sol.relative_residual,
        outflow_rate,
        boundary_supply_rate,
    })
}

/// A node pair coupled by the discretization, with everything the flux
/// limiter needs about it.
struct Pair {
    i: usize,
    j: usize,
    /// Artificial diffusion `max(s_ij, s_ji, 0)`.
    d: f64,
    /// Consistent-mass entry `m_ij` (symmetric).
    m: f64,
}

/// One step of the bounded flux-limited scheme.
///
/// Three linear solves against the same sparsity:
///
/// 1. *Low-order*: `(M_L/dt + L) c~ = M_L/dt c_old` with `L = S - D_art`.
///    An M-matrix up to the tiny discrete-divergence residual of the
///    velocity field, hence bounded for any `dt`. Its solution provides
///    the admissible local extrema and the prelimiting direction.
/// 2. *High-order*: the consistent-mass Galerkin step
///    `(M_C/dt + S) c_H = M_C/dt c_old`. The pairwise fluxes
///    `f_ij = m_ij (r_i - r_j) + d_ij (c_H_i - c_H_j)` with
///    `r = (c_H - c_old)/dt` decompose it exactly against the low-order
///    operator: `M_L r + L c_H = sum_j f_ij` row by row.
/// 3. *Corrected*: `(M_L/dt + L) c = M_L/dt c_old + sum_j alpha_ij f_ij`
///    with Zalesak coefficients `alpha`. At `alpha = 1` this returns
///    exactly `c_H` (second-order in smooth regions); the limiter caps
///    each node's antidiffusive load at
///    `m_i/dt (c_max_i - c_old_i)` (and the mirror below), which by the
///    M-matrix row argument keeps the solution inside the stencil bounds
///    of the old and low-order states no matter how sharp the front.
///
/// Fluxes touching Dirichlet nodes are dropped entirely (both halves), so
/// the correction is an exact internal redistribution: summed over free
/// rows it vanishes, and the mass budget of the low-order operator holds
/// verbatim at the corrected solution.
#[allow(clippy::too_many_arguments)]
fn flux_limited_step(
    grid: &Grid,
    params: &DeterministicParams,
    cfg: &TransportConfig,
    c_old: &[f64],
    velocity: &[[f64; 2]],
    nodal_flux: &[f64],
    dirichlet: &[f64],
    tables: &ShapeTables,
    dt: f64,
) -> Result<StepCore> {
    let n_nodes = grid.n_nodes();
    let w = grid.quad_weight();
    let inv_dt = 1.0 / dt;
    let row_scale = params.phi * params.rho0 * grid.dx * grid.dy * inv_dt;

    // rho-weighted lumped mass, consistent mass, and the spatial operator
    // (dispersion minus advection, plus the lumped right-edge outflow).
    let mut m_lump = vec![0.0f64; n_nodes];
    let mut mass = CsrBuilder::with_capacity(n_nodes, 16 * 4 * grid.n_elements());
    let mut space = CsrBuilder::with_capacity(n_nodes, 16 * 4 * grid.n_elements() + grid.ny + 1);
    for e in 0..grid.n_elements() {
        let nodes = grid.element_nodes(e);
        let c_nodes: [f64; 4] = [
            c_old[nodes[0]],
            c_old[nodes[1]],
            c_old[nodes[2]],
            c_old[nodes[3]],
        ];
        for q in 0..4 {
            let gq = 4 * e + q;
            let v = velocity[gq];
            let nv = &tables.n[q];
            let gv = &tables.g[q];
            let c_q: f64 = (0..4).map(|a| nv[a] * c_nodes[a]).sum();
            let rho_q = params.density_of(c_q);
            let d = params.dispersion_tensor(v);
            for a in 0..4 {
                let ia = nodes[a];
                m_lump[ia] += w * params.phi * rho_q * nv[a];
                let v_grad_na = v[0] * gv[a][0] + v[1] * gv[a][1];
                for b in 0..4 {
                    let ib = nodes[b];
                    let d_gb = [
                        d.xx * gv[b][0] + d.xy * gv[b][1],
                        d.xy * gv[b][0] + d.yy * gv[b][1],
                    ];
                    mass.push(ia, ib, w * params.phi * rho_q * nv[a] * nv[b]);
                    space.push(
                        ia,
                        ib,
                        w * rho_q
                            * ((gv[a][0] * d_gb[0] + gv[a][1] * d_gb[1]) - v_grad_na * nv[b]),
                    );
                }
            }
        }
    }
    for iy in 0..=grid.ny {
        let node = grid.node_index(grid.nx, iy);
        space.push(node, node, nodal_flux[node] * params.density_of(c_old[node]));
    }
    let m_c = mass.build();
    let s = space.build();

    // Discrete upwinding: symmetric artificial diffusion removing every
    // bound-violating off-diagonal from S. Pairs are enumerated from the
    // consistent-mass sparsity, which is the full stencil (its entries are
    // strictly positive and never merge to zero).
    let mut pairs: Vec<Pair> = Vec::with_capacity(m_c.nnz() / 2);
    let mut dsum = vec![0.0f64; n_nodes];
    for i in 0..n_nodes {
        let (cols, mvals) = m_c.row(i);
        for (&j, &m_ij) in cols.iter().zip(mvals) {
            if j <= i {
                continue;
            }
            let d = s.get(i, j).max(s.get(j, i)).max(0.0);
            dsum[i] += d;
            dsum[j] += d;
            pairs.push(Pair { i, j, d, m: m_ij });
        }
    }

    // Constrained low-order system (M_L/dt + L) c = M_L/dt c_old with
    // L = S - D_art; Dirichlet columns go to the right-hand side.
    let mut lo = CsrBuilder::with_capacity(n_nodes, s.nnz() + n_nodes);
    let mut b = vec![0.0f64; n_nodes];
    for i in 0..n_nodes {
        if dirichlet[i].is_nan() {
            lo.push(i, i, m_lump[i] * inv_dt + s.get(i, i) + dsum[i]);
            b[i] = m_lump[i] * inv_dt * c_old[i];
        } else {
            lo.push(i, i, row_scale);
            b[i] = row_scale * dirichlet[i];
        }
    }
    for p in &pairs {
        let l_ij = s.get(p.i, p.j) - p.d;
        let l_ji = s.get(p.j, p.i) - p.d;
        match (dirichlet[p.i].is_nan(), dirichlet[p.j].is_nan()) {
            (true, true) => {
                lo.push(p.i, p.j, l_ij);
                lo.push(p.j, p.i, l_ji);
            }
            (true, false) => b[p.i] -= l_ij * dirichlet[p.j],
            (false, true) => b[p.j] -= l_ji * dirichlet[p.i],
            (false, false) => {}
        }
    }
    let a_lo = lo.build();
    let b_lo = b;
    let sol_lo = solve_bicgstab_ilu0(&a_lo, &b_lo, Some(c_old), cfg.tol_rel, cfg.max_iter)?;
    let c_lo = sol_lo.x;

    // High-order target: the consistent-mass Galerkin step. Mass and
    // space matrices share their sparsity (identical assembly pushes), so
    // the rows can be walked in lockstep.
    let mut hi = CsrBuilder::with_capacity(n_nodes, s.nnz() + n_nodes);
    let mc_c_old = m_c.mul_vec(c_old);
    let mut b_hi = vec![0.0f64; n_nodes];
    for i in 0..n_nodes {
        if dirichlet[i].is_nan() {
            b_hi[i] = mc_c_old[i] * inv_dt;
            let (cols_s, vals_s) = s.row(i);
            let (cols_m, vals_m) = m_c.row(i);
            debug_assert_eq!(cols_s, cols_m);
            for ((&j, &s_ij), &m_ij) in cols_s.iter().zip(vals_s).zip(vals_m) {
                let a_ij = m_ij * inv_dt + s_ij;
                if dirichlet[j].is_nan() {
                    hi.push(i, j, a_ij);
                } else {
                    b_hi[i] -= a_ij * dirichlet[j];
                }
            }
        } else {
            hi.push(i, i, row_scale);
            b_hi[i] = row_scale * dirichlet[i];
        }
    }
    let a_hi = hi.build();
    let sol_hi = solve_bicgstab_ilu0(&a_hi, &b_hi, Some(&c_lo), cfg.tol_rel, cfg.max_iter)?;
    let c_hi = sol_hi.x;

    // Antidiffusive fluxes: the exact pairwise decomposition of the
    // high-order step against the low-order operator.
    let rate: Vec<f64> = (0..n_nodes).map(|i| (c_hi[i] - c_old[i]) * inv_dt).collect();
    let mut fluxes = vec![0.0f64; pairs.len()];
    let mut p_plus = vec![0.0f64; n_nodes];
    let mut p_minus = vec![0.0f64; n_nodes];
    for (f_out, p) in fluxes.iter_mut().zip(&pairs) {
        if !dirichlet[p.i].is_nan() || !dirichlet[p.j].is_nan() {
            continue;
        }
        let f = p.m * (rate[p.i] - rate[p.j]) + p.d * (c_hi[p.i] - c_hi[p.j]);
        // Prelimiting: a raw flux pointing down the low-order gradient is
        // diffusive, not antidiffusive; adding it back causes terracing.
        if f * (c_lo[p.j] - c_lo[p.i]) > 0.0 {
            continue;
        }
        *f_out = f;
        if f > 0.0 {
            p_plus[p.i] += f;
            p_minus[p.j] -= f;
        } else {
            p_minus[p.i] += f;
            p_plus[p.j] -= f;
        }
    }

    // Zalesak limiter: per-node admissible extrema from the old and
    // low-order solutions over the coupling stencil. The caps are
    // measured from c_old because the corrected solve restarts from
    // M_L/dt c_old, not from the low-order solution.
    let u_max: Vec<f64> = (0..n_nodes).map(|i| c_lo[i].max(c_old[i])).collect();
    let u_min: Vec<f64> = (0..n_nodes).map(|i| c_lo[i].min(c_old[i])).collect();
    let mut c_max = u_max.clone();
    let mut c_min = u_min.clone();
    for i in 0..n_nodes {
        let (cols, _) = m_c.row(i);
        for &j in cols {
            c_max[i] = c_max[i].max(u_max[j]);
            c_min[i] = c_min[i].min(u_min[j]);
        }
    }
    let mut r_plus = vec![1.0f64; n_nodes];
    let mut r_minus = vec![1.0f64; n_nodes];
    for i in 0..n_nodes {
        if p_plus[i] > 0.0 {
            r_plus[i] = (m_lump[i] * inv_dt * (c_max[i] - c_old[i]) / p_plus[i]).min(1.0);
        }
        if p_minus[i] < 0.0 {
            r_minus[i] = (m_lump[i] * inv_dt * (c_min[i] - c_old[i]) / p_minus[i]).min(1.0);
        }
    }

    // Corrected solve: the same monotone low-order matrix, sourced by the
    // limited fluxes. Warm-started from the explicitly corrected state.
    let mut b_corr = b_lo;
    let mut x0 = c_lo.clone();
    for (p, &f) in pairs.iter().zip(&fluxes) {
        if f == 0.0 {
            continue;
        }
        let alpha = if f > 0.0 {
            r_plus[p.i].min(r_minus[p.j])
        } else {
            r_minus[p.i].min(r_plus[p.j])
        };
        let load = alpha * f;
        b_corr[p.i] += load;
        b_corr[p.j] -= load;
        x0[p.i] += dt * load / m_lump[p.i];
        x0[p.j] -= dt * load / m_lump[p.j];
    }
    let sol_corr = solve_bicgstab_ilu0(&a_lo, &b_corr, Some(&x0), cfg.tol_rel, cfg.max_iter)?;
    let c_new = sol_corr.x;

    // Budget at the corrected solution, from the unconstrained residual
    // of the low-order operator at Dirichlet rows. The artificial
    // diffusion has zero row and column sums and the limited fluxes
    // cancel over free rows, so the plain operator's budget identity
    // holds at c_new.
    let s_c = s.mul_vec(&c_new);
    let mut art = vec![0.0f64; n_nodes];
    for p in &pairs {
        let diff = p.d * (c_new[p.j] - c_new[p.i]);
        art[p.i] += diff;
        art[p.j] -= diff;
    }
    let mut boundary_supply_rate = 0.0;
    for (i, g) in dirichlet.iter().enumerate() {
        if !g.is_nan() {
            boundary_supply_rate +=
                m_lump[i] * inv_dt * (c_new[i] - c_old[i]) + s_c[i] - art[i];
        }
    }
    let mut outflow_rate = 0.0;
    for iy in 0..=grid.ny {
        let node = grid.node_index(grid.nx, iy);
        outflow_rate += nodal_flux[node] * params.density_of(c_old[node]) * c_new[node];
    }

    Ok(StepCore {
        c: c_new,
        iterations: sol_lo.iterations + sol_hi.iterations + sol_corr.iterations,
        relative_residual: sol_lo
            .relative_residual
            .max(sol_hi.relative_residual)
            .max(sol_corr.relative_residual),
        outflow_rate,
        boundary_supply_rate,
    })
}
