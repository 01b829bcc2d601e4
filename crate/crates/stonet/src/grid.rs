//! Structured rectangular grid of bilinear (Q1) quadrilateral elements.
//!
//! Geometry conventions used throughout the crate:
//!
//! * `x` runs rightward from the left boundary, `y` runs **downward** from the
//!   top boundary, so gravity points along `+y` and the hydrostatic pressure
//!   profile `offset + rho*g*y` increases with `y`.
//! * Nodes are numbered row-major with `x` fastest:
//!   `node = iy * (nx + 1) + ix`.
//! * Elements are numbered row-major with `x` fastest: `e = ey * nx + ex`.
//! * Each element carries a 2x2 Gauss rule. Quadrature points are numbered
//!   `4*e + q` with `q = 2*qy + qx`, where `qx`/`qy` select the `-1/sqrt(3)`
//!   (index 0) or `+1/sqrt(3)` (index 1) abscissa in the reference square.
//!
//! The default grid is 70x50 elements of 0.01 m (the 0.70 m x 0.50 m tank);
//! the desk-scale grid is 35x25 elements of 0.02 m over the same domain.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Gauss abscissa for the 2-point rule on [-1, 1].
pub const GAUSS_ABSCISSA: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Structured grid of `nx` by `ny` rectangular Q1 elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Element count along `x`.
    pub nx: usize,
    /// Element count along `y`.
    pub ny: usize,
    /// Element width (m).
    pub dx: f64,
    /// Element height (m).
    pub dy: f64,
}

impl Grid {
    /// Build a grid, validating the element counts and sizes.
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Config(format!(
                "grid needs at least one element per axis, got {nx}x{ny}"
            )));
        }
        if !(dx > 0.0 && dx.is_finite() && dy > 0.0 && dy.is_finite()) {
            return Err(Error::Config(format!(
                "grid spacing must be positive and finite, got dx={dx}, dy={dy}"
            )));
        }
        Ok(Grid { nx, ny, dx, dy })
    }

    /// The full-scale tank: 70x50 elements of 1 cm.
    pub fn full_scale() -> Self {
        Grid { nx: 70, ny: 50, dx: 0.01, dy: 0.01 }
    }

    /// The desk-scale tank: 35x25 elements of 2 cm (same physical domain).
    pub fn desk_scale() -> Self {
        Grid { nx: 35, ny: 25, dx: 0.02, dy: 0.02 }
    }

    /// Domain width (m).
    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    /// Domain height (m).
    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    /// Number of nodes, `(nx + 1) * (ny + 1)`.
    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    /// Number of elements, `nx * ny`.
    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    /// Number of quadrature points, `4 * nx * ny`.
    pub fn n_quad(&self) -> usize {
        4 * self.n_elements()
    }

    /// Node index from its lattice coordinates.
    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix <= self.nx && iy <= self.ny);
        iy * (self.nx + 1) + ix
    }

    /// Physical position of a node.
    #[inline]
    pub fn node_pos(&self, node: usize) -> (f64, f64) {
        let ix = node % (self.nx + 1);
        let iy = node / (self.nx + 1);
        (ix as f64 * self.dx, iy as f64 * self.dy)
    }

    /// The four node indices of element `e`, counter-clockwise from the
    /// low-x / low-y corner: `[(ix,iy), (ix+1,iy), (ix+1,iy+1), (ix,iy+1)]`.
    #[inline]
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let ex = e % self.nx;
        let ey = e / self.nx;
        [
            self.node_index(ex, ey),
            self.node_index(ex + 1, ey),
            self.node_index(ex + 1, ey + 1),
            self.node_index(ex, ey + 1),
        ]
    }

    /// Element grid coordinates `(ex, ey)` of element `e`.
    #[inline]
    pub fn element_coords(&self, e: usize) -> (usize, usize) {
        (e % self.nx, e / self.nx)
    }

    /// Physical position of global quadrature point `4*e + q`.
    #[inline]
    pub fn quad_pos(&self, qp: usize) -> (f64, f64) {
        let e = qp / 4;
        let q = qp % 4;
        let (ex, ey) = self.element_coords(e);
        let xi = if q.is_multiple_of(2) { -GAUSS_ABSCISSA } else { GAUSS_ABSCISSA };
        let eta = if q / 2 == 0 { -GAUSS_ABSCISSA } else { GAUSS_ABSCISSA };
        (
            (ex as f64 + 0.5 * (1.0 + xi)) * self.dx,
            (ey as f64 + 0.5 * (1.0 + eta)) * self.dy,
        )
    }

    /// Quadrature weight including the Jacobian. Constant on a uniform grid:
    /// each of the four points carries `dx * dy / 4`.
    #[inline]
    pub fn quad_weight(&self) -> f64 {
        0.25 * self.dx * self.dy
    }

    /// Lattice coordinates `(jx, jy)` of a quadrature point on the regular
    /// `2*nx` by `2*ny` quadrature lattice (`x` index fastest-varying within
    /// an element pair).
    #[inline]
    pub fn quad_lattice(&self, qp: usize) -> (usize, usize) {
        let e = qp / 4;
        let q = qp % 4;
        let (ex, ey) = self.element_coords(e);
        (2 * ex + (q % 2), 2 * ey + (q / 2))
    }

    /// Global quadrature index from lattice coordinates (inverse of
    /// [`Grid::quad_lattice`]).
    #[inline]
    pub fn quad_from_lattice(&self, jx: usize, jy: usize) -> usize {
        let (ex, qx) = (jx / 2, jx % 2);
        let (ey, qy) = (jy / 2, jy % 2);
        4 * (ey * self.nx + ex) + 2 * qy + qx
    }

    /// Sorted physical `x` coordinates of the quadrature lattice columns
    /// (length `2*nx`).
    pub fn quad_x_coords(&self) -> Vec<f64> {
        let lo = 0.5 * (1.0 - GAUSS_ABSCISSA);
        let hi = 0.5 * (1.0 + GAUSS_ABSCISSA);
        (0..2 * self.nx)
            .map(|j| ((j / 2) as f64 + if j % 2 == 0 { lo } else { hi }) * self.dx)
            .collect()
    }

    /// Sorted physical `y` coordinates of the quadrature lattice rows
    /// (length `2*ny`).
    pub fn quad_y_coords(&self) -> Vec<f64> {
        let lo = 0.5 * (1.0 - GAUSS_ABSCISSA);
        let hi = 0.5 * (1.0 + GAUSS_ABSCISSA);
        (0..2 * self.ny)
            .map(|j| ((j / 2) as f64 + if j % 2 == 0 { lo } else { hi }) * self.dy)
            .collect()
    }

    /// Q1 shape functions at a reference point `(xi, eta)` in `[-1,1]^2`,
    /// ordered like [`Grid::element_nodes`].
    #[inline]
    pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
        [
            0.25 * (1.0 - xi) * (1.0 - eta),
            0.25 * (1.0 + xi) * (1.0 - eta),
            0.25 * (1.0 + xi) * (1.0 + eta),
            0.25 * (1.0 - xi) * (1.0 + eta),
        ]
    }

    /// Physical-space gradients `(dN/dx, dN/dy)` of the Q1 shape functions at
    /// a reference point.
    #[inline]
    pub fn shape_grad(&self, xi: f64, eta: f64) -> [(f64, f64); 4] {
        let jx = 2.0 / self.dx;
        let jy = 2.0 / self.dy;
        [
            (-0.25 * (1.0 - eta) * jx, -0.25 * (1.0 - xi) * jy),
            (0.25 * (1.0 - eta) * jx, -0.25 * (1.0 + xi) * jy),
            (0.25 * (1.0 + eta) * jx, 0.25 * (1.0 + xi) * jy),
            (-0.25 * (1.0 + eta) * jx, 0.25 * (1.0 - xi) * jy),
        ]
    }

    /// Reference coordinates of local quadrature point `q` in `0..4`.
    #[inline]
    pub fn quad_ref(q: usize) -> (f64, f64) {
        let xi = if q.is_multiple_of(2) { -GAUSS_ABSCISSA } else { GAUSS_ABSCISSA };
        let eta = if q / 2 == 0 { -GAUSS_ABSCISSA } else { GAUSS_ABSCISSA };
        (xi, eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_bookkeeping() {
        let g = Grid::full_scale();
        assert_eq!(g.n_elements(), 3_500);
        assert_eq!(g.n_nodes(), 3_621);
        assert_eq!(g.n_quad(), 14_000);
        assert!((g.lx() - 0.70).abs() < 1e-12);
        assert!((g.ly() - 0.50).abs() < 1e-12);
    }

    #[test]
    fn desk_scale_bookkeeping() {
        let g = Grid::desk_scale();
        assert_eq!(g.n_elements(), 875);
        assert_eq!(g.n_nodes(), 936);
        assert!((g.lx() - 0.70).abs() < 1e-12);
        assert!((g.ly() - 0.50).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::new(0, 5, 0.01, 0.01).is_err());
        assert!(Grid::new(5, 5, 0.0, 0.01).is_err());
        assert!(Grid::new(5, 5, 0.01, f64::NAN).is_err());
    }

    #[test]
    fn shape_functions_partition_unity() {
        let g = Grid::full_scale();
        for q in 0..4 {
            let (xi, eta) = Grid::quad_ref(q);
            let n = Grid::shape(xi, eta);
            assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            let grads = g.shape_grad(xi, eta);
            let (sx, sy) = grads
                .iter()
                .fold((0.0, 0.0), |(ax, ay), (gx, gy)| (ax + gx, ay + gy));
            assert!(sx.abs() < 1e-14 && sy.abs() < 1e-14);
        }
    }

    #[test]
    fn shape_functions_interpolate_linears_exactly() {
        // Q1 must reproduce f(x,y) = a + b*x + c*y exactly, values and
        // gradients alike, at every quadrature point.
        let g = Grid::new(3, 2, 0.013, 0.027).unwrap();
        let (a, b, c) = (0.7, -1.3, 2.9);
        for e in 0..g.n_elements() {
            let nodes = g.element_nodes(e);
            let vals: Vec<f64> = nodes
                .iter()
                .map(|&n| {
                    let (x, y) = g.node_pos(n);
                    a + b * x + c * y
                })
                .collect();
            for q in 0..4 {
                let (xi, eta) = Grid::quad_ref(q);
                let sh = Grid::shape(xi, eta);
                let gr = g.shape_grad(xi, eta);
                let (x, y) = g.quad_pos(4 * e + q);
                let interp: f64 = (0..4).map(|i| sh[i] * vals[i]).sum();
                let dxv: f64 = (0..4).map(|i| gr[i].0 * vals[i]).sum();
                let dyv: f64 = (0..4).map(|i| gr[i].1 * vals[i]).sum();
                assert!((interp - (a + b * x + c * y)).abs() < 1e-12);
                assert!((dxv - b).abs() < 1e-12);
                assert!((dyv - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadrature_integrates_bilinear_exactly() {
        // 2x2 Gauss integrates x*y exactly over the domain.
        let g = Grid::new(4, 3, 0.05, 0.04).unwrap();
        let mut total = 0.0;
        for qp in 0..g.n_quad() {
            let (x, y) = g.quad_pos(qp);
            total += g.quad_weight() * x * y;
        }
        let exact = 0.5 * g.lx().powi(2) * 0.5 * g.ly().powi(2);
        assert!((total - exact).abs() < 1e-14, "{total} vs {exact}");
    }

    #[test]
    fn quad_lattice_round_trip() {
        let g = Grid::new(7, 5, 0.01, 0.01).unwrap();
        let xs = g.quad_x_coords();
        let ys = g.quad_y_coords();
        for qp in 0..g.n_quad() {
            let (jx, jy) = g.quad_lattice(qp);
            assert_eq!(g.quad_from_lattice(jx, jy), qp);
            let (x, y) = g.quad_pos(qp);
            assert!((xs[jx] - x).abs() < 1e-15);
            assert!((ys[jy] - y).abs() < 1e-15);
        }
        // Lattice coordinates are strictly increasing.
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        assert!(ys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn node_indexing_round_trip() {
        let g = Grid::new(7, 5, 0.01, 0.02).unwrap();
        for iy in 0..=g.ny {
            for ix in 0..=g.nx {
                let n = g.node_index(ix, iy);
                let (x, y) = g.node_pos(n);
                assert!((x - ix as f64 * g.dx).abs() < 1e-15);
                assert!((y - iy as f64 * g.dy).abs() < 1e-15);
            }
        }
    }
}
