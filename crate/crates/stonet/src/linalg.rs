//! Sparse and dense linear algebra for the finite-element solvers.
//!
//! The pressure system is symmetric positive definite and is solved with
//! Jacobi-preconditioned conjugate gradients; the transport system is
//! nonsymmetric (advection plus streamline stabilization) and is solved
//! with ILU(0)-preconditioned BiCGSTAB. A dense LU fallback covers tiny
//! systems and serves as an independent cross-check in tests.
//!
//! All solvers report relative residuals against `||b||_2` and return a
//! [`crate::error::Error::SolverStalled`] carrying the residual history
//! when they fail to converge, so callers can distinguish a slow solve
//! from a breakdown.

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Triplet accumulator for building a [`Csr`]; duplicate entries sum.
#[derive(Debug, Clone)]
pub struct CsrBuilder {
    n: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl CsrBuilder {
    /// New builder for an `n x n` matrix with room for `cap` triplets.
    pub fn with_capacity(n: usize, cap: usize) -> Self {
        CsrBuilder { n, triplets: Vec::with_capacity(cap) }
    }

    /// Accumulate `a[i][j] += v`.
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        self.triplets.push((i, j, v));
    }

    /// Sort, merge duplicates, and freeze into CSR form.
    pub fn build(mut self) -> Csr {
        self.triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; self.n + 1];
        let mut indices = Vec::with_capacity(self.triplets.len());
        let mut values = Vec::with_capacity(self.triplets.len());
        let mut prev = None;
        for (i, j, v) in self.triplets {
            if prev == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                prev = Some((i, j));
            }
        }
        for i in 0..self.n {
            indptr[i + 1] += indptr[i];
        }
        Csr { n: self.n, indptr, indices, values }
    }
}

impl Csr {
    /// Matrix dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `y = A x` into an existing buffer.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                acc += v * x[j];
            }
            *yi = acc;
        }
    }

    /// Entry `a[i][j]`, zero if the position is not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// Diagonal entries (zero where a row has no diagonal).
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for (i, di) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            if let Ok(p) = cols.binary_search(&i) {
                *di = vals[p];
            }
        }
        d
    }

    /// Dense copy (row-major), for the LU fallback and for tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                a[i * self.n + j] = v;
            }
        }
        a
    }
}

/// Converged solution of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterativeSolution {
    /// Solution vector.
    pub x: Vec<f64>,
    /// Iterations consumed.
    pub iterations: usize,
    /// Final relative residual `||b - A x|| / ||b||`.
    pub relative_residual: f64,
}

/// Euclidean inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn stalled(context: &str, iterations: usize, history: Vec<f64>, tolerance: f64) -> Error {
    Error::SolverStalled {
        context: context.to_string(),
        iterations,
        final_residual: history.last().copied().unwrap_or(f64::NAN),
        tolerance,
        history,
    }
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive
/// definite systems. Converges when `||b - A x||_2 <= tol_rel ||b||_2`.
/// `x0` seeds the iteration (zeros when `None`).
pub fn solve_cg_jacobi(
    a: &Csr,
    b: &[f64],
    x0: Option<&[f64]>,
    tol_rel: f64,
    max_iter: usize,
) -> Result<IterativeSolution> {
    let n = a.n();
    if b.len() != n {
        return Err(Error::Shape(format!("rhs length {} vs matrix dim {n}", b.len())));
    }
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(IterativeSolution { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let inv_diag: Vec<f64> = {
        let d = a.diagonal();
        if d.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Numeric("CG preconditioner: zero or non-finite diagonal".into()));
        }
        d.iter().map(|v| 1.0 / v).collect()
    };

    let mut x = match x0 {
        Some(g) => g.to_vec(),
        None => vec![0.0; n],
    };
    let mut r = b.to_vec();
    if x0.is_some() {
        let ax = a.mul_vec(&x);
        for i in 0..n {
            r[i] -= ax[i];
        }
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    let mut ap = vec![0.0; n];

    for it in 0..=max_iter {
        let rel = norm2(&r) / b_norm;
        history.push(rel);
        if rel <= tol_rel {
            return Ok(IterativeSolution { x, iterations: it, relative_residual: rel });
        }
        if it == max_iter {
            break;
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        // Also trips on NaN, which `pap <= 0.0` alone would let through.
        if pap <= 0.0 || pap.is_nan() {
            return Err(stalled("CG: non-positive curvature (matrix not SPD?)", it, history, tol_rel));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_new;
    }
    Err(stalled("CG: iteration limit", max_iter, history, tol_rel))
}

/// ILU(0) factorization: incomplete LU restricted to the sparsity pattern
/// of `a`. `L` has unit diagonal; both factors are stored in place of the
/// original values.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    /// Factor `a`. Fails on a structurally or numerically zero pivot.
    pub fn factor(a: &Csr) -> Result<Self> {
        let n = a.n();
        let indptr = a.indptr.clone();
        let indices = a.indices.clone();
        let mut values = a.values.clone();
        let mut diag_pos = vec![usize::MAX; n];
        for i in 0..n {
            let (lo, hi) = (indptr[i], indptr[i + 1]);
            if let Ok(p) = indices[lo..hi].binary_search(&i) {
                diag_pos[i] = lo + p;
            } else {
                return Err(Error::Numeric(format!("ILU(0): row {i} has no diagonal entry")));
            }
        }

        // IKJ variant with a scatter workspace: position of column j within
        // the current row, or usize::MAX.
        let mut pos_of_col = vec![usize::MAX; n];
        for i in 0..n {
            let (lo, hi) = (indptr[i], indptr[i + 1]);
            for p in lo..hi {
                pos_of_col[indices[p]] = p;
            }
            for p in lo..hi {
                let k = indices[p];
                if k >= i {
                    break;
                }
                let pivot = values[diag_pos[k]];
                if pivot == 0.0 || !pivot.is_finite() {
                    return Err(Error::Numeric(format!("ILU(0): zero pivot at row {k}")));
                }
                let factor = values[p] / pivot;
                values[p] = factor;
                for q in (diag_pos[k] + 1)..indptr[k + 1] {
                    let j = indices[q];
                    let target = pos_of_col[j];
                    if target != usize::MAX {
                        values[target] -= factor * values[q];
                    }
                }
            }
            for p in lo..hi {
                pos_of_col[indices[p]] = usize::MAX;
            }
            if values[diag_pos[i]] == 0.0 {
                return Err(Error::Numeric(format!("ILU(0): zero pivot at row {i}")));
            }
        }
        Ok(Ilu0 { n, indptr, indices, values, diag_pos })
    }

    /// Solve `L U x = r`.
    pub fn apply(&self, r: &[f64], x: &mut [f64]) {
        debug_assert_eq!(r.len(), self.n);
        // Forward: L y = r (unit diagonal, strictly lower entries).
        for i in 0..self.n {
            let mut acc = r[i];
            for p in self.indptr[i]..self.diag_pos[i] {
                acc -= self.values[p] * x[self.indices[p]];
            }
            x[i] = acc;
        }
        // Backward: U x = y.
        for i in (0..self.n).rev() {
            let mut acc = x[i];
            for p in (self.diag_pos[i] + 1)..self.indptr[i + 1] {
                acc -= self.values[p] * x[self.indices[p]];
            }
            x[i] = acc / self.values[self.diag_pos[i]];
        }
    }
}

/// ILU(0)-preconditioned BiCGSTAB for nonsymmetric systems. Converges when
/// `||b - A x||_2 <= tol_rel ||b||_2`.
pub fn solve_bicgstab_ilu0(
    a: &Csr,
    b: &[f64],
    x0: Option<&[f64]>,
    tol_rel: f64,
    max_iter: usize,
) -> Result<IterativeSolution> {
    let n = a.n();
    if b.len() != n {
        return Err(Error::Shape(format!("rhs length {} vs matrix dim {n}", b.len())));
    }
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(IterativeSolution { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let ilu = Ilu0::factor(a)?;

    let mut x = match x0 {
        Some(g) => g.to_vec(),
        None => vec![0.0; n],
    };
    let ax = a.mul_vec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let mut rhat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut history = Vec::new();
    let mut restarted = false;

    for it in 0..=max_iter {
        let rel = norm2(&r) / b_norm;
        history.push(rel);
        if rel <= tol_rel {
            return Ok(IterativeSolution { x, iterations: it, relative_residual: rel });
        }
        if it == max_iter {
            break;
        }
        let rho_new = dot(&rhat, &r);
        if rho_new.abs() < 1e-300 * b_norm * b_norm || !rho_new.is_finite() {
            // Shadow residual became orthogonal; restart it once from the
            // current residual before giving up.
            if restarted {
                return Err(stalled("BiCGSTAB: rho breakdown", it, history, tol_rel));
            }
            restarted = true;
            rhat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|vi| *vi = 0.0);
            p.iter_mut().for_each(|pi| *pi = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        ilu.apply(&p, &mut phat);
        a.mul_vec_into(&phat, &mut v);
        let rhat_v = dot(&rhat, &v);
        if rhat_v == 0.0 || !rhat_v.is_finite() {
            return Err(stalled("BiCGSTAB: alpha breakdown", it, history, tol_rel));
        }
        alpha = rho_new / rhat_v;
        // s = r - alpha v (reuse r).
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if norm2(&r) / b_norm <= tol_rel {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            let final_rel = norm2(&r) / b_norm;
            history.push(final_rel);
            return Ok(IterativeSolution { x, iterations: it + 1, relative_residual: final_rel });
        }
        ilu.apply(&r, &mut shat);
        a.mul_vec_into(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 || !tt.is_finite() {
            return Err(stalled("BiCGSTAB: omega breakdown", it, history, tol_rel));
        }
        omega = dot(&t, &r) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] -= omega * t[i];
        }
        rho = rho_new;
    }
    Err(stalled("BiCGSTAB: iteration limit", max_iter, history, tol_rel))
}

/// Dense LU solve with partial pivoting (row-major `a`, overwritten).
/// Fallback for small systems and independent oracle for the iterative
/// solvers in tests.
pub fn solve_dense(a: &mut [f64], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::Shape(format!("dense matrix {} vs rhs {n}", a.len())));
    }
    for col in 0..n {
        // Partial pivot.
        let mut pivot_row = col;
        let mut pivot_mag = a[col * n + col].abs();
        for row in (col + 1)..n {
            let mag = a[row * n + col].abs();
            if mag > pivot_mag {
                pivot_row = row;
                pivot_mag = mag;
            }
        }
        if pivot_mag < 1e-300 {
            return Err(Error::Numeric(format!("dense LU: singular at column {col}")));
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for j in (col + 1)..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in (col + 1)..n {
            acc -= a[col * n + j] * b[j];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, StreamRng};

    /// 1-D Dirichlet Laplacian: tridiagonal (-1, 2, -1), SPD.
    fn laplacian_1d(n: usize) -> Csr {
        let mut b = CsrBuilder::with_capacity(n, 3 * n);
        for i in 0..n {
            b.push(i, i, 2.0);
            if i > 0 {
                b.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                b.push(i, i + 1, -1.0);
            }
        }
        b.build()
    }

    /// Upwinded 1-D advection-diffusion: nonsymmetric, diagonally dominant.
    fn advection_1d(n: usize, peclet: f64) -> Csr {
        let mut b = CsrBuilder::with_capacity(n, 3 * n);
        for i in 0..n {
            b.push(i, i, 2.0 + peclet);
            if i > 0 {
                b.push(i, i - 1, -1.0 - peclet);
            }
            if i + 1 < n {
                b.push(i, i + 1, -1.0);
            }
        }
        b.build()
    }

    fn random_rhs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::from_parts(&[seed, tag("rhs")]);
        (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    #[test]
    fn builder_sums_duplicates_and_sorts_columns() {
        let mut b = CsrBuilder::with_capacity(3, 8);
        b.push(1, 2, 5.0);
        b.push(0, 0, 1.0);
        b.push(1, 0, 3.0);
        b.push(1, 2, -1.0);
        b.push(2, 2, 7.0);
        let a = b.build();
        assert_eq!(a.n(), 3);
        assert_eq!(a.nnz(), 4);
        let (cols, vals) = a.row(1);
        assert_eq!(cols, &[0, 2]);
        assert_eq!(vals, &[3.0, 4.0]);
        let (cols0, vals0) = a.row(0);
        assert_eq!((cols0, vals0), (&[0usize][..], &[1.0][..]));
        assert_eq!(a.get(1, 2), 4.0);
        assert_eq!(a.get(1, 0), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.get(2, 0), 0.0);
    }

    #[test]
    fn builder_handles_empty_rows() {
        let mut b = CsrBuilder::with_capacity(4, 2);
        b.push(0, 0, 1.0);
        b.push(3, 3, 2.0);
        let a = b.build();
        assert_eq!(a.row(1), (&[][..], &[][..]));
        assert_eq!(a.row(2), (&[][..], &[][..]));
        let y = a.mul_vec(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(y, vec![1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_vec_hand_value() {
        let mut b = CsrBuilder::with_capacity(2, 4);
        b.push(0, 0, 2.0);
        b.push(0, 1, -1.0);
        b.push(1, 0, 0.5);
        b.push(1, 1, 3.0);
        let a = b.build();
        let y = a.mul_vec(&[4.0, 2.0]);
        assert_eq!(y, vec![6.0, 8.0]);
        assert_eq!(a.diagonal(), vec![2.0, 3.0]);
    }

    #[test]
    fn cg_matches_dense_on_laplacian() {
        let n = 120;
        let a = laplacian_1d(n);
        let b = random_rhs(n, 1);
        let sol = solve_cg_jacobi(&a, &b, None, 1e-12, 10 * n).unwrap();
        let mut dense = a.to_dense();
        let mut x_ref = b.clone();
        solve_dense(&mut dense, &mut x_ref).unwrap();
        for (i, (got, want)) in sol.x.iter().zip(&x_ref).enumerate() {
            assert!((got - want).abs() < 1e-8, "entry {i}");
        }
        assert!(sol.relative_residual <= 1e-12);
    }

    #[test]
    fn cg_honors_warm_start() {
        let n = 80;
        let a = laplacian_1d(n);
        let b = random_rhs(n, 2);
        let cold = solve_cg_jacobi(&a, &b, None, 1e-11, 10 * n).unwrap();
        // Warm-starting from the solution converges immediately.
        let warm = solve_cg_jacobi(&a, &b, Some(&cold.x), 1e-11, 10 * n).unwrap();
        assert_eq!(warm.iterations, 0);
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let a = laplacian_1d(10);
        let sol = solve_cg_jacobi(&a, &[0.0; 10], None, 1e-12, 100).unwrap();
        assert!(sol.x.iter().all(|&v| v == 0.0));
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn cg_reports_stall_with_history() {
        let n = 200;
        let a = laplacian_1d(n);
        let b = random_rhs(n, 3);
        let err = solve_cg_jacobi(&a, &b, None, 1e-12, 3).unwrap_err();
        match err {
            Error::SolverStalled { iterations, history, tolerance, .. } => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 4);
                assert_eq!(tolerance, 1e-12);
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn cg_rejects_indefinite_matrix() {
        let mut b = CsrBuilder::with_capacity(2, 2);
        b.push(0, 0, 1.0);
        b.push(1, 1, -1.0);
        let a = b.build();
        let err = solve_cg_jacobi(&a, &[1.0, 1.0], None, 1e-12, 10).unwrap_err();
        assert!(matches!(err, Error::SolverStalled { .. }));
    }

    #[test]
    fn ilu0_is_exact_on_tridiagonal() {
        // Tridiagonal patterns have no fill-in, so ILU(0) equals full LU and
        // the preconditioned solve converges essentially immediately.
        let n = 60;
        let a = advection_1d(n, 0.8);
        let b = random_rhs(n, 4);
        let sol = solve_bicgstab_ilu0(&a, &b, None, 1e-12, 50).unwrap();
        assert!(sol.iterations <= 3, "took {} iterations", sol.iterations);
        let r: Vec<f64> = a
            .mul_vec(&sol.x)
            .iter()
            .zip(&b)
            .map(|(axi, bi)| bi - axi)
            .collect();
        assert!(norm2(&r) / norm2(&b) <= 1e-12);
    }

    #[test]
    fn bicgstab_matches_dense_on_nonsymmetric_system() {
        let n = 150;
        let a = advection_1d(n, 2.5);
        let b = random_rhs(n, 5);
        let sol = solve_bicgstab_ilu0(&a, &b, None, 1e-12, 10 * n).unwrap();
        let mut dense = a.to_dense();
        let mut x_ref = b.clone();
        solve_dense(&mut dense, &mut x_ref).unwrap();
        for (i, (got, want)) in sol.x.iter().zip(&x_ref).enumerate() {
            assert!((got - want).abs() < 1e-9, "entry {i}");
        }
    }

    #[test]
    fn bicgstab_solves_2d_like_block_system() {
        // Pentadiagonal pattern (1-D index over a 2-D stencil) with an
        // asymmetric drift, closer to the transport matrices.
        let (nx, ny) = (12, 9);
        let n = nx * ny;
        let mut bld = CsrBuilder::with_capacity(n, 5 * n);
        for iy in 0..ny {
            for ix in 0..nx {
                let i = iy * nx + ix;
                bld.push(i, i, 4.8);
                if ix > 0 {
                    bld.push(i, i - 1, -1.4);
                }
                if ix + 1 < nx {
                    bld.push(i, i + 1, -0.6);
                }
                if iy > 0 {
                    bld.push(i, i - nx, -1.2);
                }
                if iy + 1 < ny {
                    bld.push(i, i + nx, -0.8);
                }
            }
        }
        let a = bld.build();
        let b = random_rhs(n, 6);
        let sol = solve_bicgstab_ilu0(&a, &b, None, 1e-12, 500).unwrap();
        let mut dense = a.to_dense();
        let mut x_ref = b.clone();
        solve_dense(&mut dense, &mut x_ref).unwrap();
        for (i, (got, want)) in sol.x.iter().zip(&x_ref).enumerate() {
            assert!((got - want).abs() < 1e-9, "entry {i}");
        }
    }

    #[test]
    fn bicgstab_zero_rhs_returns_zero() {
        let a = advection_1d(10, 1.0);
        let sol = solve_bicgstab_ilu0(&a, &[0.0; 10], None, 1e-12, 100).unwrap();
        assert!(sol.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ilu0_rejects_missing_diagonal() {
        let mut b = CsrBuilder::with_capacity(2, 2);
        b.push(0, 1, 1.0);
        b.push(1, 0, 1.0);
        let a = b.build();
        assert!(Ilu0::factor(&a).is_err());
    }

    #[test]
    fn dense_lu_hand_value_and_pivoting() {
        // [[0, 2], [1, 1]] x = [4, 3] requires a row swap (zero first pivot)
        // and solves to x = (1, 2).
        let mut a = vec![0.0, 2.0, 1.0, 1.0];
        let mut b = vec![4.0, 3.0];
        solve_dense(&mut a, &mut b).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-14);
        assert!((b[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn dense_lu_detects_singularity() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense(&mut a, &mut b).is_err());
    }

    #[test]
    fn dense_lu_random_round_trip() {
        let n = 40;
        let mut rng = StreamRng::from_parts(&[77, tag("dense")]);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = rng.uniform_in(-1.0, 1.0);
            }
            a[i * n + i] += n as f64; // keep it comfortably nonsingular
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[i] = (0..n).map(|j| a[i * n + j] * x_true[j]).sum();
        }
        let mut a_work = a.clone();
        solve_dense(&mut a_work, &mut b).unwrap();
        for i in 0..n {
            assert!((b[i] - x_true[i]).abs() < 1e-11, "entry {i}");
        }
    }
}
