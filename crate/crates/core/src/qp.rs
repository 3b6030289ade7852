//! Dense dual active-set solver for strictly convex quadratic programs
//!
//! ```text
//!     minimize    1/2 x' diag(h) x + c' x
//!     subject to  A x <= b
//! ```
//!
//! with `h > 0` elementwise. The method starts from the unconstrained minimum
//! and adds violated constraints one at a time, keeping the dual feasible, so
//! no phase-1 is needed and primal infeasibility is detected exactly. The
//! factorization `J'N = [R; 0]` of the active constraint normals is kept up to
//! date with Givens rotations.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("constraint set is infeasible")]
    Infeasible,
    #[error("active-set iteration limit reached")]
    MaxIterations,
    #[error("dimension mismatch: {0}")]
    BadDimensions(String),
}

/// Dense row-major constraint matrix.
#[derive(Debug, Clone)]
pub struct RowMatrix {
    n_cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(n_cols: usize) -> Self {
        Self { n_cols, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut m = Self::new(n_cols);
        for r in rows {
            m.push_row(r);
        }
        m
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_cols, "row width mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn n_rows(&self) -> usize {
        if self.n_cols == 0 {
            0
        } else {
            self.data.len() / self.n_cols
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// One multiplier per constraint row, nonzero only on the active set.
    pub multipliers: Vec<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub objective: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Givens pair (c, s) with [c s; -s c] * [lo; hi] = [hypot, 0].
fn givens(lo: f64, hi: f64) -> (f64, f64, f64) {
    let r = lo.hypot(hi);
    (lo / r, hi / r, r)
}

/// Solve `R r = rhs` for packed upper-triangular `R`.
fn back_substitute(r_packed: &[f64], rhs: &mut [f64]) {
    let q = rhs.len();
    for i in (0..q).rev() {
        let mut acc = rhs[i];
        for j in i + 1..q {
            acc -= r_packed[j * (j + 1) / 2 + i] * rhs[j];
        }
        rhs[i] = acc / r_packed[i * (i + 1) / 2 + i];
    }
}

/// Rotate columns `j` and `j+1` of the column-major `n x n` matrix.
fn rotate_columns(mat: &mut [f64], n: usize, j: usize, c: f64, s: f64) {
    let (left, right) = mat.split_at_mut((j + 1) * n);
    let left = &mut left[j * n..];
    let right = &mut right[..n];
    for (a, b) in left.iter_mut().zip(right.iter_mut()) {
        let a0 = *a;
        let b0 = *b;
        *a = c * a0 + s * b0;
        *b = -s * a0 + c * b0;
    }
}

/// Reduce `d[q+1..]` to zero with Givens rotations (applied to J as well) and
/// append `d[..=q]` as the new column of packed R.
fn qr_insert(j_mat: &mut [f64], r_packed: &mut Vec<f64>, mut d: Vec<f64>, q: usize, n: usize) {
    for i in (q + 1..n).rev() {
        if d[i] == 0.0 {
            continue;
        }
        if d[i - 1] == 0.0 {
            // Swap instead of rotating.
            d[i - 1] = d[i];
            d[i] = 0.0;
            rotate_columns(j_mat, n, i - 1, 0.0, 1.0);
            continue;
        }
        let (c, s, r) = givens(d[i - 1], d[i]);
        d[i - 1] = r;
        d[i] = 0.0;
        rotate_columns(j_mat, n, i - 1, c, s);
    }
    r_packed.extend_from_slice(&d[..=q]);
}

/// Remove active column `k` from packed R, restoring triangularity with
/// Givens rotations mirrored onto J.
fn qr_delete(j_mat: &mut [f64], r_packed: &mut Vec<f64>, k: usize, q: usize, n: usize) {
    // Unpack R without column k into column-major dense work (q rows).
    let mut w = vec![0.0; q * (q - 1)];
    let mut wc = 0;
    for j in 0..q {
        if j == k {
            continue;
        }
        for row in 0..=j {
            w[wc * q + row] = r_packed[j * (j + 1) / 2 + row];
        }
        wc += 1;
    }
    // Columns k.. now carry one entry below the diagonal; chase them out.
    for j in k..q - 1 {
        let hi = w[j * q + j + 1];
        if hi != 0.0 {
            let lo = w[j * q + j];
            let (c, s, r) = givens(lo, hi);
            for col in j..q - 1 {
                let a0 = w[col * q + j];
                let a1 = w[col * q + j + 1];
                w[col * q + j] = c * a0 + s * a1;
                w[col * q + j + 1] = -s * a0 + c * a1;
            }
            w[j * q + j] = r;
            w[j * q + j + 1] = 0.0;
            rotate_columns(j_mat, n, j, c, s);
        }
    }
    r_packed.clear();
    for j in 0..q - 1 {
        for row in 0..=j {
            r_packed.push(w[j * q + row]);
        }
    }
}

/// Solve the QP. `feas_tol` is the normalized feasibility tolerance used to
/// decide whether a constraint is violated (and therefore how tightly the
/// returned point satisfies A x <= b).
pub fn solve_qp_diag(
    h_diag: &[f64],
    c: &[f64],
    a: &RowMatrix,
    b: &[f64],
    feas_tol: f64,
) -> Result<QpSolution, QpError> {
    let n = c.len();
    let m = a.n_rows();
    if h_diag.len() != n {
        return Err(QpError::BadDimensions(format!(
            "hessian has {} entries for {} variables",
            h_diag.len(),
            n
        )));
    }
    if a.n_cols() != n && m > 0 {
        return Err(QpError::BadDimensions(format!(
            "constraints have {} columns for {} variables",
            a.n_cols(),
            n
        )));
    }
    if b.len() != m {
        return Err(QpError::BadDimensions(format!("{} bounds for {} rows", b.len(), m)));
    }
    assert!(h_diag.iter().all(|&h| h > 0.0), "hessian must be positive definite");

    // J = L^-T for G = diag(h); columns stored contiguously.
    let mut j_mat = vec![0.0; n * n];
    for j in 0..n {
        j_mat[j * n + j] = 1.0 / h_diag[j].sqrt();
    }
    let mut x: Vec<f64> = c.iter().zip(h_diag).map(|(&ci, &hi)| -ci / hi).collect();
    let mut r_packed: Vec<f64> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut multipliers: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let norms: Vec<f64> = (0..m).map(|i| dot(a.row(i), a.row(i)).sqrt().max(1e-300)).collect();

    let max_outer = 100 + 20 * (m + n);
    let mut iterations = 0;
    'outer: loop {
        iterations += 1;
        if iterations > max_outer {
            return Err(QpError::MaxIterations);
        }
        // Most violated constraint, scaled by the row norm.
        let mut entering = None;
        let mut worst = -feas_tol;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let s = (b[i] - dot(a.row(i), &x)) / norms[i];
            if s < worst {
                worst = s;
                entering = Some(i);
            }
        }
        let Some(p) = entering else {
            break;
        };
        // Work in the `n = -a, n.x >= -b` orientation.
        let np: Vec<f64> = a.row(p).iter().map(|v| -v).collect();
        let mut slack = b[p] - dot(a.row(p), &x); // negative while violated
        let mut u_entering = 0.0;

        loop {
            let q = active.len();
            let d: Vec<f64> = (0..n).map(|j| dot(&j_mat[j * n..(j + 1) * n], &np)).collect();
            let mut z = vec![0.0; n];
            for j in q..n {
                let col = &j_mat[j * n..(j + 1) * n];
                for (zi, ci) in z.iter_mut().zip(col) {
                    *zi += d[j] * ci;
                }
            }
            let mut r_vec = d[..q].to_vec();
            back_substitute(&r_packed, &mut r_vec);

            let mut t1 = f64::INFINITY;
            let mut leaving = None;
            for (k, (&uk, &rk)) in multipliers.iter().zip(&r_vec).enumerate() {
                if rk > 0.0 {
                    let t = uk / rk;
                    if t < t1 {
                        t1 = t;
                        leaving = Some(k);
                    }
                }
            }
            let ztnp = dot(&z, &np);
            let d_total: f64 = d.iter().map(|v| v * v).sum();
            let z_usable = ztnp > 1e-22 * d_total.max(f64::MIN_POSITIVE);
            let t2 = if z_usable { -slack / ztnp } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }

            if !z_usable {
                // Constraint normal lies in the span of the active set: take
                // a dual step and drop the blocking constraint.
                for (uk, rk) in multipliers.iter_mut().zip(&r_vec) {
                    *uk -= t * rk;
                }
                u_entering += t;
                let k = leaving.expect("finite t1 implies a leaving index");
                let idx = active.remove(k);
                is_active[idx] = false;
                multipliers.remove(k);
                qr_delete(&mut j_mat, &mut r_packed, k, q, n);
                continue;
            }

            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += t * zi;
            }
            for (uk, rk) in multipliers.iter_mut().zip(&r_vec) {
                *uk -= t * rk;
            }
            u_entering += t;

            if t2 <= t1 {
                active.push(p);
                is_active[p] = true;
                multipliers.push(u_entering);
                qr_insert(&mut j_mat, &mut r_packed, d, q, n);
                continue 'outer;
            }
            let k = leaving.expect("t1 finite");
            let idx = active.remove(k);
            is_active[idx] = false;
            multipliers.remove(k);
            qr_delete(&mut j_mat, &mut r_packed, k, q, n);
            slack = b[p] - dot(a.row(p), &x);
        }
    }

    let mut lagr = vec![0.0; m];
    for (&i, &ui) in active.iter().zip(&multipliers) {
        lagr[i] = ui;
    }
    let objective = 0.5 * x.iter().zip(h_diag).map(|(&xi, &hi)| hi * xi * xi).sum::<f64>()
        + dot(c, &x);
    Ok(QpSolution { x, multipliers: lagr, active, iterations, objective })
}

/// KKT residuals of a candidate solution for the `Ax <= b` problem.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Evaluate KKT residuals independently of the solver's internal state.
pub fn kkt_residuals(
    h_diag: &[f64],
    c: &[f64],
    a: &RowMatrix,
    b: &[f64],
    x: &[f64],
    multipliers: &[f64],
) -> KktResiduals {
    let n = c.len();
    let mut grad: Vec<f64> = (0..n).map(|i| h_diag[i] * x[i] + c[i]).collect();
    let mut res = KktResiduals::default();
    for i in 0..a.n_rows() {
        let row = a.row(i);
        let lam = multipliers[i];
        for (g, &aij) in grad.iter_mut().zip(row) {
            *g += lam * aij;
        }
        let slack = dot(row, x) - b[i];
        res.primal = res.primal.max(slack);
        res.dual = res.dual.max(-lam);
        res.complementarity = res.complementarity.max((lam * slack).abs());
    }
    res.stationarity = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn unconstrained_minimum() {
        let sol = solve_qp_diag(
            &[2.0, 4.0],
            &[2.0, -8.0],
            &RowMatrix::new(2),
            &[],
            1e-12,
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 2.0, epsilon = 1e-12);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn one_dimensional_projection() {
        // min (x-1)^2 s.t. 0.1 x <= 0.05, 0 <= x <= 1  ->  x = 0.5
        let a = RowMatrix::from_rows(&[vec![0.1], vec![-1.0], vec![1.0]]);
        let sol = solve_qp_diag(&[1.0], &[-1.0], &a, &[0.05, 0.0, 1.0], 1e-12).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.multipliers[0], 5.0, epsilon = 1e-8);
    }

    #[test]
    fn projection_onto_halfspace() {
        // Project (1, 1) onto x + y <= 1: solution (0.5, 0.5).
        let a = RowMatrix::from_rows(&[vec![1.0, 1.0]]);
        let sol = solve_qp_diag(&ones(2), &[-1.0, -1.0], &a, &[1.0], 1e-12).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn box_corner_with_coupling() {
        // Project (2, -2) onto [0,1]^2 with x - y <= 0.5. Clamping alone
        // gives (1, 0), which violates the coupling row; the optimum sits at
        // (0.5, 0) where the coupling row and the y lower bound are active
        // with multipliers 3 and 1.
        let a = RowMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
            vec![1.0, -1.0],
        ]);
        let sol = solve_qp_diag(
            &ones(2),
            &[-2.0, 2.0],
            &a,
            &[1.0, 0.0, 1.0, 0.0, 0.5],
            1e-12,
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.multipliers[4], 1.5, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.multipliers[3], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_is_detected() {
        let a = RowMatrix::from_rows(&[vec![1.0], vec![-1.0]]);
        let err = solve_qp_diag(&[1.0], &[0.0], &a, &[-1.0, -1.0], 1e-12).unwrap_err();
        assert_eq!(err, QpError::Infeasible);
    }

    #[test]
    fn duplicate_rows_are_harmless() {
        let a = RowMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let sol = solve_qp_diag(&ones(2), &[-3.0, 0.0], &a, &[1.0, 1.0], 1e-12).unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
    }

    /// Literal dense grid search over a 2-D box at the given step; shares no
    /// code with the solver.
    pub fn dense_grid_2d(
        c: &[f64],
        a: &RowMatrix,
        b: &[f64],
        lo: &[f64],
        hi: &[f64],
        step: f64,
    ) -> Option<Vec<f64>> {
        assert_eq!(c.len(), 2);
        let feasible =
            |x: &[f64]| -> bool { (0..a.n_rows()).all(|i| dot(a.row(i), x) <= b[i] + 1e-9) };
        let objective =
            |x: &[f64]| -> f64 { x.iter().zip(c).map(|(&xi, &ci)| 0.5 * xi * xi + ci * xi).sum() };
        let counts = [
            ((hi[0] - lo[0]) / step).round() as usize,
            ((hi[1] - lo[1]) / step).round() as usize,
        ];
        let mut best: Option<(f64, Vec<f64>)> = None;
        for i in 0..=counts[0] {
            for j in 0..=counts[1] {
                let x = vec![lo[0] + i as f64 * step, lo[1] + j as f64 * step];
                if feasible(&x) {
                    let f = objective(&x);
                    if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                        best = Some((f, x));
                    }
                }
            }
        }
        best.map(|(_, x)| x)
    }

    /// Exact reference by exhaustive enumeration of candidate active sets:
    /// for each subset of rows, solve the equality-constrained projection and
    /// keep the best KKT-consistent candidate.
    pub fn enumeration_reference(
        h_diag: &[f64],
        c: &[f64],
        a: &RowMatrix,
        b: &[f64],
    ) -> Option<Vec<f64>> {
        use nalgebra::{DMatrix, DVector};
        let n = c.len();
        let m = a.n_rows();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut consider = |subset: &[usize]| {
            let k = subset.len();
            let x = if k == 0 {
                (0..n).map(|i| -c[i] / h_diag[i]).collect::<Vec<f64>>()
            } else {
                // Solve A_S H^-1 A_S' mu = -(A_S H^-1 c + b_S), then
                // x = -H^-1 (c + A_S' mu).
                let mut gram = DMatrix::zeros(k, k);
                let mut rhs = DVector::zeros(k);
                for (i, &si) in subset.iter().enumerate() {
                    for (j, &sj) in subset.iter().enumerate() {
                        gram[(i, j)] = (0..n)
                            .map(|d| a.row(si)[d] * a.row(sj)[d] / h_diag[d])
                            .sum::<f64>();
                    }
                    rhs[i] = -((0..n).map(|d| a.row(si)[d] * c[d] / h_diag[d]).sum::<f64>()
                        + b[si]);
                }
                let Some(mu) = gram.clone().lu().solve(&rhs) else {
                    return;
                };
                if mu.iter().any(|&v| v < -1e-9) {
                    return; // dual-infeasible active set
                }
                (0..n)
                    .map(|d| {
                        let mut acc = c[d];
                        for (i, &si) in subset.iter().enumerate() {
                            acc += a.row(si)[d] * mu[i];
                        }
                        -acc / h_diag[d]
                    })
                    .collect()
            };
            for i in 0..m {
                if dot(a.row(i), &x) > b[i] + 1e-8 {
                    return; // primal-infeasible candidate
                }
            }
            let f: f64 =
                (0..n).map(|d| 0.5 * h_diag[d] * x[d] * x[d] + c[d] * x[d]).sum();
            if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        };
        let mut subset = Vec::new();
        fn recurse(
            start: usize,
            m: usize,
            n: usize,
            subset: &mut Vec<usize>,
            consider: &mut dyn FnMut(&[usize]),
        ) {
            consider(subset);
            if subset.len() == n {
                return;
            }
            for i in start..m {
                subset.push(i);
                recurse(i + 1, m, n, subset, consider);
                subset.pop();
            }
        }
        recurse(0, m, n, &mut subset, &mut consider);
        best.map(|(_, x)| x)
    }

    #[test]
    fn random_instances_match_enumeration_and_kkt() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for trial in 0..60 {
            let n = rng.gen_range(2..=4usize);
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let c: Vec<f64> = target.iter().map(|t| -t).collect();
            let mut rows = Vec::new();
            let mut b = Vec::new();
            for d in 0..n {
                let mut up = vec![0.0; n];
                up[d] = 1.0;
                rows.push(up.clone());
                b.push(1.0);
                up[d] = -1.0;
                rows.push(up);
                b.push(1.0);
            }
            for _ in 0..rng.gen_range(1..=3) {
                let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // Keep the origin feasible so the polytope is nonempty.
                rows.push(row);
                b.push(rng.gen_range(0.05..0.8));
            }
            let a = RowMatrix::from_rows(&rows);
            let sol = solve_qp_diag(&ones(n), &c, &a, &b, 1e-12)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            let res = kkt_residuals(&ones(n), &c, &a, &b, &sol.x, &sol.multipliers);
            assert!(res.max() <= 1e-8, "trial {trial}: kkt {res:?}");
            let reference = enumeration_reference(&ones(n), &c, &a, &b).expect("feasible");
            for d in 0..n {
                assert!(
                    (sol.x[d] - reference[d]).abs() <= 1e-7,
                    "trial {trial} coord {d}: qp {} vs enumeration {}",
                    sol.x[d],
                    reference[d]
                );
            }
        }
    }

    #[test]
    fn two_dimensional_instances_beat_dense_grid() {
        // A 1e-3 grid cannot pin coordinates along a diagonal active
        // constraint (the objective is locally quadratic there), but the
        // solver must never lose to any feasible grid point, and must agree
        // with the grid's objective to the grid's own resolution.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let objective =
            |c: &[f64], x: &[f64]| x.iter().zip(c).map(|(&xi, &ci)| 0.5 * xi * xi + ci * xi).sum::<f64>();
        for trial in 0..5 {
            let target = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let c = [-target[0], -target[1]];
            let rows = vec![
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, -1.0],
                vec![rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
            ];
            let b = vec![1.0, 1.0, 1.0, 1.0, rng.gen_range(0.1..0.8)];
            let a = RowMatrix::from_rows(&rows);
            let sol = solve_qp_diag(&ones(2), &c, &a, &b, 1e-12).unwrap();
            let reference =
                dense_grid_2d(&c, &a, &b, &[-1.0, -1.0], &[1.0, 1.0], 1e-3).unwrap();
            let f_qp = objective(&c, &sol.x);
            let f_grid = objective(&c, &reference);
            assert!(f_qp <= f_grid + 1e-12, "trial {trial}: qp {f_qp} worse than grid {f_grid}");
            assert!(f_grid - f_qp <= 5e-3, "trial {trial}: grid gap {}", f_grid - f_qp);
        }
    }

    #[test]
    fn many_constraints_force_add_and_drop_cycles() {
        // Shrinking nested halfspaces force earlier active constraints to be
        // dropped as tighter ones enter.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 3;
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..-2.0)).collect();
            let mut rows = Vec::new();
            let mut b = Vec::new();
            for i in 0..12 {
                let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
                row[i % n] += 1.0;
                rows.push(row);
                b.push(1.0 - i as f64 * 0.06);
            }
            let a = RowMatrix::from_rows(&rows);
            let sol = solve_qp_diag(&ones(n), &c, &a, &b, 1e-12).unwrap();
            let res = kkt_residuals(&ones(n), &c, &a, &b, &sol.x, &sol.multipliers);
            assert!(res.max() <= 1e-8, "kkt {res:?}");
        }
    }
}
