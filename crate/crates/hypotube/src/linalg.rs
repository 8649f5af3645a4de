//! Small dense linear algebra.
//!
//! Everything in this crate lives in dimension n ≤ ~10, so we keep plain
//! row-major `Vec<f64>` storage and textbook algorithms: Cholesky for
//! symmetric positive definite solves, cyclic Jacobi for symmetric
//! eigenvalues. No pivoted/blocked sophistication is needed at these sizes.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set_col(&mut self, j: usize, col: &[f64]) {
        assert_eq!(col.len(), self.rows);
        for i in 0..self.rows {
            self.data[i * self.cols + j] = col[i];
        }
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    /// `self * v` for a vector `v` of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            out[i] = dot(row, v);
        }
        out
    }

    /// `self^T * v` for a vector `v` of length `rows`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for j in 0..self.cols {
                out[j] += row[j] * v[i];
            }
        }
        out
    }

    /// Gram matrix `self * self^T` (rows × rows, symmetric PSD).
    pub fn gram(&self) -> Mat {
        let n = self.rows;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s = dot(self.row(i), self.row(j));
                *g.at_mut(i, j) = s;
                *g.at_mut(j, i) = s;
            }
        }
        g
    }

    pub fn scale_col(&mut self, j: usize, s: f64) {
        for i in 0..self.rows {
            self.data[i * self.cols + j] *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Cholesky factor of a symmetric positive definite matrix, lower triangular
/// packed row-major. Returns `None` if a pivot drops below `tol` times the
/// largest diagonal entry (numerically not SPD).
pub fn cholesky(a: &Mat, tol: f64) -> Option<Vec<f64>> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let scale = (0..n).map(|i| a.at(i, i)).fold(0.0_f64, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= tol * scale {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the packed Cholesky factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    cholesky_solve_into(l, n, &mut y);
    y
}

/// In-place variant of [`cholesky_solve`] for hot loops.
#[inline]
pub fn cholesky_solve_into(l: &[f64], n: usize, b: &mut [f64]) {
    // forward: L y = b
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Quadratic form `<A^{-1} b, b>` through the Cholesky factor of `A`:
/// solve `L z = b` and return `|z|^2`. Avoids the backward pass.
#[inline]
pub fn cholesky_quad_form(l: &[f64], n: usize, b: &[f64]) -> f64 {
    let mut q = 0.0;
    let mut z = [0.0_f64; 16];
    debug_assert!(n <= 16);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * z[k];
        }
        let zi = s / l[i * n + i];
        z[i] = zi;
        q += zi * zi;
    }
    q
}

/// Eigenvalues (and optionally eigenvectors) of a symmetric matrix by cyclic
/// Jacobi rotations. Eigenvalues are returned sorted ascending.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    sym_eigen(a).0
}

pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        let scale: f64 = (0..n).map(|i| m.at(i, i).abs()).fold(1e-300, f64::max);
        if off.sqrt() <= 1e-15 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    *m.at_mut(k, p) = c * mkp - s * mkq;
                    *m.at_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    *m.at_mut(p, k) = c * mpk - s * mqk;
                    *m.at_mut(q, k) = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut eig: Vec<(f64, usize)> = (0..n).map(|i| (m.at(i, i), i)).collect();
    eig.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let vals: Vec<f64> = eig.iter().map(|e| e.0).collect();
    let mut vecs = Mat::zeros(n, n);
    for (j, (_, src)) in eig.iter().enumerate() {
        for i in 0..n {
            *vecs.at_mut(i, j) = v.at(i, *src);
        }
    }
    (vals, vecs)
}

/// Least-squares / Gauss-Newton style solve of `(A + eps I) x = b` for a
/// symmetric PSD `A`, by Cholesky with a Levenberg shift. Always succeeds for
/// finite input.
pub fn damped_spd_solve(a: &Mat, b: &[f64], eps: f64) -> Vec<f64> {
    let n = a.rows;
    let mut shifted = a.clone();
    let scale: f64 = (0..n).map(|i| a.at(i, i)).fold(0.0, f64::max).max(1e-300);
    let mut shift = eps * scale;
    loop {
        for i in 0..n {
            *shifted.at_mut(i, i) = a.at(i, i) + shift;
        }
        if let Some(l) = cholesky(&shifted, 1e-16) {
            return cholesky_solve(&l, n, b);
        }
        shift = (shift * 10.0).max(1e-12 * scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Mat::from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let l = cholesky(&a, 1e-14).unwrap();
        let x = cholesky_solve(&l, 2, &[1.0, 2.0]);
        // solution of [[4,1],[1,3]] x = [1,2]
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = Mat::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(cholesky(&a, 1e-14).is_none());
    }

    #[test]
    fn jacobi_eigenvalues_match_2x2_closed_form() {
        let a = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let vals = sym_eigenvalues(&a);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes_random_symmetric() {
        // fixed 4x4 symmetric matrix; check A v = lambda v
        let a = Mat::from_rows(&[
            &[3.0, -1.0, 0.5, 0.2],
            &[-1.0, 2.0, 0.3, -0.4],
            &[0.5, 0.3, 1.5, 0.1],
            &[0.2, -0.4, 0.1, 4.0],
        ]);
        let (vals, vecs) = sym_eigen(&a);
        for j in 0..4 {
            let v: Vec<f64> = (0..4).map(|i| vecs.at(i, j)).collect();
            let av = a.mul_vec(&v);
            for i in 0..4 {
                assert!((av[i] - vals[j] * v[i]).abs() < 1e-9, "residual too big");
            }
        }
    }

    #[test]
    fn quad_form_agrees_with_solve() {
        let a = Mat::from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let l = cholesky(&a, 1e-14).unwrap();
        let b = [1.0, 2.0];
        let x = cholesky_solve(&l, 2, &b);
        let q = cholesky_quad_form(&l, 2, &b);
        assert!((q - dot(&x, &b)).abs() < 1e-12);
    }
}
