//! Dense least-squares and sample-moment kernel.
//!
//! Everything here is a pure function of its inputs. Matrices are stored
//! row-major; the QR factorization works on a column-major copy because
//! Householder reflections sweep down columns.

use thiserror::Error;

/// Relative pivot tolerance used to flag collinear designs.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("matrix shape {rows}x{cols} does not match {len} entries")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NumericsError::Shape { rows, cols, len: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { row: pos / cols.max(1), col: pos % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix whose columns are the given slices.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, |c| c.len());
        for c in columns {
            if c.len() != rows {
                return Err(NumericsError::LengthMismatch { left: rows, right: c.len() });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for c in columns {
                data.push(c[i]);
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Returns `[1 | self]`.
    pub fn with_intercept(&self) -> Matrix {
        let cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.push(1.0);
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: self.rows, cols, data }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(NumericsError::LengthMismatch { left: self.rows, right: other.rows });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    /// Inserts `column` at position `at`.
    pub fn insert_column(&self, at: usize, column: &[f64]) -> Result<Matrix> {
        if column.len() != self.rows {
            return Err(NumericsError::LengthMismatch { left: self.rows, right: column.len() });
        }
        let cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend_from_slice(&r[..at]);
            data.push(column[i]);
            data.extend_from_slice(&r[at..]);
        }
        Matrix::new(self.rows, cols, data)
    }

    /// Keeps the rows selected by `keep` (in order).
    pub fn select_rows(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &i in keep {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: keep.len(), cols: self.cols, data }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(NumericsError::LengthMismatch { left: self.cols, right: v.len() });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Householder QR of a tall matrix, without pivoting.
#[derive(Debug, Clone)]
pub struct QrFactorization {
    rows: usize,
    cols: usize,
    // Column-major; below-diagonal part holds the Householder vectors.
    qr: Vec<f64>,
    // Householder scalars beta_j = 2 / (v'v).
    betas: Vec<f64>,
    diag: Vec<f64>,
}

impl QrFactorization {
    pub fn new(a: &Matrix) -> Result<Self> {
        let (n, k) = (a.rows, a.cols);
        if n < k {
            return Err(NumericsError::TooFewObservations { needed: k, got: n });
        }
        let mut qr = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                qr[j * n + i] = a.get(i, j);
            }
        }
        let mut betas = vec![0.0; k];
        let mut diag = vec![0.0; k];
        for j in 0..k {
            let (done, rest) = qr.split_at_mut((j + 1) * n);
            let col = &mut done[j * n..];
            let norm = col[j..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                diag[j] = 0.0;
                betas[j] = 0.0;
                continue;
            }
            let alpha = if col[j] > 0.0 { -norm } else { norm };
            col[j] -= alpha;
            let vtv: f64 = col[j..].iter().map(|v| v * v).sum();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            betas[j] = beta;
            diag[j] = alpha;
            for c in 0..(k - j - 1) {
                let other = &mut rest[c * n..(c + 1) * n];
                let s: f64 = col[j..].iter().zip(&other[j..]).map(|(v, o)| v * o).sum();
                let s = s * beta;
                for (o, v) in other[j..].iter_mut().zip(&col[j..]) {
                    *o -= s * v;
                }
            }
        }
        let max_pivot = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if let Some(column) = diag.iter().position(|d| d.abs() <= RANK_TOL * max_pivot) {
            return Err(NumericsError::RankDeficient { column });
        }
        Ok(Self { rows: n, cols: k, qr, betas, diag })
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else {
            self.qr[j * self.rows + i]
        }
    }

    /// Computes Q'b in place.
    fn apply_qt(&self, b: &mut [f64]) {
        let n = self.rows;
        for j in 0..self.cols {
            let v = &self.qr[j * n..(j + 1) * n];
            let mut s = 0.0;
            for i in j..n {
                s += v[i] * b[i];
            }
            s *= self.betas[j];
            for i in j..n {
                b[i] -= s * v[i];
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.rows {
            return Err(NumericsError::LengthMismatch { left: self.rows, right: b.len() });
        }
        let mut qtb = b.to_vec();
        self.apply_qt(&mut qtb);
        let k = self.cols;
        let mut x = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = qtb[i];
            for j in (i + 1)..k {
                s -= self.r(i, j) * x[j];
            }
            x[i] = s / self.diag[i];
        }
        Ok(x)
    }

    /// `(A'A)^{-1} = R^{-1} R^{-T}`.
    pub fn gram_inverse(&self) -> Matrix {
        let k = self.cols;
        // Upper-triangular inverse of R, column by column.
        let mut rinv = Matrix::zeros(k, k);
        for c in 0..k {
            for i in (0..=c).rev() {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for j in (i + 1)..=c {
                    s -= self.r(i, j) * rinv.get(j, c);
                }
                rinv.set(i, c, s / self.diag[i]);
            }
        }
        let mut out = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let s: f64 = (i.max(j)..k).map(|l| rinv.get(i, l) * rinv.get(j, l)).sum();
                out.set(i, j, s);
            }
        }
        out
    }
}

/// Least-squares coefficients minimizing `|A b - y|^2`.
pub fn solve_least_squares(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows != b.len() {
        return Err(NumericsError::LengthMismatch { left: a.rows, right: b.len() });
    }
    QrFactorization::new(a)?.solve(b)
}

/// Residuals of `f` after projecting on the columns of `design`.
///
/// `design` is expected to contain the intercept column.
pub fn residualize(f: &[f64], design: &Matrix) -> Result<Vec<f64>> {
    let beta = solve_least_squares(design, f)?;
    let fitted = design.mul_vec(&beta)?;
    Ok(f.iter().zip(&fitted).map(|(a, b)| a - b).collect())
}

/// Indices of a maximal linearly independent prefix-greedy subset of columns.
///
/// A column is dropped when its residual after Gram-Schmidt against the kept
/// columns has norm below `tol` times its own norm.
pub fn independent_columns(a: &Matrix, tol: f64) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..a.cols {
        let mut v = a.column(j);
        let norm0 = dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        // Two passes of modified Gram-Schmidt for stability.
        for _ in 0..2 {
            for q in &basis {
                let s = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= s * qi;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > tol * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
            keep.push(j);
        }
    }
    keep
}

/// Keeps the listed columns, in order.
pub fn select_columns(a: &Matrix, cols: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(a.rows * cols.len());
    for i in 0..a.rows {
        let r = a.row(i);
        data.extend(cols.iter().map(|&j| r[j]));
    }
    Matrix { rows: a.rows, cols: cols.len(), data }
}

/// HC1 sandwich `n/(n-k) * G X' diag(e^2) X G` with `G = (X'X)^{-1}`.
pub fn sandwich_hc1(design: &Matrix, gram_inv: &Matrix, resid: &[f64]) -> Matrix {
    let (n, k) = (design.rows, design.cols);
    let mut meat = Matrix::zeros(k, k);
    for (i, e) in resid.iter().enumerate() {
        let r = design.row(i);
        let e2 = e * e;
        for p in 0..k {
            let rp = r[p] * e2;
            for q in p..k {
                meat.data[p * k + q] += rp * r[q];
            }
        }
    }
    for p in 0..k {
        for q in 0..p {
            meat.data[p * k + q] = meat.data[q * k + p];
        }
    }
    let scale = n as f64 / (n - k) as f64;
    let left = matmul(gram_inv, &meat);
    let mut out = matmul(&left, gram_inv);
    out.data.iter_mut().for_each(|v| *v *= scale);
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for l in 0..a.cols {
            let av = a.get(i, l);
            for j in 0..b.cols {
                out.data[i * b.cols + j] += av * b.get(l, j);
            }
        }
    }
    out
}

/// Weighted least squares with non-negative weights. Zero-weight rows drop out.
pub fn solve_weighted_least_squares(a: &Matrix, b: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if a.rows != b.len() || w.len() != b.len() {
        return Err(NumericsError::LengthMismatch { left: a.rows, right: w.len() });
    }
    let keep: Vec<usize> = (0..a.rows).filter(|&i| w[i] > 0.0).collect();
    let mut scaled = a.select_rows(&keep);
    let mut rhs = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        let s = w[i].sqrt();
        for j in 0..a.cols {
            let v = scaled.get(r, j) * s;
            scaled.set(r, j, v);
        }
        rhs.push(b[i] * s);
    }
    solve_least_squares(&scaled, &rhs)
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        return f64::NAN;
    }
    a.iter().sum::<f64>() / a.len() as f64
}

/// Unbiased sample covariance.
pub fn sample_cov(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(NumericsError::TooFewObservations { needed: 2, got: n });
    }
    let (ma, mb) = (mean(a), mean(b));
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    Ok(s / (n - 1) as f64)
}

pub fn sample_var(a: &[f64]) -> Result<f64> {
    sample_cov(a, a)
}

pub fn sample_sd(a: &[f64]) -> Result<f64> {
    sample_var(a).map(f64::sqrt)
}

/// Weighted mean with weights summing to one.
pub fn weighted_mean(a: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(w).map(|(x, p)| x * p).sum()
}

/// Population covariance under probability weights `w`.
pub fn weighted_cov(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let (ma, mb) = (weighted_mean(a, w), weighted_mean(b, w));
    a.iter().zip(b).zip(w).map(|((x, y), p)| p * (x - ma) * (y - mb)).sum()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(NumericsError::Shape { rows: a.rows, cols: a.cols, len: a.data.len() });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Logistic function, evaluated without overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal_equations(a: &Matrix, b: &[f64]) -> Vec<f64> {
        // Gaussian elimination on A'A x = A'b, the brute-force oracle.
        let k = a.cols();
        let mut m = vec![vec![0.0; k + 1]; k];
        for i in 0..a.rows() {
            let r = a.row(i);
            for p in 0..k {
                for q in 0..k {
                    m[p][q] += r[p] * r[q];
                }
                m[p][k] += r[p] * b[i];
            }
        }
        for c in 0..k {
            let piv = (c..k).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for q in c..=k {
                        m[r][q] -= f * m[c][q];
                    }
                }
            }
        }
        (0..k).map(|i| m[i][k] / m[i][i]).collect()
    }

    #[test]
    fn identity_system_returns_rhs() {
        let x = solve_least_squares(&Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn small_line_fit() {
        let a = Matrix::new(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        let x = solve_least_squares(&a, &[1.0, 2.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let a = Matrix::from_columns(&[&[1.0, 1.0, 1.0, 1.0], &[1.0, 2.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 5.0]])
            .unwrap();
        assert_eq!(
            solve_least_squares(&a, &[1.0, 0.0, 2.0, 1.0]),
            Err(NumericsError::RankDeficient { column: 2 })
        );
    }

    #[test]
    fn exact_linear_instrument_residualizes_to_zero() {
        let x1 = [0.3, -1.2, 2.0, 0.7, 1.1];
        let f: Vec<f64> = x1.iter().map(|v| 3.0 * v + 2.0).collect();
        let design = Matrix::from_columns(&[&x1]).unwrap().with_intercept();
        let r = residualize(&f, &design).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn product_residual_matches_explicit_projection() {
        // Oracle: solve the 3x3 normal equations by Cramer's rule.
        let x1 = [1.0, 2.0, 0.0, 3.0];
        let x2 = [2.0, 1.0, 1.0, 2.0];
        let f: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a * b).collect();
        let cols = [[1.0; 4], x1, x2];
        let mut g = [[0.0; 3]; 3];
        let mut h = [0.0; 3];
        for p in 0..3 {
            for q in 0..3 {
                g[p][q] = (0..4).map(|i| cols[p][i] * cols[q][i]).sum();
            }
            h[p] = (0..4).map(|i| cols[p][i] * f[i]).sum();
        }
        let det3 = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det3(g);
        let beta: Vec<f64> = (0..3)
            .map(|c| {
                let mut m = g;
                for r in 0..3 {
                    m[r][c] = h[r];
                }
                det3(m) / d
            })
            .collect();
        let expected: Vec<f64> =
            (0..4).map(|i| f[i] - beta[0] - beta[1] * x1[i] - beta[2] * x2[i]).collect();
        let design = Matrix::from_columns(&[&x1, &x2]).unwrap().with_intercept();
        let got = residualize(&f, &design).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn orthogonal_input_is_a_fixed_point() {
        let x1 = [-1.0, 1.0, -1.0, 1.0];
        let f = [1.0, 1.0, -1.0, -1.0];
        let design = Matrix::from_columns(&[&x1]).unwrap().with_intercept();
        let r = residualize(&f, &design).unwrap();
        for (a, b) in r.iter().zip(&f) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn covariance_examples() {
        assert!((sample_cov(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sample_cov(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap(), 0.0);
        assert!((sample_cov(&[0.0, 1.0], &[1.0, 0.0]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(
            sample_cov(&[1.0, 2.0], &[1.0]),
            Err(NumericsError::LengthMismatch { left: 2, right: 1 })
        );
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(NumericsError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn gram_inverse_matches_normal_equations() {
        let a = Matrix::new(4, 2, vec![1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0]).unwrap();
        let qr = QrFactorization::new(&a).unwrap();
        let gi = qr.gram_inverse();
        // (A'A) * gi == I
        let mut ata = [[0.0; 2]; 2];
        for i in 0..4 {
            for p in 0..2 {
                for q in 0..2 {
                    ata[p][q] += a.get(i, p) * a.get(i, q);
                }
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                let v: f64 = (0..2).map(|l| ata[p][l] * gi.get(l, q)).sum();
                assert!((v - if p == q { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_detects_indefinite() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&m), Err(NumericsError::NotPositiveDefinite { pivot: 1 })));
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert!((quantile(&s, 0.5) - 2.5).abs() < 1e-15);
    }

    fn random_design(seed: u64, n: usize, k: usize) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.push(1.0);
            for _ in 1..k {
                data.push(rng.random_range(-2.0..2.0));
            }
        }
        let b = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        (Matrix::new(n, k, data).unwrap(), b)
    }

    proptest! {
        #[test]
        fn qr_agrees_with_normal_equations(seed in any::<u64>()) {
            let (a, b) = random_design(seed, 5, 3);
            prop_assume!(QrFactorization::new(&a).is_ok());
            let qr = solve_least_squares(&a, &b).unwrap();
            let ne = normal_equations(&a, &b);
            // Well-conditioned instances only.
            let gi = QrFactorization::new(&a).unwrap().gram_inverse();
            prop_assume!((0..3).all(|i| gi.get(i, i) < 1e4));
            for (x, y) in qr.iter().zip(&ne) {
                prop_assert!((x - y).abs() < 1e-8, "{} vs {}", x, y);
            }
        }

        #[test]
        fn residualize_is_idempotent_and_orthogonal(seed in any::<u64>()) {
            let (a, f) = random_design(seed, 40, 3);
            let r1 = residualize(&f, &a).unwrap();
            let r2 = residualize(&r1, &a).unwrap();
            for (x, y) in r1.iter().zip(&r2) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            prop_assert!(mean(&r1).abs() < 1e-10);
            for j in 0..a.cols() {
                let col = a.column(j);
                prop_assert!(sample_cov(&r1, &col).unwrap().abs() < 1e-8);
            }
        }
    }
}
