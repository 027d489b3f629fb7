//! Small dense linear algebra and Gaussian sampling.
//!
//! Every covariance in the crate is at most a few dozen dimensions, so all
//! storage is dense and row-major. Cholesky factorization escalates a jitter
//! ladder before giving up, which lets degenerate (point-mass) priors flow
//! through the same code paths as regular ones.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::ops::{Index, IndexMut};
use thiserror::Error;

/// Diagonal jitter levels tried in order by [`cholesky`].
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive semi-definite (all jitter levels failed)")]
    NotPsd,
    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is singular")]
    Singular,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// `a bᵀ`
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                m[(i, j)] = ai * bj;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `s · a aᵀ` in place.
    pub fn add_outer(&mut self, a: &[f64], s: f64) {
        assert!(self.is_square() && self.rows == a.len());
        for i in 0..a.len() {
            for j in 0..a.len() {
                self[(i, j)] += s * a[i] * a[j];
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn is_diagonal(&self) -> bool {
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j && self[(i, j)] != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Solves `self · X = rhs` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows,
                got: self.cols,
            });
        }
        if rhs.rows != self.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows,
                got: rhs.rows,
            });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut x = rhs.clone();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap_or(col);
            if a[(pivot, col)].abs() <= 1e-300 * scale || !a[(pivot, col)].is_finite() {
                return Err(LinalgError::Singular);
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                }
                for j in 0..x.cols {
                    x.data.swap(pivot * x.cols + j, col * x.cols + j);
                }
            }
            let p = a[(col, col)];
            for i in col + 1..n {
                let f = a[(i, col)] / p;
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[(i, j)] -= f * a[(col, j)];
                }
                for j in 0..x.cols {
                    x[(i, j)] -= f * x[(col, j)];
                }
            }
        }
        for col in (0..n).rev() {
            let p = a[(col, col)];
            for j in 0..x.cols {
                let mut v = x[(col, j)];
                for k in col + 1..n {
                    v -= a[(col, k)] * x[(k, j)];
                }
                x[(col, j)] = v / p;
            }
        }
        Ok(x)
    }

    /// Solves `self · x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let rhs = Matrix {
            rows: b.len(),
            cols: 1,
            data: b.to_vec(),
        };
        Ok(self.solve(&rhs)?.data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A symmetric square matrix intended to be positive semi-definite.
///
/// Symmetry is enforced on construction (near-symmetric input is averaged
/// with its transpose). Semi-definiteness is checked lazily by [`cholesky`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix(Matrix);

impl PsdMatrix {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() || m.rows() == 0 {
            return Err(LinalgError::DimensionMismatch {
                expected: m.rows(),
                got: m.cols(),
            });
        }
        for i in 0..m.rows() {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                let gap = (a - b).abs();
                if gap > SYMMETRY_TOL * 1f64.max(a.abs()).max(b.abs()) {
                    return Err(LinalgError::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    /// Averages `m` with its transpose. Use only where `m` is symmetric up
    /// to rounding by construction.
    pub fn symmetrized(mut m: Matrix) -> Self {
        let n = m.rows();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        PsdMatrix(m)
    }

    pub fn identity(dim: usize) -> Self {
        PsdMatrix(Matrix::identity(dim))
    }

    pub fn zeros(dim: usize) -> Self {
        PsdMatrix(Matrix::zeros(dim, dim))
    }

    /// Diagonal matrix; negative entries are rejected.
    pub fn diagonal(diag: &[f64]) -> Result<Self, LinalgError> {
        if diag.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(LinalgError::NotPsd);
        }
        Ok(PsdMatrix(Matrix::from_diag(diag)))
    }

    pub fn scaled_identity(dim: usize, v: f64) -> Self {
        PsdMatrix(Matrix::identity(dim).scale(v))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn diag(&self) -> Vec<f64> {
        self.0.diag()
    }

    pub fn add(&self, other: &PsdMatrix) -> PsdMatrix {
        PsdMatrix(self.0.add(&other.0))
    }

    pub fn scale(&self, s: f64) -> PsdMatrix {
        PsdMatrix(self.0.scale(s))
    }

    pub fn is_diagonal(&self) -> bool {
        self.0.is_diagonal()
    }
}

impl Index<(usize, usize)> for PsdMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A + jitter · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul(&self.lower.transpose())
    }

    /// Solves `L y = b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= l[(i, k)] * y[k];
            }
            y[i] = v / l[(i, i)];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in i + 1..n {
                v -= l[(k, i)] * x[k];
            }
            x[i] = v / l[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }

    /// Inverse of the factored matrix, re-symmetrized.
    pub fn inverse(&self) -> PsdMatrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        PsdMatrix::symmetrized(inv)
    }

    /// `L z`
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..=i).map(|k| self.lower[(i, k)] * z[k]).sum())
            .collect()
    }
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Some(l)
}

/// Cholesky factorization with an escalating diagonal jitter.
pub fn cholesky(a: &PsdMatrix) -> Result<CholeskyFactor, LinalgError> {
    for &jitter in &JITTER_LADDER {
        if let Some(lower) = try_cholesky(a.matrix(), jitter) {
            return Ok(CholeskyFactor { lower, jitter });
        }
    }
    Err(LinalgError::NotPsd)
}

pub fn solve_spd(a: &PsdMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.dim() != b.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim(),
            got: b.len(),
        });
    }
    Ok(cholesky(a)?.solve(b))
}

pub fn spd_inverse(a: &PsdMatrix) -> Result<PsdMatrix, LinalgError> {
    Ok(cholesky(a)?.inverse())
}

/// Largest eigenvalue of a PSD matrix by power iteration.
pub fn max_eigenvalue(a: &PsdMatrix) -> f64 {
    power_iteration(a.dim(), |v| a.matrix().mul_vec(v))
}

/// Smallest eigenvalue of a PSD matrix by power iteration on the inverse.
/// Returns 0 when the matrix is singular.
pub fn min_eigenvalue(a: &PsdMatrix) -> f64 {
    if a.is_diagonal() {
        return a.diag().into_iter().fold(f64::INFINITY, f64::min).max(0.0);
    }
    match try_cholesky(a.matrix(), 0.0) {
        Some(lower) => {
            let chol = CholeskyFactor { lower, jitter: 0.0 };
            let inv_max = power_iteration(a.dim(), |v| chol.solve(v));
            if inv_max > 0.0 && inv_max.is_finite() {
                1.0 / inv_max
            } else {
                0.0
            }
        }
        None => 0.0,
    }
}

fn power_iteration(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    // Deterministic start vector with no special alignment to coordinate axes.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt()).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = apply(&v);
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (next - lambda).abs() <= 1e-10 * next.abs().max(1e-300) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Seeded random stream. Streams with the same `(seed, stream_id)` produce
/// identical sequences; distinct stream ids are statistically independent.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Draws `mean + L z` with `L` the Cholesky factor of `cov`.
///
/// Diagonal covariances use elementwise square roots so that exactly zero
/// variances produce exactly the mean.
pub fn mvn_sample(mean: &[f64], cov: &PsdMatrix, rng: &mut RngStream) -> Result<Vec<f64>, LinalgError> {
    if mean.len() != cov.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: cov.dim(),
            got: mean.len(),
        });
    }
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.standard_normal()).collect();
    if cov.is_diagonal() {
        let d = cov.diag();
        if d.iter().any(|&v| v < 0.0) {
            return Err(LinalgError::NotPsd);
        }
        return Ok(mean.iter().zip(d).zip(&z).map(|((m, v), z)| m + v.sqrt() * z).collect());
    }
    let chol = cholesky(cov)?;
    Ok(mean.iter().zip(chol.apply(&z)).map(|(m, x)| m + x).collect())
}
