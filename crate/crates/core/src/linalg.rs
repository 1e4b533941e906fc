//! Dense matrix kernels for Gram assembly and kernel regression.
//!
//! Everything here is plain row-major `f64`. The sizes in play are batch
//! Gram matrices (a few hundred at most), so there are no sparse or blocked
//! paths; the priorities are a fixed, deterministic summation order and
//! inner loops the compiler can vectorize.

use std::fmt;

/// Row-major dense matrix. Entries are validated finite on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    NotSquare { rows: usize, cols: usize },
    NotSymmetric { max_asymmetry: f64 },
    NotPositiveDefinite { largest_nugget: f64 },
    DimensionMismatch { context: &'static str },
    NonFinite { context: &'static str },
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::NotSquare { rows, cols } => {
                write!(f, "matrix is not square ({rows}x{cols})")
            }
            LinalgError::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (max |A - A^T| = {max_asymmetry:e})")
            }
            LinalgError::NotPositiveDefinite { largest_nugget } => write!(
                f,
                "factorization failed at the largest ladder nugget {largest_nugget:e}"
            ),
            LinalgError::DimensionMismatch { context } => {
                write!(f, "dimension mismatch in {context}")
            }
            LinalgError::NonFinite { context } => {
                write!(f, "non-finite entries in {context}")
            }
        }
    }
}

impl std::error::Error for LinalgError {}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                context: "Matrix::from_vec",
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LinalgError::NonFinite {
                context: "Matrix::from_vec",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Matrix {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data).expect("finite literals")
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_acc(
            &mut out.data,
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// (A + A^T) / 2.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }
}

/// out += A * B for row-major slices, shapes (m x k) * (k x n).
///
/// i-k-j loop order: the inner loop is an AXPY over a contiguous output row,
/// so it vectorizes without changing the per-element accumulation order
/// (k ascending), keeping results bitwise reproducible.
pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Diagonal-inflation ladder tried in order during factorization.
///
/// Multipliers are relative to `mean(|diag(A)|)`; RBF Gram matrices have unit
/// diagonal, so the ladder is effectively absolute there.
#[derive(Debug, Clone, PartialEq)]
pub struct NuggetPolicy {
    pub ladder: Vec<f64>,
}

impl Default for NuggetPolicy {
    fn default() -> Self {
        NuggetPolicy {
            ladder: vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-3],
        }
    }
}

impl NuggetPolicy {
    pub fn exact() -> Self {
        NuggetPolicy { ladder: vec![0.0] }
    }

    /// Ladder floored at 1e-4 for gradient-based kernel learning.
    ///
    /// The default ladder guarantees factorization, not conditioning: a Gram
    /// matrix with near-duplicate rows can factor at a zero nugget while its
    /// inverse (and so the loss gradients through the solve adjoint) grows
    /// without bound. Flooring the ladder bounds the inverse's norm, which is
    /// what keeps kernel-learning steps stable.
    pub fn training() -> Self {
        NuggetPolicy::starting_at(1e-4)
    }

    pub fn starting_at(eps: f64) -> Self {
        let mut ladder: Vec<f64> = NuggetPolicy::default()
            .ladder
            .into_iter()
            .filter(|&e| e >= eps)
            .collect();
        if ladder.first() != Some(&eps) {
            ladder.insert(0, eps);
        }
        NuggetPolicy { ladder }
    }
}

/// Lower-triangular Cholesky factor of `A + nugget_used * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Matrix,
    nugget_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn nugget_used(&self) -> f64 {
        self.nugget_used
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }
}

const SYMMETRY_RTOL: f64 = 1e-10;
// Pivots at or below this (relative to the diagonal scale) are treated as a
// failed factorization so the ladder escalates instead of producing a factor
// dominated by roundoff.
const PIVOT_RTOL: f64 = 1e-12;

/// Cholesky factorization with a deterministic nugget escalation ladder.
///
/// The input is checked symmetric to relative tolerance 1e-10 and then
/// symmetrized; the smallest ladder nugget for which all pivots stay positive
/// wins.
pub fn cholesky(a: &Matrix, policy: &NuggetPolicy) -> Result<CholeskyFactor, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let scale_abs = a.max_abs();
    let asym = {
        let mut m = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                m = m.max((a.get(i, j) - a.get(j, i)).abs());
            }
        }
        m
    };
    if asym > SYMMETRY_RTOL * scale_abs.max(1.0) {
        return Err(LinalgError::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let sym = a.symmetrized();
    let diag_scale = if n == 0 {
        1.0
    } else {
        let s: f64 = (0..n).map(|i| sym.get(i, i).abs()).sum();
        let mean = s / n as f64;
        if mean > 0.0 {
            mean
        } else {
            1.0
        }
    };

    let mut largest = 0.0;
    for &rel in &policy.ladder {
        let nugget = rel * diag_scale;
        largest = nugget;
        if let Some(lower) = try_factor(&sym, nugget, PIVOT_RTOL * diag_scale) {
            return Ok(CholeskyFactor {
                lower,
                nugget_used: nugget,
            });
        }
    }
    Err(LinalgError::NotPositiveDefinite {
        largest_nugget: largest,
    })
}

fn try_factor(sym: &Matrix, nugget: f64, pivot_floor: f64) -> Option<Matrix> {
    let n = sym.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        // Diagonal pivot.
        let mut s = sym.get(j, j) + nugget;
        for k in 0..j {
            let v = l.data[j * n + k];
            s -= v * v;
        }
        if !(s > pivot_floor) {
            return None;
        }
        let pivot = s.sqrt();
        l.data[j * n + j] = pivot;
        // Column below the pivot. Row slices of L keep the dot products
        // contiguous in row-major storage.
        for i in (j + 1)..n {
            let mut s = sym.get(i, j);
            let (ri, rj) = (&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
            for (a, b) in ri.iter().zip(rj) {
                s -= a * b;
            }
            l.data[i * n + j] = s / pivot;
        }
    }
    Some(l)
}

/// Solves (A + nugget*I) V = B given the factor of the left-hand side.
pub fn solve(factor: &CholeskyFactor, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = factor.dim();
    if b.rows != n {
        return Err(LinalgError::DimensionMismatch { context: "solve" });
    }
    let m = b.cols;
    let l = &factor.lower.data;
    // Forward substitution L Z = B, processed row-wise so each step is an
    // AXPY across the m columns.
    let mut z = b.data.clone();
    for i in 0..n {
        let (done, rest) = z.split_at_mut(i * m);
        let zi = &mut rest[..m];
        for k in 0..i {
            let lik = l[i * n + k];
            if lik == 0.0 {
                continue;
            }
            let zk = &done[k * m..(k + 1) * m];
            for (a, b) in zi.iter_mut().zip(zk) {
                *a -= lik * b;
            }
        }
        let inv = 1.0 / l[i * n + i];
        for a in zi.iter_mut() {
            *a *= inv;
        }
    }
    // Back substitution L^T V = Z.
    let mut v = z;
    for i in (0..n).rev() {
        let (head, tail) = v.split_at_mut((i + 1) * m);
        let vi = &mut head[i * m..];
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            if lki == 0.0 {
                continue;
            }
            let vk = &tail[(k - i - 1) * m..(k - i) * m];
            for (a, b) in vi.iter_mut().zip(vk) {
                *a -= lki * b;
            }
        }
        let inv = 1.0 / l[i * n + i];
        for a in vi.iter_mut() {
            *a *= inv;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: v,
    })
}

/// Reverse-mode rule for V = A^{-1} B with A constrained symmetric.
///
/// Returns (Abar, Bbar) where Bbar = A^{-1} Vbar (A is symmetric) and
/// Abar = -sym(Bbar V^T).
pub fn solve_adjoint(
    factor: &CholeskyFactor,
    v: &Matrix,
    vbar: &Matrix,
) -> Result<(Matrix, Matrix), LinalgError> {
    if v.rows != factor.dim() || v.rows != vbar.rows || v.cols != vbar.cols {
        return Err(LinalgError::DimensionMismatch {
            context: "solve_adjoint",
        });
    }
    let bbar = solve(factor, vbar)?;
    let m = bbar.matmul(&v.transpose());
    let abar = m.symmetrized().scale(-1.0);
    Ok((abar, bbar))
}
