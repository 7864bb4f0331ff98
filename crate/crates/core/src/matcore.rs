//! Dense row-major matrices and the handful of kernels the adapters need.
//!
//! Weights are stored `d x n` with neurons as columns, so an orthogonal
//! transform acts as a left multiplier and a layer computes `z = Wᵀ x`.
//!
//! Every reduction runs in a fixed, unblocked order: results are bit-stable
//! across runs and platforms with IEEE semantics.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{OftError, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(OftError::InvalidShape {
                rows,
                cols,
                reason: "both dimensions must be at least 1",
            });
        }
        if data.len() != rows * cols {
            return Err(OftError::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(OftError::NonFinite("matrix data"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(OftError::InvalidShape {
                rows: r,
                cols: c,
                reason: "ragged rows",
            });
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Unchecked constructor for kernel outputs whose shape is known.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        Matrix::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::from_raw(rows, cols, data)
    }

    /// Diagonal matrix from a slice.
    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major backing storage.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest entrywise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: T) -> Self {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| v * s).collect())
    }

    /// Multiplies column `j` by `scales[j]`, i.e. `self · diag(scales)`.
    pub fn scale_columns(&self, scales: &[T]) -> Result<Self> {
        if scales.len() != self.cols {
            return Err(OftError::dims("scale_columns", self.cols, scales.len()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, &s) in out.row_mut(r).iter_mut().zip(scales) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// Euclidean norm of every column.
    pub fn column_norms(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a += v * v;
            }
        }
        acc.into_iter().map(Float::sqrt).collect()
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for r in 0..block.rows {
            let dst = (r0 + r) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&self.row(r)[c0..c0 + cols]);
        }
        Matrix::from_raw(rows, cols, data)
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(OftError::dims(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `dst += Σₖ coef[k]·row(k)`, accumulated in `k` order so the result is
/// bit-identical to repeated [`axpy`]; four rows share one pass over `dst`.
fn axpy_rows<'a, T: Scalar>(dst: &mut [T], coef: &[T], row: impl Fn(usize) -> &'a [T]) {
    let n = dst.len();
    let mut k = 0;
    while k + 4 <= coef.len() {
        let [c0, c1, c2, c3] = [coef[k], coef[k + 1], coef[k + 2], coef[k + 3]];
        let (x0, x1, x2, x3) = (&row(k)[..n], &row(k + 1)[..n], &row(k + 2)[..n], &row(k + 3)[..n]);
        for i in 0..n {
            dst[i] = dst[i] + c0 * x0[i] + c1 * x1[i] + c2 * x2[i] + c3 * x3[i];
        }
        k += 4;
    }
    for (j, &c) in coef.iter().enumerate().skip(k) {
        axpy(dst, c, row(j));
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(OftError::dims(
            "matmul",
            format!("b.rows = {}", a.cols),
            format!("b.rows = {}", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        axpy_rows(out.row_mut(i), a.row(i), |k| b.row(k));
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(OftError::dims(
            "matmul_tn",
            format!("b.rows = {}", a.rows),
            format!("b.rows = {}", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    let mut coef = vec![T::zero(); a.rows];
    for i in 0..a.cols {
        for (k, c) in coef.iter_mut().enumerate() {
            *c = a.data[k * a.cols + i];
        }
        axpy_rows(out.row_mut(i), &coef, |k| b.row(k));
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(OftError::dims(
            "matmul_nt",
            format!("b.cols = {}", a.cols),
            format!("b.cols = {}", b.cols),
        ));
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            data.push(ar.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum());
        }
    }
    Ok(Matrix::from_raw(a.rows, b.rows, data))
}

/// Partial-pivoted LU factorization `P·A = L·U` of a square matrix.
///
/// One factorization serves solves with both `A` and `Aᵀ`, plus the
/// determinant.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    /// Unit-lower `L` below the diagonal, `U` on and above it.
    packed: Vec<T>,
    /// Row `i` of `P·A` is row `perm[i]` of `A`.
    perm: Vec<usize>,
    sign: T,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(OftError::dims(
                "lu",
                "square matrix",
                format!("{}x{}", a.rows, a.cols),
            ));
        }
        if !a.is_finite() {
            return Err(OftError::NonFinite("lu input"));
        }
        let n = a.rows;
        let mut m = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        let tiny = a.max_abs() * T::epsilon() * T::from_usize(n).unwrap();

        // Blocked right-looking elimination: a panel of columns is reduced
        // first, then its pivot rows update the trailing rows together.
        const PANEL: usize = 4;
        let mut coef = Vec::with_capacity(PANEL);
        for k0 in (0..n).step_by(PANEL) {
            let k1 = (k0 + PANEL).min(n);
            for k in k0..k1 {
                let mut p = k;
                let mut best = m[k * n + k].abs();
                for r in k + 1..n {
                    let v = m[r * n + k].abs();
                    if v > best {
                        best = v;
                        p = r;
                    }
                }
                if best <= tiny || best == T::zero() {
                    return Err(OftError::Singular {
                        row: k,
                        pivot: best.to_f64_lossy(),
                    });
                }
                if p != k {
                    for c in 0..n {
                        m.swap(k * n + c, p * n + c);
                    }
                    perm.swap(k, p);
                    sign = -sign;
                }
                let pivot = m[k * n + k];
                let (head, tail) = m.split_at_mut((k + 1) * n);
                let pivot_row = &head[k * n + k + 1..k * n + k1];
                for row in tail.chunks_exact_mut(n) {
                    let l = row[k] / pivot;
                    row[k] = l;
                    axpy(&mut row[k + 1..k1], -l, pivot_row);
                }
            }
            if k1 == n {
                break;
            }
            // Pivot rows of the panel, right of it: unit lower solve.
            for j in k0 + 1..k1 {
                let (head, tail) = m.split_at_mut(j * n);
                coef.clear();
                coef.extend(tail[k0..j].iter().map(|&l| -l));
                axpy_rows(&mut tail[k1..n], &coef, |p| &head[(k0 + p) * n + k1..(k0 + p + 1) * n]);
            }
            let (head, tail) = m.split_at_mut(k1 * n);
            for row in tail.chunks_exact_mut(n) {
                coef.clear();
                coef.extend(row[k0..k1].iter().map(|&l| -l));
                axpy_rows(&mut row[k1..], &coef, |p| &head[(k0 + p) * n + k1..(k0 + p + 1) * n]);
            }
        }
        Ok(Lu {
            n,
            packed: m,
            perm,
            sign,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn determinant(&self) -> T {
        (0..self.n).fold(self.sign, |acc, i| acc * self.packed[i * self.n + i])
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.n;
        if b.rows != n {
            return Err(OftError::dims("solve", format!("b.rows = {n}"), b.rows));
        }
        let m = b.cols;
        let mut x = Vec::with_capacity(n * m);
        for &p in &self.perm {
            x.extend_from_slice(b.row(p));
        }
        // L·Y = P·B
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let coef: Vec<T> = self.packed[i * n..i * n + i].iter().map(|&l| -l).collect();
            axpy_rows(&mut rest[..m], &coef, |k| &done[k * m..(k + 1) * m]);
        }
        // U·X = Y
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let row_i = &mut head[i * m..];
            let coef: Vec<T> = self.packed[i * n + i + 1..(i + 1) * n].iter().map(|&u| -u).collect();
            axpy_rows(row_i, &coef, |k| &tail[k * m..(k + 1) * m]);
            let inv = T::one() / self.packed[i * n + i];
            row_i.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Matrix::from_raw(n, m, x))
    }

    /// Solves `Aᵀ·X = B` with the same factorization.
    pub fn solve_transpose(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.n;
        if b.rows != n {
            return Err(OftError::dims(
                "solve_transpose",
                format!("b.rows = {n}"),
                b.rows,
            ));
        }
        let m = b.cols;
        let mut y = b.data.clone();
        // Uᵀ·Y = B, forward.
        for i in 0..n {
            let inv = T::one() / self.packed[i * n + i];
            let (head, tail) = y.split_at_mut((i + 1) * m);
            let row_i = &mut head[i * m..];
            row_i.iter_mut().for_each(|v| *v *= inv);
            for j in i + 1..n {
                let u = self.packed[i * n + j];
                if u != T::zero() {
                    axpy(&mut tail[(j - i - 1) * m..(j - i) * m], -u, row_i);
                }
            }
        }
        // Lᵀ·Z = Y, backward with unit diagonal.
        for i in (0..n).rev() {
            let (head, tail) = y.split_at_mut(i * m);
            let row_i = &tail[..m];
            for j in 0..i {
                let l = self.packed[i * n + j];
                if l != T::zero() {
                    axpy(&mut head[j * m..(j + 1) * m], -l, row_i);
                }
            }
        }
        // X = Pᵀ·Z
        let mut x = vec![T::zero(); n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&y[i * m..(i + 1) * m]);
        }
        Ok(Matrix::from_raw(n, m, x))
    }
}

/// Solves `a·X = b` through a partial-pivoted LU factorization.
pub fn solve<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if b.rows != a.rows {
        return Err(OftError::dims("solve", format!("b.rows = {}", a.rows), b.rows));
    }
    Lu::factor(a)?.solve(b)
}

pub fn determinant<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    match Lu::factor(a) {
        Ok(lu) => Ok(lu.determinant()),
        Err(OftError::Singular { .. }) => Ok(T::zero()),
        Err(e) => Err(e),
    }
}

/// Scales every column to unit Euclidean norm.
pub fn normalize_columns<T: Scalar>(w: &Matrix<T>) -> Result<Matrix<T>> {
    let norms = w.column_norms();
    let mut inv = Vec::with_capacity(norms.len());
    for (column, &norm) in norms.iter().enumerate() {
        if !(norm >= T::ZERO_NORM) {
            return Err(OftError::ZeroNormNeuron {
                column,
                norm: norm.to_f64_lossy(),
            });
        }
        inv.push(T::one() / norm);
    }
    w.scale_columns(&inv)
}

/// `‖MᵀM − I‖_F`, computed from the upper triangle of the Gram matrix.
pub fn orthogonality_residual<T: Scalar>(m: &Matrix<T>) -> T {
    let n = m.cols;
    let mut coef = vec![T::zero(); m.rows];
    let mut g_row = vec![T::zero(); n];
    let mut acc = T::zero();
    for i in 0..n {
        for (k, c) in coef.iter_mut().enumerate() {
            *c = m.data[k * n + i];
        }
        let upper = &mut g_row[i..];
        upper.iter_mut().for_each(|v| *v = T::zero());
        axpy_rows(upper, &coef, |k| &m.data[k * n + i..(k + 1) * n]);
        for (j, &g) in upper.iter().enumerate() {
            let e = if j == 0 { g - T::one() } else { g };
            acc += if j == 0 { e * e } else { (e * e) + (e * e) };
        }
    }
    acc.sqrt()
}
