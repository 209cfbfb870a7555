//! Dense row-major matrices and the Cholesky machinery every kernel and
//! ELBO computation sits on.
//!
//! Products go through `matrixmultiply::dgemm`; the Cholesky factorization and
//! triangular solves are blocked so that almost all of their work is GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BLOCK: usize = 64;
const SOLVE_BLOCK: usize = 64;

/// Attempts made by [`cholesky_with_jitter`] after the initial (jitter-free) one.
pub const JITTER_ATTEMPTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_vec(n, 1, values)
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_vec(1, n, values)
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn try_from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            out.iter_mut()
                .zip(self.row_slice(i))
                .for_each(|(o, v)| *o += v);
        }
        out
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_diagonal(&self) -> f64 {
        let d = self.diagonal();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Lower triangle (diagonal included when `strict` is false); the rest is zeroed.
    pub fn lower_triangle(&self, strict: bool) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let end = if strict { i } else { i + 1 }.min(self.cols);
            out.row_slice_mut(i)[..end].copy_from_slice(&self.row_slice(i)[..end]);
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, true)
    }

    /// Rows `indices` of `self`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row_slice(i));
        }
        Matrix::from_vec(indices.len(), self.cols, data)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != k2 {
        return Err(Error::dims(
            "matmul",
            format!("inner dimensions {k} and {k2} differ"),
        ));
    }
    let mut c = Matrix::zeros(m, n);
    gemm_into(1.0, a, ta, b, tb, 0.0, &mut c);
    Ok(c)
}

/// `c = alpha·op(a)·op(b) + beta·c`; shapes are the caller's responsibility.
pub(crate) fn gemm_into(
    alpha: f64,
    a: &Matrix,
    ta: bool,
    b: &Matrix,
    tb: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = c.cols;
    debug_assert_eq!(c.rows, m);
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c` with the
    // shapes checked above; `c` does not alias the inputs.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
        );
    }
}

fn strides(m: &Matrix, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, m.cols as isize)
    } else {
        (m.cols as isize, 1)
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
}

/// Lower triangle (diagonal included) of `alpha · A Bᵀ` for `A`, `B` both n×k.
/// The strict upper triangle of the result is zero. Costs about half a full
/// product.
pub fn lower_abt(a: &Matrix, b: &Matrix, alpha: f64) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::dims(
            "lower_abt",
            format!("{}x{} against {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, k) = a.shape();
    let mut c = Matrix::zeros(n, n);
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + 2 * BLOCK).min(n);
        // SAFETY: rows [i0, i1) of C, columns [0, i1); A and B read in bounds.
        unsafe {
            raw_gemm(
                i1 - i0,
                k,
                i1,
                alpha,
                a.data.as_ptr().add(i0 * k),
                k as isize,
                1,
                b.data.as_ptr(),
                1,
                k as isize,
                0.0,
                c.data.as_mut_ptr().add(i0 * n),
                n as isize,
            );
        }
        for i in i0..i1 {
            c.data[i * n + i + 1..i * n + i1]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        i0 = i1;
    }
    Ok(c)
}

/// Fills the strict upper triangle from the lower one.
pub fn mirror_lower(c: &mut Matrix) {
    let n = c.rows;
    for i in 0..n {
        for j in 0..i {
            c.data[j * n + i] = c.data[i * n + j];
        }
    }
}

/// Lower-triangular Cholesky factor together with the diagonal jitter that
/// was needed to obtain it.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    pub jitter_used: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let y = solve_triangular(self, b, false)?;
        solve_triangular(self, &y, true)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve(&Matrix::column(b.to_vec()))?.into_vec())
    }

    /// `(L Lᵀ)⁻¹`
    pub fn inverse(&self) -> Result<Matrix> {
        self.solve(&Matrix::identity(self.dim()))
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul_t(&self.lower).expect("square factor")
    }
}

/// Factorizes `A + jitter·I`, escalating the jitter from
/// `base_jitter × mean(diag A)` by ×10 at most [`JITTER_ATTEMPTS`] times.
///
/// The first attempt uses no jitter at all. A zero diagonal mean falls back to
/// an absolute `base_jitter` so that the zero matrix still factorizes.
pub fn cholesky_with_jitter(a: &Matrix, base_jitter: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::dims(
            "cholesky",
            format!("matrix is {}x{}", a.rows, a.cols),
        ));
    }
    let scale = a.mean_diagonal().abs();
    let start = if scale > 0.0 {
        base_jitter * scale
    } else {
        base_jitter.max(f64::MIN_POSITIVE)
    };
    let mut jitter = 0.0;
    let mut next = start;
    for attempt in 0..=JITTER_ATTEMPTS + 1 {
        let mut work = a.clone();
        if jitter > 0.0 {
            work.add_diagonal(jitter);
        }
        if cholesky_in_place(&mut work).is_ok() {
            if attempt > 1 {
                log::debug!("cholesky needed jitter {jitter:e} after {attempt} attempts");
            }
            return Ok(CholeskyFactor {
                lower: work,
                jitter_used: jitter,
            });
        }
        jitter = next;
        next *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter })
}

/// Blocked right-looking Cholesky on the lower triangle; zeroes the upper.
fn cholesky_in_place(a: &mut Matrix) -> std::result::Result<(), usize> {
    let n = a.rows;
    let mut k0 = 0;
    while k0 < n {
        let kb = BLOCK.min(n - k0);
        let kend = k0 + kb;
        // diagonal block
        for j in k0..kend {
            let rj = j * n;
            let mut d = a.data[rj + j];
            for t in k0..j {
                d -= a.data[rj + t] * a.data[rj + t];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let d = d.sqrt();
            a.data[rj + j] = d;
            for i in j + 1..kend {
                let ri = i * n;
                let mut s = a.data[ri + j];
                for t in k0..j {
                    s -= a.data[ri + t] * a.data[rj + t];
                }
                a.data[ri + j] = s / d;
            }
        }
        // panel below the diagonal block: X · L_kkᵀ = A_panel
        for i in kend..n {
            let ri = i * n;
            for j in k0..kend {
                let rj = j * n;
                let mut s = a.data[ri + j];
                for t in k0..j {
                    s -= a.data[ri + t] * a.data[rj + t];
                }
                a.data[ri + j] = s / a.data[rj + j];
            }
        }
        // trailing lower update, one block row at a time
        let mut i0 = kend;
        while i0 < n {
            let ib = BLOCK.min(n - i0);
            let width = i0 + ib - kend;
            let base = a.data.as_mut_ptr();
            // SAFETY: reads rows [i0, i0+ib) and [kend, i0+ib) of columns
            // [k0, kend), writes columns [kend, i0+ib) of rows [i0, i0+ib).
            // The read and written column ranges are disjoint.
            unsafe {
                raw_gemm(
                    ib,
                    kb,
                    width,
                    -1.0,
                    base.add(i0 * n + k0),
                    n as isize,
                    1,
                    base.add(kend * n + k0),
                    1,
                    n as isize,
                    1.0,
                    base.add(i0 * n + kend),
                    n as isize,
                );
            }
            i0 += ib;
        }
        k0 = kend;
    }
    for i in 0..n {
        for j in i + 1..n {
            a.data[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L·X = B`, or `Lᵀ·X = B` when `transpose` is set.
pub fn solve_triangular(l: &CholeskyFactor, b: &Matrix, transpose: bool) -> Result<Matrix> {
    solve_lower(&l.lower, b, transpose)
}

/// Triangular solve against any lower-triangular matrix (upper part ignored).
pub fn solve_lower(l: &Matrix, b: &Matrix, transpose: bool) -> Result<Matrix> {
    if !l.is_square() || l.rows != b.rows {
        return Err(Error::dims(
            "solve_triangular",
            format!(
                "factor {}x{} against rhs {}x{}",
                l.rows, l.cols, b.rows, b.cols
            ),
        ));
    }
    let mut x = b.clone();
    if transpose {
        backward_in_place(l, &mut x);
    } else {
        forward_in_place(l, &mut x);
    }
    Ok(x)
}

fn forward_in_place(l: &Matrix, x: &mut Matrix) {
    let n = l.rows;
    let m = x.cols;
    if m == 0 {
        return;
    }
    let mut i0 = 0;
    while i0 < n {
        let ib = SOLVE_BLOCK.min(n - i0);
        if i0 > 0 {
            let xp = x.data.as_mut_ptr();
            // SAFETY: reads X rows [0, i0), writes X rows [i0, i0+ib).
            unsafe {
                raw_gemm(
                    ib,
                    i0,
                    m,
                    -1.0,
                    l.data.as_ptr().add(i0 * n),
                    n as isize,
                    1,
                    xp,
                    m as isize,
                    1,
                    1.0,
                    xp.add(i0 * m),
                    m as isize,
                );
            }
        }
        apply_block_inverse(l, i0, ib, x, false);
        i0 += ib;
    }
}

fn backward_in_place(l: &Matrix, x: &mut Matrix) {
    let n = l.rows;
    let m = x.cols;
    if m == 0 || n == 0 {
        return;
    }
    let nblocks = n.div_ceil(SOLVE_BLOCK);
    for blk in (0..nblocks).rev() {
        let i0 = blk * SOLVE_BLOCK;
        let ib = SOLVE_BLOCK.min(n - i0);
        let iend = i0 + ib;
        if iend < n {
            let xp = x.data.as_mut_ptr();
            // (Lᵀ)[i0..iend, iend..n] = L[iend..n, i0..iend]ᵀ
            // SAFETY: reads X rows [iend, n), writes X rows [i0, iend).
            unsafe {
                raw_gemm(
                    ib,
                    n - iend,
                    m,
                    -1.0,
                    l.data.as_ptr().add(iend * n + i0),
                    1,
                    n as isize,
                    xp.add(iend * m),
                    m as isize,
                    1,
                    1.0,
                    xp.add(i0 * m),
                    m as isize,
                );
            }
        }
        apply_block_inverse(l, i0, ib, x, true);
    }
}

/// Inverse of the lower-triangular diagonal block `L[i0..i0+ib, i0..i0+ib]`,
/// row-major ib×ib.
fn lower_block_inverse(l: &Matrix, i0: usize, ib: usize) -> Vec<f64> {
    let n = l.rows;
    let mut inv = vec![0.0; ib * ib];
    for c in 0..ib {
        // column c of the inverse by forward substitution
        inv[c * ib + c] = 1.0 / l.data[(i0 + c) * n + i0 + c];
        for i in c + 1..ib {
            let row = &l.data[(i0 + i) * n + i0..(i0 + i) * n + i0 + i];
            let mut acc = 0.0;
            for t in c..i {
                acc += row[t] * inv[t * ib + c];
            }
            inv[i * ib + c] = -acc / l.data[(i0 + i) * n + i0 + i];
        }
    }
    inv
}

/// Replaces rows `[i0, i0+ib)` of `x` by `D⁻¹ x` (or `D⁻ᵀ x`), `D` the diagonal
/// block of `l` there, as one gemm.
fn apply_block_inverse(l: &Matrix, i0: usize, ib: usize, x: &mut Matrix, transpose: bool) {
    let m = x.cols;
    let inv = lower_block_inverse(l, i0, ib);
    let rhs = x.data[i0 * m..(i0 + ib) * m].to_vec();
    let (rs, cs) = if transpose {
        (1, ib as isize)
    } else {
        (ib as isize, 1)
    };
    // SAFETY: `inv` is ib×ib, `rhs` ib×m, and rows [i0, i0+ib) of `x` are in bounds.
    unsafe {
        raw_gemm(
            ib,
            ib,
            m,
            1.0,
            inv.as_ptr(),
            rs,
            cs,
            rhs.as_ptr(),
            m as isize,
            1,
            0.0,
            x.data.as_mut_ptr().add(i0 * m),
            m as isize,
        );
    }
}

/// `log|A|` from its factor: `2 Σ log Lᵢᵢ`.
pub fn log_det(l: &CholeskyFactor) -> f64 {
    2.0 * l.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second matrix. Intended for the small (D×D) matrices of
/// active-subspace analysis.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(Error::dims("symmetric_eigen", "matrix is not square"));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}
