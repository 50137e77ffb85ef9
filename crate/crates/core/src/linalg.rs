//! Dense complex linear algebra used throughout the offline and online stages.
//!
//! Matrices are row-major `Complex64` buffers. Factorizations are the textbook
//! ones (LU with partial pivoting, triangular substitution); the singular value
//! computation is delegated to `nalgebra`.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type ComplexVector = Vec<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<C64>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| C64::new(x, 0.0)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [C64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    /// Leading `k x k` block.
    pub fn leading(&self, k: usize) -> Self {
        Self::from_fn(k, k, |i, j| self[(i, j)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(C64::norm_sqr).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, alpha: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * alpha).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: C64, other: &ComplexMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &ComplexMatrix) -> Self {
        let mut out = self.clone();
        out.axpy(-ONE, other);
        out
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == ZERO {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[C64]) -> ComplexVector {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `self^T x` without forming the transpose.
    pub fn transpose_matvec(&self, x: &[C64]) -> ComplexVector {
        assert_eq!(self.rows, x.len(), "transpose_matvec dimension mismatch");
        let mut out = vec![ZERO; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    /// `self^H x` without forming the adjoint.
    pub fn adjoint_matvec(&self, x: &[C64]) -> ComplexVector {
        assert_eq!(self.rows, x.len(), "adjoint_matvec dimension mismatch");
        let mut out = vec![ZERO; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * xi;
            }
        }
        out
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<C64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn check_finite(v: &[C64]) -> Result<()> {
    match v.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn norm2(v: &[C64]) -> f64 {
    v.iter().map(C64::norm_sqr).sum::<f64>().sqrt()
}

pub fn max_abs(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Sesquilinear product `a^H b`.
pub fn dot_conj(a: &[C64], b: &[C64]) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Bilinear product `a^T b`.
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sub(a: &[C64], b: &[C64]) -> ComplexVector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn real_vector(v: &[f64]) -> ComplexVector {
    v.iter().map(|&x| C64::new(x, 0.0)).collect()
}

/// LU factorization with partial (row) pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<C64>,
    perm: Vec<usize>,
    min_pivot: f64,
    max_pivot: f64,
}

impl Lu {
    /// Fails with `SingularMatrix` when a pivot column is exactly zero or the
    /// elimination produces non-finite values.
    pub fn new(a: &ComplexMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidInput(format!(
                "LU needs a square matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        let n = a.rows();
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot: f64 = 0.0;
        for k in 0..n {
            // Squared magnitudes order the same way and avoid a hypot per entry.
            let (p, psq) = (k..n)
                .map(|i| (i, lu[i * n + k].norm_sqr()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            let pmag = if psq.is_finite() && psq > 0.0 && psq < f64::MAX {
                psq.sqrt()
            } else {
                lu[p * n + k].norm()
            };
            if pmag == 0.0 || !pmag.is_finite() {
                return Err(Error::SingularMatrix {
                    column: k,
                    pivot: pmag,
                });
            }
            min_pivot = min_pivot.min(pmag);
            max_pivot = max_pivot.max(pmag);
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot_inv = lu[k * n + k].inv();
            let (upper, lower) = lu.split_at_mut((k + 1) * n);
            let pivot_row = &upper[k * n + k + 1..k * n + n];
            for row in lower.chunks_exact_mut(n) {
                let factor = row[k] * pivot_inv;
                row[k] = factor;
                if factor != ZERO {
                    for (x, &u) in row[k + 1..].iter_mut().zip(pivot_row) {
                        *x -= factor * u;
                    }
                }
            }
        }
        if n == 0 {
            min_pivot = 0.0;
        }
        Ok(Self {
            n,
            lu,
            perm,
            min_pivot,
            max_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Ratio of smallest to largest pivot magnitude, a cheap conditioning proxy.
    pub fn pivot_ratio(&self) -> f64 {
        if self.max_pivot == 0.0 {
            0.0
        } else {
            self.min_pivot / self.max_pivot
        }
    }

    pub fn solve(&self, b: &[C64]) -> ComplexVector {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x: Vec<C64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: C64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n + i + 1..(i + 1) * n];
            let s: C64 = row.iter().zip(&x[i + 1..]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[C64]) -> ComplexVector {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T y = b, L^T w = y, x = P^T w.
        let mut y = b.to_vec();
        for i in 0..n {
            let s = (0..i).fold(y[i], |s, k| s - self.lu[k * n + i] * y[k]);
            y[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            y[i] = (i + 1..n).fold(y[i], |s, k| s - self.lu[k * n + i] * y[k]);
        }
        let mut x = vec![ZERO; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    pub fn inverse(&self) -> ComplexMatrix {
        let n = self.n;
        let mut inv = ComplexMatrix::zeros(n, n);
        let mut e = vec![ZERO; n];
        for j in 0..n {
            e.iter_mut().for_each(|z| *z = ZERO);
            e[j] = ONE;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

pub fn solve(a: &ComplexMatrix, b: &[C64]) -> Result<ComplexVector> {
    Ok(Lu::new(a)?.solve(b))
}

pub fn inverse(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(Lu::new(a)?.inverse())
}

/// Forward substitution on the leading `k x k` block of a lower-triangular matrix.
/// With `unit = true` the diagonal is taken as one and never read.
pub fn forward_substitute(l: &ComplexMatrix, k: usize, b: &[C64], unit: bool) -> ComplexVector {
    debug_assert!(k <= l.rows() && k <= l.cols() && b.len() >= k);
    let mut x = b[..k].to_vec();
    for i in 0..k {
        let row = l.row(i);
        let s: C64 = row[..i].iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] -= s;
        if !unit {
            x[i] /= row[i];
        }
    }
    x
}

/// Solves `L^T x = b` for the leading `k x k` block of a lower-triangular `L`.
pub fn backward_substitute_transpose(
    l: &ComplexMatrix,
    k: usize,
    b: &[C64],
    unit: bool,
) -> ComplexVector {
    let mut x = b[..k].to_vec();
    for i in (0..k).rev() {
        let mut s = x[i];
        for m in i + 1..k {
            s -= l[(m, i)] * x[m];
        }
        x[i] = if unit { s } else { s / l[(i, i)] };
    }
    x
}

/// Smallest singular value via a dense SVD.
pub fn smallest_singular_value(a: &ComplexMatrix) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    let svd = nalgebra::linalg::SVD::new(a.to_nalgebra(), false, false);
    Ok(svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Row-major complex matrix with split real and imaginary parts, each row
/// stored from its first nonzero and zero-padded to whole lane groups. This is
/// the layout for the repeated online products `R c` with a trapezoidal `R`.
///
/// Products are built from fused multiply-adds in a fixed lane order. An
/// AVX2/FMA path is picked at run time; a fused multiply-add is correctly
/// rounded, so the portable path returns the same bits, only slower.
#[derive(Clone, Debug, Default)]
pub struct SplitRows {
    cols: usize,
    /// Per row: first stored column, offset into `re`/`im`, padded length.
    rows: Vec<(usize, usize, usize)>,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Accumulator lanes of the split dot product.
const LANES: usize = 16;

impl SplitRows {
    pub fn new(m: &ComplexMatrix) -> Self {
        let mut out = Self {
            cols: m.cols(),
            rows: Vec::with_capacity(m.rows()),
            ..Default::default()
        };
        for i in 0..m.rows() {
            let row = m.row(i);
            let start = row.iter().position(|v| *v != ZERO).unwrap_or(row.len());
            let len = (row.len() - start).div_ceil(LANES) * LANES;
            out.rows.push((start, out.re.len(), len));
            out.re.extend(row[start..].iter().map(|v| v.re));
            out.im.extend(row[start..].iter().map(|v| v.im));
            out.re.resize(out.rows[i].1 + len, 0.0);
            out.im.resize(out.rows[i].1 + len, 0.0);
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matvec(&self, x: &[C64]) -> ComplexVector {
        let mut out = Vec::with_capacity(self.rows.len());
        self.for_each_row(x, |re, im| out.push(C64::new(re, im)));
        out
    }

    /// `‖M x‖₂` without forming `M x`.
    pub fn matvec_norm(&self, x: &[C64]) -> f64 {
        let mut sum = 0.0;
        self.for_each_row(x, |re, im| sum += re * re + im * im);
        sum.sqrt()
    }

    fn for_each_row(&self, x: &[C64], mut f: impl FnMut(f64, f64)) {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let pad = |part: fn(&C64) -> f64| {
            let mut v: Vec<f64> = x.iter().map(part).collect();
            v.resize(self.cols + LANES, 0.0);
            v
        };
        let (xr, xi) = (pad(|v| v.re), pad(|v| v.im));
        #[cfg(target_arch = "x86_64")]
        if fma_available() {
            // SAFETY: the required CPU features were detected just above.
            unsafe { self.rows_fma(&xr, &xi, &mut f) };
            return;
        }
        self.rows_with(&xr, &xi, dot_split_portable, &mut f)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    fn rows_fma(&self, xr: &[f64], xi: &[f64], f: &mut impl FnMut(f64, f64)) {
        self.rows_with(xr, xi, |a, b, c, d| dot_split_fma(a, b, c, d), f)
    }

    #[inline(always)]
    fn rows_with(
        &self,
        xr: &[f64],
        xi: &[f64],
        dot: impl Fn(&[f64], &[f64], &[f64], &[f64]) -> (f64, f64),
        f: &mut impl FnMut(f64, f64),
    ) {
        for &(start, off, len) in &self.rows {
            let (re, im) = dot(
                &self.re[off..off + len],
                &self.im[off..off + len],
                &xr[start..start + len],
                &xi[start..start + len],
            );
            f(re, im);
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn fma_available() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

/// `Σ a_k b_k` on split storage; all slices have the same length, a multiple of `LANES`.
fn dot_split_portable(ar: &[f64], ai: &[f64], br: &[f64], bi: &[f64]) -> (f64, f64) {
    let (mut sr, mut si) = ([0.0; LANES], [0.0; LANES]);
    for k in (0..ar.len()).step_by(LANES) {
        for l in 0..LANES {
            let o = k + l;
            sr[l] = ar[o].mul_add(br[o], sr[l]);
            sr[l] = (-ai[o]).mul_add(bi[o], sr[l]);
            si[l] = ar[o].mul_add(bi[o], si[l]);
            si[l] = ai[o].mul_add(br[o], si[l]);
        }
    }
    (reduce_lanes(sr), reduce_lanes(si))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn dot_split_fma(ar: &[f64], ai: &[f64], br: &[f64], bi: &[f64]) -> (f64, f64) {
    use std::arch::x86_64::*;
    const V: usize = LANES / 4;
    let len = ar.len();
    assert!(len.is_multiple_of(LANES) && ai.len() == len && br.len() == len && bi.len() == len);
    let mut acc = [_mm256_setzero_pd(); 2 * V];
    for k in (0..len).step_by(LANES) {
        for h in 0..V {
            let o = k + 4 * h;
            // SAFETY: o + 4 <= len, the length of all four slices.
            let (xr, xi, yr, yi) = unsafe {
                (
                    _mm256_loadu_pd(ar.as_ptr().add(o)),
                    _mm256_loadu_pd(ai.as_ptr().add(o)),
                    _mm256_loadu_pd(br.as_ptr().add(o)),
                    _mm256_loadu_pd(bi.as_ptr().add(o)),
                )
            };
            acc[h] = _mm256_fnmadd_pd(xi, yi, _mm256_fmadd_pd(xr, yr, acc[h]));
            acc[V + h] = _mm256_fmadd_pd(xi, yr, _mm256_fmadd_pd(xr, yi, acc[V + h]));
        }
    }
    let (mut sr, mut si) = ([0.0; LANES], [0.0; LANES]);
    for h in 0..V {
        // SAFETY: 4 * h + 4 <= LANES, the length of both arrays.
        unsafe {
            _mm256_storeu_pd(sr.as_mut_ptr().add(4 * h), acc[h]);
            _mm256_storeu_pd(si.as_mut_ptr().add(4 * h), acc[V + h]);
        }
    }
    (reduce_lanes(sr), reduce_lanes(si))
}

/// Pairwise sum in a fixed order, shared so both paths round identically.
#[inline(always)]
fn reduce_lanes(mut s: [f64; LANES]) -> f64 {
    let mut w = LANES;
    while w > 1 {
        w /= 2;
        for l in 0..w {
            s[l] += s[l + w];
        }
    }
    s[0]
}

/// Column-major complex matrix with split parts, for products `Σ_j x_j a_j`
/// with few columns and many rows. Same fused, run-time dispatched arithmetic
/// as [`SplitRows`].
#[derive(Clone, Debug, Default)]
pub struct SplitColumns {
    rows: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl SplitColumns {
    pub fn new(m: &ComplexMatrix) -> Self {
        let t = m.transpose();
        Self {
            rows: m.rows(),
            re: t.as_slice().iter().map(|v| v.re).collect(),
            im: t.as_slice().iter().map(|v| v.im).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.re.len().checked_div(self.rows).unwrap_or(0)
    }

    pub fn matvec(&self, x: &[C64]) -> ComplexVector {
        assert_eq!(x.len(), self.cols(), "matvec dimension mismatch");
        let (mut or, mut oi) = (vec![0.0; self.rows], vec![0.0; self.rows]);
        #[cfg(target_arch = "x86_64")]
        if fma_available() {
            // SAFETY: the required CPU features were detected just above.
            unsafe { self.accumulate_fma(x, &mut or, &mut oi) };
            return or.into_iter().zip(oi).map(|(r, i)| C64::new(r, i)).collect();
        }
        self.accumulate(x, &mut or, &mut oi);
        or.into_iter().zip(oi).map(|(r, i)| C64::new(r, i)).collect()
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    fn accumulate_fma(&self, x: &[C64], or: &mut [f64], oi: &mut [f64]) {
        self.accumulate(x, or, oi)
    }

    #[inline(always)]
    fn accumulate(&self, x: &[C64], or: &mut [f64], oi: &mut [f64]) {
        let n = self.rows;
        for (j, xj) in x.iter().enumerate() {
            let (cr, ci) = (&self.re[j * n..(j + 1) * n], &self.im[j * n..(j + 1) * n]);
            for k in 0..n {
                or[k] = xj.re.mul_add(cr[k], or[k]);
                or[k] = (-xj.im).mul_add(ci[k], or[k]);
                oi[k] = xj.re.mul_add(ci[k], oi[k]);
                oi[k] = xj.im.mul_add(cr[k], oi[k]);
            }
        }
    }
}
