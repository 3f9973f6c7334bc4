//! Dense row-major matrices and the deterministic GEMM kernel behind them.
//!
//! Every product accumulates each output entry from 0.0 by fused
//! multiply-add over the inner index in ascending order, exactly as the
//! textbook triple loop written with `mul_add` does. Blocking, packing and
//! the SIMD kernels only change *when* each term is added, never the order,
//! so results are bitwise identical to that loop on every platform.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    /// 1 x n row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values }
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no row data anyway
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        // 32x32 tiles keep both sides cache-resident
        const T: usize = 32;
        for r0 in (0..self.rows).step_by(T) {
            for c0 in (0..self.cols).step_by(T) {
                for r in r0..(r0 + T).min(self.rows) {
                    for c in c0..(c0 + T).min(self.cols) {
                        out.data[c * self.rows + r] = self.data[r * self.cols + c];
                    }
                }
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            Operand { data: &self.data, row_stride: self.cols, col_stride: 1 },
            Operand { data: &other.data, row_stride: other.cols, col_stride: 1 },
            self.rows,
            other.cols,
            self.cols,
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "transposed matmul of ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            Operand { data: &self.data, row_stride: 1, col_stride: self.cols },
            Operand { data: &other.data, row_stride: other.cols, col_stride: 1 },
            self.cols,
            other.cols,
            self.rows,
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul by transpose of {}x{} and ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            Operand { data: &self.data, row_stride: self.cols, col_stride: 1 },
            Operand { data: &other.data, row_stride: 1, col_stride: other.cols },
            self.rows,
            other.rows,
            self.cols,
            &mut out.data,
        );
        Ok(out)
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(format!(
                "bias of length {} against {}x{}",
                bias.len(),
                self.rows,
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.map_inplace(|x| x * factor);
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// New matrix holding the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape(format!("hstack of {rows}-row and {}-row matrices", bad.rows)));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::shape(format!("vstack of {cols}-column and {}-column matrices", bad.cols)));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// First index of the maximum; NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Glorot/Xavier uniform initialisation: entries ~ U(±√(6/(fan_in+fan_out))).
pub fn glorot_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::shape(format!("glorot_init with fan_in={fan_in}, fan_out={fan_out}")));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
    Ok(Matrix { rows: fan_in, cols: fan_out, data })
}

// ---------------------------------------------------------------------------
// GEMM
//
// Each output entry is accumulated as `acc = fma(a_ik, b_kj, acc)` for
// k = 0, 1, 2, ... starting from 0.0. Fused multiply-add is correctly rounded
// by IEEE 754, so the vector kernels below and the scalar fallback produce
// the same bits on every platform.

const MR: usize = 12;
const NR: usize = 16;
const KC: usize = 192;
const MC_BLOCKS: usize = 2;

#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

type Kernel = fn(&[f64], &[f64], &mut [[f64; NR]; MR]);

fn select_kernel() -> Kernel {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            return x86::kernel_avx512;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            return x86::kernel_avx2;
        }
    }
    kernel_scalar
}

/// `c (m x n, row-major) = a (m x k) · b (k x n)`; `c` must start zeroed.
fn gemm(a: Operand<'_>, b: Operand<'_>, m: usize, n: usize, k: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let kernel = select_kernel();
    let m_blocks = m.div_ceil(MR);
    let n_panels = n.div_ceil(NR);
    let mut a_pack = vec![0.0; m_blocks * MR * KC.min(k)];
    let mut b_pack = vec![0.0; n_panels * NR * KC.min(k)];

    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);

        for ib in 0..m_blocks {
            let strip = &mut a_pack[ib * MR * kc..(ib + 1) * MR * kc];
            pack(a, ib * MR, m, MR, k0, kc, strip, Side::Rows);
        }
        for jp in 0..n_panels {
            let panel = &mut b_pack[jp * NR * kc..(jp + 1) * NR * kc];
            pack(b, jp * NR, n, NR, k0, kc, panel, Side::Cols);
        }

        for ib0 in (0..m_blocks).step_by(MC_BLOCKS) {
        for jp in 0..n_panels {
            let panel = &b_pack[jp * NR * kc..(jp + 1) * NR * kc];
            let j0 = jp * NR;
            let ncols = NR.min(n - j0);
            for ib in ib0..(ib0 + MC_BLOCKS).min(m_blocks) {
                let strip = &a_pack[ib * MR * kc..(ib + 1) * MR * kc];
                let i0 = ib * MR;
                let nrows = MR.min(m - i0);
                let mut acc = [[0.0f64; NR]; MR];
                if k0 > 0 {
                    for r in 0..nrows {
                        acc[r][..ncols].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + ncols]);
                    }
                }
                kernel(strip, panel, &mut acc);
                for r in 0..nrows {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + ncols].copy_from_slice(&acc[r][..ncols]);
                }
            }
        }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    /// Pack rows `first..first+width` of an (outer x k) operand (the A side).
    Rows,
    /// Pack columns `first..first+width` of a (k x outer) operand (the B side).
    Cols,
}

/// Copies a `width`-wide slab of the operand, inner indices `k0..k0+kc`, into
/// `out` laid out `[kk][lane]`, zero-filling lanes past `limit`.
#[allow(clippy::too_many_arguments)]
fn pack(op: Operand<'_>, first: usize, limit: usize, width: usize, k0: usize, kc: usize, out: &mut [f64], side: Side) {
    // stride between consecutive lanes, and between consecutive k
    let (lane_stride, k_stride) = match side {
        Side::Rows => (op.row_stride, op.col_stride),
        Side::Cols => (op.col_stride, op.row_stride),
    };
    let lanes = width.min(limit - first);
    if lanes < width {
        out.fill(0.0);
    }
    let base = |lane: usize, kk: usize| (first + lane) * lane_stride + (k0 + kk) * k_stride;
    if lane_stride == 1 {
        for kk in 0..kc {
            let src = &op.data[base(0, kk)..base(0, kk) + lanes];
            out[kk * width..kk * width + lanes].copy_from_slice(src);
        }
    } else if k_stride == 1 {
        for lane in 0..lanes {
            let src = &op.data[base(lane, 0)..base(lane, 0) + kc];
            for (kk, &v) in src.iter().enumerate() {
                out[kk * width + lane] = v;
            }
        }
    } else {
        for kk in 0..kc {
            for lane in 0..lanes {
                out[kk * width + lane] = op.data[base(lane, kk)];
            }
        }
    }
}

fn kernel_scalar(strip: &[f64], panel: &[f64], acc: &mut [[f64; NR]; MR]) {
    for (av, bv) in strip.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
        for r in 0..MR {
            let x = av[r];
            for cc in 0..NR {
                acc[r][cc] = x.mul_add(bv[cc], acc[r][cc]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::{MR, NR};

    pub(super) fn kernel_avx512(strip: &[f64], panel: &[f64], acc: &mut [[f64; NR]; MR]) {
        assert!(strip.len() / MR == panel.len() / NR);
        // SAFETY: only selected after runtime detection of avx512f; slice
        // lengths checked above.
        unsafe { avx512(strip, panel, acc) }
    }

    pub(super) fn kernel_avx2(strip: &[f64], panel: &[f64], acc: &mut [[f64; NR]; MR]) {
        assert!(strip.len() / MR == panel.len() / NR);
        // SAFETY: only selected after runtime detection of avx2 and fma.
        unsafe {
            avx2_half(strip, panel, acc, 0);
            avx2_half(strip, panel, acc, MR / 2);
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn avx512(strip: &[f64], panel: &[f64], acc: &mut [[f64; NR]; MR]) {
        let kc = panel.len() / NR;
        let mut lo = [_mm512_setzero_pd(); MR];
        let mut hi = [_mm512_setzero_pd(); MR];
        for r in 0..MR {
            lo[r] = _mm512_loadu_pd(acc[r].as_ptr());
            hi[r] = _mm512_loadu_pd(acc[r].as_ptr().add(8));
        }
        let ap = strip.as_ptr();
        let bp = panel.as_ptr();
        for kk in 0..kc {
            let b0 = _mm512_loadu_pd(bp.add(kk * NR));
            let b1 = _mm512_loadu_pd(bp.add(kk * NR + 8));
            for r in 0..MR {
                let x = _mm512_set1_pd(*ap.add(kk * MR + r));
                lo[r] = _mm512_fmadd_pd(x, b0, lo[r]);
                hi[r] = _mm512_fmadd_pd(x, b1, hi[r]);
            }
        }
        for r in 0..MR {
            _mm512_storeu_pd(acc[r].as_mut_ptr(), lo[r]);
            _mm512_storeu_pd(acc[r].as_mut_ptr().add(8), hi[r]);
        }
    }

    #[allow(clippy::needless_range_loop)]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn avx2_half(strip: &[f64], panel: &[f64], acc: &mut [[f64; NR]; MR], row0: usize) {
        const H: usize = MR / 2;
        let kc = panel.len() / NR;
        let mut v = [[_mm256_setzero_pd(); 4]; H];
        for r in 0..H {
            for q in 0..4 {
                v[r][q] = _mm256_loadu_pd(acc[row0 + r].as_ptr().add(4 * q));
            }
        }
        let ap = strip.as_ptr();
        let bp = panel.as_ptr();
        for kk in 0..kc {
            let b = [
                _mm256_loadu_pd(bp.add(kk * NR)),
                _mm256_loadu_pd(bp.add(kk * NR + 4)),
                _mm256_loadu_pd(bp.add(kk * NR + 8)),
                _mm256_loadu_pd(bp.add(kk * NR + 12)),
            ];
            for r in 0..H {
                let x = _mm256_set1_pd(*ap.add(kk * MR + row0 + r));
                for q in 0..4 {
                    v[r][q] = _mm256_fmadd_pd(x, b[q], v[r][q]);
                }
            }
        }
        for r in 0..H {
            for q in 0..4 {
                _mm256_storeu_pd(acc[row0 + r].as_mut_ptr().add(4 * q), v[r][q]);
            }
        }
    }
}
