//! Dense kernels shared by every other module.
//!
//! All storage is row-major `f64`. A [`Grid2D`] stores pixels in row-major
//! order with channels interleaved (`(y * width + x) * channels + c`), so a
//! grid of `H x W x C` and a token [`Matrix`] of `(H*W) x C` share the same
//! buffer layout and convert without copying data around.
//!
//! Reductions always accumulate left to right in index order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// Tolerance for row sums of stochastic matrices.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    /// Builds a matrix from a generator called in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(shape_err(format!(
                "row vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Copies rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols);
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or_else(|| shape_err("vstack of nothing"))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(shape_err(format!("vstack: {} columns vs {}", p.cols, cols)));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix {
            rows: data.len() / cols,
            cols,
            data,
        })
    }

    /// Places matrices with equal row counts side by side.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or_else(|| shape_err("hstack of nothing"))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err("hstack: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Standard product `a * b`. Each output entry accumulates over the inner
/// index in increasing order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err(format!(
            "matmul inner dims differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            *o = acc;
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Softmax of a slice in place after dividing by `scale`, using max
/// subtraction. The caller guarantees finiteness.
pub fn softmax_in_place(v: &mut [f64], scale: f64) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / scale));
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x / scale - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of `m / scale`.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("softmax scale must be positive, got {scale}")));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(m.cols) {
        softmax_in_place(row, scale);
    }
    Ok(out)
}

/// Normalizes `v` to zero mean and unit (population) variance, then applies
/// `gain` and `bias` elementwise.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    layer_norm_in_place(&mut out, gain, bias, eps)?;
    Ok(out)
}

pub fn layer_norm_in_place(v: &mut [f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<()> {
    let d = v.len();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(shape_err(format!(
            "layer_norm: input {d}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mean = v.iter().sum::<f64>() / d as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / libm::sqrt(var + eps);
    for ((x, g), b) in v.iter_mut().zip(gain).zip(bias) {
        *x = (*x - mean) * inv * g + b;
    }
    Ok(())
}

/// Spatial map of `height x width` pixels with `channels` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err(format!(
                "grid dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(shape_err(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Views an `(H*W) x C` token matrix as an `H x W x C` grid.
    pub fn from_tokens(tokens: Matrix, height: usize, width: usize) -> Result<Self> {
        if tokens.rows != height * width {
            return Err(shape_err(format!(
                "{} tokens cannot unflatten to {height}x{width}",
                tokens.rows
            )));
        }
        Ok(Self {
            height,
            width,
            channels: tokens.cols,
            data: tokens.data,
        })
    }

    /// Flattens to an `(H*W) x C` matrix, token index `y * W + x`.
    pub fn to_tokens(&self) -> Matrix {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data.clone(),
        }
    }

    pub fn into_tokens(self) -> Matrix {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
/// Source coordinates falling outside the grid are clamped to the border.
pub fn bilinear_resize(g: &Grid2D, out_h: usize, out_w: usize) -> Result<Grid2D> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err(format!("resize target must be positive, got {out_h}x{out_w}")));
    }
    if out_h == g.height && out_w == g.width {
        return Ok(g.clone());
    }
    let c = g.channels;
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| source_coord(y, g.height, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| source_coord(x, g.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = g.get(y0, x0, ch) * (1.0 - fx) + g.get(y0, x1, ch) * fx;
                let bottom = g.get(y1, x0, ch) * (1.0 - fx) + g.get(y1, x1, ch) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Grid2D {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (libm::floor(src) as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let frac = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, frac)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanh(K * (x + 0.044_715 * x * x * x)))
}
