//! Dense row-major 2-D kernels in 64-bit floats.
//!
//! Every reduction accumulates left to right in index order, so kernels are
//! bit-reproducible for identical inputs. Masked entries are encoded as
//! `f64::NEG_INFINITY` and come out of [`softmax_rows`] as exact zeros.

mod gradcheck;
mod param;
pub mod tape;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use param::{Parameter, Parameterized};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
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
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul_elem")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension(format!(
                "row bias {:?} against {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Sums over rows, giving a `1 x cols` tensor.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn cols_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::Dimension(format!(
                "column range {start}..{end} of {} columns",
                self.cols
            )));
        }
        let w = end - start;
        let mut out = Self::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        Ok(out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            if i >= self.rows {
                return Err(Error::Dimension(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    /// Feature-wise (column) concatenation of equally tall tensors.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Dimension("concat of zero tensors".into()));
        };
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::Dimension(format!(
                "concat_cols: {} rows vs {rows}",
                bad.rows
            )));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                out.row_mut(r)[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        Ok(out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Dimension("concat of zero tensors".into()));
        };
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows: {} cols vs {cols}",
                    p.cols
                )));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Little-endian bytes of the value buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Matrix product with a fixed `k`-ascending accumulation per output entry.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Tensor2D::zeros(n, m);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_transpose_b(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "matmul_transpose_b {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax. Entries equal to `-inf` yield exactly zero.
pub fn softmax_rows(x: &Tensor2D) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp()
            };
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Cached intermediates of a layer-norm forward pass, reused by the backward rule.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor2D,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_with_cache(
    x: &Tensor2D,
    gain: &Tensor2D,
    bias: &Tensor2D,
    eps: f64,
) -> Result<(Tensor2D, LayerNormCache)> {
    if gain.shape() != (1, x.cols) || bias.shape() != (1, x.cols) {
        return Err(Error::Dimension(format!(
            "layer_norm gain {:?} / bias {:?} for width {}",
            gain.shape(),
            bias.shape(),
            x.cols
        )));
    }
    let n = x.cols as f64;
    let mut normalized = Tensor2D::zeros(x.rows, x.cols);
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for c in 0..x.cols {
            let z = (row[c] - mean) * is;
            normalized.data[r * x.cols + c] = z;
            out.data[r * x.cols + c] = z * gain.data[c] + bias.data[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Per-row layer normalization followed by the affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor2D, gain: &Parameter, bias: &Parameter, eps: f64) -> Result<Tensor2D> {
    layer_norm_with_cache(x, &gain.value, &bias.value, eps).map(|(y, _)| y)
}

/// Scales each nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for r in 0..x.rows {
        let norm = row_norm(x.row(r));
        if norm > 0.0 {
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
    }
    out
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU, as used in BERT.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
