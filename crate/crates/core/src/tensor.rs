//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate computes with.
//!
//! Every kernel here processes rows independently and accumulates each output
//! element left to right. The executor relies on this: concatenating requests
//! from several clients along the token dimension and splitting the result
//! back produces bit-identical rows to executing each request alone.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major tensor of 32-bit floats.
///
/// Dimensions may be zero (a request with no tokens is legal and produces an
/// empty tensor); `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size in bytes of the payload.
    pub fn nbytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f32>()) as u64
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_rank2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Multiplies every row elementwise by `vector` (length = column count).
    pub fn mul_row_vector(&self, vector: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_rank2("mul_row_vector")?;
        if vector.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row_vector",
                lhs: self.shape.clone(),
                rhs: vector.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&vector.data) {
                *o *= *s;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Sums over rows, producing a vector with one entry per column.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_rank2("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += *v;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Selects a contiguous column range `[start, end)` of a rank-2 tensor.
    pub fn columns(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.expect_rank2("columns")?;
        if start > end || end > n {
            return Err(TensorError::Index { index: end, size: n });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Tensor {
            shape: vec![m, w],
            data: out,
        })
    }

    /// Writes `src` into columns `[start, start + src.cols())`.
    pub fn set_columns(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let (m, n) = self.expect_rank2("set_columns")?;
        let (sm, sw) = src.expect_rank2("set_columns")?;
        if sm != m || start + sw > n {
            return Err(TensorError::ShapeMismatch {
                op: "set_columns",
                lhs: self.shape.clone(),
                rhs: src.shape.clone(),
            });
        }
        for i in 0..m {
            self.data[i * n + start..i * n + start + sw].copy_from_slice(src.row(i));
        }
        Ok(())
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.expect_rank2("slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::Index { index: end, size: m });
        }
        Ok(Tensor {
            shape: vec![end - start, n],
            data: self.data[start * n..end * n].to_vec(),
        })
    }
}

/// Concatenates rank-2 tensors along the row (token) dimension.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Ok(Tensor::zeros(&[0, 0]));
    };
    let (_, n) = first.expect_rank2("concat_rows")?;
    let mut rows = 0;
    for p in parts {
        let (m, c) = p.expect_rank2("concat_rows")?;
        if c != n {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        rows += m;
    }
    let mut data = Vec::with_capacity(rows * n);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, n],
        data,
    })
}

/// Splits a rank-2 tensor into consecutive row blocks of the given sizes.
pub fn split_rows(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (m, _) = t.expect_rank2("split_rows")?;
    let total: usize = sizes.iter().sum();
    if total != m {
        return Err(TensorError::ShapeMismatch {
            op: "split_rows",
            lhs: t.shape.clone(),
            rhs: vec![total],
        });
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let part = t.slice_rows(start, start + s);
            start += s;
            part
        })
        .collect()
}

/// `a [m,k] @ b [k,n]`, one left-to-right accumulation per output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_rank2("matmul")?;
    let (k2, n) = b.expect_rank2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a [m,k] @ b[n,k]^T` without materializing the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_rank2("matmul_transposed")?;
    let (n, k2) = b.expect_rank2("matmul_transposed")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_transposed",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Frozen affine map `y = x W + b`.
///
/// Covers both `Linear` and GPT-2 style `Conv1D` layers: the latter stores its
/// weight as `[d_in, d_out]`, which is the layout used here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl AffineParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, d_out) = weight.expect_rank2("AffineParams")?;
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "AffineParams",
                    lhs: weight.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn nbytes(&self) -> u64 {
        self.weight.nbytes() + self.bias.as_ref().map_or(0, Tensor::nbytes)
    }

    pub fn without_bias(&self) -> AffineParams {
        AffineParams {
            weight: self.weight.clone(),
            bias: None,
        }
    }
}

pub fn affine_forward(x: &Tensor, p: &AffineParams) -> Result<Tensor> {
    let mut y = matmul(x, &p.weight)?;
    if let Some(b) = &p.bias {
        let n = p.d_out();
        for row in y.data.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += *bv;
            }
        }
    }
    Ok(y)
}

/// Affine map with the bias forced to zero: `x W`.
pub fn affine_forward_no_bias(x: &Tensor, p: &AffineParams) -> Result<Tensor> {
    matmul(x, &p.weight)
}

/// Gradient w.r.t. the input of a frozen affine layer: `grad_y W^T`.
///
/// Needs nothing from the forward pass.
pub fn affine_backward_input(grad_y: &Tensor, p: &AffineParams) -> Result<Tensor> {
    matmul_transposed(grad_y, &p.weight)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_rank2("softmax_rows")?;
    let mut out = x.data.clone();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let (m, n) = x.expect_rank2("rmsnorm")?;
    if gain.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "rmsnorm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let inv = inv_rms(row, eps);
        for ((o, v), g) in out[i * n..(i + 1) * n].iter_mut().zip(row).zip(&gain.data) {
            *o = v * inv * g;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

fn inv_rms(row: &[f32], eps: f32) -> f32 {
    let mut ss = 0.0f32;
    for v in row {
        ss += v * v;
    }
    1.0 / (ss / row.len() as f32 + eps).sqrt()
}

/// Gradient of [`rmsnorm`] w.r.t. its input (the gain is frozen).
pub fn rmsnorm_backward(x: &Tensor, gain: &Tensor, eps: f32, grad_y: &Tensor) -> Result<Tensor> {
    x.same_shape(grad_y, "rmsnorm_backward")?;
    let (m, n) = x.expect_rank2("rmsnorm_backward")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let gy = &grad_y.data[i * n..(i + 1) * n];
        let inv = inv_rms(row, eps);
        let mut dot = 0.0f32;
        for j in 0..n {
            dot += gy[j] * gain.data[j] * row[j];
        }
        let coef = inv * inv * inv * dot / n as f32;
        for j in 0..n {
            out[i * n + j] = inv * gy[j] * gain.data[j] - row[j] * coef;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    x.same_shape(grad_y, "silu_backward")?;
    Ok(x.zip_map(grad_y, |v, g| {
        let s = sigmoid(v);
        g * (s + v * s * (1.0 - s))
    }))
}

/// Mean token cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<(f32, Tensor)> {
    let (m, n) = logits.expect_rank2("cross_entropy")?;
    if targets.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= n) {
        return Err(TensorError::Index {
            index: bad as usize,
            size: n,
        });
    }
    let mut probs = softmax_rows(logits)?;
    let mut loss = 0.0f64;
    let scale = 1.0 / m.max(1) as f32;
    for (i, &t) in targets.iter().enumerate() {
        let row = probs.row_mut(i);
        loss -= (row[t as usize].max(f32::MIN_POSITIVE) as f64).ln();
        row[t as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(((loss / m.max(1) as f64) as f32, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Independent triple loop in f64, rounded once.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a.get(i, t) as f64 * b.get(t, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let two = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let three = Tensor::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, o) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - o).abs() < 1e-6, "{g} vs {o}");
        }
        // Same accumulation order written out by hand: bitwise equal.
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for t in 0..4 {
                    acc += a.get(i, t) * b.get(t, j);
                }
                assert_eq!(acc.to_bits(), got.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn affine_forward_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let p = AffineParams::new(Tensor::identity(2), Some(Tensor::full(&[2], 5.0))).unwrap();
        assert_eq!(affine_forward(&x, &p).unwrap().data(), &[6.0, 6.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[5, 3], &mut rng);
        let p = AffineParams::new(w.clone(), None).unwrap();
        let y = affine_forward(&Tensor::zeros(&[4, 5]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = random(&[4, 5], &mut rng);
        let b = random(&[3], &mut rng);
        let p = AffineParams::new(w.clone(), Some(b.clone())).unwrap();
        let y = affine_forward(&x, &p).unwrap();
        let oracle = naive_matmul(&x, &w);
        for i in 0..4 {
            for j in 0..3 {
                let want = oracle[i * 3 + j] + b.data()[j] as f64;
                assert!((y.get(i, j) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn affine_bias_shape_checked() {
        let err = AffineParams::new(Tensor::zeros(&[2, 3]), Some(Tensor::zeros(&[2])));
        assert!(err.is_err());
    }

    #[test]
    fn backward_input_trivial_cases() {
        let p = AffineParams::new(Tensor::identity(3), Some(Tensor::full(&[3], 1.0))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random(&[2, 3], &mut rng);
        assert_eq!(affine_backward_input(&g, &p).unwrap(), g);
        let z = affine_backward_input(&Tensor::zeros(&[2, 3]), &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_input_matches_finite_differences() {
        // L(x) = <grad_y, affine_forward(x)>; dL/dx by central differences in f64.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&[8, 8], &mut rng);
        let b = random(&[8], &mut rng);
        let p = AffineParams::new(w.clone(), Some(b.clone())).unwrap();
        let x = random(&[8, 8], &mut rng);
        let gy = random(&[8, 8], &mut rng);
        let analytic = affine_backward_input(&gy, &p).unwrap();

        let loss = |x: &[f64]| -> f64 {
            let mut l = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    let mut y = b.data()[j] as f64;
                    for t in 0..8 {
                        y += x[i * 8 + t] * w.get(t, j) as f64;
                    }
                    l += gy.get(i, j) as f64 * y;
                }
            }
            l
        };
        let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let h = 1e-3;
        let mut num = 0.0;
        let mut den = 0.0;
        for idx in 0..64 {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            num += (fd - analytic.data()[idx] as f64).powi(2);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn softmax_cases() {
        let one = softmax_rows(&Tensor::from_rows(&[vec![3.7]]).unwrap()).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let half = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(half.data(), &[0.5, 0.5]);
        let x = Tensor::from_rows(&[vec![1f32.ln(), 2f32.ln(), 3f32.ln()]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let ones = Tensor::full(&[3, 4], 1.0);
        let g = Tensor::full(&[4], 1.0);
        let y = rmsnorm(&ones, &g, 1e-12).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let y = rmsnorm(&ones, &Tensor::zeros(&[4]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 16], &mut rng);
        let g = random(&[16], &mut rng);
        let y = rmsnorm(&x, &g, 1e-5).unwrap();
        let ms: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 16.0;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        for j in 0..16 {
            let want = x.data()[j] as f64 * inv * g.data()[j] as f64;
            assert!((y.data()[j] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn silu_and_cross_entropy_cases() {
        assert_eq!(silu(&Tensor::zeros(&[1, 1])).data(), &[0.0]);
        let (loss, _) = cross_entropy(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 4]), &[4]),
            Err(TensorError::Index { index: 4, size: 4 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random(&[3, 5], &mut rng).scale(2.0);
        let targets = [1u32, 4, 0];
        let (_, grad) = cross_entropy(&logits, &targets).unwrap();
        let loss64 = |l: &[f64]| -> f64 {
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let row = &l[i * 5..(i + 1) * 5];
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[t as usize];
            }
            total / targets.len() as f64
        };
        let base: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let h = 1e-3;
        for idx in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p[idx] += h;
            m[idx] -= h;
            let fd = (loss64(&p) - loss64(&m)) / (2.0 * h);
            let g = grad.data()[idx] as f64;
            assert!((fd - g).abs() <= 1e-3 * fd.abs().max(1e-2), "{idx}: {fd} vs {g}");
        }
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let xs = [-3.0f32, -0.5, 0.0, 0.7, 2.5];
        for &v in &xs {
            let f = |x: f64| x / (1.0 + (-x).exp());
            let fd = (f(v as f64 + 1e-4) - f(v as f64 - 1e-4)) / 2e-4;
            let x = Tensor::full(&[1, 1], v);
            let g = silu_backward(&x, &Tensor::full(&[1, 1], 1.0)).unwrap();
            assert!((g.data()[0] as f64 - fd).abs() < 1e-4);
        }
    }

    #[test]
    fn rmsnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 6], &mut rng);
        let g = random(&[6], &mut rng);
        let gy = random(&[2, 6], &mut rng);
        let eps = 1e-5;
        let analytic = rmsnorm_backward(&x, &g, eps, &gy).unwrap();
        let f = |xs: &[f64]| -> f64 {
            let mut l = 0.0;
            for i in 0..2 {
                let row = &xs[i * 6..(i + 1) * 6];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
                let inv = 1.0 / (ms + eps as f64).sqrt();
                for j in 0..6 {
                    l += gy.get(i, j) as f64 * row[j] * inv * g.data()[j] as f64;
                }
            }
            l
        };
        let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        for idx in 0..12 {
            let mut p = base.clone();
            let mut m = base.clone();
            p[idx] += 1e-4;
            m[idx] -= 1e-4;
            let fd = (f(&p) - f(&m)) / 2e-4;
            assert!((fd - analytic.data()[idx] as f64).abs() < 1e-4 * fd.abs().max(1.0));
        }
    }

    proptest::proptest! {
        #[test]
        fn row_independence(m1 in 0usize..6, m2 in 0usize..6, k in 1usize..9, n in 1usize..9, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = random(&[m1, k], &mut rng);
            let x2 = random(&[m2, k], &mut rng);
            let w = random(&[k, n], &mut rng);
            let joint = matmul(&concat_rows(&[&x1, &x2]).unwrap(), &w).unwrap();
            let separate = concat_rows(&[&matmul(&x1, &w).unwrap(), &matmul(&x2, &w).unwrap()]).unwrap();
            proptest::prop_assert!(joint.bitwise_eq(&separate));
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[3, n], &mut rng).scale(10.0);
            let s = softmax_rows(&x).unwrap();
            for i in 0..3 {
                let sum: f32 = s.row(i).iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn rmsnorm_scale_invariant(seed in 0u64..1000, factor in 0.1f32..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 8], &mut rng);
            let g = random(&[8], &mut rng);
            let a = rmsnorm(&x, &g, 1e-12).unwrap();
            let b = rmsnorm(&x.scale(factor), &g, 1e-12).unwrap();
            proptest::prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
        }
    }
}
