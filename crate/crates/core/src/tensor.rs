//! Dense row-major `f32` tensors and the handful of kernels GPT-2 inference
//! and logit inspection need: matmul, layernorm, row softmax, GELU and
//! rank/argmax over logit vectors.
//!
//! All kernels are pure functions over borrowed inputs.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

/// A dense row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
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

    /// Size of the last dimension (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rows × last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    /// Copy of rows `start..end` of a tensor viewed as `[rows × last_dim]`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.rows();
        if start > end || end > rows {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {rows} rows")));
        }
        let d = self.last_dim();
        Ok(Self { shape: vec![end - start, d], data: self.data[start * d..end * d].to_vec() })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let [m, n] = self.dims2("slice_cols")?;
        if start > end || end > n {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Self { shape: vec![m, w], data: out })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        let d = self.last_dim();
        if bias.len() != d {
            return Err(dim_err("add_row_bias", format!("bias {} vs rows of {d}", bias.len())));
        }
        for row in self.data.chunks_exact_mut(d) {
            for (a, b) in row.iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[m, n] => Ok([m, n]),
            s => Err(dim_err(op, format!("expected 2-D tensor, got shape {s:?}"))),
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(dim_err("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Accumulates `a[m×k] · b[k×n]` into `out[m×n]`. The i-k-j loop order keeps
/// the inner loop contiguous in both `b` and `out`.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ`, i.e. every row of `a` dotted with every row of `b`.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul_transposed")?;
    let [n, k2] = b.dims2("matmul_transposed")?;
    if k != k2 {
        return Err(dim_err("matmul_transposed", format!("[{m}×{k}] · [{n}×{k2}]ᵀ")));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        out.extend(b.data.chunks_exact(k).map(|b_row| dot(a_row, b_row)));
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent partial sums let the compiler vectorise.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-wise layer normalization over the last dimension followed by the
/// affine map `gain ⊙ x̂ + bias`.
pub fn layernorm(x: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(dim_err("layernorm", format!("last dim {d}, gain {}, bias {}", gain.len(), bias.len())));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        layernorm_row(row, gain, bias, eps);
    }
    Ok(out)
}

pub(crate) fn layernorm_row(row: &mut [f32], gain: &[f32], bias: &[f32], eps: f32) {
    normalize_row(row, eps);
    for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
        *v = *v * g + b;
    }
}

/// Centres `row` and divides by `sqrt(var + eps)` in place; returns that
/// divisor. Statistics are accumulated in f64.
pub(crate) fn normalize_row(row: &mut [f32], eps: f32) -> f32 {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = (var + eps as f64).sqrt();
    for v in row.iter_mut() {
        *v = ((*v as f64 - mean) / scale) as f32;
    }
    scale as f32
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = out.last_dim();
    if d > 0 {
        for row in out.data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        // all -inf: uniform is the only sensible finite answer
        let u = 1.0 / row.len() as f32;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Tanh-approximation GELU as used by GPT-2 (`gelu_new`).
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    gelu_in_place(&mut out.data);
    out
}

pub(crate) fn gelu_in_place(xs: &mut [f32]) {
    xs.iter_mut().for_each(|v| *v = gelu_scalar(*v));
}

/// 1-based rank of `token`: one plus the number of strictly larger logits.
pub fn rank_of(logits: &[f32], token: usize) -> Result<usize> {
    let target = *logits.get(token).ok_or(TensorError::OutOfRange { index: token, len: logits.len() })?;
    Ok(1 + logits.iter().filter(|&&v| v > target).count())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
