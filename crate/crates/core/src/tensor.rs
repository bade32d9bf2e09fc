//! Dense row-major tensors and the plain (tape-free) kernels shared by the
//! autodiff engine and inference paths.

use crate::error::{Error, Result};

/// `p ln p` terms with `p` below this contribute nothing to an entropy.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// Maximum deviation of a probability row sum from 1 accepted by [`entropy`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Dense, contiguous, row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            // Empty batches are still representable as [0, d].
            if shape.len() != 2 || shape[1] == 0 {
                return Err(Error::Domain(format!(
                    "tensor shape must have positive dimensions, got {shape:?}"
                )));
            }
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// A [rows × cols] matrix from a flat buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows selected by index, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack matrices with equal column counts along rows.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::dim("vstack", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    debug_assert_eq!(k, b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    debug_assert_eq!(k, b.shape[0]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Adds a length-`n` bias to every row of an [m × n] matrix.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if !x.is_matrix() || bias.len() != x.shape[1] {
        return Err(Error::dim("add_row_bias", &x.shape, &bias.shape));
    }
    let mut out = x.clone();
    let n = x.shape[1];
    for row in out.data.chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax of `logits / temperature`, stabilized by subtracting the
/// row maximum.
pub fn softmax_temp(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if !logits.is_matrix() {
        return Err(Error::dim("softmax_temp", &logits.shape, &[0, 0]));
    }
    let mut out = logits.clone();
    let c = logits.shape[1];
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

fn plogp(p: f64) -> f64 {
    if p < ENTROPY_FLOOR {
        0.0
    } else {
        p * p.ln()
    }
}

/// Checks that each row of `p` is a probability vector.
pub fn check_probability_rows(p: &Tensor) -> Result<()> {
    if !p.is_matrix() {
        return Err(Error::Contract(format!(
            "probabilities must be a [batch × classes] matrix, got {:?}",
            p.shape
        )));
    }
    if p.shape[1] == 0 {
        return Ok(());
    }
    for (r, row) in p.data.chunks(p.shape[1]).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&v| v < 0.0 || !v.is_finite())
        {
            return Err(Error::Contract(format!(
                "row {r} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Natural-log entropy of each probability row: a tensor of shape [b].
pub fn entropy(p: &Tensor) -> Result<Tensor> {
    check_probability_rows(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &Tensor) -> Tensor {
    let (b, c) = (p.shape[0], p.shape[1]);
    let data = if c == 0 {
        vec![0.0; b]
    } else {
        p.data
            .chunks(c)
            .map(|row| -row.iter().map(|&v| plogp(v)).sum::<f64>())
            .collect()
    };
    Tensor {
        shape: vec![b],
        data,
    }
}
