//! Dense row-major f64 matrices and the kernels everything else is built on.
//!
//! All accumulations run in a fixed canonical order (ascending index, left to
//! right), so repeated evaluation of the same expression is bitwise
//! reproducible. Shape mismatches are programming errors and panic with both
//! shapes named.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        if rows.is_empty() {
            return Matrix::zeros(0, 0);
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows: {} vs {}", r.len(), cols);
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row {i} out of {} rows", self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert!(i < self.rows, "row {i} out of {} rows", self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing signed zeros and rejecting NaN.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_dims(op: &str, lr: usize, lc: usize, rr: usize, rc: usize, ok: bool) {
    assert!(ok, "{op}: incompatible shapes {lr}x{lc} and {rr}x{rc}");
}

/// C = A B with rows accumulated left to right over the inner dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    check_dims("matmul", a.rows, a.cols, b.rows, b.cols, a.cols == b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// C = A Bᵀ.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    check_dims("matmul_bt", a.rows, a.cols, b.rows, b.cols, a.cols == b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// C = Aᵀ B.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Matrix {
    check_dims("matmul_at", a.rows, a.cols, b.rows, b.cols, a.rows == b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for i in 0..a.cols {
            let v = arow[i];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += v * brow[j];
            }
        }
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Matrix {
    check_dims("add", a.rows, a.cols, b.rows, b.cols, a.shape() == b.shape());
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    out
}

pub fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    check_dims("sub", a.rows, a.cols, b.rows, b.cols, a.shape() == b.shape());
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o -= v;
    }
    out
}

pub fn mul_elem(a: &Matrix, b: &Matrix) -> Matrix {
    check_dims("mul_elem", a.rows, a.cols, b.rows, b.cols, a.shape() == b.shape());
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o *= v;
    }
    out
}

pub fn scale(a: &Matrix, c: f64) -> Matrix {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o *= c;
    }
    out
}

/// Broadcast a 1 x d bias over every row of an n x d matrix.
pub fn add_bias(a: &Matrix, bias: &Matrix) -> Matrix {
    check_dims(
        "add_bias",
        a.rows,
        a.cols,
        bias.rows,
        bias.cols,
        bias.rows == 1 && bias.cols == a.cols,
    );
    let mut out = a.clone();
    for i in 0..a.rows {
        let orow = &mut out.data[i * a.cols..(i + 1) * a.cols];
        for (o, &b) in orow.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

pub fn relu(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        if *o < 0.0 {
            *o = 0.0;
        }
    }
    out
}

pub fn sigmoid(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o = sigmoid_scalar(*o);
    }
    out
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x), evaluated in its overflow-safe form.
pub fn softplus(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o = softplus_scalar(*o);
    }
    out
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn abs(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o = o.abs();
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    let d = a.cols as f64;
    for i in 0..a.rows {
        let row = &mut out.data[i * a.cols..(i + 1) * a.cols];
        let mut mean = 0.0;
        for &v in row.iter() {
            mean += v;
        }
        mean /= d;
        let mut var = 0.0;
        for &v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Result of a masked softmax: probabilities plus which rows had every entry
/// masked (those rows are all-zero by policy).
pub struct MaskedSoftmax {
    pub probs: Matrix,
    pub all_masked: Vec<bool>,
}

/// Renormalizing masked softmax. `mask` is 1 = blocked, 0 = allowed.
///
/// Output(i,j) = (1-m_ij) exp(a_ij) / sum_k (1-m_ik) exp(a_ik), stabilized by
/// subtracting the row maximum over unmasked entries. Masked entries are
/// exactly 0.0, so they contribute nothing to any downstream accumulation.
/// Rows with every entry masked come back all-zero and are flagged.
pub fn masked_softmax(scores: &Matrix, mask: &Matrix) -> MaskedSoftmax {
    check_dims(
        "masked_softmax",
        scores.rows,
        scores.cols,
        mask.rows,
        mask.cols,
        scores.shape() == mask.shape(),
    );
    debug_assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0), "mask entries must be 0 or 1");
    let mut probs = Matrix::zeros(scores.rows, scores.cols);
    let mut all_masked = vec![false; scores.rows];
    for i in 0..scores.rows {
        let srow = scores.row(i);
        let mrow = mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..scores.cols {
            if mrow[j] == 0.0 && srow[j] > max {
                max = srow[j];
            }
        }
        if max == f64::NEG_INFINITY {
            all_masked[i] = true;
            continue;
        }
        let orow = probs.row_mut(i);
        let mut denom = 0.0;
        for j in 0..scores.cols {
            if mrow[j] == 0.0 {
                let e = (srow[j] - max).exp();
                orow[j] = e;
                denom += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= denom;
        }
    }
    MaskedSoftmax { probs, all_masked }
}

pub fn concat_rows(parts: &[&Matrix]) -> Matrix {
    // Zero-row parts keep their column count as a phantom; take the width from
    // the first part that has rows, falling back to the first part.
    let cols = parts
        .iter()
        .find(|m| m.rows > 0)
        .map(|m| m.cols)
        .unwrap_or_else(|| parts.first().map_or(0, |m| m.cols));
    let rows: usize = parts.iter().map(|m| m.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in parts {
        if m.rows == 0 {
            continue;
        }
        assert_eq!(m.cols, cols, "concat_rows: column mismatch {} vs {}", m.cols, cols);
        data.extend_from_slice(&m.data);
    }
    Matrix { rows, cols, data }
}

pub fn slice_rows(a: &Matrix, start: usize, len: usize) -> Matrix {
    assert!(start + len <= a.rows, "slice_rows [{start}, {start}+{len}) out of {} rows", a.rows);
    Matrix {
        rows: len,
        cols: a.cols,
        data: a.data[start * a.cols..(start + len) * a.cols].to_vec(),
    }
}

pub fn slice_cols(a: &Matrix, start: usize, len: usize) -> Matrix {
    assert!(start + len <= a.cols, "slice_cols [{start}, {start}+{len}) out of {} cols", a.cols);
    let mut out = Matrix::zeros(a.rows, len);
    for i in 0..a.rows {
        let src = &a.data[i * a.cols + start..i * a.cols + start + len];
        out.data[i * len..(i + 1) * len].copy_from_slice(src);
    }
    out
}

pub fn gather_rows(a: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), a.cols);
    for (r, &i) in idx.iter().enumerate() {
        assert!(i < a.rows, "gather_rows: index {i} out of {} rows", a.rows);
        out.data[r * a.cols..(r + 1) * a.cols].copy_from_slice(a.row(i));
    }
    out
}
