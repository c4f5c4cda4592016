//! Dense row-major tensors and the raw kernels shared by the autodiff graph
//! and the inference path.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.values.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Rows and columns when viewed as a matrix; vectors are one row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            [rest @ .., c] => (rest.iter().product(), *c),
        }
    }
}

/// A row-major matrix as used by the encoder's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise softmax of `m / temperature` with max subtraction.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut out = m.data.clone();
    for row in out.chunks_mut(m.cols.max(1)) {
        softmax_in_place(row, temperature);
    }
    Ok(Matrix { rows: m.rows, cols: m.cols, data: out })
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalisation over each row followed by the affine `gain`/`bias`.
pub fn layer_norm_rows(m: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::Shape(format!(
            "layer norm over width {} with gain {} / bias {}",
            m.cols,
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; m.data.len()];
    let mut xhat = vec![0.0; m.data.len()];
    let mut inv = vec![0.0; m.rows];
    layer_norm_kernel(&m.data, m.cols, gain, bias, eps, &mut out, &mut xhat, &mut inv);
    Ok(Matrix { rows: m.rows, cols: m.cols, data: out })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_kernel(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    for (r, row) in x.chunks(cols).enumerate() {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        let base = r * cols;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[base + c] = h;
            out[base + c] = gain[c] * h + bias[c];
        }
    }
}

/// `out = a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `da += dout (m×n) · bᵀ` where b is k×n.
pub(crate) fn matmul_grad_a(dout: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(drow, brow);
        }
    }
}

/// `db += aᵀ · dout` where a is m×k and dout m×n.
pub(crate) fn matmul_grad_b(a: &[f64], dout: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, dv) in dbrow.iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Multi-head scaled dot-product attention over one sequence.
///
/// `q`, `k`, `v` are n×d; keys with `key_mask[j] == false` receive zero
/// weight. Returns the n×d output and the per-head probabilities
/// (heads × n × n).
pub(crate) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    key_mask: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if key_mask[j] {
                    let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if key_mask[j] {
                    prow[j] = (prow[j] - max).exp();
                    sum += prow[j];
                } else {
                    prow[j] = 0.0;
                }
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..n {
                if key_mask[j] {
                    prow[j] /= sum;
                    let p = prow[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_grad(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let di = &dout[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..n {
                if prow[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = dot(di, &v[j * d + off..j * d + off + dh]);
                weighted += prow[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (o, g) in dvj.iter_mut().zip(di) {
                    *o += prow[j] * g;
                }
            }
            for j in 0..n {
                if prow[j] == 0.0 {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(v: &[f64]) -> Matrix {
        Matrix::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&row(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(s.data, vec![0.5, 0.5]);
        // 1 / (1 + e^-1)
        let s = softmax_rows(&row(&[2.0, 0.0]), 2.0).unwrap();
        assert_abs_diff_eq!(s.data[0], 0.731_058_578_630_004_9, epsilon = 1e-4);
        assert_abs_diff_eq!(s.data[1], 0.268_941_421_369_995_1, epsilon = 1e-4);
        for t in [0.01, 0.5, 1.0, 7.0, 1e3] {
            let s = softmax_rows(&row(&[5.0, 1.0, 1.0]), t).unwrap();
            assert!(s.data[0] > s.data[1] && s.data[0] > s.data[2]);
            assert!((s.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax_rows(&row(&[1.0]), 0.0).is_err());
        assert!(softmax_rows(&row(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let s = softmax_rows(&row(&[1e300, -1e300, 0.0]), 1.0).unwrap();
        assert!(s.data.iter().all(|v| v.is_finite()));
        assert_eq!(s.data[0], 1.0);
    }

    #[test]
    fn layer_norm_examples() {
        let m = row(&[1.0, 1.0, 1.0, 1.0]);
        let out = layer_norm_rows(&m, &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        assert_eq!(out.data, vec![0.0; 4]);

        let out = layer_norm_rows(&row(&[0.0, 2.0]), &[1.0; 2], &[0.0; 2], LAYER_NORM_EPS).unwrap();
        assert_abs_diff_eq!(out.data[0], -1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.data[1], 1.0, epsilon = 1e-3);

        let out = layer_norm_rows(&row(&[3.0, 5.0]), &[2.0; 2], &[1.0; 2], LAYER_NORM_EPS).unwrap();
        assert_abs_diff_eq!(out.data[0], -1.0, epsilon = 1e-2);
        assert_abs_diff_eq!(out.data[1], 3.0, epsilon = 1e-2);

        // zero-variance rows land on the bias
        let out = layer_norm_rows(&row(&[4.0, 4.0]), &[3.0; 2], &[0.5, -0.5], LAYER_NORM_EPS).unwrap();
        assert_eq!(out.data, vec![0.5, -0.5]);
    }

    #[test]
    fn layer_norm_width_mismatch() {
        assert!(matches!(
            layer_norm_rows(&row(&[1.0, 2.0]), &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_moments() {
        let m = Matrix::new(2, 5, vec![0.3, -1.0, 2.5, 7.0, 0.1, 9.0, 8.0, -3.0, 0.0, 1.0]).unwrap();
        let out = layer_norm_rows(&m, &[1.0; 5], &[0.0; 5], LAYER_NORM_EPS).unwrap();
        for r in 0..2 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let n = 4;
        let d = 4;
        let q: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..16).map(|i| (i as f64 * 0.11).cos()).collect();
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mask = [true, true, false, true];
        let (_, probs) = attention(&q, &k, &v, n, d, 2, &mask);
        for row in probs.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.0]);
        assert_eq!(t.grad(), Some(&[1.5, 1.0][..]));
    }
}
