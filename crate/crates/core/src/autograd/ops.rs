use crate::error::Result;
use crate::numerics::Matrix;

/// Operator vocabulary shared by the forward pass and the loss terms.
///
/// The model is written once against this trait. [`Eager`](super::Eager)
/// evaluates values only; [`Tape`](super::Tape) records every operation so
/// the result can be differentiated in reverse.
pub trait Ops {
    type Var: Clone;

    /// A value that never receives a gradient (inputs, masks).
    fn constant(&mut self, m: Matrix) -> Self::Var;

    /// A named model parameter. Whether it is differentiated is the engine's
    /// decision.
    fn param(&mut self, name: &str, m: &Matrix) -> Self::Var;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn transpose(&mut self, a: &Self::Var) -> Self::Var;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// `x + bias * 1^T` for a column `bias` with `x.rows()` entries.
    fn add_col_bias(&mut self, x: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;

    fn scale(&mut self, x: &Self::Var, c: f64) -> Self::Var;

    fn row_slice(&mut self, x: &Self::Var, start: usize, len: usize) -> Self::Var;

    fn col_slice(&mut self, x: &Self::Var, start: usize, len: usize) -> Self::Var;

    fn concat_rows(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;

    fn concat_cols(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;

    fn select_cols(&mut self, x: &Self::Var, cols: &[usize]) -> Self::Var;

    /// Normalizes every column over its rows, then applies `gamma`/`beta` (columns).
    fn layernorm_cols(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var) -> Result<Self::Var>;

    fn gelu(&mut self, x: &Self::Var) -> Self::Var;

    fn softmax_rows(&mut self, x: &Self::Var) -> Self::Var;

    /// Mean cross-entropy of `logits` (one column per sample) against `labels`. 1x1.
    fn cross_entropy_cols(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var>;

    /// Entrywise L1 norm. 1x1.
    fn l1(&mut self, x: &Self::Var) -> Self::Var;
}

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh form.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Column-wise layer norm; also returns the normalized input and per-column
/// reciprocal std for the backward pass.
pub(crate) fn layernorm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let (d, n) = x.shape();
    if gamma.shape() != (d, 1) || beta.shape() != (d, 1) {
        return Err(crate::error::PegoError::Shape {
            op: "layernorm_cols",
            left: x.shape(),
            right: gamma.shape(),
        });
    }
    let mut xhat = Matrix::zeros(d, n);
    let mut y = Matrix::zeros(d, n);
    let mut rstd = Vec::with_capacity(n);
    for j in 0..n {
        let mean = (0..d).map(|i| x[(i, j)]).sum::<f64>() / d as f64;
        let var = (0..d).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
        rstd.push(r);
        for i in 0..d {
            let h = (x[(i, j)] - mean) * r;
            xhat[(i, j)] = h;
            y[(i, j)] = gamma[(i, 0)] * h + beta[(i, 0)];
        }
    }
    Ok((y, xhat, rstd))
}

pub(crate) fn add_col_bias_value(x: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.shape() != (x.rows(), 1) {
        return Err(crate::error::PegoError::Shape {
            op: "add_col_bias",
            left: x.shape(),
            right: bias.shape(),
        });
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let b = bias[(i, 0)];
        for j in 0..x.cols() {
            out[(i, j)] += b;
        }
    }
    Ok(out)
}

pub(crate) fn concat_rows_value(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(crate::error::PegoError::Shape {
                op: "concat_rows",
                left: parts[0].shape(),
                right: p.shape(),
            });
        }
        rows += p.rows();
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn concat_cols_value(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |p| p.rows());
    for p in parts {
        if p.rows() != rows {
            return Err(crate::error::PegoError::Shape {
                op: "concat_cols",
                left: parts[0].shape(),
                right: p.shape(),
            });
        }
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn select_cols_value(x: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(x.rows(), cols.len(), |i, k| x[(i, cols[k])])
}

/// Returns `(mean loss, softmax probabilities)`.
pub(crate) fn cross_entropy_value(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (c, n) = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(crate::error::PegoError::Input(format!(
            "{} labels for {n} logit columns",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(crate::error::PegoError::Input(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut probs = Matrix::zeros(c, n);
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let max = (0..c).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..c).map(|i| (logits[(i, j)] - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[(y, j)];
        for i in 0..c {
            probs[(i, j)] = (logits[(i, j)] - lse).exp();
        }
    }
    Ok((total / n as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (l, p) = cross_entropy_value(&Matrix::zeros(4, 3), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((p[(2, 1)] - 0.25).abs() < 1e-15);
        assert!(cross_entropy_value(&Matrix::zeros(4, 1), &[4]).is_err());
    }

    #[test]
    fn layernorm_columns_are_standardized() {
        let x = Matrix::from_rows(&[[1.0, 10.0], [2.0, -4.0], [6.0, 0.5]]);
        let (y, _, _) = layernorm_forward(&x, &Matrix::filled(3, 1, 1.0), &Matrix::zeros(3, 1)).unwrap();
        for j in 0..2 {
            let col = y.col_vec(j);
            let mean: f64 = col.iter().sum::<f64>() / 3.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
