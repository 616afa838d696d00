//! Dense row-major f64 matrices and the small kernel set shared by the
//! embedding and fusion layers: matmul, row softmax, sigmoid, layer norm,
//! a two-layer ReLU feed-forward block, and a central-difference gradient
//! probe used to audit every hand-derived backward pass.

use rand::Rng;

use crate::error::{Error, Result};

/// Layer-norm epsilon, added to the population variance inside the root.
pub const LN_EPS: f64 = 1e-5;

/// Default step for central finite differences.
pub const FD_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a flat row-major buffer. `data.len()` must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::invalid(format!(
                    "ragged rows: row 0 has {} columns, row {} has {}",
                    c,
                    i,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    /// Entries drawn i.i.d. uniform over [lo, hi) from the caller's RNG.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Matrix { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product; errors name both operand shapes.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b, "hadamard")
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64, op: &str) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{} shape mismatch: {}x{} vs {}x{}",
                op, self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|&v| v * s).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// In-place `self += other`. Shapes must already agree.
    pub fn add_in_place(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * other`, the SGD update step.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `v` to every row; `v.len()` must equal the column count.
    pub fn add_row_broadcast(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "broadcast length {} does not match {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(v) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Per-column sums, the gradient of a row broadcast.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Vertical concatenation: rows of `self` followed by rows of `other`.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "concat column mismatch: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix::from_vec(self.rows + other.rows, self.cols, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Column vector times row vector, producing `a.len() x b.len()`.
pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(a.len(), b.len());
    for (r, &av) in a.iter().enumerate() {
        for (c, &bv) in b.iter().enumerate() {
            out.data[r * b.len() + c] = av * bv;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction, so any finite input stays finite.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Given `a = softmax_rows(s)` and the gradient at `a`, returns the gradient
/// at `s`. Each output row sums to zero (shift invariance of softmax).
pub fn softmax_backward_rows(alpha: &Matrix, dalpha: &Matrix) -> Result<Matrix> {
    if alpha.shape() != dalpha.shape() {
        return Err(Error::invalid(format!(
            "softmax backward shape mismatch: {}x{} vs {}x{}",
            alpha.rows, alpha.cols, dalpha.rows, dalpha.cols
        )));
    }
    let mut out = Matrix::zeros(alpha.rows, alpha.cols);
    for r in 0..alpha.rows {
        let a = alpha.row(r);
        let da = dalpha.row(r);
        let inner = dot(a, da);
        for c in 0..alpha.cols {
            out.data[r * alpha.cols + c] = a[c] * (da[c] - inner);
        }
    }
    Ok(out)
}

/// Elementwise logistic sigmoid; saturates cleanly to 0 and 1.
pub fn sigmoid(m: &Matrix) -> Matrix {
    m.map(|v| 1.0 / (1.0 + (-v).exp()))
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

/// Learnable per-feature scale and shift for layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNormParams {
    /// Identity initialization: scale 1, shift 0.
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

/// Row-wise layer norm with population variance (divide by the row length)
/// and `eps` inside the square root.
pub fn layer_norm(x: &Matrix, params: &LayerNormParams, eps: f64) -> Result<Matrix> {
    let d = x.cols();
    if params.scale.len() != d || params.shift.len() != d {
        return Err(Error::invalid(format!(
            "layer norm params of length {}/{} do not match {} columns",
            params.scale.len(),
            params.shift.len(),
            d
        )));
    }
    if d == 0 {
        return Err(Error::invalid("layer norm over zero columns"));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = params.scale[c] * ((*v - mean) * inv) + params.shift[c];
        }
    }
    Ok(out)
}

/// Gradients of layer norm. Returns `(dx, dscale, dshift)` for upstream `dy`.
pub fn layer_norm_backward(
    x: &Matrix,
    params: &LayerNormParams,
    eps: f64,
    dy: &Matrix,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if x.shape() != dy.shape() {
        return Err(Error::invalid(format!(
            "layer norm backward shape mismatch: {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            dy.rows(),
            dy.cols()
        )));
    }
    let d = x.cols();
    let df = d as f64;
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut dscale = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    for r in 0..x.rows() {
        let row = x.row(r);
        let g = dy.row(r);
        let mean = row.iter().sum::<f64>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv = 1.0 / (var + eps).sqrt();
        // xhat = (x - mean) * inv; dxhat = g * scale
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
        let dxhat: Vec<f64> = g
            .iter()
            .zip(&params.scale)
            .map(|(&gv, &s)| gv * s)
            .collect();
        for c in 0..d {
            dscale[c] += g[c] * xhat[c];
            dshift[c] += g[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / df;
        let mean_dxhat_xhat = dot(&dxhat, &xhat) / df;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dscale, dshift))
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

/// Two-layer feed-forward block `relu(x W1 + b1) W2 + b2`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FfnParams {
    pub fn uniform<R: Rng>(
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        FfnParams {
            w1: Matrix::uniform(d_in, d_hidden, lo, hi, rng),
            b1: (0..d_hidden).map(|_| rng.random_range(lo..hi)).collect(),
            w2: Matrix::uniform(d_hidden, d_out, lo, hi, rng),
            b2: (0..d_out).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.w1.rows() {
            return Err(Error::invalid(format!(
                "ffn input of {} columns does not match w1 {}x{}",
                x.cols(),
                self.w1.rows(),
                self.w1.cols()
            )));
        }
        if self.b1.len() != self.w1.cols() || self.w2.rows() != self.w1.cols() {
            return Err(Error::invalid("ffn hidden dimensions disagree"));
        }
        if self.b2.len() != self.w2.cols() {
            return Err(Error::invalid("ffn output bias length disagrees"));
        }
        Ok(())
    }
}

/// Pre-activation cache for the backward pass.
#[derive(Clone, Debug)]
pub struct FfnCache {
    pub x: Matrix,
    pub a1: Matrix,
}

/// Gradients of `FfnParams`, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct FfnGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub fn ffn(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    Ok(ffn_with_cache(x, p)?.0)
}

pub fn ffn_with_cache(x: &Matrix, p: &FfnParams) -> Result<(Matrix, FfnCache)> {
    p.check(x)?;
    let a1 = x.matmul(&p.w1)?.add_row_broadcast(&p.b1)?;
    let r = a1.map(|v| v.max(0.0));
    let y = r.matmul(&p.w2)?.add_row_broadcast(&p.b2)?;
    Ok((
        y,
        FfnCache {
            x: x.clone(),
            a1,
        },
    ))
}

/// Backward pass through the block. Returns parameter gradients and the
/// gradient at the input. The ReLU subgradient at exactly zero is taken as 0.
pub fn ffn_backward(cache: &FfnCache, p: &FfnParams, dy: &Matrix) -> Result<(FfnGrads, Matrix)> {
    let r = cache.a1.map(|v| v.max(0.0));
    let dw2 = r.transposed().matmul(dy)?;
    let db2 = dy.column_sums();
    let dr = dy.matmul(&p.w2.transposed())?;
    let mask = cache.a1.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let da1 = dr.hadamard(&mask)?;
    let dw1 = cache.x.transposed().matmul(&da1)?;
    let db1 = da1.column_sums();
    let dx = da1.matmul(&p.w1.transposed())?;
    Ok((
        FfnGrads {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
        dx,
    ))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of `f` at `theta`: entry i is
/// `(f(theta + h e_i) - f(theta - h e_i)) / (2h)`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// One tensor's result from a finite-difference gradient audit.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub tensor: &'static str,
    pub rel_err: f64,
}

/// Agreement check between an analytic and a numerical gradient.
///
/// Entries where both magnitudes are below `atol` count as agreeing: there
/// the numerical probe carries only cancellation noise, which also covers
/// parameters with structurally zero gradient. Everywhere else the relative
/// error `|a - n| / max(|a|, |n|)` must stay within `rtol`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() < atol && n.abs() < atol {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}
