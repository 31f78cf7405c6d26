//! Forward kernels shared by the eager API and the autodiff graph.
//!
//! The eager functions here are what tests and inference call directly; the
//! [`crate::autodiff::Graph`] records the same kernels together with the context
//! its backward pass needs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Row-major GEMM on flat buffers: `c = op(a) * op(b) + beta * c`.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe an m x k / k x n view fully inside the slices,
    // checked by the debug assertions above and by every caller's shape check.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{what}: expected a matrix, got dims {:?}",
            t.dims()
        )));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

/// `a[m x k] * b[k x n]`, with optional transposes of either operand.
pub fn matmul_t<T: Real>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = matrix_dims(a, "matmul lhs")?;
    let (br, bc) = matrix_dims(b, "matmul rhs")?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm(m, k, n, a.data(), trans_a, b.data(), trans_b, T::ZERO, &mut out);
    Tensor::new(vec![m, n], out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, false, b, false)
}

/// Running mean/variance kept for inference-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(d: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[d]),
            var: Tensor::full(&[d], T::ONE),
        }
    }
}

/// Per-feature normalization statistics of one batch-norm application.
pub(crate) struct BnContext {
    /// Normalized input, row-major `B x d`, kept in f64.
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn batchnorm_kernel<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mode: Mode,
    running: &mut RunningStats<T>,
    momentum: f64,
) -> Result<(Tensor<T>, BnContext)> {
    let (b, d) = matrix_dims(x, "batchnorm input")?;
    if gamma.len() != d || beta.len() != d || running.mean.len() != d || running.var.len() != d {
        return Err(Error::Shape(format!(
            "batchnorm over {d} features given gamma {:?}, beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let xs = x.data();
    let mut inv_std = vec![0.0f64; d];
    let mut mean = vec![0.0f64; d];
    match mode {
        Mode::Train => {
            if b < 2 {
                return Err(Error::Config(format!(
                    "batch normalization in train mode needs at least 2 rows, got {b}"
                )));
            }
            let mut var = vec![0.0f64; d];
            for row in xs.chunks_exact(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v.to_f64();
                }
            }
            for m in &mut mean {
                *m /= b as f64;
            }
            for row in xs.chunks_exact(d) {
                for j in 0..d {
                    let c = row[j].to_f64() - mean[j];
                    var[j] += c * c;
                }
            }
            for j in 0..d {
                let biased = var[j] / b as f64;
                inv_std[j] = 1.0 / (biased + eps).sqrt();
                let unbiased = var[j] / (b - 1) as f64;
                let rm = &mut running.mean.data_mut()[j];
                *rm = T::from_f64((1.0 - momentum) * rm.to_f64() + momentum * mean[j]);
                let rv = &mut running.var.data_mut()[j];
                *rv = T::from_f64((1.0 - momentum) * rv.to_f64() + momentum * unbiased);
            }
        }
        Mode::Infer => {
            for j in 0..d {
                mean[j] = running.mean.data()[j].to_f64();
                inv_std[j] = 1.0 / (running.var.data()[j].to_f64() + eps).sqrt();
            }
        }
    }
    let g: Vec<f64> = gamma.to_f64_vec();
    let bt: Vec<f64> = beta.to_f64_vec();
    let mut xhat = vec![0.0f64; b * d];
    let mut out = vec![T::ZERO; b * d];
    for i in 0..b {
        for j in 0..d {
            let h = (xs[i * d + j].to_f64() - mean[j]) * inv_std[j];
            xhat[i * d + j] = h;
            out[i * d + j] = T::from_f64(g[j] * h + bt[j]);
        }
    }
    let out = Tensor::new(vec![b, d], out)?;
    out.ensure_finite("batch normalization output")?;
    Ok((out, BnContext { xhat, inv_std }))
}

/// One-dimensional batch normalization.
///
/// Train mode normalizes with batch statistics and folds them into `running`
/// (exponential moving average, unbiased variance); infer mode uses `running`.
pub fn batchnorm1d<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mode: Mode,
    running: &mut RunningStats<T>,
) -> Result<Tensor<T>> {
    batchnorm_kernel(x, gamma, beta, eps, mode, running, BN_MOMENTUM).map(|(t, _)| t)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub(crate) fn softmax_rows_kernel<T: Real>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    let mut buf = vec![0.0f64; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for (b, v) in buf.iter_mut().zip(row) {
            *b = (v.to_f64() - max).exp();
            sum += *b;
        }
        for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(&buf) {
            *o = T::from_f64(*b / sum);
        }
    }
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(x, "softmax")?;
    let mut out = vec![T::ZERO; r * c];
    softmax_rows_kernel(x.data(), r, c, &mut out);
    let out = Tensor::new(vec![r, c], out)?;
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Concatenates matrices with equal row counts along columns, left to right.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::Shape("concat of zero parts".into()));
    };
    let rows = first.rows();
    for p in parts {
        if p.rank() != 2 || p.rows() != rows {
            return Err(Error::Shape(format!(
                "concat_cols: part {:?} does not have {rows} rows",
                p.dims()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, total], out)
}

/// Columns `start..end` of a matrix.
pub fn slice_cols<T: Real>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(x, "slice_cols")?;
    if start > end || end > c {
        return Err(Error::Shape(format!("column slice {start}..{end} of width {c}")));
    }
    let mut out = Vec::with_capacity(r * (end - start));
    for i in 0..r {
        out.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::new(vec![r, end - start], out)
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: 0 for dropped units, `1/(1-rate)` for kept ones.
pub(crate) fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep })
        .collect()
}

pub fn dropout<T: Real>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask: Vec<T> = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Batched scaled dot-product attention on `batch` stacked `t x dk` blocks.
///
/// Returns the output and the attention probabilities (`batch x t x t`).
pub(crate) fn attention_kernel<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    t: usize,
    dk: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut probs = vec![T::ZERO; batch * t * t];
    let mut out = vec![T::ZERO; batch * t * dk];
    let mut scores = vec![T::ZERO; t * t];
    for b in 0..batch {
        let blk = b * t * dk..(b + 1) * t * dk;
        gemm(t, dk, t, &q[blk.clone()], false, &k[blk.clone()], true, T::ZERO, &mut scores);
        for s in scores.iter_mut() {
            *s = *s * scale;
        }
        let p = &mut probs[b * t * t..(b + 1) * t * t];
        softmax_rows_kernel(&scores, t, t, p);
        gemm(t, t, dk, p, false, &v[blk.clone()], false, T::ZERO, &mut out[blk]);
    }
    (out, probs)
}

/// `softmax(Q Kᵀ / sqrt(dk)) V` for one `t x dk` block of queries, keys and values.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (t, dk) = matrix_dims(q, "attention query")?;
    if dk == 0 {
        return Err(Error::Shape("attention with dk = 0".into()));
    }
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(Error::Shape(format!(
            "attention operands disagree: Q {:?}, K {:?}, V {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let (out, _) = attention_kernel(q.data(), k.data(), v.data(), 1, t, dk);
    let out = Tensor::new(vec![t, dk], out)?;
    out.ensure_finite("attention")?;
    Ok(out)
}
