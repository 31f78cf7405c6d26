//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; every node's inputs have a lower
//! index, so the node list is already a topological order and `backward` walks
//! it in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BnContext, Mode, RunningStats};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, ctx: BnContext, train: bool },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    RepeatCols { x: Var, times: usize },
    Reshape { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, batch: usize, t: usize, dk: usize, probs: Vec<T> },
    CrossEntropy { p: Var, targets: Vec<T> },
    Sum { x: Var },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).dims()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_t(self.value(a), false, self.value(b), false)?;
        Ok(self.push(Op::MatMul { a, b, trans_b: false }, out, &[a, b]))
    }

    /// `a * bᵀ`, the layout of a fully connected layer with `[out x in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_t(self.value(a), false, self.value(b), true)?;
        Ok(self.push(Op::MatMul { a, b, trans_b: true }, out, &[a, b]))
    }

    /// Adds a length-`n` vector to every row of a `B x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        if xv.rank() != 2 || bv.len() != n {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", xv.dims(), bv.dims())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow { x, bias }, out, &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::Shape(format!("add: {:?} + {:?}", av.dims(), bv.dims())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.dims().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, out, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::Shape(format!("mul: {:?} * {:?}", av.dims(), bv.dims())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.dims().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, out, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Op::Relu { x }, out, &[x])
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        let (out, ctx) = ops::batchnorm_kernel(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            ops::BN_EPS,
            mode,
            running,
            ops::BN_MOMENTUM,
        )?;
        let train = mode == Mode::Train;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, ctx, train }, out, &[x, gamma, beta]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_cols(&tensors)?;
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, out, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = ops::slice_cols(self.value(x), start, end)?;
        Ok(self.push(Op::Slice { x, start }, out, &[x]))
    }

    /// Repeats every column `times` times in place: `[a, b] -> [a, a, b, b]` for 2.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || times == 0 {
            return Err(Error::Shape(format!("repeat_cols on {:?} x{times}", xv.dims())));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * c * times);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, times));
        }
        let out = Tensor::new(vec![r, c * times], data)?;
        Ok(self.push(Op::RepeatCols { x, times }, out, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        Ok(self.push(Op::Reshape { x }, out, &[x]))
    }

    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask: Vec<T> = ops::dropout_mask(xv.len(), rate, rng);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.dims().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, out, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        Ok(self.push(Op::Softmax { x }, out, &[x]))
    }

    /// Scaled dot-product attention over `batch` independent `t x dk` blocks
    /// stacked as `[batch * t, dk]` matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize) -> Result<Var> {
        let qv = self.value(q);
        let dims = qv.dims().to_vec();
        if dims.len() != 2 || dims[1] == 0 || batch == 0 || !dims[0].is_multiple_of(batch) {
            return Err(Error::Shape(format!("attention: Q {dims:?} with batch {batch}")));
        }
        if self.value(k).dims() != dims.as_slice() || self.value(v).dims() != dims.as_slice() {
            return Err(Error::Shape("attention operands disagree".into()));
        }
        let (t, dk) = (dims[0] / batch, dims[1]);
        let (out, probs) = ops::attention_kernel(qv.data(), self.value(k).data(), self.value(v).data(), batch, t, dk);
        let out = Tensor::new(dims, out)?;
        out.ensure_finite("attention")?;
        Ok(self.push(Op::Attention { q, k, v, batch, t, dk, probs }, out, &[q, k, v]))
    }

    /// `-mean_b sum_c y log(p + 1e-12)` against one-hot (or soft) targets.
    pub fn cross_entropy(&mut self, p: Var, targets: &Tensor<T>) -> Result<Var> {
        let pv = self.value(p);
        if pv.dims() != targets.dims() || pv.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross entropy: probabilities {:?} vs targets {:?}",
                pv.dims(),
                targets.dims()
            )));
        }
        let out = Tensor::scalar(T::from_f64(cross_entropy_value(pv, targets)));
        out.ensure_finite("loss")?;
        Ok(self.push(Op::CrossEntropy { p, targets: targets.data().to_vec() }, out, &[p]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Op::Sum { x }, Tensor::scalar(T::from_f64(s)), &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = dY * op(B)ᵀ
                    let ga = ops::matmul_t(gy, false, bv, !trans_b)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    // dB = Aᵀ dY, or (Aᵀ dY)ᵀ = dYᵀ A when B was transposed
                    let gb = if *trans_b {
                        ops::matmul_t(gy, true, av, false)?
                    } else {
                        ops::matmul_t(av, true, gy, false)?
                    };
                    let gb = gb.reshape(bv.dims())?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, gy.clone());
                }
                if self.wants(*bias) {
                    let n = gy.cols();
                    let mut acc = vec![0.0f64; n];
                    for row in gy.data().chunks_exact(n.max(1)) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.to_f64();
                        }
                    }
                    let g = Tensor::from_f64(self.value(*bias).dims(), &acc)?;
                    self.accumulate(grads, *bias, g);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.clone());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.dims().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = gy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.dims().to_vec(), d)?);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), d)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, ctx, train } => {
                let (b, d) = (gy.rows(), gy.cols());
                let g = gy.data();
                let mut sum_g = vec![0.0f64; d];
                let mut sum_gx = vec![0.0f64; d];
                for i in 0..b {
                    for j in 0..d {
                        let gv = g[i * d + j].to_f64();
                        sum_g[j] += gv;
                        sum_gx[j] += gv * ctx.xhat[i * d + j];
                    }
                }
                if self.wants(*gamma) {
                    let t = Tensor::from_f64(self.value(*gamma).dims(), &sum_gx)?;
                    self.accumulate(grads, *gamma, t);
                }
                if self.wants(*beta) {
                    let t = Tensor::from_f64(self.value(*beta).dims(), &sum_g)?;
                    self.accumulate(grads, *beta, t);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).to_f64_vec();
                    let mut dx = vec![0.0f64; b * d];
                    let bf = b as f64;
                    for i in 0..b {
                        for j in 0..d {
                            let gv = g[i * d + j].to_f64();
                            let scale = gam[j] * ctx.inv_std[j];
                            dx[i * d + j] = if *train {
                                scale * (gv - sum_g[j] / bf - ctx.xhat[i * d + j] * sum_gx[j] / bf)
                            } else {
                                scale * gv
                            };
                        }
                    }
                    let t = Tensor::from_f64(&[b, d], &dx)?;
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Concat { parts } => {
                let rows = gy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gy.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![rows, w], d)?);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let (rows, c, w) = (xv.rows(), xv.cols(), gy.cols());
                    let mut d = vec![T::ZERO; rows * c];
                    for r in 0..rows {
                        d[r * c + start..r * c + start + w].copy_from_slice(gy.row(r));
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), d)?);
                }
            }
            Op::RepeatCols { x, times } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = gy
                        .data()
                        .chunks_exact(*times)
                        .map(|c| T::from_f64(c.iter().map(|v| v.to_f64()).sum()))
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), d)?);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    let g = gy.clone().reshape(self.value(*x).dims())?;
                    self.accumulate(grads, *x, g);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let d = gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.accumulate(grads, *x, Tensor::new(gy.dims().to_vec(), d)?);
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![T::ZERO; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        for j in 0..c {
                            d[r * c + j] = T::from_f64(yr[j].to_f64() * (gr[j].to_f64() - dot));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), d)?);
                }
            }
            Op::Attention { q, k, v, batch, t, dk, probs } => {
                self.attention_backward(gy, *q, *k, *v, *batch, *t, *dk, probs, grads)?;
            }
            Op::CrossEntropy { p, targets } => {
                if self.wants(*p) {
                    let pv = self.value(*p);
                    let scale = -gy.data()[0].to_f64() / pv.rows() as f64;
                    let d = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&pp, &y)| T::from_f64(scale * y.to_f64() / (pp.to_f64() + 1e-12)))
                        .collect();
                    self.accumulate(grads, *p, Tensor::new(pv.dims().to_vec(), d)?);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let g = gy.data()[0];
                    self.accumulate(grads, *x, Tensor::full(self.value(*x).dims(), g));
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        t: usize,
        dk: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let scale = 1.0 / (dk as f64).sqrt();
        let n = batch * t * dk;
        let mut dq = vec![T::ZERO; n];
        let mut dk_ = vec![T::ZERO; n];
        let mut dv = vec![T::ZERO; n];
        let mut dp = vec![T::ZERO; t * t];
        let mut ds = vec![T::ZERO; t * t];
        let g = gy.data();
        for b in 0..batch {
            let blk = b * t * dk..(b + 1) * t * dk;
            let p = &probs[b * t * t..(b + 1) * t * t];
            // dV = Pᵀ dO ; dP = dO Vᵀ
            gemm_block(t, t, dk, p, true, &g[blk.clone()], false, &mut dv[blk.clone()]);
            gemm_block(t, dk, t, &g[blk.clone()], false, &vv[blk.clone()], true, &mut dp);
            // dS = P ∘ (dP - rowsum(dP ∘ P)), then scaled
            for r in 0..t {
                let row = r * t..(r + 1) * t;
                let dot: f64 = p[row.clone()]
                    .iter()
                    .zip(&dp[row.clone()])
                    .map(|(a, b)| a.to_f64() * b.to_f64())
                    .sum();
                for j in row {
                    ds[j] = T::from_f64(p[j].to_f64() * (dp[j].to_f64() - dot) * scale);
                }
            }
            // dQ = dS K ; dK = dSᵀ Q
            gemm_block(t, t, dk, &ds, false, &kv[blk.clone()], false, &mut dq[blk.clone()]);
            gemm_block(t, t, dk, &ds, true, &qv[blk.clone()], false, &mut dk_[blk.clone()]);
        }
        let dims = gy.dims().to_vec();
        if self.wants(q) {
            self.accumulate(grads, q, Tensor::new(dims.clone(), dq)?);
        }
        if self.wants(k) {
            self.accumulate(grads, k, Tensor::new(dims.clone(), dk_)?);
        }
        if self.wants(v) {
            self.accumulate(grads, v, Tensor::new(dims, dv)?);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_block<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
    ops::gemm(m, k, n, a, ta, b, tb, T::ZERO, c);
}

pub fn cross_entropy_value<T: Real>(p: &Tensor<T>, targets: &Tensor<T>) -> f64 {
    let total: f64 = p
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&pp, &y)| y.to_f64() * (pp.to_f64() + 1e-12).ln())
        .sum();
    -total / p.rows().max(1) as f64
}
