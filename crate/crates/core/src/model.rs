//! Densely connected classifier with per-block self-attention residuals.
//!
//! Block `l` sees the concatenation of the normalized input and every earlier
//! block output, applies batch norm → ReLU → fully connected, attends over its
//! own activation (tokenized into groups of `group` scalars) and adds the
//! attention back as a residual. The head reads the concatenation of the
//! normalized input and all block outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{Mode, RunningStats};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_WIDTHS: [usize; 7] = [512, 512, 256, 128, 64, 32, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub d_k: usize,
    pub group: usize,
    pub dropout: f64,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        ModelConfig {
            input_dim,
            widths: DEFAULT_WIDTHS.to_vec(),
            d_k: 16,
            group: 1,
            dropout: 0.2,
            classes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(Error::Config("input width and class count must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("block widths {:?} must be non-empty and positive", self.widths)));
        }
        if self.d_k == 0 || self.group == 0 {
            return Err(Error::Config("attention d_k and group size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Input width of block `l` (0-based): `d0 + sum of earlier widths`.
    pub fn block_input_width(&self, l: usize) -> usize {
        self.input_dim + self.widths[..l].iter().sum::<usize>()
    }

    pub fn head_input_width(&self) -> usize {
        self.block_input_width(self.widths.len())
    }

    /// Number of attention tokens for a block of width `w`.
    pub fn tokens(&self, w: usize) -> usize {
        w.div_ceil(self.group)
    }

    pub fn learnable_count(&self) -> usize {
        let (dk, g) = (self.d_k, self.group);
        let mut n = 2 * self.input_dim;
        for (l, &w) in self.widths.iter().enumerate() {
            let inw = self.block_input_width(l);
            n += 2 * inw + w * inw + w + dk * g + dk + 3 * dk * dk + dk;
        }
        n + self.classes * self.head_input_width() + self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Real = f32> {
    /// Token embedding `[d_k x group]`.
    pub embed: Tensor<T>,
    pub embed_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Projects each attended token back to one scalar, `[d_k]`.
    pub out_proj: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Real = f32> {
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_running: RunningStats<T>,
    /// `[width x input width]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub attn: AttentionParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub input_gamma: Tensor<T>,
    pub input_beta: Tensor<T>,
    pub input_running: RunningStats<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

fn uniform<T: Real>(rng: &mut impl Rng, dims: &[usize], bound: f64) -> Tensor<T> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match data")
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization: fully connected layers draw from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, batch norms start at identity.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (dk, g) = (cfg.d_k, cfg.group);
        let blocks = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let inw = cfg.block_input_width(l);
                let fc = 1.0 / (inw as f64).sqrt();
                let emb = 1.0 / (g as f64).sqrt();
                let att = 1.0 / (dk as f64).sqrt();
                BlockParams {
                    bn_gamma: Tensor::full(&[inw], T::ONE),
                    bn_beta: Tensor::zeros(&[inw]),
                    bn_running: RunningStats::new(inw),
                    weight: uniform(&mut rng, &[w, inw], fc),
                    bias: uniform(&mut rng, &[w], fc),
                    attn: AttentionParams {
                        embed: uniform(&mut rng, &[dk, g], emb),
                        embed_bias: uniform(&mut rng, &[dk], emb),
                        w_q: uniform(&mut rng, &[dk, dk], att),
                        w_k: uniform(&mut rng, &[dk, dk], att),
                        w_v: uniform(&mut rng, &[dk, dk], att),
                        out_proj: uniform(&mut rng, &[dk], att),
                    },
                }
            })
            .collect();
        let hin = cfg.head_input_width();
        let hb = 1.0 / (hin as f64).sqrt();
        Ok(ModelParams {
            input_gamma: Tensor::full(&[cfg.input_dim], T::ONE),
            input_beta: Tensor::zeros(&[cfg.input_dim]),
            input_running: RunningStats::new(cfg.input_dim),
            blocks,
            head_weight: uniform(&mut rng, &[cfg.classes, hin], hb),
            head_bias: uniform(&mut rng, &[cfg.classes], hb),
        })
    }

    /// Every tensor with its stable name, learnable and running statistics alike.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = vec![
            ("input_bn.gamma".into(), &self.input_gamma),
            ("input_bn.beta".into(), &self.input_beta),
            ("input_bn.running_mean".into(), &self.input_running.mean),
            ("input_bn.running_var".into(), &self.input_running.var),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("block{l}");
            v.push((format!("{p}.bn.gamma"), &b.bn_gamma));
            v.push((format!("{p}.bn.beta"), &b.bn_beta));
            v.push((format!("{p}.bn.running_mean"), &b.bn_running.mean));
            v.push((format!("{p}.bn.running_var"), &b.bn_running.var));
            v.push((format!("{p}.fc.weight"), &b.weight));
            v.push((format!("{p}.fc.bias"), &b.bias));
            v.push((format!("{p}.attn.embed"), &b.attn.embed));
            v.push((format!("{p}.attn.embed_bias"), &b.attn.embed_bias));
            v.push((format!("{p}.attn.w_q"), &b.attn.w_q));
            v.push((format!("{p}.attn.w_k"), &b.attn.w_k));
            v.push((format!("{p}.attn.w_v"), &b.attn.w_v));
            v.push((format!("{p}.attn.out_proj"), &b.attn.out_proj));
        }
        v.push(("head.weight".into(), &self.head_weight));
        v.push(("head.bias".into(), &self.head_bias));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = vec![
            ("input_bn.gamma".into(), &mut self.input_gamma),
            ("input_bn.beta".into(), &mut self.input_beta),
            ("input_bn.running_mean".into(), &mut self.input_running.mean),
            ("input_bn.running_var".into(), &mut self.input_running.var),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{l}");
            v.push((format!("{p}.bn.gamma"), &mut b.bn_gamma));
            v.push((format!("{p}.bn.beta"), &mut b.bn_beta));
            v.push((format!("{p}.bn.running_mean"), &mut b.bn_running.mean));
            v.push((format!("{p}.bn.running_var"), &mut b.bn_running.var));
            v.push((format!("{p}.fc.weight"), &mut b.weight));
            v.push((format!("{p}.fc.bias"), &mut b.bias));
            v.push((format!("{p}.attn.embed"), &mut b.attn.embed));
            v.push((format!("{p}.attn.embed_bias"), &mut b.attn.embed_bias));
            v.push((format!("{p}.attn.w_q"), &mut b.attn.w_q));
            v.push((format!("{p}.attn.w_k"), &mut b.attn.w_k));
            v.push((format!("{p}.attn.w_v"), &mut b.attn.w_v));
            v.push((format!("{p}.attn.out_proj"), &mut b.attn.out_proj));
        }
        v.push(("head.weight".into(), &mut self.head_weight));
        v.push(("head.bias".into(), &mut self.head_bias));
        v
    }

    /// Learnable tensors in the order [`ForwardPass::learnable`] lists them.
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_mut()
            .into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn learnable(&self) -> Vec<&Tensor<T>> {
        self.named()
            .into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(_, t)| t)
            .collect()
    }

    /// Expected dims of every named tensor under `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (dk, g, d0) = (cfg.d_k, cfg.group, cfg.input_dim);
        let mut v = vec![
            ("input_bn.gamma".to_string(), vec![d0]),
            ("input_bn.beta".to_string(), vec![d0]),
            ("input_bn.running_mean".to_string(), vec![d0]),
            ("input_bn.running_var".to_string(), vec![d0]),
        ];
        for (l, &w) in cfg.widths.iter().enumerate() {
            let inw = cfg.block_input_width(l);
            let p = format!("block{l}");
            v.push((format!("{p}.bn.gamma"), vec![inw]));
            v.push((format!("{p}.bn.beta"), vec![inw]));
            v.push((format!("{p}.bn.running_mean"), vec![inw]));
            v.push((format!("{p}.bn.running_var"), vec![inw]));
            v.push((format!("{p}.fc.weight"), vec![w, inw]));
            v.push((format!("{p}.fc.bias"), vec![w]));
            v.push((format!("{p}.attn.embed"), vec![dk, g]));
            v.push((format!("{p}.attn.embed_bias"), vec![dk]));
            v.push((format!("{p}.attn.w_q"), vec![dk, dk]));
            v.push((format!("{p}.attn.w_k"), vec![dk, dk]));
            v.push((format!("{p}.attn.w_v"), vec![dk, dk]));
            v.push((format!("{p}.attn.out_proj"), vec![dk]));
        }
        v.push(("head.weight".to_string(), vec![cfg.classes, cfg.head_input_width()]));
        v.push(("head.bias".to_string(), vec![cfg.classes]));
        v
    }

    /// Checks every tensor's name and dims against `cfg`, plus finiteness.
    pub fn shape_audit(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "model has {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, ed), (an, at)) in expected.iter().zip(&actual) {
            if en != an || ed.as_slice() != at.dims() {
                return Err(Error::Shape(format!(
                    "tensor {an} has dims {:?}, expected {en} {ed:?}",
                    at.dims()
                )));
            }
            at.ensure_finite(an)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let rs = |r: &RunningStats<T>| RunningStats {
            mean: r.mean.cast(),
            var: r.var.cast(),
        };
        ModelParams {
            input_gamma: self.input_gamma.cast(),
            input_beta: self.input_beta.cast(),
            input_running: rs(&self.input_running),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    bn_gamma: b.bn_gamma.cast(),
                    bn_beta: b.bn_beta.cast(),
                    bn_running: rs(&b.bn_running),
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    attn: AttentionParams {
                        embed: b.attn.embed.cast(),
                        embed_bias: b.attn.embed_bias.cast(),
                        w_q: b.attn.w_q.cast(),
                        w_k: b.attn.w_k.cast(),
                        w_v: b.attn.w_v.cast(),
                        out_proj: b.attn.out_proj.cast(),
                    },
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

/// A recorded forward pass, ready for `backward`.
pub struct ForwardPass<T: Real> {
    pub graph: Graph<T>,
    pub probs: Var,
    /// Graph leaves of the learnable tensors, in [`ModelParams::learnable`] order.
    pub learnable: Vec<Var>,
    /// Batch-norm statistics after this pass (input first, then one per block).
    pub running: Vec<RunningStats<T>>,
}

struct AttnVars {
    embed: Var,
    embed_bias: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    out_proj: Var,
}

fn attn_leaves<T: Real>(g: &mut Graph<T>, a: &AttentionParams<T>, learn: &mut Vec<Var>) -> AttnVars {
    let mut p = |t: &Tensor<T>| {
        let v = g.param(t.clone());
        learn.push(v);
        v
    };
    AttnVars {
        embed: p(&a.embed),
        embed_bias: p(&a.embed_bias),
        w_q: p(&a.w_q),
        w_k: p(&a.w_k),
        w_v: p(&a.w_v),
        out_proj: p(&a.out_proj),
    }
}

/// Records the attention residual branch for a `[B x w]` activation.
fn attend_graph<T: Real>(g: &mut Graph<T>, h: Var, a: &AttnVars, d_k: usize, group: usize) -> Result<Var> {
    let (b, w) = (g.value(h).rows(), g.value(h).cols());
    let t = w.div_ceil(group);
    let padded = t * group;
    let hp = if padded > w {
        let pad = g.input(Tensor::zeros(&[b, padded - w]));
        g.concat_cols(&[h, pad])?
    } else {
        h
    };
    let tokens = g.reshape(hp, &[b * t, group])?;
    let e = g.matmul_nt(tokens, a.embed)?;
    let e = g.add_row(e, a.embed_bias)?;
    let q = g.matmul(e, a.w_q)?;
    let k = g.matmul(e, a.w_k)?;
    let v = g.matmul(e, a.w_v)?;
    let att = g.attention(q, k, v, b)?;
    let p = g.reshape(a.out_proj, &[d_k, 1])?;
    let s = g.matmul(att, p)?;
    let mut s = g.reshape(s, &[b, t])?;
    if group > 1 {
        s = g.repeat_cols(s, group)?;
    }
    if padded > w {
        s = g.slice_cols(s, 0, w)?;
    }
    Ok(s)
}

/// Attention residual branch applied to each row of `h` independently.
pub fn attend<T: Real>(h: &Tensor<T>, params: &AttentionParams<T>, d_k: usize, group: usize) -> Result<Tensor<T>> {
    if group == 0 || d_k == 0 {
        return Err(Error::Shape("attend needs group >= 1 and d_k >= 1".into()));
    }
    let mut g = Graph::new();
    let mut learn = Vec::new();
    let vars = attn_leaves(&mut g, params, &mut learn);
    let hv = g.input(h.clone());
    let out = attend_graph(&mut g, hv, &vars, d_k, group)?;
    Ok(g.value(out).clone())
}

/// Records a full forward pass. Train mode samples dropout from `rng` and
/// returns updated batch-norm statistics; `params` is never modified.
pub fn forward_graph<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ForwardPass<T>> {
    if x.rank() != 2 || x.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input dims {:?}, model expects width {}",
            x.dims(),
            cfg.input_dim
        )));
    }
    if params.blocks.len() != cfg.widths.len() {
        return Err(Error::Shape("parameter blocks do not match config".into()));
    }
    let mut g = Graph::new();
    let mut learn = Vec::new();
    let mut running = Vec::with_capacity(cfg.widths.len() + 1);

    let xi = g.input(x.clone());
    let ig = g.param(params.input_gamma.clone());
    let ib = g.param(params.input_beta.clone());
    learn.extend([ig, ib]);
    let mut rs = params.input_running.clone();
    let z0 = g.batchnorm(xi, ig, ib, mode, &mut rs)?;
    running.push(rs);

    let mut features = vec![z0];
    for (l, bp) in params.blocks.iter().enumerate() {
        let gamma = g.param(bp.bn_gamma.clone());
        let beta = g.param(bp.bn_beta.clone());
        let weight = g.param(bp.weight.clone());
        let bias = g.param(bp.bias.clone());
        learn.extend([gamma, beta, weight, bias]);
        let attn = attn_leaves(&mut g, &bp.attn, &mut learn);

        let xl = if features.len() == 1 { features[0] } else { g.concat_cols(&features)? };
        let mut rs = bp.bn_running.clone();
        let n = g.batchnorm(xl, gamma, beta, mode, &mut rs).map_err(|e| block_error(l, e))?;
        running.push(rs);
        let r = g.relu(n);
        let h = g.matmul_nt(r, weight)?;
        let h = g.add_row(h, bias)?;
        let a = attend_graph(&mut g, h, &attn, cfg.d_k, cfg.group).map_err(|e| block_error(l, e))?;
        let o = g.add(a, h)?;
        let o = g.dropout(o, cfg.dropout, mode, rng)?;
        if !g.value(o).all_finite() {
            return Err(Error::Numeric(format!("block {l}: non-finite activation")));
        }
        features.push(o);
    }

    let z = g.concat_cols(&features)?;
    let hw = g.param(params.head_weight.clone());
    let hb = g.param(params.head_bias.clone());
    learn.extend([hw, hb]);
    let logits = g.matmul_nt(z, hw)?;
    let logits = g.add_row(logits, hb)?;
    let probs = g.softmax_rows(logits).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("head: {m}")),
        other => other,
    })?;
    Ok(ForwardPass {
        graph: g,
        probs,
        learnable: learn,
        running,
    })
}

fn block_error(l: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("block {l}: {m}")),
        other => other,
    }
}

/// Class probabilities for a batch.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let pass = forward_graph(params, cfg, x, mode, rng)?;
    Ok(pass.graph.value(pass.probs).clone())
}

/// Inference-mode probabilities; a pure function of `(params, x)`.
pub fn predict_proba(params: &ModelParams, cfg: &ModelConfig, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    // infer mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(params, cfg, x, Mode::Infer, &mut rng)
}

/// Categorical cross-entropy of probabilities against one-hot targets.
pub fn loss<T: Real>(probs: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if probs.dims() != y.dims() {
        return Err(Error::Shape(format!("loss: {:?} vs {:?}", probs.dims(), y.dims())));
    }
    Ok(crate::autodiff::cross_entropy_value(probs, y))
}

pub fn argmax_rows<T: Real>(p: &Tensor<T>) -> Vec<usize> {
    (0..p.rows())
        .map(|r| {
            let row = p.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            widths: vec![4, 4],
            d_k: 2,
            group: 1,
            dropout: 0.0,
            classes: 2,
            seed: 7,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn dense_widths() {
        let cfg = small_cfg();
        assert_eq!(cfg.head_input_width(), 11);
        assert_eq!(cfg.block_input_width(1), 7);
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        p.shape_audit(&cfg).unwrap();
        assert_eq!(p.blocks[1].weight.dims(), &[4, 7]);
        assert_eq!(p.head_weight.dims(), &[2, 11]);
    }

    #[test]
    fn tensor_count_per_block() {
        let cfg = ModelConfig::new(10, 5);
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        assert_eq!(p.named().len(), 4 + 12 * 7 + 2);
        let learnable: usize = p.learnable().iter().map(|t| t.len()).sum();
        assert_eq!(learnable, cfg.learnable_count());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = small_cfg();
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, &[5, 3]);
        for mode in [Mode::Train, Mode::Infer] {
            let probs = forward(&p, &cfg, &x, mode, &mut rng).unwrap();
            for r in 0..5 {
                let s: f64 = probs.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(probs.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn infer_is_deterministic() {
        let mut cfg = small_cfg();
        cfg.dropout = 0.5;
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, &[6, 3]).cast::<f32>();
        let a = predict_proba(&p, &cfg, &x).unwrap();
        let b = predict_proba(&p, &cfg, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let cfg = small_cfg();
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        let x = Tensor::<f32>::zeros(&[4, 5]);
        assert!(matches!(predict_proba(&p, &cfg, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_names_a_stage() {
        let cfg = small_cfg();
        let mut p = ModelParams::<f32>::init(&cfg).unwrap();
        p.blocks[0].weight.data_mut()[0] = f32::INFINITY;
        let x = Tensor::<f32>::full(&[4, 3], 1.0);
        let mut x = x;
        x.data_mut()[0] = 2.0;
        match predict_proba(&p, &cfg, &x) {
            Err(Error::Numeric(m)) => assert!(m.contains("block"), "{m}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    /// Attention-free reference network assembled from eager ops.
    fn plain_forward(p: &ModelParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut rs = p.input_running.clone();
        let z0 = ops::batchnorm1d(x, &p.input_gamma, &p.input_beta, ops::BN_EPS, Mode::Infer, &mut rs).unwrap();
        let mut feats = vec![z0];
        for b in &p.blocks {
            let refs: Vec<&Tensor<f64>> = feats.iter().collect();
            let xl = ops::concat_cols(&refs).unwrap();
            let mut rs = b.bn_running.clone();
            let n = ops::batchnorm1d(&xl, &b.bn_gamma, &b.bn_beta, ops::BN_EPS, Mode::Infer, &mut rs).unwrap();
            let mut h = ops::matmul_t(&ops::relu(&n), false, &b.weight, true).unwrap();
            let w = h.cols();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v += b.bias.data()[i % w];
            }
            feats.push(h);
        }
        let refs: Vec<&Tensor<f64>> = feats.iter().collect();
        let z = ops::concat_cols(&refs).unwrap();
        let mut logits = ops::matmul_t(&z, false, &p.head_weight, true).unwrap();
        let c = logits.cols();
        for (i, v) in logits.data_mut().iter_mut().enumerate() {
            *v += p.head_bias.data()[i % c];
        }
        ops::softmax_rows(&logits).unwrap()
    }

    #[test]
    fn zero_output_projection_removes_attention_exactly() {
        let cfg = small_cfg();
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        for b in &mut p.blocks {
            b.attn.out_proj = Tensor::zeros(&[cfg.d_k]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[4, 3]);
        let with = forward(&p, &cfg, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(with, plain_forward(&p, &x));
    }

    #[test]
    fn attend_single_scalar_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dk = 3;
        let a = AttentionParams {
            embed: randn(&mut rng, &[dk, 1]),
            embed_bias: randn(&mut rng, &[dk]),
            w_q: randn(&mut rng, &[dk, dk]),
            w_k: randn(&mut rng, &[dk, dk]),
            w_v: randn(&mut rng, &[dk, dk]),
            out_proj: randn(&mut rng, &[dk]),
        };
        let h = Tensor::from_f64(&[2, 1], &[0.7, -1.3]).unwrap();
        let out = attend(&h, &a, dk, 1).unwrap();
        for r in 0..2 {
            let hv = h.at(r, 0);
            let e: Vec<f64> = (0..dk).map(|i| a.embed.data()[i] * hv + a.embed_bias.data()[i]).collect();
            let v: Vec<f64> = (0..dk).map(|j| (0..dk).map(|i| e[i] * a.w_v.at(i, j)).sum()).collect();
            let expect: f64 = v.iter().zip(a.out_proj.data()).map(|(x, p)| x * p).sum();
            assert!((out.at(r, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_zero_embedding_is_uniform() {
        let dk = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = AttentionParams {
            embed: Tensor::zeros(&[dk, 1]),
            embed_bias: Tensor::zeros(&[dk]),
            w_q: randn(&mut rng, &[dk, dk]),
            w_k: randn(&mut rng, &[dk, dk]),
            w_v: randn(&mut rng, &[dk, dk]),
            out_proj: randn(&mut rng, &[dk]),
        };
        let h = randn(&mut rng, &[3, 5]);
        // all tokens embed to zero, so every output is zero regardless of weights
        let out = attend(&h, &a, dk, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_attention_pads_and_slices() {
        let mut cfg = small_cfg();
        cfg.group = 3; // width 4 -> two tokens, one padded slot
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        p.shape_audit(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[4, 3]);
        let probs = forward(&p, &cfg, &x, Mode::Train, &mut rng).unwrap();
        assert_eq!(probs.dims(), &[4, 2]);
        let h = randn(&mut rng, &[2, 4]);
        let out = attend(&h, &p.blocks[0].attn, cfg.d_k, 3).unwrap();
        assert_eq!(out.dims(), &[2, 4]);
        // the first three columns share a token
        assert_eq!(out.at(0, 0), out.at(0, 2));
    }

    #[test]
    fn loss_values() {
        let y = Tensor::<f64>::from_f64(&[2, 5], &[1., 0., 0., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        assert!(loss(&y, &y).unwrap() <= 1e-11 * 5.0);
        let uniform = Tensor::full(&[2, 5], 0.2);
        assert!((loss(&uniform, &y).unwrap() - 5f64.ln()).abs() < 1e-9);
        let p = Tensor::<f64>::from_f64(&[1, 2], &[0.3, 0.7]).unwrap();
        let t = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        assert!((loss(&p, &t).unwrap() + (0.7f64 + 1e-12).ln()).abs() < 1e-15);
    }
}
