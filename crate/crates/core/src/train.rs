//! Mini-batch training with Adam and global-norm gradient clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, forward_graph, ModelConfig, ModelParams};
use crate::ops::Mode;
use crate::preprocess::EncodedDataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(5.0),
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be >= 1 and batch size >= 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub batches: usize,
}

/// Adam state for a list of tensors.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Adam {
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.b1.powi(self.step);
        let c2 = 1.0 - self.b2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if self.lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64 * scale;
                m[j] = self.b1 * m[j] + (1.0 - self.b1) * gj;
                v[j] = self.b2 * v[j] + (1.0 - self.b2) * gj * gj;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescaling factor that brings `norm` down to `clip`.
pub fn clip_scale(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

/// Shuffled mini-batches for one epoch; batches with fewer than two rows are dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| {
            if c.len() < 2 {
                log::debug!("skipping batch of {} row", c.len());
            }
            c.len() >= 2
        })
        .map(|c| c.to_vec())
        .collect()
}

/// One optimizer step on a batch. Returns the batch loss and correct predictions.
pub fn train_step(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    adam: &mut Adam,
    clip: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut pass = forward_graph(params, cfg, x, Mode::Train, rng)?;
    let loss_var = pass.graph.cross_entropy(pass.probs, y)?;
    let loss = pass.graph.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let labels = argmax_rows(y);
    let correct = argmax_rows(pass.graph.value(pass.probs))
        .iter()
        .zip(&labels)
        .filter(|(a, b)| a == b)
        .count();
    let mut grads = pass.graph.backward(loss_var)?;
    let g: Vec<Tensor<f32>> = pass
        .learnable
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(pass.graph.value(v).dims())))
        .collect();
    let norm = global_norm(&g);
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    let scale = clip_scale(norm, clip);
    let mut targets = params.learnable_mut();
    adam.step(&mut targets, &g, scale);
    params.input_running = pass.running.remove(0);
    for (b, rs) in params.blocks.iter_mut().zip(pass.running) {
        b.bn_running = rs;
    }
    Ok((loss, correct))
}

/// Trains `params` in place. A non-finite loss or gradient stops training with
/// [`Error::TrainingAborted`], carrying the parameters from the end of the
/// last completed epoch.
pub fn train(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    data: &EncodedDataset,
    tcfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    tcfg.validate()?;
    params.shape_audit(cfg)?;
    if data.width() != cfg.input_dim || data.n_classes() != cfg.classes {
        return Err(Error::Shape(format!(
            "dataset is {} wide with {} classes, model expects {} and {}",
            data.width(),
            data.n_classes(),
            cfg.input_dim,
            cfg.classes
        )));
    }
    let sizes: Vec<usize> = params.learnable().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(tcfg, &sizes);
    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_d20f);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut last_finite = params.clone();

    for epoch in 0..tcfg.epochs {
        let batches = epoch_batches(data.len(), tcfg.batch_size, &mut order_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for b in &batches {
            let x = data.x.select_rows(b);
            let y = data.y.select_rows(b);
            match train_step(params, cfg, &x, &y, &mut adam, tcfg.clip_norm, &mut dropout_rng) {
                Ok((l, c)) => {
                    loss_sum += l * b.len() as f64;
                    correct += c;
                    seen += b.len();
                }
                Err(Error::Numeric(msg)) => {
                    log::error!("epoch {epoch}: {msg}");
                    return Err(Error::TrainingAborted {
                        epoch,
                        last_finite: Box::new(last_finite),
                        history,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let stats = EpochStats {
            epoch,
            loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            accuracy: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            batches: batches.len(),
        };
        log::info!("epoch {} loss {:.5} acc {:.4}", epoch, stats.loss, stats.accuracy);
        history.push(stats);
        last_finite = params.clone();
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict_proba;
    use crate::preprocess::{one_hot, Provenance};
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> EncodedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            for _ in 0..4 {
                x.push(centre + rng.random_range(-0.5f32..0.5));
            }
            labels.push(c);
        }
        EncodedDataset {
            x: Tensor::new(vec![n, 4], x).unwrap(),
            y: one_hot(&labels, 2).unwrap(),
            labels,
            column_names: (0..4).map(|i| format!("f{i}")).collect(),
            class_names: vec!["a".into(), "b".into()],
            provenance: Provenance::default(),
        }
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            widths: vec![8, 4],
            d_k: 4,
            group: 1,
            dropout: 0.0,
            classes: 2,
            seed: 1,
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = blobs(200, 3);
        let cfg = toy_cfg();
        let mut p = ModelParams::init(&cfg).unwrap();
        let tcfg = TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let hist = train(&mut p, &cfg, &data, &tcfg).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss);
        let probs = predict_proba(&p, &cfg, &data.x).unwrap();
        let acc = argmax_rows(&probs).iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / 200.0;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn zero_learning_rate_freezes_learnables() {
        let data = blobs(40, 1);
        let cfg = toy_cfg();
        let mut p = ModelParams::init(&cfg).unwrap();
        let before = p.clone();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train(&mut p, &cfg, &data, &tcfg).unwrap();
        assert_eq!(p.learnable(), before.learnable());
        assert_ne!(p.input_running, before.input_running);
    }

    #[test]
    fn same_seed_same_weights() {
        let data = blobs(30, 2);
        let cfg = ModelConfig { dropout: 0.3, ..toy_cfg() };
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut a = ModelParams::init(&cfg).unwrap();
        let mut b = ModelParams::init(&cfg).unwrap();
        train(&mut a, &cfg, &data, &tcfg).unwrap();
        train(&mut b, &cfg, &data, &tcfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_loss_aborts_with_last_finite_params() {
        let mut data = blobs(20, 4);
        data.x.data_mut()[5] = f32::NAN;
        let cfg = toy_cfg();
        let mut p = ModelParams::init(&cfg).unwrap();
        let init = p.clone();
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 64,
            ..TrainConfig::default()
        };
        match train(&mut p, &cfg, &data, &tcfg) {
            Err(Error::TrainingAborted { epoch, last_finite, history }) => {
                assert_eq!(epoch, 0);
                assert!(history.is_empty());
                assert_eq!(*last_finite, init);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn single_row_batches_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|c| c.len() == 4));
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_scale(10.0, Some(5.0)), 0.5);
        assert_eq!(clip_scale(1.0, Some(5.0)), 1.0);
        assert_eq!(clip_scale(1e9, None), 1.0);
    }

    #[test]
    fn bad_configs() {
        let t = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(matches!(t.validate(), Err(Error::Config(_))));
        let t = TrainConfig { learning_rate: -1.0, ..TrainConfig::default() };
        assert!(t.validate().is_err());
    }
}
