//! Training loop: per-epoch copy masks, masked batching, AdamW with a
//! warmup-cosine schedule and global-norm gradient clipping.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Table;
use crate::error::{Error, Result};
use crate::masking::{self, MaskStrategy, MaskedBatch};
use crate::model::{EncoderInput, LossMode, Model, ModelConfig, ModelParams, Real};
use crate::rng::{self, Stream};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub grad_clip: f64,
    pub p_cm: f64,
    pub mask_strategy: MaskStrategy,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            warmup_epochs: 50,
            min_lr: 1e-5,
            grad_clip: 5.0,
            p_cm: 0.9,
            mask_strategy: MaskStrategy::Mtcm,
            loss_mode: LossMode::Both,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return fail(format!("learning rates lr={} min_lr={} invalid", self.lr, self.min_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} negative", self.weight_decay));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip {} must be positive", self.grad_clip));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail(format!("betas {:?} outside [0, 1)", self.betas));
        }
        let ratio_ok = match self.mask_strategy {
            MaskStrategy::Random => self.p_cm > 0.0 && self.p_cm < 1.0,
            _ => (0.0..1.0).contains(&self.p_cm),
        };
        if !ratio_ok {
            return fail(format!("p_cm {} out of range", self.p_cm));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Linear ramp from 0 over the warmup steps, then cosine decay reaching
/// `min_lr` at the last step of the last epoch.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Hyperparameters of a single AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Updates one tensor in place. `step` is 1-based; `decay` toggles the
/// decoupled weight decay.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    hp: &AdamWParams,
    decay: bool,
) {
    let b1 = T::lit(hp.beta1);
    let b2 = T::lit(hp.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - hp.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - hp.beta2.powi(step as i32));
    let lr = T::lit(hp.lr);
    let eps = T::lit(hp.eps);
    let shrink = if decay { T::lit(1.0 - hp.lr * hp.weight_decay) } else { one };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment estimates for every tensor of a model.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = |p: &ModelParams<T>| {
            p.tensors()
                .iter()
                .map(|t| vec![T::zero(); t.data.len()])
                .collect::<Vec<_>>()
        };
        AdamW {
            first: zeros(params),
            second: zeros(params),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every tensor. Biases, norm shifts and the mask token are
    /// exempt from weight decay.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, hp: &AdamWParams) -> Result<()> {
        self.steps += 1;
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            adamw_update(
                p.data,
                grads[i].data,
                &mut self.first[i],
                &mut self.second[i],
                self.steps,
                hp,
                p.kind.decays(),
            );
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite update of {} at step {}",
                    p.name, self.steps
                )));
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::lit(max_norm / (norm + 1e-6)));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub trace: Vec<EpochRecord>,
}

/// Builds one batch according to the masking strategy.
pub fn build_batch(
    strategy: MaskStrategy,
    ids: &[usize],
    observed: &Array2<bool>,
    copy: Option<&Array2<bool>>,
    p_cm: f64,
    stream: &mut Stream,
) -> Result<MaskedBatch> {
    let obs = observed.select(Axis(0), ids);
    match (strategy, copy) {
        (MaskStrategy::Mtcm, Some(c)) => {
            masking::mtcm_build_batch(ids, obs.view(), c.select(Axis(0), ids).view(), stream)
        }
        (MaskStrategy::NaiveCm, Some(c)) => masking::copy_mask_batch(ids, obs.view(), c.select(Axis(0), ids).view()),
        (MaskStrategy::Random, _) => masking::random_mask(ids, obs.view(), p_cm, stream),
        (_, None) => Err(Error::InvalidArgument("copy masking needs a copy mask".into())),
    }
}

/// Trains a fresh model on a scaled table.
pub fn train(
    table: &Table,
    context: Option<&Array2<f64>>,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::InvalidInput("empty training table".into()));
    }
    if model_cfg.n_features != table.n_cols() {
        return Err(Error::Shape(format!(
            "model expects {} features, table has {}",
            model_cfg.n_features,
            table.n_cols()
        )));
    }
    if let Some(i) = table.observed.rows().into_iter().position(|r| !r.iter().any(|&o| o)) {
        return Err(Error::EmptyRow(i));
    }

    let mut model = Model::<f32>::new(model_cfg, context, rng::derive_named(cfg.seed, "init"))?;
    let mut stream = rng::stream(rng::derive_named(cfg.seed, "masking"));
    let mut optimizer = AdamW::new(&model.params);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let copy = match cfg.mask_strategy {
            MaskStrategy::Random => None,
            _ => Some(masking::naive_copy_mask(&table.observed, cfg.p_cm, &mut stream)?),
        };
        order.shuffle(&mut stream);
        let epoch_lr = lr_at(step, steps_per_epoch, cfg);
        let mut loss_sum = 0.0;
        for ids in order.chunks(cfg.batch_size) {
            let batch = build_batch(cfg.mask_strategy, ids, &table.observed, copy.as_ref(), cfg.p_cm, &mut stream)?;
            let values = table.values.select(Axis(0), ids);
            let input = EncoderInput::<f32>::new(values.view(), batch.observed_sets, batch.seq_len)?;
            let (loss, mut grads) = model.loss_and_gradients(&input, &input.values, &batch.masked_sets, cfg.loss_mode)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            let hp = AdamWParams {
                lr: lr_at(step, steps_per_epoch, cfg),
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                eps: ADAM_EPS,
                weight_decay: cfg.weight_decay,
            };
            optimizer.step(&mut model.params, &grads, &hp)?;
            loss_sum += loss * ids.len() as f64;
            step += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / n as f64,
            lr: epoch_lr,
        };
        log::debug!("epoch {} loss {:.6} lr {:.3e}", record.epoch, record.mean_loss, record.lr);
        trace.push(record);
    }
    Ok(TrainOutcome { model, trace })
}

pub fn render_trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.mean_loss, r.lr);
    }
    out
}

pub fn write_trace_csv(trace: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_trace_csv(trace)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelHyper;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 7;
        assert_eq!(lr_at(0, spe, &cfg), 0.0);
        assert!((lr_at(50 * spe, spe, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_at(300 * spe - 1, spe, &cfg) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_end() {
        let cfg = TrainConfig::default();
        let spe = 1000;
        let w = 50 * spe;
        assert!((lr_at(w - 1, spe, &cfg) - cfg.lr).abs() < 1e-7);
        assert!((lr_at(w + 1, spe, &cfg) - cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn one_step_adamw() {
        let hp = AdamWParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &hp, true);
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let hp = AdamWParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (mut p, mut m, mut v) = ([0.3f64, -2.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &hp, true);
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let hp = AdamWParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        };
        let (mut p, mut m, mut v) = ([2.0f64], [0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, &hp, true);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        let mut q = [2.0f64];
        adamw_update(&mut q, &[0.0], &mut [0.0], &mut [0.0], 1, &hp, false);
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::default();
        c.warmup_epochs = 300;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.grad_clip = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.mask_strategy = MaskStrategy::Random;
        c.p_cm = 0.0;
        assert!(c.validate().is_err());
    }

    fn toy_table(n: usize, seed: u64) -> Table {
        let mut s = rng::stream(seed);
        use rand::Rng;
        let values = Array2::from_shape_fn((n, 4), |_| s.random_range(0.0..1.0));
        let mut t = Table::from_complete(&["a", "b", "c", "d"], values).unwrap();
        t.observed[[0, 1]] = false;
        t.values[[0, 1]] = f64::NAN;
        t
    }

    fn tiny_model(k: usize) -> ModelConfig {
        ModelConfig::new(
            k,
            0,
            ModelHyper {
                embed_dim: 8,
                enc_depth: 1,
                dec_depth: 1,
                heads: 2,
                ..ModelHyper::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn trace_has_one_row_per_epoch_and_is_deterministic() {
        let t = toy_table(40, 1);
        let cfg = small_cfg();
        let a = train(&t, None, tiny_model(4), &cfg).unwrap();
        let b = train(&t, None, tiny_model(4), &cfg).unwrap();
        assert_eq!(a.trace.len(), cfg.epochs);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.params, b.model.params);
        let csv = render_trace_csv(&a.trace);
        assert_eq!(csv.lines().count(), cfg.epochs + 1);
    }

    #[test]
    fn every_strategy_trains() {
        let t = toy_table(30, 2);
        for strategy in [MaskStrategy::Mtcm, MaskStrategy::NaiveCm, MaskStrategy::Random] {
            let cfg = TrainConfig {
                mask_strategy: strategy,
                epochs: 3,
                warmup_epochs: 1,
                ..small_cfg()
            };
            let out = train(&t, None, tiny_model(4), &cfg).unwrap();
            assert!(out.trace.iter().all(|r| r.mean_loss.is_finite()));
        }
    }

    #[test]
    fn empty_row_is_rejected() {
        let mut t = toy_table(10, 3);
        t.observed.row_mut(4).fill(false);
        assert!(matches!(train(&t, None, tiny_model(4), &small_cfg()), Err(Error::EmptyRow(4))));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let cfg = tiny_model(4);
        let mut g = ModelParams::<f64>::init(&cfg, &mut rng::stream(9));
        g.scale(100.0);
        let before = clip_global_norm(&mut g, 5.0);
        assert!(before > 5.0);
        assert!(g.global_norm() <= 5.0 + 1e-6);
    }
}
