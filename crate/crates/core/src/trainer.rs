//! Loss, optimizer, gradient checking and the training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::PreparedVideo;
use crate::model::{Model, ModelConfig, Params};
use crate::sampler::{derive_seed, SamplerConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            cosine: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Smoothed cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_smoothed<T: Scalar>(logits: &[T], label: usize, eps: f64) -> (T, Vec<T>) {
    let k = logits.len();
    assert!(label < k, "label {label} out of range for {k} classes");
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let off = T::lit(eps / k as f64);
    let on = T::lit(1.0 - eps) + off;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(k);
    for (c, &v) in logits.iter().enumerate() {
        let target = if c == label { on } else { off };
        let log_p = v - log_z;
        loss -= target * log_p;
        grad.push(log_p.exp() - target);
    }
    (loss, grad)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update of a flat slice at step `t >= 1`.
pub fn adamw_update<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, weight_decay: f64) {
    let b1 = T::lit(BETA1);
    let b2 = T::lit(BETA2);
    let c1 = T::lit(1.0 - BETA1.powi(t as i32));
    let c2 = T::lit(1.0 - BETA2.powi(t as i32));
    let lr = T::lit(lr);
    let decay = T::one() - lr * T::lit(weight_decay);
    let eps = T::lit(ADAM_EPS);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] = p[i] * decay - lr * mh / (vh.sqrt() + eps);
    }
}

/// AdamW over every tensor. Weight decay applies to weight matrices only;
/// biases, norms and identity tables are not decayed.
pub fn adamw_step<T: Scalar>(params: &mut Params<T>, grads: &Params<T>, state: &mut AdamState<T>, lr: f64, weight_decay: f64) {
    state.t += 1;
    let t = state.t;
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        let wd = if is_decayed(&name) { weight_decay } else { 0.0 };
        adamw_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, lr, wd);
    }
}

fn is_decayed(name: &str) -> bool {
    name.ends_with(".w") || name == "embed.projection"
}

/// Learning rate at `step` out of `total` steps.
pub fn scheduled_lr(base: f64, step: usize, total: usize, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// One training or evaluation item.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub input: PreparedVideo<T>,
    pub label: usize,
}

/// Loss of one item under a sampler, with parameter gradients.
pub fn loss_and_grad<T: Scalar>(model: &Model<T>, ex: &Example<T>, sampler: &SamplerConfig, smoothing: f64) -> Result<(T, Vec<T>, Params<T>)> {
    let sel = model.sample(&ex.input, sampler)?;
    let (logits, cache) = model.forward_rows(&ex.input, &sel.order, sampler.drop_layer)?;
    let (loss, dlogits) = cross_entropy_smoothed(&logits, ex.label, smoothing);
    let grads = model.backward(&cache, &dlogits);
    Ok((loss, logits, grads))
}

/// Summed loss over a batch, each item with its own sampler seed.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &[(Example<T>, SamplerConfig)], smoothing: f64) -> Result<T> {
    let mut total = T::zero();
    for (ex, s) in batch {
        let sel = model.sample(&ex.input, s)?;
        let (logits, _) = model.forward_rows(&ex.input, &sel.order, s.drop_layer)?;
        total += cross_entropy_smoothed(&logits, ex.label, smoothing).0;
    }
    Ok(total)
}

/// Worst entry of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_tensor: Vec<TensorCheck>,
    pub checked: usize,
}

pub const FD_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Analytic gradients of the summed batch loss against central finite
/// differences, every parameter in turn. Tensors whose name does not
/// start with one of `only` are skipped (empty `only` checks everything).
pub fn grad_check(model: &Model<f64>, batch: &[(Example<f64>, SamplerConfig)], smoothing: f64, only: &[&str]) -> Result<GradCheckReport> {
    let mut analytic = model.params.zeros_like();
    for (ex, s) in batch {
        analytic.add_assign(&loss_and_grad(model, ex, s, smoothing)?.2);
    }
    let mut probe = model.clone();
    let names = model.params.names();
    let mut per_tensor = Vec::new();
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let grad = analytic.tensors()[ti].1.data.clone();
        let mut worst = TensorCheck {
            name: name.clone(),
            rel_err: 0.0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.params.tensors()[ti].1.data[i];
            // fourth-order central stencil at several steps: large steps can
            // straddle the kink of the object-token max, small ones drown
            // tiny gradients in roundoff
            let mut best = (f64::INFINITY, 0.0);
            for h in FD_STEPS {
                let mut at = |d: f64| -> Result<f64> {
                    probe.params.tensors_mut()[ti].1.data[i] = orig + d;
                    batch_loss(&probe, batch, smoothing)
                };
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                let f = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                let e = relative_error(a, f);
                if e < best.0 {
                    best = (e, f);
                }
            }
            probe.params.tensors_mut()[ti].1.data[i] = orig;
            let (e, f) = best;
            if e > worst.rel_err || i == 0 {
                worst.rel_err = e;
                worst.analytic = a;
                worst.numeric = f;
            }
            checked += 1;
        }
        per_tensor.push(worst);
    }
    let max_rel_err = per_tensor.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_tensor,
        checked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,loss,train_acc,val_acc";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.epoch, r.step, r.loss, r.train_acc, r.val_acc));
    }
    s
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of `model` on prepared examples, sampling with `sampler` as is.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &[Example<T>], sampler: &SamplerConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = data
        .par_iter()
        .map(|ex| Ok(argmax(&model.forward_prepared(&ex.input, sampler)?) == ex.label))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Sampler seed for item `i` of global step `step`.
pub fn step_sampler_seed(seed: u64, step: usize, i: usize) -> u64 {
    derive_seed(derive_seed(seed, step as u64), i as u64)
}

/// Trains in place. Each item of each step samples tokens with a fresh
/// seed derived from the training seed and the step. Validation uses the
/// sampler unchanged.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    sampler: &SamplerConfig,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    sampler.validate(model.cfg.depth)?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED_0000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let s = sampler.with_seed(step_sampler_seed(cfg.seed, step, i));
                    loss_and_grad(model, &train_set[idx], &s, cfg.label_smoothing)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.params.zeros_like();
            for (&idx, (loss, logits, g)) in chunk.iter().zip(&results) {
                loss_sum += loss.as_f64();
                hits += usize::from(argmax(logits) == train_set[idx].label);
                grads.add_assign(g);
            }
            grads.scale(T::one() / T::lit(chunk.len() as f64));
            let lr = scheduled_lr(cfg.learning_rate, step, total, cfg.cosine);
            adamw_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay);
            step += 1;
        }
        let n = train_set.len().max(1) as f64;
        let m = EpochMetrics {
            epoch,
            step,
            loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_acc: accuracy(model, val_set, sampler)?,
        };
        on_epoch(&m);
        log.push(m);
    }
    Ok(log)
}

/// Initializes a model and trains it.
pub fn train_new<T: Scalar>(
    cfg: &ModelConfig,
    sampler: &SamplerConfig,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    tcfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model<T>, Vec<EpochMetrics>)> {
    let mut model = Model::new(cfg.clone(), tcfg.seed)?;
    let log = train(&mut model, sampler, train_set, val_set, tcfg, on_epoch)?;
    Ok((model, log))
}
