//! The DP-SGD update: Poisson subsampling, clipped-gradient aggregation,
//! Gaussian noise, and an AdamW step on a warmup/linear-decay schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant::{Accountant, MechanismParams};
use crate::error::{Error, Result};
use crate::ghost::{two_pass_clipped_backward, ClipOptions, LossScaler, PerSampleNormReport};
use crate::nn::{Gradients, Model, ParamStore, Precision};
use crate::rng::{Purpose, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    /// Noise multiplier; 0 disables noise.
    pub sigma: f64,
    /// Expected batch size B.
    pub batch_size: u64,
    pub dataset_size: u64,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// The decay line reaches zero this many multiples of `steps` after
    /// warmup ends.
    pub decay_horizon_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            sigma: 1.0,
            batch_size: 200,
            dataset_size: 2000,
            steps: 300,
            lr: 5.12e-4,
            weight_decay: 0.05,
            warmup_frac: 0.4,
            decay_horizon_mult: 2.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl DpSgdConfig {
    pub fn q(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and nonnegative, got {}", self.sigma));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset_size {
            return bad(format!(
                "batch_size {} must lie in [1, dataset_size = {}]",
                self.batch_size, self.dataset_size
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} and weight_decay {} must be nonnegative", self.lr, self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(self.decay_horizon_mult > 0.0) {
            return bad(format!(
                "warmup_frac {} must lie in [0, 1] and decay_horizon_mult {} be positive",
                self.warmup_frac, self.decay_horizon_mult
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad(format!("invalid Adam constants β=({}, {}), eps={}", self.beta1, self.beta2, self.adam_eps));
        }
        Ok(())
    }

    /// Accounting parameters of this run, with `δ = 1/N` unless given.
    pub fn mechanism(&self, delta: Option<f64>) -> Result<MechanismParams> {
        let delta = match delta {
            Some(d) => d,
            None => crate::accountant::default_delta(self.dataset_size as f64)?,
        };
        MechanismParams::new(self.sigma, self.q(), self.steps, delta)
    }
}

/// Indices of `0..n` included independently with probability `q`, drawn from
/// the `(seed, Sampling, step)` stream. May be empty.
pub fn poisson_sample(n: usize, q: f64, seed: u64, step: u64) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    if !(q > 0.0) {
        return Vec::new();
    }
    // Gaps between successive inclusions are geometric; skipping by them is
    // equivalent to n Bernoulli trials but costs O(nq).
    let mut rng = Stream::new(seed, Purpose::Sampling, step);
    let log1mq = (-q).ln_1p();
    let mut out = Vec::with_capacity((n as f64 * q * 1.2) as usize + 8);
    let mut i: f64 = -1.0;
    loop {
        let u = 1.0 - rng.uniform();
        i += 1.0 + (u.ln() / log1mq).floor();
        if i >= n as f64 {
            return out;
        }
        out.push(i as usize);
    }
}

/// The privatized gradient `(1/B)(Σ clipped + z)` of one step.
#[derive(Debug, Clone)]
pub struct NoisyGradient {
    pub values: Gradients,
    pub indices: Vec<usize>,
    pub step: u64,
}

/// Noise stream for step `step`.
pub fn noise_stream(seed: u64, step: u64) -> Stream {
    Stream::new(seed, Purpose::Noise, step)
}

/// Adds `N(0, C²σ²)` per coordinate (parameter order, row-major) and
/// divides by the expected batch size.
pub fn privatize(clipped_sum: &Gradients, clip_norm: f64, sigma: f64, batch_size: f64, noise: &mut Stream) -> Gradients {
    let mut g = clipped_sum.clone();
    let std = clip_norm * sigma;
    if std > 0.0 {
        for t in &mut g.tensors {
            for v in t.data_mut() {
                *v += std * noise.normal();
            }
        }
    }
    g.scale(1.0 / batch_size);
    g
}

/// Learning rate for update `step` of `total` (updates are numbered from 1).
pub fn schedule(step: u64, total: u64, cfg: &DpSgdConfig) -> f64 {
    let warm = cfg.warmup_frac * total as f64;
    let s = step as f64;
    if s < warm {
        cfg.lr * s / warm
    } else {
        let decay = (s - warm) / (cfg.decay_horizon_mult * total as f64);
        cfg.lr * (1.0 - decay).max(0.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Gradients,
    v: Gradients,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &DpSgdConfig) -> Self {
        Self {
            m: Gradients::zeros_like(store),
            v: Gradients::zeros_like(store),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grad: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(&grad.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p *= decay;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub realized_batch: usize,
    /// Mean loss over the realized batch before the update, NaN if empty.
    pub mean_loss: f64,
    pub lr: f64,
    pub nan_count: usize,
    pub retries: usize,
    pub loss_scale: f64,
}

/// Stateful DP-SGD driver over a fixed dataset.
#[derive(Debug, Clone)]
pub struct DpSgd {
    pub cfg: DpSgdConfig,
    pub opt: AdamW,
    pub scaler: LossScaler,
    pub clip: ClipOptions,
    /// When false, steps use the plain mean gradient: no clipping, no noise.
    pub private: bool,
    step: u64,
}

impl DpSgd {
    pub fn new(store: &ParamStore, cfg: DpSgdConfig, precision: Precision, threads: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: AdamW::new(store, &cfg),
            clip: ClipOptions {
                clip_norm: cfg.clip_norm,
                precision,
                threads,
                ..ClipOptions::default()
            },
            scaler: LossScaler::default(),
            cfg,
            private: true,
            step: 0,
        })
    }

    /// Updates applied so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Samples a batch, computes the clipped sum, privatizes it, and applies
    /// one AdamW update. An empty batch still produces a noise-only update.
    pub fn step<M: Model>(&mut self, model: &mut M, data: &[M::Example]) -> Result<(StepReport, NoisyGradient, PerSampleNormReport)> {
        if data.len() as u64 != self.cfg.dataset_size {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} examples, config says {}",
                data.len(),
                self.cfg.dataset_size
            )));
        }
        let k = self.step;
        let indices = poisson_sample(data.len(), self.cfg.q(), self.cfg.seed, k);
        let batch: Vec<&M::Example> = indices.iter().map(|&i| &data[i]).collect();
        let (sum, report, losses, retries, scale) = if !self.private {
            let mut sum = Gradients::zeros_like(model.params());
            let mut losses = Vec::with_capacity(batch.len());
            for ex in &batch {
                let (loss, cache) = model.forward(ex, self.clip.precision)?;
                model.backward(ex, &cache, 1.0, self.clip.precision, &mut sum)?;
                losses.push(loss);
            }
            let report = PerSampleNormReport::new(Vec::new(), self.cfg.clip_norm);
            (sum, report, losses, 0, 1.0)
        } else if batch.is_empty() {
            let empty = PerSampleNormReport::new(Vec::new(), self.cfg.clip_norm);
            (Gradients::zeros_like(model.params()), empty, Vec::new(), 0, self.scaler.scale())
        } else {
            let out = two_pass_clipped_backward(&*model, &batch, &mut self.scaler, &self.clip)?;
            (out.grad, out.report, out.losses, out.retries, out.scale)
        };
        let mut noise = noise_stream(self.cfg.seed, k);
        let sigma = if self.private { self.cfg.sigma } else { 0.0 };
        let values = privatize(&sum, self.cfg.clip_norm, sigma, self.cfg.batch_size as f64, &mut noise);
        let lr = schedule(k + 1, self.cfg.steps, &self.cfg);
        self.opt.step(model.params_mut(), &values, lr);
        self.step += 1;
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        Ok((
            StepReport {
                step: k,
                realized_batch: indices.len(),
                mean_loss,
                lr,
                nan_count: report.nan_count,
                retries,
                loss_scale: scale,
            },
            NoisyGradient {
                values,
                indices,
                step: k,
            },
            report,
        ))
    }
}

/// Run record written when training starts and rewritten when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub dataset_size: u64,
    pub batch_size: u64,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Accountant ε for `(σ, q, S, δ)`; absent for noise-free runs.
    pub epsilon: Option<f64>,
    pub best_alpha: Option<f64>,
    pub conversion: String,
    pub empty_batch_policy: String,
    pub batch_divisor: String,
    pub steps_done: u64,
    pub final_loss: Option<f64>,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(cfg: &DpSgdConfig, delta: Option<f64>, acct: &Accountant, config: serde_json::Value) -> Result<Self> {
        let delta = match delta {
            Some(d) => d,
            None => crate::accountant::default_delta(cfg.dataset_size as f64)?,
        };
        let (epsilon, best_alpha) = if cfg.sigma > 0.0 {
            let r = acct.epsilon(&MechanismParams::new(cfg.sigma, cfg.q(), cfg.steps, delta)?)?;
            (Some(r.spec.epsilon), Some(r.best_alpha))
        } else {
            (None, None)
        };
        Ok(Self {
            status: "running".into(),
            dataset_size: cfg.dataset_size,
            batch_size: cfg.batch_size,
            q: cfg.q(),
            sigma: cfg.sigma,
            steps: cfg.steps,
            delta,
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            epsilon,
            best_alpha,
            conversion: acct.conversion.to_string(),
            empty_batch_policy: "noise-only update".into(),
            batch_divisor: "expected batch size".into(),
            steps_done: 0,
            final_loss: None,
            config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}
