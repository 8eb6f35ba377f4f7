use serde::{Deserialize, Serialize};

use super::model::{Captioner, CaptionerConfig};
use super::{data::SynthSpec, CaptionPair};
use crate::accountant::Accountant;
use crate::dpsgd::{DpSgd, DpSgdConfig, RunManifest, StepReport};
use crate::error::{Error, Result};
use crate::nn::{mean_loss, Model, Precision};
use crate::planner::{tan_scale, TanScaledPlan, TrainPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: CaptionerConfig,
    pub data: SynthSpec,
    pub dp: DpSgdConfig,
    /// False trains without clipping or noise (the non-private baseline).
    pub private: bool,
    /// Defaults to `1/N`.
    pub delta: Option<f64>,
    pub precision: Precision,
    pub threads: usize,
    /// Number of held-out pairs scored at the start and end of training.
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: CaptionerConfig::default(),
            data: SynthSpec::default(),
            dp: DpSgdConfig::default(),
            private: true,
            delta: None,
            precision: Precision::Double,
            threads: 1,
            eval_size: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Captioner,
    pub manifest: RunManifest,
    pub history: Vec<StepReport>,
    /// Mean caption loss on the held-out pairs before training.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// Held-out pairs for a training config: the indices right after the
/// training set.
pub fn eval_pairs(cfg: &TrainConfig) -> Vec<CaptionPair> {
    cfg.data
        .generate_range(cfg.dp.dataset_size, cfg.eval_size)
        .into_iter()
        .map(|s| s.pair)
        .collect()
}

pub fn training_pairs(cfg: &TrainConfig) -> Vec<CaptionPair> {
    cfg.data
        .generate(cfg.dp.dataset_size as usize)
        .into_iter()
        .map(|s| s.pair)
        .collect()
}

/// Runs `dp.steps` updates on `data` from a fresh model seeded by `dp.seed`.
///
/// `on_step` sees every step report and the manifest so far, so callers can
/// stream metrics or checkpoint.
pub fn train(
    cfg: &TrainConfig,
    data: &[CaptionPair],
    acct: &Accountant,
    mut on_step: impl FnMut(&StepReport, &Captioner),
) -> Result<TrainOutcome> {
    cfg.data.validate()?;
    let mut model = Captioner::new(cfg.model, cfg.dp.seed)?;
    model.set_precision(cfg.precision);
    if cfg.data.image_size != cfg.model.image_size {
        return Err(Error::InvalidArgument(format!(
            "data image size {} differs from model image size {}",
            cfg.data.image_size, cfg.model.image_size
        )));
    }
    let config_json = serde_json::to_value(cfg)?;
    let mut manifest = if cfg.private {
        RunManifest::new(&cfg.dp, cfg.delta, acct, config_json)?
    } else {
        let mut dp = cfg.dp.clone();
        dp.sigma = 0.0;
        let mut m = RunManifest::new(&dp, cfg.delta, acct, config_json)?;
        m.empty_batch_policy = "non-private: plain mean gradient".into();
        m
    };
    let eval = eval_pairs(cfg);
    let initial_eval_loss = if eval.is_empty() { f64::NAN } else { mean_loss(&model, &eval, Precision::Double)? };
    let mut opt = DpSgd::new(model.params(), cfg.dp.clone(), cfg.precision, cfg.threads)?;
    opt.private = cfg.private;
    let mut history = Vec::with_capacity(cfg.dp.steps as usize);
    for _ in 0..cfg.dp.steps {
        let (report, _, _) = opt.step(&mut model, data)?;
        if report.step % 50 == 0 {
            log::info!(
                "step {} batch {} loss {:.4} lr {:.3e}",
                report.step,
                report.realized_batch,
                report.mean_loss,
                report.lr
            );
        }
        on_step(&report, &model);
        history.push(report);
    }
    let final_eval_loss = if eval.is_empty() { f64::NAN } else { mean_loss(&model, &eval, Precision::Double)? };
    manifest.status = "finished".into();
    manifest.steps_done = opt.steps_done();
    manifest.final_loss = Some(final_eval_loss).filter(|v| v.is_finite());
    Ok(TrainOutcome {
        model,
        manifest,
        history,
        initial_eval_loss,
        final_eval_loss,
    })
}

/// Paired runs at `(B, σ)` and `(B/k, σ/k)` with identical steps, learning
/// rate and seed.
#[derive(Debug, Clone)]
pub struct TanRun {
    pub plan: TanScaledPlan,
    pub reference: Vec<StepReport>,
    pub scaled: Vec<StepReport>,
}

impl TanRun {
    pub fn reference_losses(&self) -> Vec<f64> {
        self.reference.iter().map(|r| r.mean_loss).collect()
    }

    pub fn scaled_losses(&self) -> Vec<f64> {
        self.scaled.iter().map(|r| r.mean_loss).collect()
    }
}

pub fn tan_equivalence_run(cfg: &TrainConfig, data: &[CaptionPair], k: f64, acct: &Accountant) -> Result<TanRun> {
    let reference = TrainPlan::new(
        cfg.dp.dataset_size as f64,
        cfg.dp.batch_size as f64,
        cfg.dp.sigma,
        cfg.dp.steps,
        cfg.delta,
    )?;
    let plan = tan_scale(&reference, k)?;
    let run = |p: &TrainPlan| -> Result<Vec<StepReport>> {
        let mut c = cfg.clone();
        c.dp.batch_size = p.batch_size as u64;
        c.dp.sigma = p.sigma;
        c.eval_size = 0;
        Ok(train(&c, data, acct, |_, _| {})?.history)
    };
    Ok(TanRun {
        reference: run(&plan.reference)?,
        scaled: run(&plan.scaled)?,
        plan,
    })
}

/// Trailing moving average with the given window; NaN entries (empty
/// batches) are skipped.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let finite: Vec<f64> = values[lo..=i].iter().copied().filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        })
        .collect()
}

/// Mean absolute difference of two trajectories after smoothing.
pub fn trajectory_gap(a: &[f64], b: &[f64], window: usize) -> f64 {
    let (sa, sb) = (smooth(a, window), smooth(b, window));
    let diffs: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).filter(|d| d.is_finite()).collect();
    diffs.iter().sum::<f64>() / diffs.len().max(1) as f64
}
