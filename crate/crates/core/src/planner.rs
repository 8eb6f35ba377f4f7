//! Privacy / utility / compute trade-off tables and batch-size scaling.

use std::io::Write;

use serde::Serialize;

use crate::accountant::{default_delta, Accountant};
use crate::error::{Error, Result};

/// A DP-SGD run at the level of its privacy-relevant parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct TrainPlan {
    pub dataset_size: f64,
    pub batch_size: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
}

impl TrainPlan {
    pub fn new(dataset_size: f64, batch_size: f64, sigma: f64, steps: u64, delta: Option<f64>) -> Result<Self> {
        if !(batch_size >= 1.0 && dataset_size >= batch_size) {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= batch size ({batch_size}) <= dataset size ({dataset_size})"
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
        }
        let delta = match delta {
            Some(d) => d,
            None => default_delta(dataset_size)?,
        };
        Ok(Self {
            dataset_size,
            batch_size,
            sigma,
            steps,
            delta,
        })
    }

    pub fn q(&self) -> f64 {
        self.batch_size / self.dataset_size
    }

    pub fn epochs(&self) -> f64 {
        self.steps as f64 * self.q()
    }
}

/// `σ/B`: the standard deviation of the noise on the averaged gradient, in
/// units of the clip norm.
pub fn effective_noise(plan: &TrainPlan) -> f64 {
    plan.sigma / plan.batch_size
}

/// How δ is chosen for each dataset size in a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaRule {
    /// δ = 1/N.
    InverseN,
    Fixed(f64),
}

impl DeltaRule {
    fn delta(self, n: f64) -> Result<f64> {
        match self {
            DeltaRule::InverseN => default_delta(n),
            DeltaRule::Fixed(d) => Ok(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsRow {
    pub dataset_size: f64,
    pub q: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub best_alpha: f64,
}

/// ε as a function of dataset size at fixed batch size, noise and steps.
/// Sizes smaller than the batch are skipped.
pub fn eps_vs_dataset_size(
    acct: &Accountant,
    batch_size: f64,
    sigma: f64,
    steps: u64,
    sizes: &[f64],
    rule: DeltaRule,
) -> Result<Vec<EpsRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n < batch_size {
            log::warn!("skipping dataset size {n} below batch size {batch_size}");
            continue;
        }
        let q = batch_size / n;
        let delta = rule.delta(n)?;
        let curve = acct.build_curve(sigma, q)?;
        let r = acct.to_epsilon(&curve, steps, delta)?;
        rows.push(EpsRow {
            dataset_size: n,
            q,
            delta,
            epsilon: r.spec.epsilon,
            best_alpha: r.best_alpha,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub batch_size: f64,
    pub q: f64,
    pub steps: u64,
    pub epochs: f64,
    pub capped: bool,
}

/// Epoch budget `E = S·B/N` as a function of batch size, where `S` is the
/// largest step count within `target_eps`. Unattainable entries get `E = 0`.
pub fn epochs_vs_batch(
    acct: &Accountant,
    target_eps: f64,
    sigma: f64,
    dataset_size: f64,
    batches: &[f64],
    delta: f64,
) -> Result<Vec<EpochRow>> {
    batches
        .iter()
        .map(|&b| {
            if !(b > 0.0 && b <= dataset_size) {
                return Err(Error::InvalidArgument(format!(
                    "batch size {b} must lie in (0, {dataset_size}]"
                )));
            }
            let q = b / dataset_size;
            let sol = acct.solve_steps(target_eps, q, sigma, delta)?;
            Ok(EpochRow {
                batch_size: b,
                q,
                steps: sol.steps,
                epochs: sol.steps as f64 * q,
                capped: sol.capped,
            })
        })
        .collect()
}

/// A reference plan and its `k`-times smaller rehearsal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TanScaledPlan {
    pub reference: TrainPlan,
    pub k: f64,
    pub scaled: TrainPlan,
}

/// Divides batch size and noise by `k` at constant step count, preserving
/// `σ/B`. A fractional `B/k` is rounded down and `σ` recomputed from the
/// rounded batch.
pub fn tan_scale(plan: &TrainPlan, k: f64) -> Result<TanScaledPlan> {
    if !(k >= 1.0) {
        return Err(Error::InvalidArgument(format!("scale factor must be >= 1, got {k}")));
    }
    let batch = (plan.batch_size / k).floor();
    if batch < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "scale factor {k} leaves no examples in a batch of {}",
            plan.batch_size
        )));
    }
    let sigma = if batch * k == plan.batch_size {
        plan.sigma / k
    } else {
        plan.sigma * (batch / plan.batch_size)
    };
    let scaled = TrainPlan {
        batch_size: batch,
        sigma,
        ..*plan
    };
    debug_assert!(
        (effective_noise(&scaled) - effective_noise(plan)).abs() <= 1e-12 * effective_noise(plan).max(f64::MIN_POSITIVE)
    );
    Ok(TanScaledPlan {
        reference: *plan,
        k,
        scaled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TanRow {
    pub role: &'static str,
    pub dataset_size: f64,
    pub batch_size: f64,
    pub sigma: f64,
    pub steps: u64,
    pub effective_noise: f64,
}

impl TanScaledPlan {
    pub fn rows(&self) -> [TanRow; 2] {
        let row = |role, p: &TrainPlan| TanRow {
            role,
            dataset_size: p.dataset_size,
            batch_size: p.batch_size,
            sigma: p.sigma,
            steps: p.steps,
            effective_noise: effective_noise(p),
        };
        [row("reference", &self.reference), row("scaled", &self.scaled)]
    }
}

/// Writes rows as CSV with a header of field names.
pub fn write_csv<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
