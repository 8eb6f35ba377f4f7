//! Per-example gradient norms without per-example gradients, and the
//! two-pass clipped backward built on them.
//!
//! The first backward pass records, for every layer, what the layer saw
//! (activations, output gradients). Squared per-example norms follow from
//! Gram identities: for a linear layer with activations `A` (T×d_in) and
//! output gradients `G` (T×d_out), `‖AᵀG‖²_F = ⟨AAᵀ, GGᵀ⟩`. The second pass
//! backpropagates `Σ_i c_i·ℓ_i` with the clip coefficients as loss weights.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::dot;
use crate::nn::{GradPiece, GradSink, Gradients, Model, ParamId, ParamStore, Precision, Tensor};

/// What one layer saw during a single example's backward pass.
#[derive(Debug, Clone)]
pub enum LayerTrace {
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
        a: Tensor,
        g: Tensor,
    },
    Embedding {
        table: ParamId,
        ids: Vec<usize>,
        g: Tensor,
    },
    /// Small parameters (layer norm, positional tables) whose gradient is
    /// cheap to materialize.
    Dense { param: ParamId, grad: Tensor },
}

/// Gradient sink that records traces instead of accumulating.
#[derive(Debug, Default)]
pub struct TraceRecorder {
    pub traces: Vec<LayerTrace>,
}

impl GradSink for TraceRecorder {
    fn accept(&mut self, piece: GradPiece<'_>) {
        self.traces.push(match piece {
            GradPiece::Linear {
                weight,
                bias,
                input,
                grad_out,
            } => LayerTrace::Linear {
                weight,
                bias,
                a: input.clone(),
                g: grad_out.clone(),
            },
            GradPiece::Embedding { table, ids, grad_out } => LayerTrace::Embedding {
                table,
                ids: ids.to_vec(),
                g: grad_out.clone(),
            },
            GradPiece::Dense { param, grad } => LayerTrace::Dense { param, grad },
        });
    }
}

fn gram_dot(a: &Tensor, g: &Tensor) -> f64 {
    let t = a.rows();
    let mut total = 0.0;
    for i in 0..t {
        total += dot(a.row(i), a.row(i)) * dot(g.row(i), g.row(i));
        for j in 0..i {
            total += 2.0 * dot(a.row(i), a.row(j)) * dot(g.row(i), g.row(j));
        }
    }
    total
}

/// Squared gradient norm contributed by one trace.
pub fn trace_sq_norm(trace: &LayerTrace) -> f64 {
    match trace {
        LayerTrace::Linear { bias, a, g, .. } => {
            let t = a.rows();
            let weight = if t * t <= a.cols() * g.cols() {
                gram_dot(a, g)
            } else {
                a.t_matmul(g).expect("trace shapes agree").sq_norm()
            };
            let b = if bias.is_some() {
                g.col_sums().iter().map(|v| v * v).sum()
            } else {
                0.0
            };
            weight + b
        }
        LayerTrace::Embedding { ids, g, .. } => {
            let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (t, &id) in ids.iter().enumerate() {
                let acc = rows.entry(id).or_insert_with(|| vec![0.0; g.cols()]);
                for (x, v) in acc.iter_mut().zip(g.row(t)) {
                    *x += v;
                }
            }
            rows.values().map(|r| dot(r, r)).sum()
        }
        LayerTrace::Dense { grad, .. } => grad.sq_norm(),
    }
}

/// Squared norm of the full parameter gradient of one example.
///
/// Every parameter of `store` must be covered by exactly one trace. A
/// non-finite result is reported as NaN.
pub fn ghost_sq_norm(traces: &[LayerTrace], store: &ParamStore) -> Result<f64> {
    let mut seen = BTreeSet::new();
    let mut mark = |id: ParamId| -> Result<()> {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!(
                "parameter {} traced twice; ghost norms need one trace per parameter",
                store.name(id)
            )));
        }
        Ok(())
    };
    let mut total = 0.0;
    for tr in traces {
        match tr {
            LayerTrace::Linear { weight, bias, .. } => {
                mark(*weight)?;
                if let Some(b) = bias {
                    mark(*b)?;
                }
            }
            LayerTrace::Embedding { table, .. } => mark(*table)?,
            LayerTrace::Dense { param, .. } => mark(*param)?,
        }
        total += trace_sq_norm(tr);
    }
    if let Some(missing) = store.ids().find(|id| !seen.contains(id)) {
        return Err(Error::MissingTrace(store.name(missing).to_string()));
    }
    Ok(if total.is_finite() { total } else { f64::NAN })
}

/// Per-example norms from per-example trace sets.
pub fn ghost_norms(traces: &[Vec<LayerTrace>], store: &ParamStore) -> Result<Vec<f64>> {
    traces.iter().map(|t| ghost_sq_norm(t, store).map(f64::sqrt)).collect()
}

/// `min(1, C/‖g‖)`, with 1 for a zero norm and 0 for a non-finite one.
pub fn clip_coefficient(norm: f64, c: f64) -> f64 {
    if !norm.is_finite() {
        0.0
    } else if norm <= c {
        1.0
    } else {
        c / norm
    }
}

pub fn clip_coefficients(norms: &[f64], c: f64) -> Vec<f64> {
    norms.iter().map(|&n| clip_coefficient(n, c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleNormReport {
    /// Unscaled L2 norm of each example's gradient, NaN when flagged.
    pub norms: Vec<f64>,
    pub clip_coeffs: Vec<f64>,
    pub nan_count: usize,
}

impl PerSampleNormReport {
    pub fn new(norms: Vec<f64>, c: f64) -> Self {
        let clip_coeffs = clip_coefficients(&norms, c);
        let nan_count = norms.iter().filter(|n| !n.is_finite()).count();
        Self {
            norms,
            clip_coeffs,
            nan_count,
        }
    }
}

/// Dynamic loss scaling for reduced-precision backward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    scale: f64,
    growth_factor: f64,
    backoff_factor: f64,
    growth_interval: u64,
    clean_steps: u64,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self {
            scale: 65536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
            clean_steps: 0,
        }
    }
}

impl LossScaler {
    pub fn new(scale: f64, growth_factor: f64, backoff_factor: f64, growth_interval: u64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss scale must be positive, got {scale}")));
        }
        if !(growth_factor > 1.0) || !(backoff_factor > 0.0 && backoff_factor < 1.0) || growth_interval == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid scaler factors: growth {growth_factor}, backoff {backoff_factor}, interval {growth_interval}"
            )));
        }
        Ok(Self {
            scale,
            growth_factor,
            backoff_factor,
            growth_interval,
            clean_steps: 0,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn clean_steps(&self) -> u64 {
        self.clean_steps
    }

    /// Called after a step with no overflow and no flagged example.
    pub fn record_clean(&mut self) {
        self.clean_steps += 1;
        if self.clean_steps >= self.growth_interval {
            let grown = self.scale * self.growth_factor;
            if grown.is_finite() {
                self.scale = grown;
            }
            self.clean_steps = 0;
        }
    }

    pub fn backoff(&mut self) {
        let s = self.scale * self.backoff_factor;
        if s > 0.0 {
            self.scale = s;
        }
        self.clean_steps = 0;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClipOptions {
    pub clip_norm: f64,
    pub precision: Precision,
    /// Worker threads for per-example work. Results do not depend on it.
    pub threads: usize,
    /// Overflow retries before the step is rejected.
    pub max_retries: usize,
}

impl Default for ClipOptions {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            precision: Precision::Double,
            threads: 1,
            max_retries: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClippedBackward {
    /// `Σ_i c_i·∇ℓ_i`, unscaled.
    pub grad: Gradients,
    pub report: PerSampleNormReport,
    pub losses: Vec<f64>,
    /// Scale used by the accepted attempt.
    pub scale: f64,
    pub retries: usize,
}

// Examples are processed in fixed-size chunks that are reduced in index
// order, so the floating-point summation order never depends on the number
// of threads.
const CHUNK: usize = 8;

struct ChunkOut {
    grad: Gradients,
    norms: Vec<f64>,
    losses: Vec<f64>,
}

fn run_chunk<M: Model>(model: &M, chunk: &[&M::Example], scale: f64, opts: &ClipOptions) -> Result<ChunkOut> {
    let store = model.params();
    let mut grad = Gradients::zeros_like(store);
    let mut norms = Vec::with_capacity(chunk.len());
    let mut losses = Vec::with_capacity(chunk.len());
    for ex in chunk {
        let (loss, cache) = model.forward(ex, opts.precision)?;
        let mut rec = TraceRecorder::default();
        model.backward(ex, &cache, scale, opts.precision, &mut rec)?;
        let norm = ghost_sq_norm(&rec.traces, store)?.sqrt() / scale;
        drop(rec);
        let c = clip_coefficient(norm, opts.clip_norm);
        // A flagged example contributes nothing; skipping it avoids 0·NaN.
        if c > 0.0 {
            model.backward(ex, &cache, scale * c, opts.precision, &mut grad)?;
        }
        norms.push(if norm.is_finite() { norm } else { f64::NAN });
        losses.push(loss);
    }
    Ok(ChunkOut { grad, norms, losses })
}

fn run_pass<M: Model>(model: &M, batch: &[&M::Example], scale: f64, opts: &ClipOptions) -> Result<Vec<ChunkOut>> {
    let chunks: Vec<&[&M::Example]> = batch.chunks(CHUNK).collect();
    let threads = opts.threads.max(1).min(chunks.len().max(1));
    if threads == 1 {
        return chunks.iter().map(|c| run_chunk(model, c, scale, opts)).collect();
    }
    let mut slots: Vec<Option<Result<ChunkOut>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let chunks = &chunks;
                s.spawn(move || {
                    (w..chunks.len())
                        .step_by(threads)
                        .map(|j| (j, run_chunk(model, chunks[j], scale, opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (j, r) in h.join().expect("worker panicked") {
                slots[j] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every chunk assigned")).collect()
}

/// Returns `Σ_i clip_C(∇ℓ_i)` over `batch` together with the norm report.
///
/// The loss is multiplied by the scaler's scale in both backward passes and
/// the results are divided by it again. If the clipped sum overflows, the
/// scaler backs off and the whole step is recomputed, so every returned
/// gradient corresponds to an applied update. In half precision, a batch in
/// which every example is flagged is treated the same way. The scaler only
/// grows after steps with neither overflow nor flagged examples.
pub fn two_pass_clipped_backward<M: Model>(
    model: &M,
    batch: &[&M::Example],
    scaler: &mut LossScaler,
    opts: &ClipOptions,
) -> Result<ClippedBackward> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("clipped backward of an empty batch".into()));
    }
    if !(opts.clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm must be positive, got {}", opts.clip_norm)));
    }
    let mut retries = 0;
    loop {
        let scale = scaler.scale();
        let outs = run_pass(model, batch, scale, opts)?;
        let mut grad = Gradients::zeros_like(model.params());
        let mut norms = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        for o in outs {
            grad.add_assign(&o.grad);
            norms.extend(o.norms);
            losses.extend(o.losses);
        }
        grad.scale(1.0 / scale);
        let report = PerSampleNormReport::new(norms, opts.clip_norm);
        let all_flagged = opts.precision == Precision::Half && report.nan_count == batch.len();
        if !grad.is_finite() || all_flagged {
            if retries >= opts.max_retries {
                return Err(Error::RejectedStep {
                    attempts: retries + 1,
                    scale,
                });
            }
            log::debug!("overflow at loss scale {scale}; backing off");
            scaler.backoff();
            retries += 1;
            continue;
        }
        if report.nan_count == 0 {
            scaler.record_clean();
        }
        return Ok(ClippedBackward {
            grad,
            report,
            losses,
            scale,
            retries,
        });
    }
}
