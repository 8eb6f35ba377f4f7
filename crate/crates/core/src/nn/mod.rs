//! Minimal reverse-mode building blocks for small transformer models.
//!
//! Layers expose explicit `forward`/`backward` pairs. Parameter gradients are
//! not written anywhere directly; each layer hands a [`GradPiece`] to a
//! [`GradSink`], which either accumulates it ([`Gradients`]) or records the
//! factors needed for per-example norms.

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tensor;

use crate::error::Result;
use half::f16;

pub use attention::{Attention, AttentionCache};
pub use layers::{gelu, gelu_backward, softmax_cross_entropy, Embedding, LayerNorm, LayerNormCache, Linear};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

/// Arithmetic used for activations and backpropagated signals.
///
/// `Half` keeps master weights and accumulations in f64 but rounds layer
/// outputs and the output-gradients entering each linear layer to IEEE
/// binary16, so large values overflow to infinity as they would on hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Half,
}

impl Precision {
    pub fn apply(self, t: &mut Tensor) {
        if self == Precision::Half {
            for v in t.data_mut() {
                *v = f16::from_f64(*v).to_f64();
            }
        }
    }
}

/// A parameter gradient contribution from one example, in the cheapest form
/// the layer can describe it.
#[derive(Debug)]
pub enum GradPiece<'a> {
    /// `dW = inputᵀ · grad_out`, `db = Σ_rows grad_out`.
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
        input: &'a Tensor,
        grad_out: &'a Tensor,
    },
    /// Row `ids[t]` of the table receives `grad_out[t]`.
    Embedding {
        table: ParamId,
        ids: &'a [usize],
        grad_out: &'a Tensor,
    },
    Dense { param: ParamId, grad: Tensor },
}

pub trait GradSink {
    fn accept(&mut self, piece: GradPiece<'_>);
}

impl GradSink for Gradients {
    fn accept(&mut self, piece: GradPiece<'_>) {
        match piece {
            GradPiece::Linear {
                weight,
                bias,
                input,
                grad_out,
            } => {
                let gw = input.t_matmul(grad_out).expect("linear shapes checked in forward");
                self.get_mut(weight).add_assign(&gw);
                if let Some(b) = bias {
                    for (acc, s) in self.get_mut(b).data_mut().iter_mut().zip(grad_out.col_sums()) {
                        *acc += s;
                    }
                }
            }
            GradPiece::Embedding { table, ids, grad_out } => {
                let t = self.get_mut(table);
                for (i, &id) in ids.iter().enumerate() {
                    for (acc, g) in t.row_mut(id).iter_mut().zip(grad_out.row(i)) {
                        *acc += g;
                    }
                }
            }
            GradPiece::Dense { param, grad } => self.get_mut(param).add_assign(&grad),
        }
    }
}

/// A differentiable model whose loss is defined per example.
pub trait Model: Sync {
    type Example: Sync;
    type Cache: Send;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Per-example loss and the activations needed by `backward`.
    fn forward(&self, ex: &Self::Example, prec: Precision) -> Result<(f64, Self::Cache)>;

    /// Backpropagates `seed · loss` into `sink`.
    fn backward(&self, ex: &Self::Example, cache: &Self::Cache, seed: f64, prec: Precision, sink: &mut dyn GradSink)
        -> Result<()>;
}

/// Loss and gradient of a single example.
pub fn loss_and_grad<M: Model>(model: &M, ex: &M::Example, prec: Precision) -> Result<(f64, Gradients)> {
    let (loss, cache) = model.forward(ex, prec)?;
    let mut g = Gradients::zeros_like(model.params());
    model.backward(ex, &cache, 1.0, prec, &mut g)?;
    Ok((loss, g))
}

/// Materialized per-example gradients. Memory grows with the batch, so this
/// is meant for testing and small models.
pub fn per_sample_grads<M: Model>(model: &M, batch: &[M::Example], prec: Precision) -> Result<Vec<Gradients>> {
    batch.iter().map(|ex| loss_and_grad(model, ex, prec).map(|(_, g)| g)).collect()
}

/// Mean loss and summed gradient over a batch.
pub fn batch_loss_and_grad<M: Model>(model: &M, batch: &[M::Example], prec: Precision) -> Result<(f64, Gradients)> {
    let mut g = Gradients::zeros_like(model.params());
    let mut total = 0.0;
    for ex in batch {
        let (loss, cache) = model.forward(ex, prec)?;
        model.backward(ex, &cache, 1.0, prec, &mut g)?;
        total += loss;
    }
    Ok((total / batch.len().max(1) as f64, g))
}

/// Mean loss over a batch without building caches for backward.
pub fn mean_loss<M: Model>(model: &M, batch: &[M::Example], prec: Precision) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        total += model.forward(ex, prec)?.0;
    }
    Ok(total / batch.len().max(1) as f64)
}
