use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::{GradPiece, GradSink, Precision};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b` applied row-wise; `W` is `d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Stream) -> Self {
        let weight = store.add_trunc_normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, prec: Precision) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.d_in {
            return Err(Error::Shape(format!(
                "linear layer {} expects {} input features, got shape {:?}",
                ps.name(self.weight),
                self.d_in,
                x.shape()
            )));
        }
        let mut y = x.matmul(ps.get(self.weight))?;
        if let Some(b) = self.bias {
            let b = ps.get(b).data();
            for i in 0..y.rows() {
                for (v, bb) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        prec.apply(&mut y);
        Ok(y)
    }

    /// Returns `dL/dx` and hands the parameter gradient to `sink` in factored form.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        prec: Precision,
        sink: &mut dyn GradSink,
    ) -> Result<Tensor> {
        let rounded;
        let g = if prec == Precision::Double {
            grad_out
        } else {
            let mut r = grad_out.clone();
            prec.apply(&mut r);
            rounded = r;
            &rounded
        };
        let dx = g.matmul_t(ps.get(self.weight))?;
        sink.accept(GradPiece::Linear {
            weight: self.weight,
            bias: self.bias,
            input: x,
            grad_out: g,
        });
        Ok(dx)
    }
}

/// Row lookup into a `vocab × dim` table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut Stream) -> Self {
        let table = store.add_trunc_normal(format!("{name}.table"), &[vocab, dim], INIT_STD, rng);
        Self { table, vocab, dim }
    }

    pub fn forward(&self, ps: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let table = ps.get(self.table);
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= self.vocab {
                return Err(Error::TokenOutOfRange { id, vocab: self.vocab });
            }
            out.extend_from_slice(table.row(id));
        }
        Tensor::from_vec(&[ids.len(), self.dim], out)
    }

    pub fn backward(&self, ids: &[usize], grad_out: &Tensor, sink: &mut dyn GradSink) {
        sink.accept(GradPiece::Embedding {
            table: self.table,
            ids,
            grad_out,
        });
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, prec: Precision) -> Result<(Tensor, LayerNormCache)> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!("layer norm over {} features, got {:?}", self.dim, x.shape())));
        }
        let gamma = ps.get(self.gamma).data();
        let beta = ps.get(self.beta).data();
        let d = self.dim as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + self.eps).sqrt();
            inv_std.push(r);
            let xh = xhat.row_mut(i);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            let yr = y.row_mut(i);
            for (j, o) in yr.iter_mut().enumerate() {
                *o = gamma[j] * xhat.row(i)[j] + beta[j];
            }
        }
        prec.apply(&mut y);
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LayerNormCache,
        grad_out: &Tensor,
        sink: &mut dyn GradSink,
    ) -> Result<Tensor> {
        let gamma = ps.get(self.gamma).data();
        let d = self.dim as f64;
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        let mut dx = Tensor::zeros(grad_out.shape());
        let mut dxhat = vec![0.0; self.dim];
        for i in 0..grad_out.rows() {
            let g = grad_out.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..self.dim {
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
                dxhat[j] = g[j] * gamma[j];
            }
            let sum_dxh: f64 = dxhat.iter().sum();
            let sum_dxh_xh: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let r = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = r * (dxhat[j] - sum_dxh / d - xh[j] * sum_dxh_xh / d);
            }
        }
        sink.accept(GradPiece::Dense {
            param: self.gamma,
            grad: Tensor::from_vec(&[self.dim], dgamma)?,
        });
        sink.accept(GradPiece::Dense {
            param: self.beta,
            grad: Tensor::from_vec(&[self.dim], dbeta)?,
        });
        Ok(dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: &Tensor, prec: Precision) -> Tensor {
    let mut y = x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044_715 * v * v * v)).tanh()));
    prec.apply(&mut y);
    y
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let inner = GELU_C * (v + 0.044_715 * v * v * v);
        let t = inner.tanh();
        let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
    }
    dx
}

/// Mean token cross-entropy of `logits` (T×V) against `targets`, and the
/// gradient of `seed · loss` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], seed: f64) -> Result<(f64, Tensor)> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t || t == 0 {
        return Err(Error::Shape(format!("{} targets for {t} positions", targets.len())));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    // seed/T is applied as one factor so that power-of-two seeds scale the
    // gradient exactly.
    let w = seed / t as f64;
    for (i, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::TokenOutOfRange { id: y, vocab: v });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        let g = grad.row_mut(i);
        for (gj, l) in g.iter_mut().zip(row) {
            *gj = (l - lse).exp();
        }
        g[y] -= 1.0;
        for gj in g.iter_mut() {
            *gj *= w;
        }
    }
    Ok((total / t as f64, grad))
}
