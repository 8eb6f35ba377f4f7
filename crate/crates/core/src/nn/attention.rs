use super::layers::Linear;
use super::params::ParamStore;
use super::tensor::Tensor;
use super::{GradSink, Precision};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Multi-head scaled dot-product attention with exact softmax.
///
/// Used as causal self-attention (`ctx = None`, `causal = true`) and as
/// cross-attention onto a context sequence.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub causal: bool,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor,
    ctx: Option<Tensor>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    concat: Tensor,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, causal: bool, rng: &mut Stream) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {dim} is not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            causal,
            dim,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, ctx: Option<&Tensor>, prec: Precision) -> Result<(Tensor, AttentionCache)> {
        let source = ctx.unwrap_or(x);
        let q = self.q.forward(ps, x, prec)?;
        let k = self.k.forward(ps, source, prec)?;
        let v = self.v.forward(ps, source, prec)?;
        let (t, s) = (x.rows(), source.rows());
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor::zeros(&[t, self.dim]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.cols_slice(h * dh, dh);
            let kh = k.cols_slice(h * dh, dh);
            let vh = v.cols_slice(h * dh, dh);
            let mut p = qh.matmul_t(&kh)?;
            for i in 0..t {
                let row = p.row_mut(i);
                let limit = if self.causal { (i + 1).min(s) } else { s };
                let mut max = f64::NEG_INFINITY;
                for r in row.iter_mut().take(limit) {
                    *r *= scale;
                    max = max.max(*r);
                }
                let mut sum = 0.0;
                for r in row.iter_mut().take(limit) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for (j, r) in row.iter_mut().enumerate() {
                    if j < limit {
                        *r /= sum;
                    } else {
                        *r = 0.0;
                    }
                }
            }
            concat.add_cols(h * dh, &p.matmul(&vh)?);
            probs.push(p);
        }
        let out = self.o.forward(ps, &concat, prec)?;
        Ok((
            out,
            AttentionCache {
                x: x.clone(),
                ctx: ctx.cloned(),
                q,
                k,
                v,
                probs,
                concat,
            },
        ))
    }

    /// Returns the gradient with respect to the query input and, for
    /// cross-attention, with respect to the context. For self-attention both
    /// paths are folded into the first tensor.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &AttentionCache,
        grad_out: &Tensor,
        prec: Precision,
        sink: &mut dyn GradSink,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let dconcat = self.o.backward(ps, &cache.concat, grad_out, prec, sink)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(cache.q.shape());
        let mut dk = Tensor::zeros(cache.k.shape());
        let mut dv = Tensor::zeros(cache.v.shape());
        for (h, p) in cache.probs.iter().enumerate() {
            let d_out_h = dconcat.cols_slice(h * dh, dh);
            let qh = cache.q.cols_slice(h * dh, dh);
            let kh = cache.k.cols_slice(h * dh, dh);
            let vh = cache.v.cols_slice(h * dh, dh);
            let mut dscores = d_out_h.matmul_t(&vh)?;
            dv.add_cols(h * dh, &p.t_matmul(&d_out_h)?);
            for i in 0..p.rows() {
                let pr = p.row(i);
                let dr = dscores.row_mut(i);
                let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - inner) * scale;
                }
            }
            dq.add_cols(h * dh, &dscores.matmul(&kh)?);
            dk.add_cols(h * dh, &dscores.t_matmul(&qh)?);
        }
        let mut dx = self.q.backward(ps, &cache.x, &dq, prec, sink)?;
        let source = cache.ctx.as_ref().unwrap_or(&cache.x);
        let mut dsrc = self.k.backward(ps, source, &dk, prec, sink)?;
        dsrc.add_assign(&self.v.backward(ps, source, &dv, prec, sink)?);
        if cache.ctx.is_some() {
            Ok((dx, Some(dsrc)))
        } else {
            dx.add_assign(&dsrc);
            Ok((dx, None))
        }
    }
}
