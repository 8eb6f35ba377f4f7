use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, softmax_cross_entropy, Attention, AttentionCache, Embedding, GradPiece, GradSink, LayerNorm,
    LayerNormCache, Linear, Model, ParamId, ParamStore, Precision, Tensor,
};
use crate::rng::{Purpose, Stream};

use super::CaptionPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_ratio: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Square patch side in pixels.
    pub patch: usize,
    pub channels: usize,
    /// Longest token sequence, BOS and EOS included.
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            mlp_ratio: 4,
            image_size: 16,
            patch: 4,
            channels: 3,
            max_len: 12,
        }
    }
}

impl CaptionerConfig {
    /// A very small configuration for gradient checks.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            vocab,
            dim: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            mlp_ratio: 2,
            image_size: 4,
            patch: 2,
            channels: 3,
            max_len: 6,
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab,
            self.dim,
            self.heads,
            self.mlp_ratio,
            self.image_size,
            self.patch,
            self.channels,
        ];
        if positive.contains(&0) || self.max_len < 2 {
            return Err(Error::InvalidArgument(format!("degenerate captioner config {self:?}")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {} does not tile image size {}",
                self.patch, self.image_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("width {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut Stream) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, true, rng),
        }
    }

    fn forward(&self, ps: &ParamStore, x: Tensor, prec: Precision) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(ps, &x, prec)?;
        let act = gelu(&pre, prec);
        let out = self.fc2.forward(ps, &act, prec)?;
        Ok((out, MlpCache { x, pre, act }))
    }

    fn backward(&self, ps: &ParamStore, c: &MlpCache, g: &Tensor, prec: Precision, sink: &mut dyn GradSink) -> Result<Tensor> {
        let d_act = self.fc2.backward(ps, &c.act, g, prec, sink)?;
        let d_pre = gelu_backward(&c.pre, &d_act);
        self.fc1.backward(ps, &c.x, &d_pre, prec, sink)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl EncoderBlock {
    fn forward(&self, ps: &ParamStore, x: &Tensor, prec: Precision) -> Result<(Tensor, EncoderCache)> {
        let (n1, ln1) = self.ln1.forward(ps, x, prec)?;
        let (a, attn) = self.attn.forward(ps, &n1, None, prec)?;
        let mut h = x.clone();
        h.add_assign(&a);
        let (n2, ln2) = self.ln2.forward(ps, &h, prec)?;
        let (m, mlp) = self.mlp.forward(ps, n2, prec)?;
        h.add_assign(&m);
        Ok((h, EncoderCache { ln1, attn, ln2, mlp }))
    }

    fn backward(&self, ps: &ParamStore, c: &EncoderCache, g: &Tensor, prec: Precision, sink: &mut dyn GradSink) -> Result<Tensor> {
        let d_n2 = self.mlp.backward(ps, &c.mlp, g, prec, sink)?;
        let mut dh = g.clone();
        dh.add_assign(&self.ln2.backward(ps, &c.ln2, &d_n2, sink)?);
        let (d_n1, _) = self.attn.backward(ps, &c.attn, &dh, prec, sink)?;
        let mut dx = dh;
        dx.add_assign(&self.ln1.backward(ps, &c.ln1, &d_n1, sink)?);
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug)]
struct DecoderCache {
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    cross: AttentionCache,
    ln3: LayerNormCache,
    mlp: MlpCache,
}

impl DecoderBlock {
    fn forward(&self, ps: &ParamStore, x: &Tensor, ctx: &Tensor, prec: Precision) -> Result<(Tensor, DecoderCache)> {
        let (n1, ln1) = self.ln1.forward(ps, x, prec)?;
        let (a, self_attn) = self.self_attn.forward(ps, &n1, None, prec)?;
        let mut h = x.clone();
        h.add_assign(&a);
        let (n2, ln2) = self.ln2.forward(ps, &h, prec)?;
        let (c, cross) = self.cross.forward(ps, &n2, Some(ctx), prec)?;
        h.add_assign(&c);
        let (n3, ln3) = self.ln3.forward(ps, &h, prec)?;
        let (m, mlp) = self.mlp.forward(ps, n3, prec)?;
        h.add_assign(&m);
        Ok((
            h,
            DecoderCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                mlp,
            },
        ))
    }

    /// Returns the gradient for the block input and for the encoder output.
    fn backward(
        &self,
        ps: &ParamStore,
        c: &DecoderCache,
        g: &Tensor,
        prec: Precision,
        sink: &mut dyn GradSink,
    ) -> Result<(Tensor, Tensor)> {
        let d_n3 = self.mlp.backward(ps, &c.mlp, g, prec, sink)?;
        let mut dh = g.clone();
        dh.add_assign(&self.ln3.backward(ps, &c.ln3, &d_n3, sink)?);
        let (d_n2, d_ctx) = self.cross.backward(ps, &c.cross, &dh, prec, sink)?;
        dh.add_assign(&self.ln2.backward(ps, &c.ln2, &d_n2, sink)?);
        let (d_n1, _) = self.self_attn.backward(ps, &c.self_attn, &dh, prec, sink)?;
        dh.add_assign(&self.ln1.backward(ps, &c.ln1, &d_n1, sink)?);
        Ok((dh, d_ctx.expect("cross-attention returns a context gradient")))
    }
}

/// Vision encoder ψ plus causal text decoder φ with cross-attention.
#[derive(Debug, Clone)]
pub struct Captioner {
    cfg: CaptionerConfig,
    store: ParamStore,
    patch_embed: Linear,
    enc_pos: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_ln: LayerNorm,
    tok_embed: Embedding,
    dec_pos: ParamId,
    decoder: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    head: Linear,
    precision: Precision,
}

/// Activations of one teacher-forced example.
#[derive(Debug)]
pub struct CaptionCache {
    patches: Tensor,
    encoder: Vec<EncoderCache>,
    enc_ln: LayerNormCache,
    decoder: Vec<DecoderCache>,
    dec_ln: LayerNormCache,
    head_in: Tensor,
    logits: Tensor,
}

/// Encoder output for one image, reusable across many decoder queries.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tokens: Tensor,
    caches: Option<(Tensor, Vec<EncoderCache>, LayerNormCache)>,
}

impl Encoded {
    /// Wraps an arbitrary embedding sequence, e.g. to probe the decoder.
    pub fn from_tokens(tokens: Tensor) -> Self {
        Self { tokens, caches: None }
    }

    /// Mean-pooled image embedding.
    pub fn pooled(&self) -> Vec<f64> {
        self.tokens.mean_rows()
    }
}

impl Captioner {
    /// Builds a model with truncated-normal projections drawn from the
    /// `(seed, Init)` stream.
    pub fn new(cfg: CaptionerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Stream::new(seed, Purpose::Init, 0);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let d = cfg.dim;
        let patch_embed = Linear::new(&mut s, "enc.patch", cfg.patch_dim(), d, true, rng);
        let enc_pos = s.add_trunc_normal("enc.pos", &[cfg.num_patches(), d], crate::nn::layers::INIT_STD, rng);
        let mut encoder = Vec::new();
        for i in 0..cfg.enc_layers {
            let p = format!("enc.{i}");
            encoder.push(EncoderBlock {
                ln1: LayerNorm::new(&mut s, &format!("{p}.ln1"), d),
                attn: Attention::new(&mut s, &format!("{p}.attn"), d, cfg.heads, false, rng)?,
                ln2: LayerNorm::new(&mut s, &format!("{p}.ln2"), d),
                mlp: Mlp::new(&mut s, &format!("{p}.mlp"), d, cfg.mlp_ratio, rng),
            });
        }
        let enc_ln = LayerNorm::new(&mut s, "enc.ln", d);
        let tok_embed = Embedding::new(&mut s, "dec.tok", cfg.vocab, d, rng);
        let dec_pos = s.add_trunc_normal("dec.pos", &[cfg.max_len, d], crate::nn::layers::INIT_STD, rng);
        let mut decoder = Vec::new();
        for i in 0..cfg.dec_layers {
            let p = format!("dec.{i}");
            decoder.push(DecoderBlock {
                ln1: LayerNorm::new(&mut s, &format!("{p}.ln1"), d),
                self_attn: Attention::new(&mut s, &format!("{p}.self"), d, cfg.heads, true, rng)?,
                ln2: LayerNorm::new(&mut s, &format!("{p}.ln2"), d),
                cross: Attention::new(&mut s, &format!("{p}.cross"), d, cfg.heads, false, rng)?,
                ln3: LayerNorm::new(&mut s, &format!("{p}.ln3"), d),
                mlp: Mlp::new(&mut s, &format!("{p}.mlp"), d, cfg.mlp_ratio, rng),
            });
        }
        let dec_ln = LayerNorm::new(&mut s, "dec.ln", d);
        let head = Linear::new(&mut s, "dec.head", d, cfg.vocab, true, rng);
        Ok(Self {
            cfg,
            store: s,
            patch_embed,
            enc_pos,
            encoder,
            enc_ln,
            tok_embed,
            dec_pos,
            decoder,
            dec_ln,
            head,
            precision: Precision::Double,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.cfg
    }

    /// Precision used by `Model::forward`/`backward` when the caller passes
    /// `Precision::Double`; lets training code run the whole model in the
    /// half-precision emulation.
    pub fn set_precision(&mut self, p: Precision) {
        self.precision = p;
    }

    fn prec(&self, p: Precision) -> Precision {
        if p == Precision::Half || self.precision == Precision::Half {
            Precision::Half
        } else {
            Precision::Double
        }
    }

    /// Rearranges an `H×W×C` row-major image into one row per patch.
    pub fn patchify(&self, image: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        if image.len() != c.image_len() {
            return Err(Error::Shape(format!("image has {} values, expected {}", image.len(), c.image_len())));
        }
        let side = c.image_size / c.patch;
        let mut out = Vec::with_capacity(image.len());
        for py in 0..side {
            for px in 0..side {
                for dy in 0..c.patch {
                    let y = py * c.patch + dy;
                    let start = (y * c.image_size + px * c.patch) * c.channels;
                    out.extend_from_slice(&image[start..start + c.patch * c.channels]);
                }
            }
        }
        Tensor::from_vec(&[c.num_patches(), c.patch_dim()], out)
    }

    fn encode_inner(&self, image: &[f64], prec: Precision, keep: bool) -> Result<Encoded> {
        let patches = self.patchify(image)?;
        let mut x = self.patch_embed.forward(&self.store, &patches, prec)?;
        x.add_assign(self.store.get(self.enc_pos));
        let mut caches = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let (y, c) = b.forward(&self.store, &x, prec)?;
            x = y;
            if keep {
                caches.push(c);
            }
        }
        let (z, ln) = self.enc_ln.forward(&self.store, &x, prec)?;
        Ok(Encoded {
            tokens: z,
            caches: keep.then_some((patches, caches, ln)),
        })
    }

    /// Image embedding sequence z^img.
    pub fn encode(&self, image: &[f64]) -> Result<Encoded> {
        self.encode_inner(image, self.prec(Precision::Double), false)
    }

    fn decode_inner(
        &self,
        enc: &Tensor,
        input: &[usize],
        prec: Precision,
    ) -> Result<(Tensor, Vec<DecoderCache>, LayerNormCache, Tensor)> {
        let t = input.len();
        if t == 0 || t > self.cfg.max_len {
            return Err(Error::Shape(format!("decoder input of length {t}, limit {}", self.cfg.max_len)));
        }
        let mut x = self.tok_embed.forward(&self.store, input)?;
        let pos = self.store.get(self.dec_pos);
        for i in 0..t {
            for (v, p) in x.row_mut(i).iter_mut().zip(pos.row(i)) {
                *v += p;
            }
        }
        let mut caches = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let (y, c) = b.forward(&self.store, &x, enc, prec)?;
            x = y;
            caches.push(c);
        }
        let (h, ln) = self.dec_ln.forward(&self.store, &x, prec)?;
        let logits = self.head.forward(&self.store, &h, prec)?;
        Ok((logits, caches, ln, h))
    }

    /// Next-token logits at every position of `input` (T×V), given an
    /// encoded image.
    pub fn logits(&self, enc: &Encoded, input: &[usize]) -> Result<Tensor> {
        Ok(self.decode_inner(&enc.tokens, input, self.prec(Precision::Double))?.0)
    }

    /// Mean-pooled encoder features of an image.
    pub fn features(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(image)?.pooled())
    }

    /// Teacher-forced caption loss against an already encoded image; lets
    /// callers score many captions per image.
    pub fn loss_with(&self, enc: &Encoded, tokens: &[usize]) -> Result<f64> {
        check_tokens(tokens, &self.cfg)?;
        let logits = self.logits(enc, &tokens[..tokens.len() - 1])?;
        Ok(softmax_cross_entropy(&logits, &tokens[1..], 1.0)?.0)
    }
}

fn check_tokens(tokens: &[usize], cfg: &CaptionerConfig) -> Result<()> {
    if tokens.len() < 2 || tokens.len() > cfg.max_len {
        return Err(Error::Shape(format!(
            "caption of {} tokens; need between 2 and {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
    }
    Ok(())
}

impl Model for Captioner {
    type Example = CaptionPair;
    type Cache = CaptionCache;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, ex: &CaptionPair, prec: Precision) -> Result<(f64, CaptionCache)> {
        check_tokens(&ex.tokens, &self.cfg)?;
        let prec = self.prec(prec);
        let enc = self.encode_inner(&ex.image, prec, true)?;
        let input = &ex.tokens[..ex.tokens.len() - 1];
        let (logits, decoder, dec_ln, head_in) = self.decode_inner(&enc.tokens, input, prec)?;
        let (loss, _) = softmax_cross_entropy(&logits, &ex.tokens[1..], 0.0)?;
        let (patches, encoder, enc_ln) = enc.caches.expect("caches kept");
        Ok((
            loss,
            CaptionCache {
                patches,
                encoder,
                enc_ln,
                decoder,
                dec_ln,
                head_in,
                logits,
            },
        ))
    }

    fn backward(&self, ex: &CaptionPair, c: &CaptionCache, seed: f64, prec: Precision, sink: &mut dyn GradSink) -> Result<()> {
        let prec = self.prec(prec);
        let s = &self.store;
        let t = ex.tokens.len() - 1;
        let (_, d_logits) = softmax_cross_entropy(&c.logits, &ex.tokens[1..], seed)?;
        let d_h = self.head.backward(s, &c.head_in, &d_logits, prec, sink)?;
        let mut dx = self.dec_ln.backward(s, &c.dec_ln, &d_h, sink)?;
        let mut d_enc = Tensor::zeros(&[self.cfg.num_patches(), self.cfg.dim]);
        for (b, bc) in self.decoder.iter().zip(&c.decoder).rev() {
            let (d_in, d_ctx) = b.backward(s, bc, &dx, prec, sink)?;
            dx = d_in;
            d_enc.add_assign(&d_ctx);
        }
        let mut d_pos = Tensor::zeros(&[self.cfg.max_len, self.cfg.dim]);
        for i in 0..t {
            d_pos.row_mut(i).copy_from_slice(dx.row(i));
        }
        sink.accept(GradPiece::Dense {
            param: self.dec_pos,
            grad: d_pos,
        });
        self.tok_embed.backward(&ex.tokens[..t], &dx, sink);

        let mut dz = self.enc_ln.backward(s, &c.enc_ln, &d_enc, sink)?;
        for (b, bc) in self.encoder.iter().zip(&c.encoder).rev() {
            dz = b.backward(s, bc, &dz, prec, sink)?;
        }
        sink.accept(GradPiece::Dense {
            param: self.enc_pos,
            grad: dz.clone(),
        });
        self.patch_embed.backward(s, &c.patches, &dz, prec, sink)?;
        Ok(())
    }
}

/// Eq. 3 for one pair: mean next-token cross-entropy under teacher forcing.
pub fn caption_loss(model: &Captioner, pair: &CaptionPair) -> Result<f64> {
    let enc = model.encode(&pair.image)?;
    model.loss_with(&enc, &pair.tokens)
}
