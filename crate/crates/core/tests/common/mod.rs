#![allow(dead_code)]

use privcap_core::captioner::{CaptionPair, Captioner, CaptionerConfig};
use privcap_core::captioner::data::{BOS, EOS};
use privcap_core::dpsgd::{poisson_sample, schedule, DpSgdConfig};
use privcap_core::nn::{
    gelu, gelu_backward, per_sample_grads, softmax_cross_entropy, Embedding, GradSink, Gradients, LayerNorm,
    LayerNormCache, Linear, Model, ParamStore, Precision, Tensor,
};
use privcap_core::rng::{Purpose, Stream};
use privcap_core::Result;

/// Embedding → Linear → GELU → LayerNorm → Linear → token cross-entropy.
#[derive(Debug, Clone)]
pub struct TinyNet {
    pub store: ParamStore,
    pub emb: Embedding,
    pub l1: Linear,
    pub ln: LayerNorm,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct TokenExample {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
}

pub struct TinyCache {
    x: Tensor,
    h: Tensor,
    a: Tensor,
    ln: LayerNormCache,
    n: Tensor,
    logits: Tensor,
}

impl TinyNet {
    pub fn new(vocab: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Stream::new(seed, Purpose::Init, 0);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", vocab, dim, &mut rng);
        let l1 = Linear::new(&mut store, "l1", dim, hidden, true, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", hidden);
        let l2 = Linear::new(&mut store, "l2", hidden, vocab, true, &mut rng);
        // Larger weights than the default init so that gradients are not tiny.
        for v in store.values_mut() {
            for x in v.data_mut() {
                *x = *x * 20.0 + 0.01;
            }
        }
        Self { store, emb, l1, ln, l2 }
    }

    pub fn vocab(&self) -> usize {
        self.emb.vocab
    }
}

impl Model for TinyNet {
    type Example = TokenExample;
    type Cache = TinyCache;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, ex: &TokenExample, prec: Precision) -> Result<(f64, TinyCache)> {
        let x = self.emb.forward(&self.store, &ex.ids)?;
        let h = self.l1.forward(&self.store, &x, prec)?;
        let a = gelu(&h, prec);
        let (n, ln) = self.ln.forward(&self.store, &a, prec)?;
        let logits = self.l2.forward(&self.store, &n, prec)?;
        let (loss, _) = softmax_cross_entropy(&logits, &ex.targets, 1.0)?;
        Ok((loss, TinyCache { x, h, a, ln, n, logits }))
    }

    fn backward(&self, ex: &TokenExample, c: &TinyCache, seed: f64, prec: Precision, sink: &mut dyn GradSink) -> Result<()> {
        let (_, dl) = softmax_cross_entropy(&c.logits, &ex.targets, seed)?;
        let dn = self.l2.backward(&self.store, &c.n, &dl, prec, sink)?;
        let da = self.ln.backward(&self.store, &c.ln, &dn, sink)?;
        let dh = gelu_backward(&c.h, &da);
        let dx = self.l1.backward(&self.store, &c.x, &dh, prec, sink)?;
        let _ = &c.a;
        self.emb.backward(&ex.ids, &dx, sink);
        Ok(())
    }
}

pub fn token_batch(vocab: usize, t: usize, n: usize, seed: u64) -> Vec<TokenExample> {
    let mut rng = Stream::new(seed, Purpose::Other(7), 0);
    (0..n)
        .map(|_| {
            let len = 1 + rng.below(t);
            TokenExample {
                ids: (0..len).map(|_| rng.below(vocab)).collect(),
                targets: (0..len).map(|_| rng.below(vocab)).collect(),
            }
        })
        .collect()
}

/// Random pairs for an arbitrary captioner config (noise images, random
/// tokens of random length).
pub fn random_pairs(cfg: &CaptionerConfig, n: usize, seed: u64) -> Vec<CaptionPair> {
    let mut rng = Stream::new(seed, Purpose::Other(8), 0);
    (0..n)
        .map(|_| {
            let len = 2 + rng.below(cfg.max_len - 1);
            CaptionPair {
                image: (0..cfg.image_len()).map(|_| rng.uniform()).collect(),
                tokens: (0..len).map(|_| rng.below(cfg.vocab)).collect(),
            }
        })
        .collect()
}

/// A captioner whose weights are inflated so that every gradient entry is
/// far from rounding noise.
pub fn lively_captioner(cfg: CaptionerConfig, seed: u64) -> Captioner {
    let mut m = Captioner::new(cfg, seed).unwrap();
    let mut rng = Stream::new(seed, Purpose::Other(9), 0);
    for v in m.params_mut().values_mut() {
        for x in v.data_mut() {
            *x = *x * 3.0 + 0.02 * rng.normal();
        }
    }
    m
}

/// Naive per-example clipped sum.
pub fn oracle_clipped_sum<M: Model>(model: &M, batch: &[&M::Example], c: f64) -> (Gradients, Vec<f64>) {
    let mut sum = Gradients::zeros_like(model.params());
    let mut norms = Vec::new();
    for ex in batch {
        let (_, g) = privcap_core::nn::loss_and_grad(model, ex, Precision::Double).unwrap();
        let n = g.norm();
        norms.push(n);
        if n.is_finite() {
            sum.axpy(if n > c { c / n } else { 1.0 }, &g);
        }
    }
    (sum, norms)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub const H: f64 = 1e-4;
pub const REL: f64 = 1e-4;
// Differences below this are at the level of central-difference rounding noise.
pub const ABS_FLOOR: f64 = 1e-9;

pub fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= REL * fd.abs().max(an.abs()) || (fd - an).abs() <= ABS_FLOOR
}

pub fn random_tensor(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Checks `d(Σ r⊙f)/dθ` and `d(Σ r⊙f)/dx` for a layer `f` given its analytic
/// backward.
pub fn check_layer(
    store: &mut ParamStore,
    x: &Tensor,
    f: &dyn Fn(&ParamStore, &Tensor) -> Tensor,
    back: &dyn Fn(&ParamStore, &Tensor, &Tensor, &mut Gradients) -> Tensor,
    rng: &mut Stream,
) -> usize {
    let y = f(store, x);
    let r = random_tensor(y.shape(), rng);
    let objective = |s: &ParamStore, x: &Tensor| -> f64 {
        f(s, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Gradients::zeros_like(store);
    let dx = back(store, x, &r, &mut g);
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + H;
            let lp = objective(store, x);
            store.get_mut(id).data_mut()[j] = orig - H;
            let lm = objective(store, x);
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * H);
            let an = g.get(id).data()[j];
            assert!(close(fd, an), "{}[{j}]: fd {fd} vs analytic {an}", store.name(id));
            checked += 1;
        }
    }
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        xp.data_mut()[j] = orig + H;
        let lp = objective(store, &xp);
        xp.data_mut()[j] = orig - H;
        let lm = objective(store, &xp);
        xp.data_mut()[j] = orig;
        let fd = (lp - lm) / (2.0 * H);
        assert!(close(fd, dx.data()[j]), "input[{j}]: fd {fd} vs analytic {}", dx.data()[j]);
        checked += 1;
    }
    checked
}

/// Brute force: materialize per-example gradients, clip, sum, add the same
/// noise draw, divide by B, then hand-coded AdamW.
pub fn brute_force_step(net: &TinyNet, data: &[TokenExample], cfg: &DpSgdConfig) -> Vec<f64> {
    let idx = poisson_sample(data.len(), cfg.q(), cfg.seed, 0);
    let batch: Vec<_> = idx.iter().map(|&i| data[i].clone()).collect();
    let per = per_sample_grads(net, &batch, Precision::Double).unwrap();
    let mut sum: Vec<f64> = vec![0.0; net.params().num_elements()];
    for g in &per {
        let n = g.norm();
        let c = if n > cfg.clip_norm { cfg.clip_norm / n } else { 1.0 };
        for (s, v) in sum.iter_mut().zip(g.iter_values()) {
            *s += c * v;
        }
    }
    let mut noise = Stream::new(cfg.seed, Purpose::Noise, 0);
    let lr = schedule(1, cfg.steps, cfg);
    let params: Vec<f64> = net.params().values().iter().flat_map(|t| t.data().to_vec()).collect();
    params
        .iter()
        .zip(&sum)
        .map(|(&p, &s)| {
            let g = (s + cfg.clip_norm * cfg.sigma * noise.normal()) / cfg.batch_size as f64;
            let m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
            let v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
            p * (1.0 - lr * cfg.weight_decay) - lr * m / (v.sqrt() + cfg.adam_eps)
        })
        .collect()
}

/// Greedy decode where the allowed set at each step is computed by scanning
/// the label list, not through the trie.
pub fn explicit_greedy(model: &Captioner, image: &[f64], prompt: &[usize], labels: &[Vec<usize>]) -> usize {
    let enc = model.encode(image).unwrap();
    let mut seq = vec![BOS];
    seq.extend_from_slice(prompt);
    let mut emitted: Vec<usize> = Vec::new();
    loop {
        let mut allowed: Vec<usize> = labels
            .iter()
            .filter(|l| l.starts_with(&emitted))
            .map(|l| if l.len() == emitted.len() { EOS } else { l[emitted.len()] })
            .collect();
        allowed.sort();
        allowed.dedup();
        let logits = model.logits(&enc, &seq).unwrap();
        let row = logits.row(seq.len() - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = allowed.iter().map(|&t| probs[t]).sum();
        let mut best = allowed[0];
        for &t in &allowed {
            if probs[t] / z > probs[best] / z {
                best = t;
            }
        }
        if best == EOS {
            return labels.iter().position(|l| *l == emitted).unwrap();
        }
        emitted.push(best);
        seq.push(best);
    }
}

pub fn random_case(i: u64) -> (Captioner, Vec<f64>, Vec<usize>, Vec<Vec<usize>>) {
    let cfg = CaptionerConfig {
        vocab: 12,
        max_len: 9,
        ..CaptionerConfig::tiny(12)
    };
    let mut model = Captioner::new(cfg, i).unwrap();
    let mut rng = Stream::new(i, Purpose::Other(3), 0);
    // inflate weights so the decoder's preferences differ between cases
    for v in model.params_mut().values_mut() {
        for x in v.data_mut() {
            *x *= 50.0;
        }
    }
    let image: Vec<f64> = (0..cfg.image_len()).map(|_| rng.uniform()).collect();
    let prompt: Vec<usize> = (0..rng.below(3)).map(|_| 2 + rng.below(10)).collect();
    // four distinct labels over a small alphabet so prefixes are shared
    let mut labels: Vec<Vec<usize>> = Vec::new();
    while labels.len() < 4 {
        let len = 1 + rng.below(3);
        let l: Vec<usize> = (0..len).map(|_| 2 + rng.below(3)).collect();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    (model, image, prompt, labels)
}

