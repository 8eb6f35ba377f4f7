use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

/// Features split into a K-shot training set and a disjoint evaluation set.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub eval_x: Vec<Vec<f64>>,
    pub eval_y: Vec<usize>,
    pub k: usize,
    pub classes: usize,
}

impl ProbeSet {
    /// Takes `k` examples per class (after a seeded shuffle) for training and
    /// keeps the rest for evaluation. Every class needs more than `k`.
    pub fn split(features: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Shape(format!("{} feature rows for {} labels", features.len(), labels.len())));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("probe features must be finite and equally sized".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        if classes < 2 || k == 0 {
            return Err(Error::InvalidArgument(format!("need k >= 1 and at least two classes, got k={k}, {classes} classes")));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        Stream::new(seed, Purpose::Probe, 0).shuffle(&mut order);
        let mut taken = vec![0usize; classes];
        let mut set = Self {
            train_x: Vec::new(),
            train_y: Vec::new(),
            eval_x: Vec::new(),
            eval_y: Vec::new(),
            k,
            classes,
        };
        for i in order {
            let y = labels[i];
            if taken[y] < k {
                taken[y] += 1;
                set.train_x.push(features[i].clone());
                set.train_y.push(y);
            } else {
                set.eval_x.push(features[i].clone());
                set.eval_y.push(y);
            }
        }
        if let Some(c) = (0..classes).find(|&c| taken[c] < k || !set.eval_y.contains(&c)) {
            return Err(Error::InvalidArgument(format!("class {c} has too few examples for {k} shots plus evaluation")));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub n_eval: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeOptions {
    pub reg: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            reg: 1e-3,
            grad_tol: 1e-5,
            max_iters: 10_000,
        }
    }
}

struct Softmax<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    classes: usize,
    dim: usize,
    reg: f64,
}

impl Softmax<'_> {
    fn logits(&self, w: &[f64], row: &[f64], out: &mut [f64]) {
        let c = self.classes;
        out.copy_from_slice(&w[self.dim * c..]);
        for (j, &v) in row.iter().enumerate() {
            for (o, wj) in out.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                *o += v * wj;
            }
        }
    }

    /// Mean cross-entropy plus `reg/2·‖W‖²` (bias unpenalized), and its gradient.
    fn value_grad(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (c, d, n) = (self.classes, self.dim, self.x.len() as f64);
        let mut z = vec![0.0; c];
        let mut total = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for (row, &y) in self.x.iter().zip(self.y) {
            self.logits(w, row, &mut z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[y];
            if let Some(g) = grad.as_deref_mut() {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = ((*zk - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n;
                }
                for (j, &v) in row.iter().enumerate() {
                    for (gk, zk) in g[j * c..(j + 1) * c].iter_mut().zip(&z) {
                        *gk += v * zk;
                    }
                }
                for (gk, zk) in g[d * c..].iter_mut().zip(&z) {
                    *gk += zk;
                }
            }
        }
        let wsq: f64 = w[..d * c].iter().map(|v| v * v).sum();
        if let Some(g) = grad {
            for (gk, wk) in g[..d * c].iter_mut().zip(&w[..d * c]) {
                *gk += self.reg * wk;
            }
        }
        total / n + 0.5 * self.reg * wsq
    }
}

/// Standardizes with the training-split mean and standard deviation.
fn standardize(train: &[Vec<f64>], sets: [&[Vec<f64>]; 2]) -> [Vec<Vec<f64>>; 2] {
    let d = train[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for r in train {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in train {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    sets.map(|s| {
        s.iter()
            .map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    })
}

/// Multinomial logistic regression on the training split, by full-batch
/// gradient descent with backtracking line search; returns top-1 accuracy on
/// the evaluation split. Features are standardized with training statistics.
pub fn linear_probe(set: &ProbeSet, opts: &ProbeOptions) -> Result<ProbeResult> {
    let [train, eval] = standardize(&set.train_x, [&set.train_x, &set.eval_x]);
    let obj = Softmax {
        x: &train,
        y: &set.train_y,
        classes: set.classes,
        dim: train[0].len(),
        reg: opts.reg,
    };
    let n_w = (obj.dim + 1) * obj.classes;
    let mut w = vec![0.0; n_w];
    let mut g = vec![0.0; n_w];
    let mut trial = vec![0.0; n_w];
    let mut f = obj.value_grad(&w, Some(&mut g));
    let mut step = 1.0;
    let mut iterations = 0;
    let mut gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    while gnorm > opts.grad_tol && iterations < opts.max_iters {
        iterations += 1;
        step *= 2.0;
        // Armijo backtracking
        loop {
            for ((t, wi), gi) in trial.iter_mut().zip(&w).zip(&g) {
                *t = wi - step * gi;
            }
            let ft = obj.value_grad(&trial, None);
            if ft <= f - 0.5 * step * gnorm * gnorm || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        std::mem::swap(&mut w, &mut trial);
        f = obj.value_grad(&w, Some(&mut g));
        gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let converged = gnorm <= opts.grad_tol;
    if !converged {
        log::warn!("linear probe stopped after {iterations} iterations with gradient norm {gnorm:.3e}");
    }
    let mut z = vec![0.0; set.classes];
    let correct = eval
        .iter()
        .zip(&set.eval_y)
        .filter(|(row, &y)| {
            obj.logits(&w, row, &mut z);
            let mut best = 0;
            for k in 1..z.len() {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / eval.len() as f64,
        n_eval: eval.len(),
        iterations,
        grad_norm: gnorm,
        converged,
    })
}
