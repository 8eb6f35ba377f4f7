//! Zero-shot classification with the caption decoder and linear probing of
//! encoder features.

pub mod probe;
pub mod trie;
pub mod zeroshot;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use probe::{linear_probe, ProbeOptions, ProbeResult, ProbeSet};
pub use trie::LabelTrie;
pub use zeroshot::{label_losses, zeroshot_loss, zeroshot_tree};

use crate::captioner::data::{class_parts, token_of, Sample, NUM_CLASSES, PROMPT};
use crate::captioner::{Captioner, SynthSpec};
use crate::error::Result;

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    /// Shots per class for probes, label-set size for zero-shot tasks.
    pub k: usize,
    pub accuracy: f64,
    pub n_eval: usize,
    pub seed: u64,
}

pub fn write_report<W: Write>(out: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::Error::Format(format!("writing report: {e}")))?;
    Ok(())
}

/// Token lists for the shape-color labels, in class order.
pub fn shape_color_labels() -> Vec<Vec<usize>> {
    (0..NUM_CLASSES)
        .map(|c| {
            let (color, shape) = class_parts(c);
            vec![token_of(color.word()).expect("vocab"), token_of(shape.word()).expect("vocab")]
        })
        .collect()
}

/// `"this is a photo of a"` as token ids.
pub fn prompt_tokens() -> Vec<usize> {
    PROMPT.iter().map(|w| token_of(w).expect("vocab")).collect()
}

/// Class-balanced single-object scenes for evaluation, drawn from a stream
/// disjoint from training data (`seed` replaces the spec's seed). Classes
/// get `⌈n/12⌉` samples each, in scene order, until `n` are collected.
pub fn single_object_samples(spec: &SynthSpec, n: usize, seed: u64) -> Vec<Sample> {
    let spec = SynthSpec {
        pair_frac: 0.0,
        seed,
        ..spec.clone()
    };
    let quota = n.div_ceil(NUM_CLASSES);
    let mut counts = [0usize; NUM_CLASSES];
    let mut out = Vec::with_capacity(n);
    let mut index = 0;
    while out.len() < n {
        let s = spec.sample(index);
        index += 1;
        let c = s.scene.class().expect("single-object scene");
        if counts[c] < quota {
            counts[c] += 1;
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_eval: usize,
    pub shots: usize,
    pub seed: u64,
    pub probe: ProbeOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_eval: 300,
            shots: 10,
            seed: 1,
            probe: ProbeOptions::default(),
        }
    }
}

/// Zero-shot (tree and loss-based) and linear-probe accuracy on the
/// shape-color task.
pub fn evaluate(model: &Captioner, spec: &SynthSpec, opts: &EvalOptions) -> Result<Vec<EvalRow>> {
    let samples = single_object_samples(spec, opts.n_eval, opts.seed ^ 0x5eed);
    let labels = shape_color_labels();
    let trie = LabelTrie::new(&labels)?;
    let prompt = prompt_tokens();
    let (mut tree_ok, mut loss_ok) = (0, 0);
    let mut features = Vec::with_capacity(samples.len());
    let mut classes = Vec::with_capacity(samples.len());
    for s in &samples {
        let class = s.scene.class().expect("single-object scene");
        let enc = model.encode(&s.pair.image)?;
        tree_ok += (zeroshot::zeroshot_tree_encoded(model, &enc, &prompt, &trie)? == class) as usize;
        loss_ok += (zeroshot::zeroshot_loss_encoded(model, &enc, &prompt, &labels)? == class) as usize;
        features.push(enc.pooled());
        classes.push(class);
    }
    let n = samples.len();
    let set = ProbeSet::split(&features, &classes, opts.shots, opts.seed)?;
    let probe = linear_probe(&set, &opts.probe)?;
    Ok(vec![
        EvalRow {
            task: "zeroshot_tree".into(),
            k: labels.len(),
            accuracy: tree_ok as f64 / n as f64,
            n_eval: n,
            seed: opts.seed,
        },
        EvalRow {
            task: "zeroshot_loss".into(),
            k: labels.len(),
            accuracy: loss_ok as f64 / n as f64,
            n_eval: n,
            seed: opts.seed,
        },
        EvalRow {
            task: "linear_probe".into(),
            k: opts.shots,
            accuracy: probe.accuracy,
            n_eval: probe.n_eval,
            seed: opts.seed,
        },
    ])
}
