use super::trie::LabelTrie;
use crate::captioner::data::{BOS, EOS};
use crate::captioner::{Captioner, Encoded};
use crate::error::{Error, Result};

/// Index of the largest entry among `candidates`; ties go to the first.
fn argmax_among(row: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Greedy decoding from `[BOS] + prompt`, restricted at each step to the
/// continuations the trie allows, until an EOS leaf. No backtracking.
pub fn zeroshot_tree(model: &Captioner, image: &[f64], prompt: &[usize], trie: &LabelTrie) -> Result<usize> {
    let enc = model.encode(image)?;
    zeroshot_tree_encoded(model, &enc, prompt, trie)
}

pub fn zeroshot_tree_encoded(model: &Captioner, enc: &Encoded, prompt: &[usize], trie: &LabelTrie) -> Result<usize> {
    let mut seq = Vec::with_capacity(model.config().max_len);
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    let mut node = trie.root();
    loop {
        let valid = trie.valid_next(node);
        if seq.len() > model.config().max_len {
            return Err(Error::InvalidArgument(format!(
                "prompt plus label exceeds the model's {} positions",
                model.config().max_len
            )));
        }
        let logits = model.logits(enc, &seq)?;
        let next = argmax_among(logits.row(seq.len() - 1), &valid);
        node = trie.child(node, next).expect("chosen among valid children");
        if next == EOS {
            return Ok(trie.label(node).expect("EOS edges end at leaves"));
        }
        seq.push(next);
    }
}

/// Caption loss of `[BOS] + prompt + label + [EOS]` for every label.
pub fn label_losses(model: &Captioner, enc: &Encoded, prompt: &[usize], labels: &[Vec<usize>]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|label| {
            let mut tokens = Vec::with_capacity(prompt.len() + label.len() + 2);
            tokens.push(BOS);
            tokens.extend_from_slice(prompt);
            tokens.extend_from_slice(label);
            tokens.push(EOS);
            model.loss_with(enc, &tokens)
        })
        .collect()
}

/// Label whose full caption has the lowest loss; ties go to the lowest id.
pub fn zeroshot_loss(model: &Captioner, image: &[f64], prompt: &[usize], labels: &[Vec<usize>]) -> Result<usize> {
    let enc = model.encode(image)?;
    zeroshot_loss_encoded(model, &enc, prompt, labels)
}

pub fn zeroshot_loss_encoded(model: &Captioner, enc: &Encoded, prompt: &[usize], labels: &[Vec<usize>]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("zero-shot scoring needs at least one label".into()));
    }
    let losses = label_losses(model, enc, prompt, labels)?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}
