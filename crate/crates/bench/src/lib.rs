//! Shared fixtures for the benchmarks.

use privcap_core::captioner::{CaptionPair, Captioner, CaptionerConfig, SynthSpec};

/// The default toy captioner and `n` synthetic training pairs.
pub fn toy_batch(n: usize) -> (Captioner, Vec<CaptionPair>) {
    let model = Captioner::new(CaptionerConfig::default(), 0).expect("default config is valid");
    let pairs = SynthSpec::default().generate(n).into_iter().map(|s| s.pair).collect();
    (model, pairs)
}
