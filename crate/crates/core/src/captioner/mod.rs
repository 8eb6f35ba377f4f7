//! Toy image captioner, its synthetic dataset, and training drivers.

pub mod data;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

pub use data::{Sample, SynthSpec};
pub use model::{caption_loss, Captioner, CaptionerConfig, Encoded};
pub use train::{tan_equivalence_run, train, TanRun, TrainConfig, TrainOutcome};

/// An image with its caption tokens `[BOS, …, EOS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    /// `H×W×C` row-major pixel values.
    pub image: Vec<f64>,
    pub tokens: Vec<usize>,
}

impl AsRef<CaptionPair> for CaptionPair {
    fn as_ref(&self) -> &CaptionPair {
        self
    }
}
