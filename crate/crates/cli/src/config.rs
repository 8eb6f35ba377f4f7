//! Run configuration: one TOML file with a section per component, plus
//! `section.key=value` overrides from the command line.

use privcap_core::captioner::{CaptionerConfig, SynthSpec, TrainConfig};
use privcap_core::dpsgd::DpSgdConfig;
use privcap_core::eval::{EvalOptions, ProbeOptions};
use privcap_core::nn::Precision;
use privcap_core::Accountant;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Bumped whenever a key is added, renamed or changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// False trains the non-private baseline (no clipping, no noise).
    pub private: bool,
    /// Target δ; `1/N` when absent.
    pub delta: Option<f64>,
    pub precision: Precision,
    pub threads: usize,
    /// Held-out pairs scored before and after training.
    pub eval_size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            private: t.private,
            delta: t.delta,
            precision: t.precision,
            threads: t.threads,
            eval_size: t.eval_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_eval: usize,
    /// Training examples per class for the linear probe.
    pub shots: usize,
    pub seed: u64,
    pub reg: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            n_eval: e.n_eval,
            shots: e.shots,
            seed: e.seed,
            reg: e.probe.reg,
            grad_tol: e.probe.grad_tol,
            max_iters: e.probe.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TanSection {
    /// Batch and noise are both divided by this factor.
    pub k: f64,
    /// Trailing window for the smoothed trajectory gap.
    pub window: usize,
}

impl Default for TanSection {
    fn default() -> Self {
        Self { k: 4.0, window: 20 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: CaptionerConfig,
    pub data: SynthSpec,
    pub dp: DpSgdConfig,
    pub run: RunSection,
    pub accountant: Accountant,
    pub eval: EvalSection,
    pub tan: TanSection,
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: privcap_core::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(bad)?;
        self.data.validate().map_err(bad)?;
        self.dp.validate().map_err(bad)?;
        if self.data.image_size != self.model.image_size {
            return Err(CliError::Config(format!(
                "data.image_size ({}) must equal model.image_size ({})",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.run.threads == 0 {
            return Err(CliError::Config("run.threads must be at least 1".into()));
        }
        if let Some(d) = self.run.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(CliError::Config(format!("run.delta must lie in (0, 1), got {d}")));
            }
        }
        if !(self.tan.k >= 1.0) {
            return Err(CliError::Config(format!("tan.k must be at least 1, got {}", self.tan.k)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            data: self.data.clone(),
            dp: self.dp.clone(),
            private: self.run.private,
            delta: self.run.delta,
            precision: self.run.precision,
            threads: self.run.threads,
            eval_size: self.run.eval_size,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_eval: self.eval.n_eval,
            shots: self.eval.shots,
            seed: self.eval.seed,
            probe: ProbeOptions {
                reg: self.eval.reg,
                grad_tol: self.eval.grad_tol,
                max_iters: self.eval.max_iters,
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies `section.key=value`. The value is parsed as a TOML value, and
/// taken as a string if that fails.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("nonempty path");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
