//! Training configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! epsilon = 10
//! beta = 0.2
//! attention = true
//! ```
//!
//! Unknown keys, duplicate keys and malformed values are errors. Setting
//! `beta > 0` requires an explicit `epsilon`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::adversarial::PerturbationScope;
use crate::data::SegmentMode;
use crate::model::{AttentionWindow, ModelConfig};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("key `{key}`: invalid value {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("missing required key `{key}`: {reason}")]
    Missing { key: &'static str, reason: &'static str },
}

/// When the adversarial forward/backward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdversarialPass {
    /// Only when `beta > 0`.
    #[default]
    Auto,
    /// On every batch, weighted by `beta` (which may be 0).
    Always,
    /// Never, whatever `beta` says.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub skill_dim: usize,
    pub response_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    /// Epochs without val-loss improvement before stopping; 0 disables.
    pub patience: usize,
    pub max_seq_len: usize,
    pub segment_mode: SegmentMode,
    pub epsilon: f64,
    pub beta: f64,
    pub adversarial: AdversarialPass,
    pub perturbation_scope: PerturbationScope,
    pub attention: bool,
    pub attention_window: AttentionWindow,
    pub seed: u64,
    pub fold: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    pub sweep_epsilons: Vec<f64>,
    pub sweep_betas: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            skill_dim: 256,
            response_dim: 96,
            hidden_dim: 80,
            attention_dim: 80,
            batch_size: 24,
            lr: 0.001,
            lr_decay: 0.5,
            lr_decay_every: 50,
            max_epochs: 150,
            patience: 20,
            max_seq_len: 500,
            segment_mode: SegmentMode::Split,
            epsilon: 0.0,
            beta: 0.0,
            adversarial: AdversarialPass::Auto,
            perturbation_scope: PerturbationScope::PerSequence,
            attention: true,
            attention_window: AttentionWindow::Causal,
            seed: 1,
            fold: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            sweep_epsilons: vec![1.0, 5.0, 10.0, 12.0, 15.0],
            sweep_betas: vec![0.0, 0.2, 0.5, 1.0, 2.0],
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "skill_dim",
    "response_dim",
    "hidden_dim",
    "attention_dim",
    "batch_size",
    "lr",
    "lr_decay",
    "lr_decay_every",
    "max_epochs",
    "patience",
    "max_seq_len",
    "segment_mode",
    "epsilon",
    "beta",
    "adversarial",
    "perturbation_scope",
    "attention",
    "attention_window",
    "seed",
    "fold",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "clip_norm",
    "sweep_epsilons",
    "sweep_betas",
];

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

fn positive_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: usize = num(key, value)?;
    if v == 0 {
        return Err(bad(key, value, "must be positive"));
    }
    Ok(v)
}

fn real(key: &str, value: &str, min: f64, allow_min: bool) -> Result<f64, ConfigError> {
    let v: f64 = num(key, value)?;
    let ok = v.is_finite() && (v > min || (allow_min && v == min));
    if !ok {
        let op = if allow_min { ">=" } else { ">" };
        return Err(bad(key, value, format!("must be finite and {op} {min}")));
    }
    Ok(v)
}

fn list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    let vs = value
        .split(',')
        .map(|t| real(key, t.trim(), 0.0, true))
        .collect::<Result<Vec<_>, _>>()?;
    if vs.is_empty() {
        return Err(bad(key, value, "empty list"));
    }
    Ok(vs)
}

fn fmt_list(vs: &[f64]) -> String {
    vs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn model_config(&self, num_skills: usize) -> ModelConfig {
        ModelConfig {
            num_skills,
            skill_dim: self.skill_dim,
            response_dim: self.response_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            attention: self.attention,
            window: self.attention_window,
        }
    }

    /// Whether batches run the second (adversarial) pass.
    pub fn runs_adversarial_pass(&self) -> bool {
        match self.adversarial {
            AdversarialPass::Auto => self.beta > 0.0,
            AdversarialPass::Always => true,
            AdversarialPass::Off => false,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "skill_dim" => self.skill_dim = positive_usize(key, value)?,
            "response_dim" => self.response_dim = positive_usize(key, value)?,
            "hidden_dim" => self.hidden_dim = positive_usize(key, value)?,
            "attention_dim" => self.attention_dim = positive_usize(key, value)?,
            "batch_size" => self.batch_size = positive_usize(key, value)?,
            "lr" => self.lr = real(key, value, 0.0, false)?,
            "lr_decay" => self.lr_decay = real(key, value, 0.0, false)?,
            "lr_decay_every" => self.lr_decay_every = positive_usize(key, value)?,
            "max_epochs" => self.max_epochs = positive_usize(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_seq_len" => {
                self.max_seq_len = num(key, value)?;
                if self.max_seq_len < 2 {
                    return Err(bad(key, value, "must be at least 2"));
                }
            }
            "segment_mode" => {
                self.segment_mode = match value {
                    "split" => SegmentMode::Split,
                    "truncate" => SegmentMode::Truncate,
                    _ => return Err(bad(key, value, "expected split|truncate")),
                }
            }
            "epsilon" => self.epsilon = real(key, value, 0.0, true)?,
            "beta" => self.beta = real(key, value, 0.0, true)?,
            "adversarial" => {
                self.adversarial = match value {
                    "auto" => AdversarialPass::Auto,
                    "always" => AdversarialPass::Always,
                    "off" => AdversarialPass::Off,
                    _ => return Err(bad(key, value, "expected auto|always|off")),
                }
            }
            "perturbation_scope" => {
                self.perturbation_scope = match value {
                    "sequence" => PerturbationScope::PerSequence,
                    "batch" => PerturbationScope::PerBatch,
                    _ => return Err(bad(key, value, "expected sequence|batch")),
                }
            }
            "attention" => self.attention = num(key, value)?,
            "attention_window" => {
                self.attention_window = match value {
                    "causal" => AttentionWindow::Causal,
                    "global" => AttentionWindow::Global,
                    _ => return Err(bad(key, value, "expected causal|global")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "fold" => {
                self.fold = num(key, value)?;
                if self.fold >= crate::data::NUM_FOLDS {
                    return Err(bad(key, value, "fold must be 0..4"));
                }
            }
            "adam_beta1" => self.adam_beta1 = real(key, value, 0.0, true)?,
            "adam_beta2" => self.adam_beta2 = real(key, value, 0.0, true)?,
            "adam_eps" => self.adam_eps = real(key, value, 0.0, false)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "none" | "off" => None,
                    _ => Some(real(key, value, 0.0, false)?),
                }
            }
            "sweep_epsilons" => self.sweep_epsilons = list(key, value)?,
            "sweep_betas" => self.sweep_betas = list(key, value)?,
            _ => unreachable!("key checked against CONFIG_KEYS"),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        if cfg.beta > 0.0 && !seen.contains("epsilon") {
            return Err(ConfigError::Missing {
                key: "epsilon",
                reason: "beta > 0 enables adversarial training",
            });
        }
        Ok(cfg)
    }

    /// Every key in canonical order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("skill_dim", self.skill_dim.to_string());
        kv("response_dim", self.response_dim.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("attention_dim", self.attention_dim.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("lr_decay_every", self.lr_decay_every.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv(
            "segment_mode",
            match self.segment_mode {
                SegmentMode::Split => "split",
                SegmentMode::Truncate => "truncate",
            }
            .into(),
        );
        kv("epsilon", self.epsilon.to_string());
        kv("beta", self.beta.to_string());
        kv(
            "adversarial",
            match self.adversarial {
                AdversarialPass::Auto => "auto",
                AdversarialPass::Always => "always",
                AdversarialPass::Off => "off",
            }
            .into(),
        );
        kv(
            "perturbation_scope",
            match self.perturbation_scope {
                PerturbationScope::PerSequence => "sequence",
                PerturbationScope::PerBatch => "batch",
            }
            .into(),
        );
        kv("attention", self.attention.to_string());
        kv(
            "attention_window",
            match self.attention_window {
                AttentionWindow::Causal => "causal",
                AttentionWindow::Global => "global",
            }
            .into(),
        );
        kv("seed", self.seed.to_string());
        kv("fold", self.fold.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv(
            "clip_norm",
            self.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
        );
        kv("sweep_epsilons", fmt_list(&self.sweep_epsilons));
        kv("sweep_betas", fmt_list(&self.sweep_betas));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.skill_dim, c.response_dim, c.hidden_dim, c.attention_dim), (256, 96, 80, 80));
        assert_eq!(c.batch_size, 24);
        assert_eq!(c.lr, 0.001);
        assert_eq!((c.lr_decay, c.lr_decay_every), (0.5, 50));
        assert_eq!((c.max_epochs, c.patience, c.max_seq_len), (150, 20, 500));
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(c.sweep_epsilons, vec![1.0, 5.0, 10.0, 12.0, 15.0]);
        assert_eq!(c.sweep_betas, vec![0.0, 0.2, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn parses_comments_and_values() {
        let c = TrainConfig::parse("# header\nepsilon = 10 # budget\nbeta=0.2\n\nattention = false\n").unwrap();
        assert_eq!((c.epsilon, c.beta, c.attention), (10.0, 0.2, false));
    }

    #[test]
    fn errors_name_the_key() {
        let e = TrainConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { line: 1, key: "learning_rate".into() });
        assert!(TrainConfig::parse("lr = -1\n").unwrap_err().to_string().contains("`lr`"));
        assert!(matches!(TrainConfig::parse("seed\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            TrainConfig::parse("seed = 1\nseed = 2\n"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
    }

    #[test]
    fn positive_beta_requires_epsilon() {
        let e = TrainConfig::parse("beta = 1\n").unwrap_err();
        assert!(e.to_string().contains("`epsilon`"), "{e}");
        assert!(TrainConfig::parse("beta = 0\n").is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.epsilon = 12.5;
        c.beta = 0.2;
        c.clip_norm = Some(5.0);
        c.attention_window = AttentionWindow::Global;
        c.sweep_betas = vec![0.0, 1.0];
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn adversarial_pass_modes() {
        let mut c = TrainConfig::default();
        assert!(!c.runs_adversarial_pass());
        c.beta = 0.5;
        assert!(c.runs_adversarial_pass());
        c.adversarial = AdversarialPass::Off;
        assert!(!c.runs_adversarial_pass());
        c.beta = 0.0;
        c.adversarial = AdversarialPass::Always;
        assert!(c.runs_adversarial_pass());
    }
}
