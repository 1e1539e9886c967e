//! Hyperparameters, with `key = value` parsing for config files and overrides.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::DEFAULT_SAMPLES_PER_STEP;
use crate::corpus::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::fusion::SCALES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub scales: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tea: bool,
    pub tea_k: usize,
    pub cta: bool,
    pub fusion: bool,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            d_k: 32,
            d_v: 32,
            ffn_dim: 256,
            blocks: 4,
            scales: SCALES,
            seq_len: 256,
            classes: NUM_CLASSES,
            vocab_size: 20_000,
            dropout: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            tea: true,
            tea_k: DEFAULT_SAMPLES_PER_STEP,
            cta: true,
            fusion: true,
            positional_encoding: true,
        }
    }
}

/// Module switches matching the ablation rows: plain two-tower
/// Transformer, and each of fusion, cross-text attention and augmentation
/// alone or all together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Transformer,
    WithFusion,
    WithCta,
    WithTea,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Transformer,
        Ablation::WithFusion,
        Ablation::WithCta,
        Ablation::WithTea,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Transformer => "transformer",
            Ablation::WithFusion => "with-fusion",
            Ablation::WithCta => "with-cta",
            Ablation::WithTea => "with-tea",
            Ablation::Full => "full",
        }
    }

    pub fn apply(self, config: &mut ModelConfig) {
        let (fusion, cta, tea) = match self {
            Ablation::Transformer => (false, false, false),
            Ablation::WithFusion => (true, false, false),
            Ablation::WithCta => (false, true, false),
            Ablation::WithTea => (false, false, true),
            Ablation::Full => (true, true, true),
        };
        config.fusion = fusion;
        config.cta = cta;
        config.tea = tea;
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 20] = [
        "d_model",
        "heads",
        "d_k",
        "d_v",
        "ffn_dim",
        "blocks",
        "scales",
        "seq_len",
        "classes",
        "vocab_size",
        "dropout",
        "learning_rate",
        "batch_size",
        "epochs",
        "seed",
        "tea",
        "tea_k",
        "cta",
        "fusion",
        "positional_encoding",
    ];

    /// Sets one field by name. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_k" => self.d_k = parse(key, value)?,
            "d_v" => self.d_v = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "scales" => self.scales = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "tea" => self.tea = parse(key, value)?,
            "tea_k" => self.tea_k = parse(key, value)?,
            "cta" => self.cta = parse(key, value)?,
            "fusion" => self.fusion = parse(key, value)?,
            "positional_encoding" => self.positional_encoding = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", value[key]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes != NUM_CLASSES {
            return fail(format!("classes must be {NUM_CLASSES}, got {}", self.classes));
        }
        if self.blocks != self.scales {
            return fail(format!("blocks ({}) must equal scales ({})", self.blocks, self.scales));
        }
        if self.scales == 0 || self.scales > SCALES {
            return fail(format!("scales must be in 1..={SCALES}, got {}", self.scales));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("ffn_dim", self.ffn_dim),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("tea_k", self.tea_k),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_model < 2 {
            return fail("d_model must be at least 2".into());
        }
        if self.vocab_size < 7 {
            return fail("vocab_size must leave room beyond the six reserved tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}
