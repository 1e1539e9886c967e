//! Versioned JSON checkpoints. Floats are written with round-trip precision
//! so a reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PeriCite};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const CHECKPOINT_FORMAT: &str = "citekit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    value: Matrix,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    params: Vec<NamedParam>,
}

impl PeriCite {
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self
                .store
                .iter()
                .map(|(_, name, m)| NamedParam {
                    name: name.to_string(),
                    value: m.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("checkpoint: {e}"),
        })?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint (format {:?})", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut model = PeriCite::new(file.config, file.vocab)?;
        if file.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, configuration needs {}",
                file.params.len(),
                model.store.len()
            )));
        }
        for p in file.params {
            if !p.value.is_finite() {
                return Err(Error::Config(format!("parameter {} is not finite", p.name)));
            }
            model.store.replace(&p.name, p.value)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}
