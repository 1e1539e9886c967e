//! JSONL dataset files, one instance per line.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CitationInstance, Intent, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; NUM_CLASSES]);

impl ClassCounts {
    pub fn get(&self, label: Intent) -> usize {
        self.0[label.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{i}: {c}")?;
        }
        write!(f, "}} total {}", self.total())
    }
}

pub fn class_counts(instances: &[CitationInstance]) -> ClassCounts {
    let mut counts = ClassCounts::default();
    for inst in instances {
        counts.0[inst.label.index()] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub instances: Vec<CitationInstance>,
    pub counts: ClassCounts,
}

#[derive(Deserialize)]
struct RawInstance {
    core_id: String,
    first_sentence: String,
    cited_sentence: String,
    second_sentence: String,
    #[serde(default)]
    synthetic: bool,
}

/// Reads and validates a JSONL dataset. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        instances.push(parse_line(&line, line_no)?);
    }
    let counts = class_counts(&instances);
    Ok(LoadedDataset { instances, counts })
}

fn parse_line(line: &str, line_no: usize) -> Result<CitationInstance> {
    let parse_err = |message: String| Error::Parse { line: line_no, message };
    let invalid = |message: String| Error::Validation { line: line_no, message };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let label = match value.get("label") {
        None => return Err(parse_err("missing field `label`".into())),
        Some(v) => v
            .as_i64()
            .ok_or_else(|| invalid(format!("label {v} is not an integer")))?,
    };
    let label = usize::try_from(label)
        .ok()
        .and_then(Intent::from_index)
        .ok_or_else(|| invalid(format!("label {label} outside 0..=5")))?;
    let raw: RawInstance = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
    let instance = CitationInstance {
        core_id: raw.core_id,
        first_sentence: raw.first_sentence,
        cited_sentence: raw.cited_sentence,
        second_sentence: raw.second_sentence,
        label,
        synthetic: raw.synthetic,
    };
    instance.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(instance)
}

pub fn save_dataset(instances: &[CitationInstance], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut out, inst).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
