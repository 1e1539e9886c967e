//! Corpus construction: locating cited sentences in full text, extracting
//! their neighbours, preprocessing text into token ids, and dataset I/O.

mod dataset;
mod extract;
mod levenshtein;
mod preprocess;
mod segment;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{class_counts, load_dataset, save_dataset, ClassCounts, LoadedDataset};
pub use extract::{
    canonicalize_citations, extract_context, extract_instance, import_3c_csv, locate_cited_sentence,
    normalize_for_matching, ContextTriple, ImportOutcome, Located, Unmatched, DEFAULT_MATCH_THRESHOLD,
};
pub use levenshtein::{levenshtein, normalized_distance};
pub use preprocess::{detokenize, preprocess, tokenize, TokenSequence, MAX_TOKENS};
pub use segment::segment_sentences;
pub use vocab::{TokenId, Vocabulary};

pub const AUTHOR_TAG: &str = "#AUTHOR_TAG";
pub const EOF_MARKER: &str = "<EOF>";
pub const CITE_MARKER: &str = "[CITE]";

/// Number of citation intent classes.
pub const NUM_CLASSES: usize = 6;

/// Citation intent, numbered 0-5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum Intent {
    Background = 0,
    CompareContrast = 1,
    Extension = 2,
    Future = 3,
    Motivation = 4,
    Uses = 5,
}

impl Intent {
    pub const ALL: [Intent; NUM_CLASSES] = [
        Intent::Background,
        Intent::CompareContrast,
        Intent::Extension,
        Intent::Future,
        Intent::Motivation,
        Intent::Uses,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Intent> {
        Intent::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Intent::Background => "BACKGROUND",
            Intent::CompareContrast => "COMPARES_CONTRASTS",
            Intent::Extension => "EXTENSION",
            Intent::Future => "FUTURE",
            Intent::Motivation => "MOTIVATION",
            Intent::Uses => "USES",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for Intent {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        Intent::from_index(v as usize).ok_or_else(|| format!("label {v} outside 0..=5"))
    }
}

impl From<Intent> for u8 {
    fn from(i: Intent) -> u8 {
        i as u8
    }
}

/// One labeled example: a cited sentence with its two neighbours.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationInstance {
    pub core_id: String,
    pub first_sentence: String,
    pub cited_sentence: String,
    pub second_sentence: String,
    pub label: Intent,
    #[serde(default)]
    pub synthetic: bool,
}

impl CitationInstance {
    pub fn validate(&self) -> Result<()> {
        let tags = self.cited_sentence.matches(AUTHOR_TAG).count();
        if tags != 1 {
            return Err(Error::Domain(format!(
                "cited sentence of {} carries {tags} {AUTHOR_TAG} markers, expected exactly one",
                self.core_id
            )));
        }
        Ok(())
    }
}
