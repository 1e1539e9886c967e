//! Text to token ids: lowercase, keep reserved markers, strip everything
//! outside `[a-z0-9 ]`, drop stopwords, map to ids and clip.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};

/// Longest sequence kept after clipping.
pub const MAX_TOKENS: usize = 256;

const STOPWORDS_FILE: &str = include_str!("../../data/stopwords_en.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_FILE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

fn markers() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let alternatives: Vec<String> = Vocabulary::RESERVED.iter().map(|m| regex::escape(m)).collect();
        Regex::new(&alternatives.join("|")).unwrap()
    })
}

fn special() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[^a-z0-9 ]").unwrap())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Token count before clipping.
    pub original_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn push_words(out: &mut Vec<String>, chunk: &str) {
    let cleaned = special().replace_all(chunk, " ");
    let stop = stopwords();
    out.extend(
        cleaned
            .split_whitespace()
            .filter(|w| !stop.contains(w))
            .map(str::to_string),
    );
}

/// Cleaned, stopword-free tokens; reserved markers survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut last = 0;
    for m in markers().find_iter(&lower) {
        push_words(&mut tokens, &lower[last..m.start()]);
        tokens.push(m.as_str().to_string());
        last = m.end();
    }
    push_words(&mut tokens, &lower[last..]);
    tokens
}

/// Token ids clipped to [`MAX_TOKENS`]. Text with no surviving tokens
/// becomes a lone PAD with original length 0.
pub fn preprocess(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return TokenSequence {
            ids: vec![Vocabulary::PAD],
            original_len: 0,
        };
    }
    let original_len = tokens.len();
    let ids = tokens.iter().take(MAX_TOKENS).map(|t| vocab.id(t)).collect();
    TokenSequence { ids, original_len }
}

/// Space-joined surface form of a sequence, PAD omitted.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids
        .iter()
        .filter(|&&id| id != Vocabulary::PAD)
        .map(|&id| vocab.token(id).unwrap_or(Vocabulary::RESERVED[Vocabulary::OOV as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}
