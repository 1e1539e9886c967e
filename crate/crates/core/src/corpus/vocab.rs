//! Token vocabulary built from the training split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const OOV: TokenId = 1;
    pub const SEP: TokenId = 2;
    pub const AUTHOR_TAG: TokenId = 3;
    pub const CITE: TokenId = 4;
    pub const EOF: TokenId = 5;

    /// Surface forms of the reserved ids, in id order.
    pub const RESERVED: [&'static str; 6] = ["<pad>", "<oov>", "<sep>", "#author_tag", "[cite]", "<eof>"];

    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(Self::RESERVED.iter().map(|s| s.to_string()).collect())
    }

    /// Counts tokens over `token_lists` and keeps the `max_size` most frequent
    /// (reserved ids included in the cap). Ties are broken lexicographically.
    pub fn build<I, S>(token_lists: I, max_size: usize) -> Self
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for list in token_lists {
            for token in list {
                let token = token.as_ref();
                if !Self::RESERVED.contains(&token) {
                    *counts.entry(token.to_string()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(Self::RESERVED.len());
        let mut tokens: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(Self::OOV)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
