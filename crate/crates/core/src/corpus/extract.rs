//! Peripheral-context extraction: find the cited sentence inside a
//! document's full text and take the sentences on either side of it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::levenshtein::levenshtein_chars;
use super::segment::segment_sentences;
use super::{CitationInstance, Intent, AUTHOR_TAG, CITE_MARKER, EOF_MARKER};
use crate::error::{Error, Result};

/// Largest normalized edit distance accepted as a match.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.2;

fn numeric_citation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*\d+[a-z]?(?:\s*(?:[,;]|[-\u{2013}\u{2014}])\s*\d+[a-z]?)*\s*\]").unwrap())
}

fn author_year_citation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let name = r"[A-Z][\p{L}'\-]+";
        let authors = format!(r"{name}(?:\s+(?:et\s+al\.?|and|&)(?:\s+{name})?)*");
        let one = format!(r"{authors},?\s+\d{{4}}[a-z]?");
        Regex::new(&format!(r"\((?:see\s+)?{one}(?:\s*;\s*{one})*\)")).unwrap()
    })
}

fn narrative_citation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[A-Z][\p{L}'\-]+\s+(?:et\s+al\.?|(?:and|&)\s+[A-Z][\p{L}'\-]+)\s*\[CITE\]").unwrap()
    })
}

fn whitespace() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s+").unwrap())
}

fn collapse_whitespace(text: &str) -> String {
    whitespace().replace_all(text.trim(), " ").into_owned()
}

/// Rewrites bracketed numeric citations (`[3]`, `[4, 7-9]`) and
/// parenthetical author-year citations (`(Smith et al., 2019)`) to `[CITE]`
/// and collapses whitespace.
pub fn canonicalize_citations(text: &str) -> String {
    let text = numeric_citation().replace_all(text, CITE_MARKER);
    let text = author_year_citation().replace_all(&text, CITE_MARKER);
    collapse_whitespace(&text)
}

/// Canonical form used for fuzzy matching: `#AUTHOR_TAG` counts as a
/// citation, and a narrative citation ("Smith et al. [CITE]") shrinks to the
/// bare marker since contexts often tag the whole author mention.
pub fn normalize_for_matching(text: &str) -> String {
    let canonical = canonicalize_citations(&text.replace(AUTHOR_TAG, CITE_MARKER));
    narrative_citation().replace_all(&canonical, CITE_MARKER).into_owned()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Located {
    pub index: usize,
    pub distance: f64,
}

/// Index of the sentence closest to `cited` by normalized edit distance.
/// Ties go to the earliest sentence.
pub fn locate_cited_sentence(sentences: &[String], cited: &str, threshold: f64) -> Result<Located> {
    if sentences.is_empty() {
        return Err(Error::Domain("cannot locate a citation in an empty document".into()));
    }
    let target: Vec<char> = normalize_for_matching(cited).chars().collect();
    let mut best = Located {
        index: 0,
        distance: f64::INFINITY,
    };
    for (index, sentence) in sentences.iter().enumerate() {
        let candidate: Vec<char> = normalize_for_matching(sentence).chars().collect();
        let longest = target.len().max(candidate.len());
        if longest == 0 {
            best = Located { index, distance: 0.0 };
            break;
        }
        // the length difference alone bounds the distance from below
        let lower = target.len().abs_diff(candidate.len()) as f64 / longest as f64;
        if lower >= best.distance {
            continue;
        }
        let distance = levenshtein_chars(&target, &candidate) as f64 / longest as f64;
        if distance < best.distance {
            best = Located { index, distance };
            if distance == 0.0 {
                break;
            }
        }
    }
    if best.distance <= threshold {
        Ok(best)
    } else {
        Err(Error::NotFound {
            best_index: best.index,
            distance: best.distance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTriple {
    pub first: String,
    pub cited: String,
    pub second: String,
}

/// The sentence at `index` with its neighbours, `<EOF>` at document edges.
///
/// Panics if `index` is out of range.
pub fn extract_context(sentences: &[String], index: usize) -> ContextTriple {
    assert!(index < sentences.len(), "sentence index {index} out of range");
    let neighbour = |i: Option<usize>| {
        i.and_then(|i| sentences.get(i))
            .cloned()
            .unwrap_or_else(|| EOF_MARKER.to_string())
    };
    ContextTriple {
        first: neighbour(index.checked_sub(1)),
        cited: sentences[index].clone(),
        second: neighbour(Some(index + 1)),
    }
}

fn canonical_neighbour(s: &str) -> String {
    if s == EOF_MARKER {
        s.to_string()
    } else {
        canonicalize_citations(s)
    }
}

fn extract_from_sentences(
    sentences: &[String],
    core_id: &str,
    citation_context: &str,
    label: Intent,
    threshold: f64,
) -> Result<CitationInstance> {
    let located = locate_cited_sentence(sentences, citation_context, threshold)?;
    let triple = extract_context(sentences, located.index);
    let instance = CitationInstance {
        core_id: core_id.to_string(),
        first_sentence: canonical_neighbour(&triple.first),
        cited_sentence: collapse_whitespace(citation_context),
        second_sentence: canonical_neighbour(&triple.second),
        label,
        synthetic: false,
    };
    instance.validate()?;
    Ok(instance)
}

/// Builds one instance from a document's full text. The cited sentence is
/// the citation context as given; the neighbours come from the document with
/// their citations canonicalized.
pub fn extract_instance(
    document: &str,
    core_id: &str,
    citation_context: &str,
    label: Intent,
    threshold: f64,
) -> Result<CitationInstance> {
    extract_from_sentences(&segment_sentences(document), core_id, citation_context, label, threshold)
}

/// A citation that could not be turned into an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub line: usize,
    pub core_id: String,
    pub reason: String,
    pub best_distance: Option<f64>,
    pub best_candidate: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportOutcome {
    pub instances: Vec<CitationInstance>,
    pub unmatched: Vec<Unmatched>,
}

/// Reads a citations CSV with `core_id`, `citation_context` and `label`
/// columns. With `fulltext_dir`, each context is located in
/// `<fulltext_dir>/<core_id>.txt`; without it both neighbours are `<EOF>`.
/// Output order follows input order.
pub fn import_3c_csv(path: &Path, fulltext_dir: Option<&Path>, threshold: f64) -> Result<ImportOutcome> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column {name}"),
            })
    };
    let (id_col, ctx_col, label_col) = (column("core_id")?, column("citation_context")?, column("label")?);

    let mut outcome = ImportOutcome::default();
    let mut documents: HashMap<String, Option<Vec<String>>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let (core_id, context) = (field(id_col), field(ctx_col));
        let unmatched = |reason: String| Unmatched {
            line,
            core_id: core_id.clone(),
            reason,
            best_distance: None,
            best_candidate: None,
        };

        let label = match field(label_col).parse::<usize>().ok().and_then(Intent::from_index) {
            Some(l) => l,
            None => {
                outcome
                    .unmatched
                    .push(unmatched(format!("invalid label {:?}", field(label_col))));
                continue;
            }
        };

        let Some(dir) = fulltext_dir else {
            let instance = CitationInstance {
                core_id: core_id.clone(),
                first_sentence: EOF_MARKER.into(),
                cited_sentence: collapse_whitespace(&context),
                second_sentence: EOF_MARKER.into(),
                label,
                synthetic: false,
            };
            match instance.validate() {
                Ok(()) => outcome.instances.push(instance),
                Err(e) => outcome.unmatched.push(unmatched(e.to_string())),
            }
            continue;
        };

        let sentences = match documents.get(&core_id) {
            Some(cached) => cached,
            None => {
                let doc_path = dir.join(format!("{core_id}.txt"));
                let loaded = match fs::read_to_string(&doc_path) {
                    Ok(text) => Some(segment_sentences(&text)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                    Err(e) => return Err(Error::io(doc_path, e)),
                };
                documents.entry(core_id.clone()).or_insert(loaded)
            }
        };
        let Some(sentences) = sentences.as_deref() else {
            outcome.unmatched.push(unmatched("no full text".into()));
            continue;
        };
        match extract_from_sentences(sentences, &core_id, &context, label, threshold) {
            Ok(instance) => outcome.instances.push(instance),
            Err(Error::NotFound { best_index, distance }) => {
                let mut u = unmatched("cited sentence not found".into());
                if distance.is_finite() {
                    u.best_distance = Some(distance);
                    u.best_candidate = sentences.get(best_index).cloned();
                }
                outcome.unmatched.push(u);
            }
            Err(e) => outcome.unmatched.push(unmatched(e.to_string())),
        }
    }
    Ok(outcome)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse {
            line,
            message: e.to_string(),
        }
    }
}
