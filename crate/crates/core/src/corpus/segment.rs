//! Rule-based sentence splitting for scholarly prose.
//!
//! A boundary falls after `.`, `!` or `?` (plus closing quotes/brackets) when the
//! next non-space character starts a sentence: an uppercase letter, a digit,
//! or an opening bracket/quote/marker. Periods of known abbreviations and of
//! initials never end a sentence, and nothing inside `[...]` or `(...)` does.
//! A blank line always ends a sentence.

const ABBREVIATIONS: &[&str] = &[
    "al.", "approx.", "cf.", "ch.", "co.", "dr.", "e.g.", "eq.", "eqs.", "etc.", "fig.", "figs.", "i.e.", "inc.",
    "jr.", "ltd.", "mr.", "mrs.", "ms.", "no.", "nos.", "pp.", "prof.", "ref.", "refs.", "resp.", "sec.", "sect.",
    "st.", "tab.", "viz.", "vol.", "vs.",
];

fn starts_sentence(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || matches!(c, '[' | '(' | '"' | '\'' | '#' | '<' | '\u{201c}')
}

fn is_closing_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201d}' | '\u{2019}')
}

/// True when the word ending at the period (inclusive) must not end a sentence.
fn protected(word: &str) -> bool {
    let lower = word.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    // initials such as "J." or "J.R."
    let body = &word[..word.len() - 1];
    !body.is_empty()
        && body.split('.').all(|part| {
            let mut chars = part.chars();
            matches!((chars.next(), chars.next()), (Some(c), None) if c.is_uppercase())
        })
}

pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize; // byte offset
    let mut depth = 0usize;
    let mut i = 0usize;

    let push = |from: usize, to: usize, out: &mut Vec<String>| {
        let s = text[from..to].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    };

    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth = depth.saturating_sub(1),
            '\n' => {
                // blank line: newline, optional spaces, newline
                let mut j = i + 1;
                while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                    j += 1;
                }
                if j < chars.len() && chars[j].1 == '\n' {
                    push(start, pos, &mut sentences);
                    start = chars[j].0;
                    depth = 0;
                    i = j;
                }
            }
            '.' | '!' | '?' => {
                // closing quotes and brackets stay with the sentence they end
                let mut after = depth;
                let mut end = i + 1;
                while end < chars.len() {
                    let ch = chars[end].1;
                    if is_closing_quote(ch) {
                        end += 1;
                    } else if matches!(ch, ')' | ']') && after > 0 {
                        after -= 1;
                        end += 1;
                    } else {
                        break;
                    }
                }
                if after > 0 {
                    i += 1;
                    continue;
                }
                let mut next = end;
                while next < chars.len() && chars[next].1.is_whitespace() {
                    next += 1;
                }
                let boundary = next > end && next < chars.len() && starts_sentence(chars[next].1) && {
                    if c == '.' {
                        let word_start = text[..pos]
                            .rfind(char::is_whitespace)
                            .map_or(start, |w| w + 1)
                            .max(start);
                        !protected(&text[word_start..pos + 1])
                    } else {
                        true
                    }
                };
                if boundary {
                    let cut = chars.get(end).map_or(text.len(), |&(p, _)| p);
                    push(start, cut, &mut sentences);
                    start = cut;
                    depth = 0;
                    i = end;
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    push(start, text.len(), &mut sentences);
    sentences
}
