//! Punctuation-based sentence segmentation.
//!
//! Sentences end at any run of terminal punctuation (`.`, `!`, `?`, `。`, `？`).
//! A trailing fragment without a terminator still counts as a sentence. A
//! sentence is a question iff its last character is `?` or `？`. No linguistic
//! parsing is attempted; decimals such as `5.5` will split.

use serde::{Deserialize, Serialize};

const TERMINATORS: [char; 5] = ['.', '!', '?', '。', '？'];

fn is_terminator(c: char) -> bool {
    TERMINATORS.contains(&c)
}

/// A sentence located in a source string by byte offsets (trimmed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl SentenceSpan {
    pub fn is_question(&self) -> bool {
        matches!(self.text.chars().last(), Some('?') | Some('？'))
    }
}

/// Splits `text` into trimmed, non-empty sentences.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut chars = text.char_indices().peekable();
    while let Some((idx, c)) = chars.next() {
        if !is_terminator(c) {
            continue;
        }
        let mut end = idx + c.len_utf8();
        while let Some(&(next_idx, next)) = chars.peek() {
            if is_terminator(next) {
                end = next_idx + next.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        push_trimmed(text, start, end, &mut out);
        start = end;
    }
    push_trimmed(text, start, text.len(), &mut out);
    out
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<SentenceSpan>) {
    let raw = &text[start..end];
    let lead = raw.len() - raw.trim_start().len();
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return;
    }
    let s = start + lead;
    out.push(SentenceSpan {
        start: s,
        end: s + trimmed.len(),
        text: trimmed.to_string(),
    });
}

/// Returns only the question sentences of `text`.
pub fn detect_question_sentences(text: &str) -> Vec<SentenceSpan> {
    split_sentences(text)
        .into_iter()
        .filter(SentenceSpan::is_question)
        .collect()
}

pub fn sentence_count(text: &str) -> usize {
    split_sentences(text).len()
}

pub fn question_count(text: &str) -> usize {
    detect_question_sentences(text).len()
}

/// True when `text` is exactly one sentence ending in a question mark.
pub fn is_single_question(text: &str) -> bool {
    let sentences = split_sentences(text);
    sentences.len() == 1 && sentences[0].is_question()
}

/// Joins sentences back into a turn, separated by single spaces.
pub fn join_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> String {
    sentences
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Finds `needle` in `haystack` ignoring ASCII case, returning the byte range
/// in `haystack`. ASCII lowering preserves byte offsets so the returned slice
/// is verbatim source text.
pub fn find_ascii_case_insensitive(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    if needle.is_empty() {
        return None;
    }
    let hay = haystack.to_ascii_lowercase();
    let pat = needle.to_ascii_lowercase();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&pat) {
        let s = from + pos;
        let e = s + pat.len();
        if word_bounded(&hay, s, e, &pat) {
            return Some((s, e));
        }
        from = s + hay[s..].chars().next().map(char::len_utf8).unwrap_or(1);
    }
    None
}

// ASCII-alphabetic needles must sit on word boundaries ("must" is not found in
// "mustard"); other scripts match as plain substrings.
fn word_bounded(hay: &str, s: usize, e: usize, pat: &str) -> bool {
    let first_ascii = pat
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphanumeric());
    let last_ascii = pat
        .chars()
        .last()
        .is_some_and(|c| c.is_ascii_alphanumeric());
    let before_ok = !first_ascii
        || hay[..s]
            .chars()
            .last()
            .is_none_or(|c| !c.is_ascii_alphanumeric());
    let after_ok = !last_ascii
        || hay[e..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_ascii_alphanumeric());
    before_ok && after_ok
}
