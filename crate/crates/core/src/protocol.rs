//! Span markers and the annotated-text data model.
//!
//! Responses carry three atomic marker tokens: `<SPAN>` opens a key phrase,
//! `</CN>` closes it as grounded and `</UN>` closes it as hallucinated. An
//! unconfident close ends the response; only a terminator may follow it.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPAN_OPEN: &str = "<SPAN>";
pub const CONFIDENT_CLOSE: &str = "</CN>";
pub const UNCONFIDENT_CLOSE: &str = "</UN>";
pub const TERMINATOR: &str = "<eos>";

/// Characters split off the edges of whitespace-delimited words.
const EDGE_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '(', ')'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    SpanOpen,
    ConfidentClose,
    UnconfidentClose,
}

impl Marker {
    pub const ALL: [Marker; 3] = [Marker::SpanOpen, Marker::ConfidentClose, Marker::UnconfidentClose];

    pub fn surface(self) -> &'static str {
        match self {
            Marker::SpanOpen => SPAN_OPEN,
            Marker::ConfidentClose => CONFIDENT_CLOSE,
            Marker::UnconfidentClose => UNCONFIDENT_CLOSE,
        }
    }

    pub fn from_surface(token: &str) -> Option<Self> {
        match token {
            SPAN_OPEN => Some(Marker::SpanOpen),
            CONFIDENT_CLOSE => Some(Marker::ConfidentClose),
            UNCONFIDENT_CLOSE => Some(Marker::UnconfidentClose),
            _ => None,
        }
    }
}

pub fn is_marker(token: &str) -> bool {
    Marker::from_surface(token).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "CN")]
    Confident,
    #[serde(rename = "UN")]
    Unconfident,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    #[serde(rename = "open")]
    pub open_index: usize,
    #[serde(rename = "close")]
    pub close_index: usize,
    pub polarity: Polarity,
}

impl SpanRecord {
    /// Token positions strictly between the markers.
    pub fn interior(&self) -> std::ops::Range<usize> {
        self.open_index + 1..self.close_index
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unbalanced markers at token {index}: {detail}")]
    UnbalancedMarkers { index: usize, detail: &'static str },
    #[error("nested span opened at token {index}")]
    NestedSpan { index: usize },
    #[error("content at token {index} follows an unconfident close")]
    TrailingContentAfterUn { index: usize },
    #[error("terminator at token {index} is not the final token")]
    MisplacedTerminator { index: usize },
    #[error("span records do not match the token sequence")]
    SpanMismatch,
}

/// A marker-bearing token sequence together with its parsed spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotated")]
pub struct AnnotatedText {
    tokens: Vec<String>,
    spans: Vec<SpanRecord>,
}

#[derive(Deserialize)]
struct RawAnnotated {
    tokens: Vec<String>,
    spans: Vec<SpanRecord>,
}

impl TryFrom<RawAnnotated> for AnnotatedText {
    type Error = ProtocolError;

    fn try_from(raw: RawAnnotated) -> Result<Self, Self::Error> {
        let parsed = parse_spans(raw.tokens)?;
        if parsed.spans != raw.spans {
            return Err(ProtocolError::SpanMismatch);
        }
        Ok(parsed)
    }
}

impl AnnotatedText {
    pub fn empty() -> Self {
        AnnotatedText { tokens: Vec::new(), spans: Vec::new() }
    }

    /// Tokenizes `text` and parses its markers.
    pub fn parse_str(text: &str) -> Result<Self, ProtocolError> {
        parse_spans(tokenize(text))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn spans(&self) -> &[SpanRecord] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Content tokens of a span, markers excluded.
    pub fn span_content(&self, span: &SpanRecord) -> &[String] {
        &self.tokens[span.interior()]
    }

    pub fn span_phrase(&self, span: &SpanRecord) -> String {
        self.span_content(span).join(" ")
    }

    pub fn unconfident_span(&self) -> Option<&SpanRecord> {
        self.spans.iter().find(|s| s.polarity == Polarity::Unconfident)
    }

    pub fn has_unconfident(&self) -> bool {
        self.unconfident_span().is_some()
    }

    pub fn strip_markers(&self) -> Vec<String> {
        strip_markers(self)
    }

    pub fn plain_text(&self) -> String {
        detokenize(&self.strip_markers())
    }

    pub fn hallucination_mask(&self) -> Vec<bool> {
        hallucination_mask(self)
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

impl fmt::Display for AnnotatedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Parses a marker-bearing token sequence, enforcing balanced, non-nested
/// spans and the unconfident-close termination rule.
pub fn parse_spans<I, S>(tokens: I) -> Result<AnnotatedText, ProtocolError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
    let spans = scan_spans(&tokens)?;
    Ok(AnnotatedText { tokens, spans })
}

/// Drops unmatched markers and the terminator, and cuts everything after
/// the first unconfident close, so that arbitrary generated output parses.
pub fn repair_generated(tokens: &[String]) -> AnnotatedText {
    let mut keep = vec![true; tokens.len()];
    let mut open: Option<usize> = None;
    for (i, tok) in tokens.iter().enumerate() {
        match Marker::from_surface(tok) {
            Some(Marker::SpanOpen) => {
                if let Some(prev) = open.replace(i) {
                    keep[prev] = false;
                }
            }
            Some(_) => {
                if open.take().is_none() {
                    keep[i] = false;
                }
            }
            None if tok == TERMINATOR => keep[i] = false,
            None => {}
        }
    }
    if let Some(prev) = open {
        keep[prev] = false;
    }
    let mut kept: Vec<String> = tokens.iter().zip(keep).filter(|&(_, k)| k).map(|(t, _)| t.clone()).collect();
    if let Some(end) = kept.iter().position(|t| t == UNCONFIDENT_CLOSE) {
        kept.truncate(end + 1);
    }
    parse_spans(kept).expect("repaired sequence is balanced")
}

fn scan_spans(tokens: &[String]) -> Result<Vec<SpanRecord>, ProtocolError> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let mut closed_unconfident: Option<usize> = None;

    for (i, tok) in tokens.iter().enumerate() {
        if tok == TERMINATOR {
            if i + 1 != tokens.len() {
                return Err(ProtocolError::MisplacedTerminator { index: i });
            }
            continue;
        }
        if closed_unconfident.is_some() {
            return Err(ProtocolError::TrailingContentAfterUn { index: i });
        }
        match Marker::from_surface(tok) {
            Some(Marker::SpanOpen) => {
                if open.is_some() {
                    return Err(ProtocolError::NestedSpan { index: i });
                }
                open = Some(i);
            }
            Some(closer) => {
                let Some(start) = open.take() else {
                    return Err(ProtocolError::UnbalancedMarkers {
                        index: i,
                        detail: "closer without a matching <SPAN>",
                    });
                };
                let polarity = if closer == Marker::ConfidentClose {
                    Polarity::Confident
                } else {
                    closed_unconfident = Some(i);
                    Polarity::Unconfident
                };
                spans.push(SpanRecord { open_index: start, close_index: i, polarity });
            }
            None => {}
        }
    }
    if let Some(start) = open {
        return Err(ProtocolError::UnbalancedMarkers { index: start, detail: "<SPAN> never closed" });
    }
    Ok(spans)
}

/// Removes every marker token, preserving content order.
pub fn strip_markers(annotated: &AnnotatedText) -> Vec<String> {
    annotated.tokens.iter().filter(|t| !is_marker(t)).cloned().collect()
}

/// Per-token loss weights: `false` exactly on the interior of unconfident
/// spans. Markers keep weight one, including `</UN>` itself.
pub fn hallucination_mask(annotated: &AnnotatedText) -> Vec<bool> {
    let mut mask = vec![true; annotated.tokens.len()];
    for span in annotated.spans.iter().filter(|s| s.polarity == Polarity::Unconfident) {
        for slot in &mut mask[span.interior()] {
            *slot = false;
        }
    }
    mask
}

/// Whitespace tokenizer that keeps markers atomic and splits edge punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        split_markers(word, &mut out);
    }
    out
}

fn split_markers(word: &str, out: &mut Vec<String>) {
    let mut rest = word;
    while !rest.is_empty() {
        let next = Marker::ALL
            .iter()
            .filter_map(|m| rest.find(m.surface()).map(|at| (at, m.surface())))
            .min_by_key(|(at, _)| *at);
        match next {
            Some((at, surface)) => {
                split_punctuation(&rest[..at], out);
                out.push(surface.to_string());
                rest = &rest[at + surface.len()..];
            }
            None => {
                split_punctuation(rest, out);
                break;
            }
        }
    }
}

fn split_punctuation(word: &str, out: &mut Vec<String>) {
    if word.is_empty() {
        return;
    }
    if word == TERMINATOR {
        out.push(word.to_string());
        return;
    }
    let core_start = word.find(|c| !EDGE_PUNCTUATION.contains(&c)).unwrap_or(word.len());
    for c in word[..core_start].chars() {
        out.push(c.to_string());
    }
    let tail = &word[core_start..];
    let core_end = tail
        .char_indices()
        .rev()
        .find(|(_, c)| !EDGE_PUNCTUATION.contains(c))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    if core_end > 0 {
        out.push(tail[..core_end].to_string());
    }
    for c in tail[core_end..].chars() {
        out.push(c.to_string());
    }
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let closing = matches!(tok.as_str(), "." | "," | "!" | "?" | ";" | ":" | ")");
        if !out.is_empty() && !closing && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == "(";
    }
    out
}

pub const HINT_PREFIX: &str = "(Hint: potential incorrect phrases → ";

/// Appends the rewrite hint listing `phrases` (deduplicated, first occurrence
/// first). A hint already present on `question` is replaced, not stacked.
pub fn rewrite_query<S: AsRef<str>>(question: &str, phrases: &[S]) -> String {
    let base = strip_hint(question);
    let mut seen: Vec<&str> = Vec::new();
    for p in phrases {
        let p = p.as_ref().trim();
        if !p.is_empty() && !seen.contains(&p) {
            seen.push(p);
        }
    }
    if seen.is_empty() {
        return base.to_string();
    }
    let sep = if base.is_empty() { "" } else { " " };
    format!("{base}{sep}{HINT_PREFIX}{})", seen.join(", "))
}

/// Removes a trailing rewrite hint, if any.
pub fn strip_hint(question: &str) -> &str {
    match question.rfind(HINT_PREFIX) {
        Some(at) if question.ends_with(')') => question[..at].trim_end(),
        _ => question,
    }
}
