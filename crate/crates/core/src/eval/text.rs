//! Reading answers and recall spans out of completion text.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::reward::{CompletionRecord, ResolvedSpan};
use crate::taskgen::TokenCounter;

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*Answer:(.*)$").expect("static pattern"))
}

/// Trailing text of the last `Answer:` line, trimmed.
pub fn parse_answer(completion: &str) -> Option<String> {
    answer_re()
        .captures_iter(completion)
        .last()
        .map(|c| c[1].trim().to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpans {
    /// Closed spans, left to right.
    pub spans: Vec<String>,
    /// Text after a start marker that was never closed.
    pub truncated: Option<String>,
    pub n_start: usize,
    pub n_end: usize,
}

impl TextSpans {
    pub fn used_recall(&self) -> bool {
        !self.spans.is_empty() || self.truncated.is_some()
    }
}

/// Left-to-right scan pairing each start marker with the nearest following
/// end marker. A start seen while a span is open abandons the earlier start;
/// an end with no open span is unpaired. Both still count toward
/// `n_start`/`n_end`.
pub fn extract_text_spans(text: &str, start: &str, end: &str) -> TextSpans {
    assert!(
        !start.is_empty() && !end.is_empty() && start != end,
        "recall markers must be non-empty and distinct"
    );
    let mut out = TextSpans::default();
    let mut open: Option<usize> = None;
    let mut pos = 0;
    loop {
        let s = text[pos..].find(start).map(|i| i + pos);
        let e = text[pos..].find(end).map(|i| i + pos);
        // a marker that is a prefix of the other must not shadow it
        let next_is_start = match (s, e) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(si), Some(ei)) => si < ei || (si == ei && start.len() > end.len()),
        };
        if next_is_start {
            let si = s.unwrap();
            out.n_start += 1;
            pos = si + start.len();
            open = Some(pos);
        } else {
            let ei = e.unwrap();
            out.n_end += 1;
            if let Some(from) = open.take() {
                out.spans.push(text[from..ei].to_string());
            }
            pos = ei + end.len();
        }
    }
    if let Some(from) = open {
        out.truncated = Some(text[from..].to_string());
    }
    out
}

/// Builds the reward's view of a text completion. Closed spans are resolved
/// against `document`; the generated-token count comes from the endpoint
/// when known, else from `counter`.
pub fn completion_record(
    completion: &str,
    document: &str,
    start: &str,
    end: &str,
    reported_tokens: Option<usize>,
    counter: &dyn TokenCounter,
) -> CompletionRecord {
    let ex = extract_text_spans(completion, start, end);
    CompletionRecord {
        spans: ex.spans.iter().map(|s| ResolvedSpan::resolve(s, document)).collect(),
        n_tokens: reported_tokens.unwrap_or_else(|| counter.count(completion)).max(1),
        n_start: ex.n_start,
        n_end: ex.n_end,
        answer: parse_answer(completion),
    }
}
