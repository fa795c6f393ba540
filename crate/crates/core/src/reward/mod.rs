//! Composite reward for recall-span rollouts.
//!
//! ```text
//! R      = w_format * R_format + w_add * R_add + w_mult * R_mult
//! R_add  = (R_ans + R_ret) / 2
//! R_mult = sqrt((R_ans + eps) * (R_ret + eps)) - eps
//! R_ret  = mean_overlap * P_density * P_correct
//! ```
//!
//! Overlap is measured on character intervals of the context document, not
//! on bags of characters: a span whose text equals a gold passage but was
//! resolved to a different occurrence does not overlap it.

mod config;

pub use config::{CategoryConfig, ConfigError, RewardTable};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::CharInterval;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("tau = {0} must lie in (0, 1]")]
    BadTau(f64),
    #[error("completion has no generated tokens")]
    DegenerateCompletion,
    #[error("gold-overlap scoring needs at least one gold interval")]
    EmptyGold,
    #[error("invalid reward config: {0}")]
    Config(String),
}

/// Character-level F1 between a gold interval and a span interval. Two empty
/// intervals score 0.
pub fn char_f1(gold: CharInterval, span: CharInterval) -> f64 {
    let denom = gold.len() + span.len();
    if denom == 0 {
        return 0.0;
    }
    let lo = gold.start.max(span.start);
    let hi = gold.end.min(span.end);
    let inter = hi.saturating_sub(lo);
    2.0 * inter as f64 / denom as f64
}

/// A recall span and every place its text occurs in the context document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSpan {
    pub text: String,
    pub occurrences: Vec<CharInterval>,
}

impl ResolvedSpan {
    /// Locates every (possibly overlapping) occurrence of `text` in
    /// `document`, as character offsets.
    pub fn resolve(text: &str, document: &str) -> Self {
        ResolvedSpan {
            text: text.to_string(),
            occurrences: find_occurrences(document, text),
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// All occurrences of `needle` in `haystack` as half-open character
/// intervals. An empty needle never occurs.
pub fn find_occurrences(haystack: &str, needle: &str) -> Vec<CharInterval> {
    if needle.is_empty() {
        return Vec::new();
    }
    let needle_chars = needle.chars().count();
    let mut out = Vec::new();
    let mut from = 0;
    // byte → char offset, advanced incrementally
    let mut char_pos = 0;
    let mut byte_pos = 0;
    while let Some(rel) = haystack[from..].find(needle) {
        let at = from + rel;
        char_pos += haystack[byte_pos..at].chars().count();
        byte_pos = at;
        out.push(CharInterval::new(char_pos, char_pos + needle_chars));
        let step = haystack[at..].chars().next().map_or(1, char::len_utf8);
        from = at + step;
    }
    out
}

/// Best F1 of any span occurrence against `gold`, capped at `tau` and
/// rescaled to [0, 1].
pub fn passage_overlap(gold: CharInterval, spans: &[ResolvedSpan], tau: f64) -> Result<f64, RewardError> {
    check_tau(tau)?;
    let best = spans
        .iter()
        .flat_map(|s| s.occurrences.iter())
        .map(|&occ| char_f1(gold, occ))
        .fold(0.0f64, f64::max);
    Ok(best.min(tau) / tau)
}

fn check_tau(tau: f64) -> Result<(), RewardError> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(RewardError::BadTau(tau))
    }
}

/// `(1/2)^(max(0, d - delta) / half_life)` with `d` the excess spans per
/// 1,024 generated tokens.
pub fn density_penalty(
    n_spans: usize,
    n_free: usize,
    n_tokens: usize,
    delta: f64,
    half_life: f64,
) -> Result<f64, RewardError> {
    if n_tokens == 0 {
        return Err(RewardError::DegenerateCompletion);
    }
    let excess = n_spans as f64 - n_free as f64;
    let d = excess / (n_tokens as f64 / 1024.0);
    Ok(0.5f64.powf((d - delta).max(0.0) / half_life))
}

/// `1 - (N_short + N_mismatch) / sqrt(N_s)`, clamped to [0, 1]. With no
/// spans the penalty is 1 unless delimiters are unbalanced, then 0.
pub fn correctness_penalty(n_short: usize, n_mismatch: usize, n_spans: usize) -> f64 {
    if n_spans == 0 {
        return if n_mismatch == 0 { 1.0 } else { 0.0 };
    }
    let raw = 1.0 - (n_short + n_mismatch) as f64 / (n_spans as f64).sqrt();
    raw.clamp(0.0, 1.0)
}

/// How the mean-overlap term of `R_ret` is computed for a task category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Mean of per-gold overlap (optionally over the top-k gold).
    GoldOverlap,
    /// 1 iff at least one span was produced.
    BinaryPresence,
    /// Always 1; only the penalties apply.
    AlwaysOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRewardConfig {
    pub tau: f64,
    pub n_free: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_half_life")]
    pub half_life: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    pub mode: RecallMode,
    #[serde(default = "default_min_span_chars")]
    pub min_span_chars: usize,
}

fn default_delta() -> f64 {
    4.0
}
fn default_half_life() -> f64 {
    4.0
}
fn default_min_span_chars() -> usize {
    5
}

impl Default for RetrievalRewardConfig {
    fn default() -> Self {
        RetrievalRewardConfig {
            tau: 1.0,
            n_free: 0,
            delta: default_delta(),
            half_life: default_half_life(),
            top_k: None,
            mode: RecallMode::GoldOverlap,
            min_span_chars: default_min_span_chars(),
        }
    }
}

impl RetrievalRewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        check_tau(self.tau)?;
        if self.half_life.is_nan() || self.half_life <= 0.0 {
            return Err(RewardError::Config(format!("half_life {} must be positive", self.half_life)));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(RewardError::Config(format!("delta {} must be non-negative", self.delta)));
        }
        if self.top_k == Some(0) {
            return Err(RewardError::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// What the reward sees of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub spans: Vec<ResolvedSpan>,
    /// Generated token count `N_t`.
    pub n_tokens: usize,
    pub n_start: usize,
    pub n_end: usize,
    pub answer: Option<String>,
}

impl CompletionRecord {
    pub fn n_spans(&self) -> usize {
        self.spans.len()
    }

    pub fn n_short(&self, min_chars: usize) -> usize {
        self.spans.iter().filter(|s| s.char_len() < min_chars).count()
    }

    pub fn n_mismatch(&self) -> usize {
        self.n_start.abs_diff(self.n_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBreakdown {
    pub mean_overlap: f64,
    pub p_density: f64,
    pub p_correct: f64,
    pub value: f64,
}

pub fn retrieval_reward(
    completion: &CompletionRecord,
    gold: &[CharInterval],
    cfg: &RetrievalRewardConfig,
) -> Result<f64, RewardError> {
    retrieval_breakdown(completion, gold, cfg).map(|b| b.value)
}

pub fn retrieval_breakdown(
    completion: &CompletionRecord,
    gold: &[CharInterval],
    cfg: &RetrievalRewardConfig,
) -> Result<RetrievalBreakdown, RewardError> {
    cfg.validate()?;
    let mean_overlap = match cfg.mode {
        RecallMode::AlwaysOne => 1.0,
        RecallMode::BinaryPresence => {
            if completion.n_spans() >= 1 {
                1.0
            } else {
                0.0
            }
        }
        RecallMode::GoldOverlap => {
            if gold.is_empty() {
                return Err(RewardError::EmptyGold);
            }
            let mut scores = gold
                .iter()
                .map(|&g| passage_overlap(g, &completion.spans, cfg.tau))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(k) = cfg.top_k {
                scores.sort_by(|a, b| b.total_cmp(a));
                scores.truncate(k);
            }
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    };
    let p_density = density_penalty(
        completion.n_spans(),
        cfg.n_free,
        completion.n_tokens,
        cfg.delta,
        cfg.half_life,
    )?;
    let p_correct = correctness_penalty(
        completion.n_short(cfg.min_span_chars),
        completion.n_mismatch(),
        completion.n_spans(),
    );
    Ok(RetrievalBreakdown {
        mean_overlap,
        p_density,
        p_correct,
        value: mean_overlap * p_density * p_correct,
    })
}

fn unit(name: &'static str, value: f64) -> Result<f64, RewardError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(RewardError::OutOfRange { name, value })
    }
}

pub fn additive_reward(r_ans: f64, r_ret: f64) -> Result<f64, RewardError> {
    Ok(0.5 * unit("r_ans", r_ans)? + 0.5 * unit("r_ret", r_ret)?)
}

/// Smoothed geometric mean; exactly 0 at (0, 0) and 1 at (1, 1).
pub fn multiplicative_reward(r_ans: f64, r_ret: f64, epsilon: f64) -> Result<f64, RewardError> {
    let a = unit("r_ans", r_ans)?;
    let b = unit("r_ret", r_ret)?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(RewardError::Config(format!("epsilon {epsilon} must be positive")));
    }
    let v = ((a + epsilon) * (b + epsilon)).sqrt() - epsilon;
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeRewardConfig {
    pub w_format: f64,
    pub w_add: f64,
    pub w_mult: f64,
    pub epsilon: f64,
}

impl Default for CompositeRewardConfig {
    fn default() -> Self {
        CompositeRewardConfig {
            w_format: 0.2,
            w_add: 0.4,
            w_mult: 0.4,
            epsilon: 0.01,
        }
    }
}

impl CompositeRewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let sum = self.w_format + self.w_add + self.w_mult;
        if (sum - 1.0).abs() > 1e-9 || [self.w_format, self.w_add, self.w_mult].iter().any(|w| *w < 0.0) {
            return Err(RewardError::Config(format!(
                "weights must be non-negative and sum to 1 (got {sum})"
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RewardError::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

pub fn composite_reward(
    r_format: f64,
    r_ans: f64,
    r_ret: f64,
    cfg: &CompositeRewardConfig,
) -> Result<f64, RewardError> {
    cfg.validate()?;
    let f = unit("r_format", r_format)?;
    let add = additive_reward(r_ans, r_ret)?;
    let mult = multiplicative_reward(r_ans, r_ret, cfg.epsilon)?;
    Ok((cfg.w_format * f + cfg.w_add * add + cfg.w_mult * mult).clamp(0.0, 1.0))
}

/// Output-format rules checked by [`format_reward`].
#[derive(Debug, Clone)]
pub struct FormatRules {
    pub start_marker: String,
    pub end_marker: String,
    /// Open/close markers of a thinking block. When set, recall markers may
    /// only appear inside it and the answer line must follow it.
    pub think: Option<(String, String)>,
    answer_line: Regex,
}

pub const DEFAULT_START_MARKER: &str = "<|start_recall|>";
pub const DEFAULT_END_MARKER: &str = "<|end_recall|>";
pub const DEFAULT_ANSWER_PATTERN: &str = r"(?m)^[ \t]*Answer:[ \t]*\S";

impl Default for FormatRules {
    fn default() -> Self {
        FormatRules::new(DEFAULT_START_MARKER, DEFAULT_END_MARKER, None, DEFAULT_ANSWER_PATTERN)
            .expect("default answer pattern compiles")
    }
}

impl FormatRules {
    pub fn new(
        start_marker: &str,
        end_marker: &str,
        think: Option<(&str, &str)>,
        answer_pattern: &str,
    ) -> Result<Self, RewardError> {
        if start_marker.is_empty() || end_marker.is_empty() || start_marker == end_marker {
            return Err(RewardError::Config("recall markers must be non-empty and distinct".into()));
        }
        let answer_line = Regex::new(answer_pattern)
            .map_err(|e| RewardError::Config(format!("answer pattern: {e}")))?;
        Ok(FormatRules {
            start_marker: start_marker.to_string(),
            end_marker: end_marker.to_string(),
            think: think.map(|(o, c)| (o.to_string(), c.to_string())),
            answer_line,
        })
    }
}

/// 1 when recall delimiters are balanced and never nested, sit inside the
/// thinking block (if one is configured), and an answer line exists.
pub fn format_reward(completion: &str, rules: &FormatRules) -> f64 {
    if check_format(completion, rules) {
        1.0
    } else {
        0.0
    }
}

fn check_format(text: &str, rules: &FormatRules) -> bool {
    let mut markers: Vec<(usize, bool)> = text
        .match_indices(rules.start_marker.as_str())
        .map(|(i, _)| (i, true))
        .chain(text.match_indices(rules.end_marker.as_str()).map(|(i, _)| (i, false)))
        .collect();
    markers.sort_unstable();
    let mut open = false;
    for &(_, is_start) in &markers {
        if is_start == open {
            return false;
        }
        open = is_start;
    }
    if open {
        return false;
    }

    let answer_region = match &rules.think {
        None => text,
        Some((think_open, think_close)) => {
            let (Some(o), Some(c)) = (text.find(think_open.as_str()), text.find(think_close.as_str())) else {
                return false;
            };
            if c < o || text.matches(think_open.as_str()).count() != 1 || text.matches(think_close.as_str()).count() != 1 {
                return false;
            }
            let inside = o + think_open.len()..c;
            if markers.iter().any(|&(i, _)| !inside.contains(&i)) {
                return false;
            }
            &text[c + think_close.len()..]
        }
    };
    rules.answer_line.is_match(answer_region)
}
