//! Generation-time state machine for recall spans.
//!
//! Outside a span every token except `r_end` may be sampled. Emitting
//! `r_start` freezes the searchable context and opens a [`MatchSession`];
//! inside the span only continuations of the recalled prefix and `r_end` are
//! allowed. Closing the span records it and folds the generated tokens back
//! into the context.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{CharInterval, IndexError, MatchSession, SearchableContext, TokenId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("token {token} is not allowed while {mode}")]
    InvalidContinuation { token: TokenId, mode: Mode },
    #[error("logits have length {logits} but the mask covers {mask} tokens")]
    LengthMismatch { logits: usize, mask: usize },
    #[error("mask allows no token")]
    EmptyMask,
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub r_start_id: TokenId,
    pub r_end_id: TokenId,
    pub vocab_size: usize,
    #[serde(default = "default_true")]
    pub include_prior_spans_in_context: bool,
    #[serde(default = "default_true")]
    pub include_delimiters_in_context: bool,
}

fn default_true() -> bool {
    true
}

impl DecoderConfig {
    pub fn new(r_start_id: u32, r_end_id: u32, vocab_size: usize) -> Self {
        DecoderConfig {
            r_start_id: TokenId(r_start_id),
            r_end_id: TokenId(r_end_id),
            vocab_size,
            include_prior_spans_in_context: true,
            include_delimiters_in_context: true,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.vocab_size == 0 {
            return Err(DecodeError::Config("vocab_size must be positive".into()));
        }
        if self.r_start_id == self.r_end_id {
            return Err(DecodeError::Config(format!(
                "r_start_id and r_end_id must differ (both {})",
                self.r_start_id
            )));
        }
        for (name, id) in [("r_start_id", self.r_start_id), ("r_end_id", self.r_end_id)] {
            if id.index() >= self.vocab_size {
                return Err(DecodeError::Config(format!(
                    "{name} {id} is outside the vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Outside,
    Inside,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Outside => "outside a recall span",
            Mode::Inside => "inside a recall span",
        })
    }
}

/// Bitset over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    words: Vec<u64>,
    len: usize,
}

impl TokenMask {
    pub fn none(len: usize) -> Self {
        TokenMask {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn all(len: usize) -> Self {
        let mut m = TokenMask {
            words: vec![u64::MAX; len.div_ceil(64)],
            len,
        };
        let rem = len % 64;
        if rem > 0 {
            *m.words.last_mut().expect("non-empty when rem > 0") = (1u64 << rem) - 1;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_allowed(&self, token: TokenId) -> bool {
        let i = token.index();
        i < self.len && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn allow(&mut self, token: TokenId) {
        let i = token.index();
        if i < self.len {
            self.words[i / 64] |= 1u64 << (i % 64);
        }
    }

    pub fn block(&mut self, token: TokenId) {
        let i = token.index();
        if i < self.len {
            self.words[i / 64] &= !(1u64 << (i % 64));
        }
    }

    pub fn count_allowed(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn allowed_ids(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (wi, &w) in self.words.iter().enumerate() {
            let mut bits = w;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                out.push(TokenId((wi * 64 + b) as u32));
                bits &= bits - 1;
            }
        }
        out
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.is_allowed(TokenId(i as u32))).collect()
    }

    /// Little-endian packed bits, `ceil(len / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        bytes.truncate(self.len.div_ceil(8));
        bytes
    }
}

/// Replaces disallowed logits with negative infinity. Allowed entries are
/// copied bit for bit.
pub fn apply_mask(logits: &[f32], mask: &TokenMask) -> Result<Vec<f32>, DecodeError> {
    let mut out = logits.to_vec();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(logits: &mut [f32], mask: &TokenMask) -> Result<(), DecodeError> {
    if logits.len() != mask.len() {
        return Err(DecodeError::LengthMismatch {
            logits: logits.len(),
            mask: mask.len(),
        });
    }
    if mask.count_allowed() == 0 {
        return Err(DecodeError::EmptyMask);
    }
    for (i, z) in logits.iter_mut().enumerate() {
        if !mask.is_allowed(TokenId(i as u32)) {
            *z = f32::NEG_INFINITY;
        }
    }
    Ok(())
}

/// Per-span matching statistics, kept for work-bound checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    /// `|S_0| .. |S_K|`, with `|S_0|` the snapshot length.
    pub candidate_sizes: Vec<usize>,
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallSpan {
    pub tokens: Vec<TokenId>,
    /// Half-open positions of the span tokens within the generated stream
    /// (delimiters excluded).
    pub generation_interval: (usize, usize),
    /// Start positions where the span occurs in its snapshot context.
    pub context_start_positions: Vec<usize>,
    /// Context length when the span was opened.
    pub snapshot_len: usize,
    pub char_interval: Option<CharInterval>,
    pub truncated: bool,
    pub stats: MatchStats,
}

#[derive(Debug, Clone)]
pub struct GenerationState {
    cfg: DecoderConfig,
    context: SearchableContext,
    prompt_len: usize,
    prompt_offsets: Option<Vec<CharInterval>>,
    session: Option<MatchSession>,
    span_open_at: usize,
    spans: Vec<RecallSpan>,
    generated: Vec<TokenId>,
    n_start: usize,
    n_end: usize,
}

impl GenerationState {
    pub fn new(prompt: Vec<TokenId>, cfg: DecoderConfig) -> Result<Self, DecodeError> {
        Self::with_offsets(prompt, None, cfg)
    }

    /// `prompt_offsets` maps each prompt token to its characters in the
    /// prompt text, which lets closed spans report a character interval.
    pub fn with_offsets(
        prompt: Vec<TokenId>,
        prompt_offsets: Option<Vec<CharInterval>>,
        cfg: DecoderConfig,
    ) -> Result<Self, DecodeError> {
        cfg.validate()?;
        let prompt_len = prompt.len();
        let context =
            SearchableContext::build_with_vocab(prompt, prompt_offsets.clone(), cfg.vocab_size)?;
        Ok(GenerationState {
            cfg,
            context,
            prompt_len,
            prompt_offsets,
            session: None,
            span_open_at: 0,
            spans: Vec::new(),
            generated: Vec::new(),
            n_start: 0,
            n_end: 0,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        if self.session.is_some() {
            Mode::Inside
        } else {
            Mode::Outside
        }
    }

    pub fn context(&self) -> &SearchableContext {
        &self.context
    }

    pub fn session(&self) -> Option<&MatchSession> {
        self.session.as_ref()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn generated_count(&self) -> usize {
        self.generated.len()
    }

    /// Emitted `(r_start, r_end)` counts.
    pub fn delimiter_counts(&self) -> (usize, usize) {
        (self.n_start, self.n_end)
    }

    pub fn closed_spans(&self) -> &[RecallSpan] {
        &self.spans
    }

    /// Tokens that may be sampled next.
    pub fn next_token_mask(&mut self) -> Result<TokenMask, DecodeError> {
        let vocab = self.cfg.vocab_size;
        match &mut self.session {
            None => {
                let mut mask = TokenMask::all(vocab);
                mask.block(self.cfg.r_end_id);
                Ok(mask)
            }
            Some(session) => {
                let mut mask = TokenMask::none(vocab);
                for t in session.allowed_next(&self.context)? {
                    mask.allow(t);
                }
                mask.block(self.cfg.r_start_id);
                mask.allow(self.cfg.r_end_id);
                Ok(mask)
            }
        }
    }

    /// Whether `token` would be accepted by [`GenerationState::observe_token`].
    pub fn is_allowed(&mut self, token: TokenId) -> Result<bool, DecodeError> {
        if token.index() >= self.cfg.vocab_size {
            return Ok(false);
        }
        match &mut self.session {
            None => Ok(token != self.cfg.r_end_id),
            Some(_) if token == self.cfg.r_end_id => Ok(true),
            Some(_) if token == self.cfg.r_start_id => Ok(false),
            Some(session) => Ok(session.allows(&self.context, token)?),
        }
    }

    /// Feeds one sampled token through the state machine. On error the state
    /// is left unchanged.
    pub fn observe_token(&mut self, token: TokenId) -> Result<(), DecodeError> {
        let mode = self.mode();
        let reject = || DecodeError::InvalidContinuation { token, mode };
        if token.index() >= self.cfg.vocab_size {
            return Err(reject());
        }
        match mode {
            Mode::Outside if token == self.cfg.r_end_id => return Err(reject()),
            Mode::Outside if token == self.cfg.r_start_id => {
                self.session = Some(self.context.begin_match());
                self.span_open_at = self.generated.len() + 1;
                self.n_start += 1;
            }
            Mode::Outside => {
                self.context.append(&[token])?;
            }
            Mode::Inside if token == self.cfg.r_end_id => {
                let session = self.session.take().expect("inside implies a session");
                let span = self.make_span(&session, false);
                self.n_end += 1;
                let mut folded = Vec::with_capacity(span.tokens.len() + 2);
                if self.cfg.include_delimiters_in_context {
                    folded.push(self.cfg.r_start_id);
                }
                if self.cfg.include_prior_spans_in_context {
                    folded.extend_from_slice(&span.tokens);
                }
                if self.cfg.include_delimiters_in_context {
                    folded.push(self.cfg.r_end_id);
                }
                self.context.append(&folded)?;
                self.spans.push(span);
            }
            Mode::Inside if token == self.cfg.r_start_id => return Err(reject()),
            Mode::Inside => {
                let session = self.session.as_mut().expect("inside implies a session");
                match session.advance(&self.context, token) {
                    Ok(()) => {}
                    Err(IndexError::InvalidContinuation { .. }) => return Err(reject()),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        self.generated.push(token);
        Ok(())
    }

    /// Closed spans in emission order, plus the open span (flagged
    /// truncated) when generation stopped inside one.
    pub fn extract_spans(&self) -> Vec<RecallSpan> {
        let mut out = self.spans.clone();
        if let Some(session) = &self.session {
            out.push(self.make_span(session, true));
        }
        out
    }

    fn make_span(&self, session: &MatchSession, truncated: bool) -> RecallSpan {
        let positions = session.candidates();
        let len = session.k();
        let char_interval = positions.first().and_then(|&p| self.prompt_char_span(p, len));
        RecallSpan {
            tokens: session.prefix().to_vec(),
            generation_interval: (self.span_open_at, self.span_open_at + len),
            context_start_positions: positions,
            snapshot_len: session.snapshot_len(),
            char_interval,
            truncated,
            stats: MatchStats {
                candidate_sizes: session.candidate_sizes().to_vec(),
                visits: session.visits(),
            },
        }
    }

    fn prompt_char_span(&self, start: usize, len: usize) -> Option<CharInterval> {
        let table = self.prompt_offsets.as_ref()?;
        if start + len > self.prompt_len {
            return None;
        }
        if len == 0 {
            return table.get(start).map(|iv| CharInterval::new(iv.start, iv.start));
        }
        let first = table[start];
        let last = table[start + len - 1];
        Some(CharInterval::new(first.start, last.end.max(first.start)))
    }
}
