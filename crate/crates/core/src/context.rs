//! Searchable context and incremental prefix matching.
//!
//! A [`SearchableContext`] is an append-only token sequence with a posting
//! list per token id. A [`MatchSession`] tracks the surviving start positions
//! of a growing prefix and reads the valid continuation set off them.
//!
//! Sessions are bound to a snapshot of the context: the context length at the
//! moment the session was opened. Tokens appended afterwards are never
//! matchable within that session.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vocabulary index of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Convenience conversion for literals in tests and callers holding raw ids.
pub fn token_ids(raw: &[u32]) -> Vec<TokenId> {
    raw.iter().copied().map(TokenId).collect()
}

/// Half-open character interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharInterval {
    pub start: usize,
    pub end: usize,
}

impl CharInterval {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end, "interval start {start} > end {end}");
        CharInterval { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn shifted(self, by: usize) -> Self {
        CharInterval::new(self.start + by, self.end + by)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IndexError {
    #[error("char_offsets has {got} entries but the context has {expected} tokens")]
    OffsetLengthMismatch { expected: usize, got: usize },
    #[error("char_offsets entry {index} is malformed: {reason}")]
    MalformedOffsets { index: usize, reason: &'static str },
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: TokenId, vocab_size: usize },
    #[error("token {token} does not continue any occurrence of the current prefix")]
    InvalidContinuation { token: TokenId },
    #[error("session was opened against a different context")]
    ContextMismatch,
}

static NEXT_CONTEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Token → strictly increasing positions.
#[derive(Debug, Clone, Default)]
pub struct OccurrenceIndex {
    postings: HashMap<TokenId, Vec<u32>>,
}

impl OccurrenceIndex {
    pub fn positions(&self, token: TokenId) -> &[u32] {
        self.postings.get(&token).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Positions of `token` that fall strictly before `limit`.
    pub fn positions_before(&self, token: TokenId, limit: usize) -> &[u32] {
        let all = self.positions(token);
        let cut = all.partition_point(|&p| (p as usize) < limit);
        &all[..cut]
    }

    pub fn distinct_tokens(&self) -> usize {
        self.postings.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &[u32])> {
        self.postings.iter().map(|(t, p)| (*t, p.as_slice()))
    }

    fn push(&mut self, token: TokenId, pos: u32) {
        self.postings.entry(token).or_default().push(pos);
    }
}

/// The token sequence recall spans are matched against.
#[derive(Debug, Clone)]
pub struct SearchableContext {
    id: u64,
    tokens: Vec<TokenId>,
    char_offsets: Option<Vec<CharInterval>>,
    index: OccurrenceIndex,
    vocab_size: Option<usize>,
}

impl SearchableContext {
    /// Builds a context and its occurrence index.
    ///
    /// `char_offsets`, when given, must hold one interval per token with
    /// non-decreasing starts.
    pub fn build(
        tokens: Vec<TokenId>,
        char_offsets: Option<Vec<CharInterval>>,
    ) -> Result<Self, IndexError> {
        if let Some(offsets) = &char_offsets {
            validate_offsets(offsets, tokens.len(), None)?;
        }
        let mut ctx = SearchableContext {
            id: NEXT_CONTEXT_ID.fetch_add(1, Ordering::Relaxed),
            tokens: Vec::with_capacity(tokens.len()),
            char_offsets,
            index: OccurrenceIndex::default(),
            vocab_size: None,
        };
        ctx.extend_index(tokens);
        Ok(ctx)
    }

    /// Like [`SearchableContext::build`] but rejects ids `>= vocab_size`.
    pub fn build_with_vocab(
        tokens: Vec<TokenId>,
        char_offsets: Option<Vec<CharInterval>>,
        vocab_size: usize,
    ) -> Result<Self, IndexError> {
        check_vocab(&tokens, vocab_size)?;
        let mut ctx = Self::build(tokens, char_offsets)?;
        ctx.vocab_size = Some(vocab_size);
        Ok(ctx)
    }

    pub fn empty() -> Self {
        Self::build(Vec::new(), None).expect("empty context is always valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn index(&self) -> &OccurrenceIndex {
        &self.index
    }

    pub fn char_offsets(&self) -> Option<&[CharInterval]> {
        self.char_offsets.as_deref()
    }

    /// Appends tokens. Existing positions never move, so sessions opened
    /// earlier keep matching against their snapshot prefix.
    ///
    /// If the context carries character offsets, appending without offsets
    /// drops the table (it would otherwise no longer cover every token).
    pub fn append(&mut self, new_tokens: &[TokenId]) -> Result<(), IndexError> {
        if let Some(v) = self.vocab_size {
            check_vocab(new_tokens, v)?;
        }
        if !new_tokens.is_empty() {
            self.char_offsets = None;
        }
        self.extend_index(new_tokens.iter().copied());
        Ok(())
    }

    /// Appends tokens together with their character intervals.
    pub fn append_with_offsets(
        &mut self,
        new_tokens: &[TokenId],
        offsets: &[CharInterval],
    ) -> Result<(), IndexError> {
        if offsets.len() != new_tokens.len() {
            return Err(IndexError::OffsetLengthMismatch {
                expected: new_tokens.len(),
                got: offsets.len(),
            });
        }
        if let Some(v) = self.vocab_size {
            check_vocab(new_tokens, v)?;
        }
        match &mut self.char_offsets {
            Some(table) => {
                let prev_start = table.last().map(|iv| iv.start);
                validate_offsets(offsets, new_tokens.len(), prev_start)?;
                table.extend_from_slice(offsets);
            }
            None if self.tokens.is_empty() => {
                validate_offsets(offsets, new_tokens.len(), None)?;
                self.char_offsets = Some(offsets.to_vec());
            }
            None => {}
        }
        self.extend_index(new_tokens.iter().copied());
        Ok(())
    }

    /// Opens a k = 0 session over the current contents.
    pub fn begin_match(&self) -> MatchSession {
        MatchSession {
            context_id: self.id,
            snapshot_len: self.tokens.len(),
            prefix: Vec::new(),
            candidates: Candidates::All,
            groups: None,
            initial_allowed: None,
            visits: 0,
            candidate_sizes: vec![self.tokens.len()],
        }
    }

    /// Character interval covering tokens `[start, start + len)`.
    pub fn char_span(&self, start: usize, len: usize) -> Option<CharInterval> {
        let table = self.char_offsets.as_ref()?;
        if len == 0 {
            let at = table.get(start).map(|iv| iv.start).or_else(|| table.last().map(|iv| iv.end))?;
            return Some(CharInterval::new(at, at));
        }
        let first = table.get(start)?;
        let last = table.get(start + len - 1)?;
        Some(CharInterval::new(first.start, last.end.max(first.start)))
    }

    fn extend_index<I: IntoIterator<Item = TokenId>>(&mut self, new_tokens: I) {
        for t in new_tokens {
            let pos = self.tokens.len() as u32;
            self.index.push(t, pos);
            self.tokens.push(t);
        }
    }
}

fn check_vocab(tokens: &[TokenId], vocab_size: usize) -> Result<(), IndexError> {
    match tokens.iter().find(|t| t.index() >= vocab_size) {
        Some(&token) => Err(IndexError::TokenOutOfVocab { token, vocab_size }),
        None => Ok(()),
    }
}

fn validate_offsets(
    offsets: &[CharInterval],
    expected: usize,
    mut prev_start: Option<usize>,
) -> Result<(), IndexError> {
    if offsets.len() != expected {
        return Err(IndexError::OffsetLengthMismatch {
            expected,
            got: offsets.len(),
        });
    }
    for (index, iv) in offsets.iter().enumerate() {
        if iv.start > iv.end {
            return Err(IndexError::MalformedOffsets {
                index,
                reason: "start after end",
            });
        }
        if prev_start.is_some_and(|p| iv.start < p) {
            return Err(IndexError::MalformedOffsets {
                index,
                reason: "start positions decrease",
            });
        }
        prev_start = Some(iv.start);
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Candidates {
    /// k = 0: every position of the snapshot.
    All,
    Positions(Vec<u32>),
}

/// Live state of one recall span: the recalled prefix and the start
/// positions where it still occurs.
#[derive(Debug, Clone)]
pub struct MatchSession {
    context_id: u64,
    snapshot_len: usize,
    prefix: Vec<TokenId>,
    candidates: Candidates,
    // candidates grouped by their next token; computed lazily once per k
    groups: Option<HashMap<TokenId, Vec<u32>>>,
    initial_allowed: Option<Vec<TokenId>>,
    visits: u64,
    candidate_sizes: Vec<usize>,
}

impl MatchSession {
    pub fn k(&self) -> usize {
        self.prefix.len()
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    /// Context length at the time the session was opened.
    pub fn snapshot_len(&self) -> usize {
        self.snapshot_len
    }

    pub fn candidate_count(&self) -> usize {
        match &self.candidates {
            Candidates::All => self.snapshot_len,
            Candidates::Positions(p) => p.len(),
        }
    }

    /// Surviving start positions in increasing order.
    pub fn candidates(&self) -> Vec<usize> {
        match &self.candidates {
            Candidates::All => (0..self.snapshot_len).collect(),
            Candidates::Positions(p) => p.iter().map(|&x| x as usize).collect(),
        }
    }

    /// Candidate positions inspected so far.
    pub fn visits(&self) -> u64 {
        self.visits
    }

    /// `|S_0|, |S_1|, …, |S_k|` with `|S_0|` the snapshot length.
    pub fn candidate_sizes(&self) -> &[usize] {
        &self.candidate_sizes
    }

    /// The valid continuation set for the current prefix, sorted ascending.
    /// Empty when every surviving occurrence ends at the snapshot boundary.
    pub fn allowed_next(&mut self, ctx: &SearchableContext) -> Result<Vec<TokenId>, IndexError> {
        self.check_context(ctx)?;
        match &self.candidates {
            Candidates::All => {
                if let Some(cached) = &self.initial_allowed {
                    return Ok(cached.clone());
                }
                let mut out: Vec<TokenId> = ctx
                    .index
                    .iter()
                    .filter(|(_, positions)| {
                        positions.first().is_some_and(|&p| (p as usize) < self.snapshot_len)
                    })
                    .map(|(token, _)| token)
                    .collect();
                // one posting list per distinct token, each at least one position
                self.visits += out.len() as u64;
                out.sort_unstable();
                self.initial_allowed = Some(out.clone());
                Ok(out)
            }
            Candidates::Positions(_) => {
                self.ensure_groups(ctx);
                let mut out: Vec<TokenId> =
                    self.groups.as_ref().expect("groups populated").keys().copied().collect();
                out.sort_unstable();
                Ok(out)
            }
        }
    }

    /// Whether `token` continues at least one surviving occurrence.
    pub fn allows(&mut self, ctx: &SearchableContext, token: TokenId) -> Result<bool, IndexError> {
        self.check_context(ctx)?;
        Ok(match &self.candidates {
            Candidates::All => !ctx.index.positions_before(token, self.snapshot_len).is_empty(),
            Candidates::Positions(_) => {
                self.ensure_groups(ctx);
                self.groups.as_ref().expect("groups populated").contains_key(&token)
            }
        })
    }

    /// Extends the prefix by `token`, keeping only the occurrences it
    /// continues. Fails without modifying the session when `token` is not in
    /// the valid continuation set.
    pub fn advance(&mut self, ctx: &SearchableContext, token: TokenId) -> Result<(), IndexError> {
        self.check_context(ctx)?;
        let next = match &self.candidates {
            Candidates::All => {
                let hits = ctx.index.positions_before(token, self.snapshot_len);
                if hits.is_empty() {
                    return Err(IndexError::InvalidContinuation { token });
                }
                hits.to_vec()
            }
            Candidates::Positions(_) => {
                self.ensure_groups(ctx);
                match self.groups.as_mut().expect("groups populated").remove(&token) {
                    Some(group) => group,
                    None => return Err(IndexError::InvalidContinuation { token }),
                }
            }
        };
        self.prefix.push(token);
        self.candidate_sizes.push(next.len());
        self.candidates = Candidates::Positions(next);
        self.groups = None;
        self.initial_allowed = None;
        Ok(())
    }

    fn ensure_groups(&mut self, ctx: &SearchableContext) {
        if self.groups.is_some() {
            return;
        }
        let Candidates::Positions(positions) = &self.candidates else {
            return;
        };
        let k = self.prefix.len();
        let mut groups: HashMap<TokenId, Vec<u32>> = HashMap::new();
        for &p in positions {
            self.visits += 1;
            let next = p as usize + k;
            if next < self.snapshot_len {
                groups.entry(ctx.tokens[next]).or_default().push(p);
            }
        }
        self.groups = Some(groups);
    }

    fn check_context(&self, ctx: &SearchableContext) -> Result<(), IndexError> {
        if ctx.id != self.context_id || ctx.len() < self.snapshot_len {
            return Err(IndexError::ContextMismatch);
        }
        Ok(())
    }
}

/// Valid continuation set computed by scanning every position of `tokens`.
///
/// This is the quadratic reference the incremental matcher is checked
/// against; it shares no code with [`MatchSession`].
pub fn naive_allowed(tokens: &[TokenId], prefix: &[TokenId]) -> BTreeSet<TokenId> {
    let k = prefix.len();
    let mut out = BTreeSet::new();
    if k >= tokens.len() {
        return out;
    }
    for i in 0..tokens.len() - k {
        if &tokens[i..i + k] == prefix {
            out.insert(tokens[i + k]);
        }
    }
    out
}
