//! Seeded generators for synthetic long-context tasks.
//!
//! Every generator is a pure function of its [`TaskSpec`]: the same spec
//! (seed included) always yields a byte-identical [`TaskInstance`]. Gold
//! intervals are character offsets into `prompt`, half-open, and slicing the
//! prompt at them reproduces `metadata.gold_evidence`.

mod aggregation;
mod kv;
mod niah;
mod prompt;
mod words;

pub use kv::{render_math_problem, MathFamily, MathProblem};
pub use prompt::{assemble_prompt, template_count, AssembledPrompt};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::CharInterval;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskGenError {
    #[error("target length {target} is too small for {category} (needs about {minimum} tokens)")]
    TooSmall {
        category: TaskCategory,
        target: usize,
        minimum: usize,
    },
    #[error("cannot reach target length {target}: {reason}")]
    CannotFit { target: usize, reason: String },
    #[error("unknown instruction template {id} for {category} ({available} available)")]
    UnknownTemplate {
        category: TaskCategory,
        id: usize,
        available: usize,
    },
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    KvRetrieval,
    ReasoningRetrieval,
    MultiNiah,
    MajorityVote,
    TopNVote,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::KvRetrieval,
        TaskCategory::ReasoningRetrieval,
        TaskCategory::MultiNiah,
        TaskCategory::MajorityVote,
        TaskCategory::TopNVote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::KvRetrieval => "kv_retrieval",
            TaskCategory::ReasoningRetrieval => "reasoning_retrieval",
            TaskCategory::MultiNiah => "multi_niah",
            TaskCategory::MajorityVote => "majority_vote",
            TaskCategory::TopNVote => "top_n_vote",
        }
    }
}

impl std::fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "kv" | "kv_retrieval" | "retrieval" => Ok(TaskCategory::KvRetrieval),
            "reasoning" | "reasoning_retrieval" | "math_retrieval" => Ok(TaskCategory::ReasoningRetrieval),
            "niah" | "multi_niah" => Ok(TaskCategory::MultiNiah),
            "majority" | "majority_vote" => Ok(TaskCategory::MajorityVote),
            "top_n" | "top_n_vote" => Ok(TaskCategory::TopNVote),
            other => Err(format!(
                "unknown category {other:?} (expected kv, reasoning_retrieval, multi_niah, majority_vote or top_n_vote)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreFormat {
    Csv,
    Json,
    Lines,
}

impl StoreFormat {
    pub const ALL: [StoreFormat; 3] = [StoreFormat::Csv, StoreFormat::Json, StoreFormat::Lines];
}

impl std::str::FromStr for StoreFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(StoreFormat::Csv),
            "json" => Ok(StoreFormat::Json),
            "lines" | "list" => Ok(StoreFormat::Lines),
            other => Err(format!("unknown store format {other:?} (expected csv, json or lines)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPosition {
    Before,
    After,
    Both,
}

impl QueryPosition {
    pub const ALL: [QueryPosition; 3] = [QueryPosition::Before, QueryPosition::After, QueryPosition::Both];
}

impl std::str::FromStr for QueryPosition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "before" | "start" => Ok(QueryPosition::Before),
            "after" | "end" => Ok(QueryPosition::After),
            "both" => Ok(QueryPosition::Both),
            other => Err(format!("unknown query position {other:?} (expected before, after or both)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedleValueType {
    Number,
    Word,
    Uuid,
    Alnum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Names,
    Places,
    Letters,
    Numbers,
}

/// Category-specific knobs. Fields irrelevant to a category are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskExtras {
    /// Multi-NIAH: keys whose values must be retrieved.
    pub target_keys: usize,
    /// Multi-NIAH: needles with other keys mixed into the haystack.
    pub distractor_needles: usize,
    pub values_per_key: usize,
    pub value_type: NeedleValueType,
    pub candidate_count: usize,
    pub vote_margin: usize,
    /// Top-N vote: size of the winning set.
    pub top_n: usize,
    pub candidate_kind: CandidateKind,
    /// Reasoning retrieval; `None` picks a family from the seed.
    pub math_family: Option<MathFamily>,
}

impl Default for TaskExtras {
    fn default() -> Self {
        TaskExtras {
            target_keys: 2,
            distractor_needles: 4,
            values_per_key: 1,
            value_type: NeedleValueType::Number,
            candidate_count: 6,
            vote_margin: 3,
            top_n: 2,
            candidate_kind: CandidateKind::Names,
            math_family: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub category: TaskCategory,
    /// Approximate prompt size in tokens under the configured counter.
    pub target_length: usize,
    pub store_format: StoreFormat,
    pub query_position: QueryPosition,
    pub seed: u64,
    /// Instruction template; `None` picks one from the seed.
    #[serde(default)]
    pub template: Option<usize>,
    #[serde(default)]
    pub extras: TaskExtras,
}

impl TaskSpec {
    pub fn new(category: TaskCategory, target_length: usize, seed: u64) -> Self {
        TaskSpec {
            category,
            target_length,
            store_format: StoreFormat::Lines,
            query_position: QueryPosition::After,
            seed,
            template: None,
            extras: TaskExtras::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMetadata {
    pub spec: TaskSpec,
    pub template_id: usize,
    pub distractor_count: usize,
    /// Query key (KV), solved key (reasoning), or comma-joined target keys.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    /// Exact text at each gold interval, in the same order.
    pub gold_evidence: Vec<String>,
    /// Where the context body sits inside the prompt.
    pub body_interval: CharInterval,
    /// Prompt size under the counter used at generation time.
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub category: TaskCategory,
    pub prompt: String,
    pub gold_answers: Vec<String>,
    pub gold_intervals: Vec<CharInterval>,
    pub metadata: TaskMetadata,
}

impl TaskInstance {
    /// The prompt text at a gold interval.
    pub fn slice(&self, iv: CharInterval) -> String {
        self.prompt.chars().skip(iv.start).take(iv.len()).collect()
    }
}

/// Counts tokens in generated text.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

impl TokenCounter for CharHeuristic {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

impl<F: Fn(&str) -> usize> TokenCounter for F {
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

/// Accepted deviation from `target_length`.
pub const SIZE_TOLERANCE: f64 = 0.15;

pub fn generate(spec: &TaskSpec) -> Result<TaskInstance, TaskGenError> {
    generate_with(spec, &CharHeuristic)
}

pub fn generate_with(spec: &TaskSpec, counter: &dyn TokenCounter) -> Result<TaskInstance, TaskGenError> {
    match spec.category {
        TaskCategory::KvRetrieval => kv::gen_kv_retrieval(spec, counter),
        TaskCategory::ReasoningRetrieval => kv::gen_reasoning_retrieval(spec, counter),
        TaskCategory::MultiNiah => niah::gen_multi_niah(spec, counter),
        TaskCategory::MajorityVote | TaskCategory::TopNVote => aggregation::gen_aggregation(spec, counter),
    }
}

/// Generates every spec on a pool of scoped threads; output order matches
/// input order.
pub fn generate_batch(specs: &[TaskSpec]) -> Vec<Result<TaskInstance, TaskGenError>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len().max(1));
    let chunk = specs.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(generate).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator thread panicked"))
            .collect()
    })
}

pub use aggregation::gen_aggregation;
pub use kv::{gen_kv_retrieval, gen_reasoning_retrieval};
pub use niah::gen_multi_niah;

pub(crate) fn task_id(spec: &TaskSpec) -> String {
    format!("{}-{}-{:016x}", spec.category, spec.target_length, spec.seed)
}

/// Independent random streams derived from one seed.
pub(crate) fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub(crate) fn pick_template(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<usize, TaskGenError> {
    let available = template_count(spec.category);
    match spec.template {
        Some(id) if id < available => Ok(id),
        Some(id) => Err(TaskGenError::UnknownTemplate {
            category: spec.category,
            id,
            available,
        }),
        None => Ok(rng.gen_range(0..available)),
    }
}

/// A candidate prompt built from `n` body items.
pub(crate) struct Built {
    pub prompt: AssembledPrompt,
    pub gold_answers: Vec<String>,
    /// Gold intervals relative to the body.
    pub body_gold: Vec<CharInterval>,
    pub distractors: usize,
}

/// Finds the item count whose prompt best fits `target` tokens.
///
/// `build(n)` must be prefix-stable in `n` (more items only ever add text)
/// so the token count is monotone and a binary search applies. `grow`
/// reports the largest `n` currently buildable; it is called with a
/// requested size and may return less when the item space runs out.
pub(crate) fn fit_length<F, G>(
    spec: &TaskSpec,
    counter: &dyn TokenCounter,
    min_items: usize,
    initial_guess: usize,
    mut grow: G,
    mut build: F,
) -> Result<(Built, usize), TaskGenError>
where
    F: FnMut(usize) -> Result<Built, TaskGenError>,
    G: FnMut(usize) -> usize,
{
    let target = spec.target_length;
    let measure = |b: &Built| counter.count(&b.prompt.text);
    let upper = (target as f64 * (1.0 + SIZE_TOLERANCE)).floor() as usize;
    let lower = (target as f64 * (1.0 - SIZE_TOLERANCE)).ceil() as usize;

    let smallest = build(min_items)?;
    let smallest_len = measure(&smallest);
    if smallest_len > upper {
        return Err(TaskGenError::TooSmall {
            category: spec.category,
            target,
            minimum: smallest_len,
        });
    }

    let mut hi = grow(initial_guess.max(min_items + 1));
    loop {
        let b = build(hi)?;
        if measure(&b) >= target {
            break;
        }
        let want = hi.saturating_mul(2);
        let got = grow(want);
        if got <= hi {
            if measure(&b) >= lower {
                let t = measure(&b);
                return Ok((b, t));
            }
            return Err(TaskGenError::CannotFit {
                target,
                reason: format!("ran out of distinct items at {hi}"),
            });
        }
        hi = got;
    }

    // largest n in [lo, hi] with count <= target
    let mut lo = min_items;
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if measure(&build(mid)?) <= target {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let best = build(lo)?;
    let best_len = measure(&best);
    if best_len >= lower {
        return Ok((best, best_len));
    }
    let next = build(lo + 1)?;
    let next_len = measure(&next);
    if next_len <= upper {
        return Ok((next, next_len));
    }
    Err(TaskGenError::CannotFit {
        target,
        reason: format!("item granularity too coarse ({best_len} vs {next_len} tokens)"),
    })
}

pub(crate) fn finish(spec: &TaskSpec, template_id: usize, key: Option<String>, built: Built, tokens: usize) -> TaskInstance {
    let offset = built.prompt.body.start;
    let gold_intervals: Vec<CharInterval> = built.body_gold.iter().map(|iv| iv.shifted(offset)).collect();
    let chars: Vec<char> = built.prompt.text.chars().collect();
    let gold_evidence = gold_intervals
        .iter()
        .map(|iv| chars[iv.start..iv.end].iter().collect())
        .collect();
    TaskInstance {
        id: task_id(spec),
        category: spec.category,
        prompt: built.prompt.text,
        gold_answers: built.gold_answers,
        gold_intervals,
        metadata: TaskMetadata {
            spec: spec.clone(),
            template_id,
            distractor_count: built.distractors,
            key,
            gold_evidence,
            body_interval: built.prompt.body,
            prompt_tokens: tokens,
        },
    }
}

/// Tracks character offsets while appending ASCII or Unicode text.
#[derive(Debug, Default)]
pub(crate) struct TextBuilder {
    text: String,
    chars: usize,
}

impl TextBuilder {
    pub fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    /// Appends `s` and returns its character interval.
    pub fn push_marked(&mut self, s: &str) -> CharInterval {
        let start = self.chars;
        self.push(s);
        CharInterval::new(start, self.chars)
    }

    pub fn finish(self) -> String {
        self.text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_heuristic_rounds_up() {
        assert_eq!(CharHeuristic.count(""), 0);
        assert_eq!(CharHeuristic.count("abcd"), 1);
        assert_eq!(CharHeuristic.count("abcde"), 2);
    }

    #[test]
    fn closures_are_counters() {
        let words = |s: &str| s.split_whitespace().count();
        let spec = TaskSpec::new(TaskCategory::KvRetrieval, 600, 3);
        let inst = generate_with(&spec, &words).unwrap();
        let n = words(&inst.prompt);
        assert!((n as f64 - 600.0).abs() <= 0.15 * 600.0, "{n}");
    }

    #[test]
    fn batch_matches_sequential() {
        let specs: Vec<TaskSpec> = (0..12)
            .map(|i| TaskSpec::new(TaskCategory::ALL[i % 5], 800, i as u64))
            .collect();
        let batch = generate_batch(&specs);
        for (spec, got) in specs.iter().zip(batch) {
            assert_eq!(got.unwrap(), generate(spec).unwrap());
        }
    }

    #[test]
    fn parse_enums() {
        assert_eq!("kv".parse::<TaskCategory>().unwrap(), TaskCategory::KvRetrieval);
        assert_eq!("json".parse::<StoreFormat>().unwrap(), StoreFormat::Json);
        assert_eq!("both".parse::<QueryPosition>().unwrap(), QueryPosition::Both);
        assert!("xml".parse::<StoreFormat>().is_err());
    }
}
