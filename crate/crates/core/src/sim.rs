//! Mock decoding episodes that drive [`GenerationState`] without a model.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::TokenId;
use crate::decoder::{DecodeError, DecoderConfig, GenerationState, Mode, RecallSpan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("max_steps must be positive")]
    NoSteps,
    #[error("probability {name} = {value} is outside [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("step {step}: scripted token {token} is not allowed")]
    ScriptRejected { step: usize, token: TokenId },
    #[error("step {step}: disallowed token {token} was accepted")]
    MaskUnsound { step: usize, token: TokenId },
    #[error("step {step}: {source}")]
    Decode { step: usize, source: DecodeError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockPolicy {
    SeededRandom {
        seed: u64,
        span_open_probability: f64,
        span_close_probability: f64,
    },
    Scripted {
        script: Vec<TokenId>,
    },
    /// Random policy that also tries one disallowed token before each step.
    Adversarial {
        seed: u64,
        span_open_probability: f64,
        span_close_probability: f64,
    },
}

impl MockPolicy {
    pub fn random(seed: u64) -> Self {
        MockPolicy::SeededRandom {
            seed,
            span_open_probability: 0.1,
            span_close_probability: 0.1,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if let MockPolicy::SeededRandom {
            span_open_probability: o,
            span_close_probability: c,
            ..
        }
        | MockPolicy::Adversarial {
            span_open_probability: o,
            span_close_probability: c,
            ..
        } = self
        {
            for (name, value) in [("span_open_probability", *o), ("span_close_probability", *c)] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(SimError::BadProbability { name, value });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mode: Mode,
    pub token: TokenId,
    /// Size of the allowed set the token was chosen from.
    pub allowed: usize,
    /// Disallowed token tried (and rejected) before this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<TokenId>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub generated: Vec<TokenId>,
    /// Closed spans plus the open one, if the episode stopped inside it.
    pub spans: Vec<RecallSpan>,
    pub trace: Vec<StepRecord>,
    pub state: GenerationState,
}

impl Episode {
    /// Tokens of the final searchable context. Every span's snapshot is a
    /// prefix of it, since the context only grows.
    pub fn context(&self) -> &[TokenId] {
        self.state.context().tokens()
    }
}

pub fn run_episode(
    prompt: Vec<TokenId>,
    policy: &MockPolicy,
    cfg: DecoderConfig,
    max_steps: usize,
) -> Result<Episode, SimError> {
    if max_steps == 0 {
        return Err(SimError::NoSteps);
    }
    policy.validate()?;
    let mut state = GenerationState::new(prompt, cfg.clone()).map_err(|source| SimError::Decode { step: 0, source })?;
    let mut trace = Vec::new();
    let mut rng = match policy {
        MockPolicy::SeededRandom { seed, .. } | MockPolicy::Adversarial { seed, .. } => ChaCha8Rng::seed_from_u64(*seed),
        MockPolicy::Scripted { .. } => ChaCha8Rng::seed_from_u64(0),
    };
    let (r_start, r_end) = (cfg.r_start_id, cfg.r_end_id);

    for step in 0..max_steps {
        let decode = |source| SimError::Decode { step, source };
        let mask = state.next_token_mask().map_err(decode)?;
        let allowed = mask.allowed_ids();
        let mode = state.mode();

        let mut rejected = None;
        if matches!(policy, MockPolicy::Adversarial { .. }) {
            let disallowed: Vec<u32> = (0..cfg.vocab_size as u32).filter(|&t| !mask.is_allowed(TokenId(t))).collect();
            if let Some(&bad) = disallowed.choose(&mut rng) {
                let bad = TokenId(bad);
                match state.observe_token(bad) {
                    Err(DecodeError::InvalidContinuation { .. }) => rejected = Some(bad),
                    Err(e) => return Err(decode(e)),
                    Ok(()) => return Err(SimError::MaskUnsound { step, token: bad }),
                }
            }
        }

        let token = match policy {
            MockPolicy::Scripted { script } => match script.get(step) {
                Some(&t) => t,
                None => break,
            },
            MockPolicy::SeededRandom {
                span_open_probability: open_p,
                span_close_probability: close_p,
                ..
            }
            | MockPolicy::Adversarial {
                span_open_probability: open_p,
                span_close_probability: close_p,
                ..
            } => {
                let (special, p) = match mode {
                    Mode::Outside => (r_start, *open_p),
                    Mode::Inside => (r_end, *close_p),
                };
                let ordinary: Vec<TokenId> = allowed.iter().copied().filter(|&t| t != special).collect();
                if ordinary.is_empty() || rng.gen_bool(p) {
                    special
                } else {
                    *ordinary.choose(&mut rng).expect("non-empty")
                }
            }
        };

        match state.observe_token(token) {
            Ok(()) => {}
            Err(DecodeError::InvalidContinuation { token, .. }) if matches!(policy, MockPolicy::Scripted { .. }) => {
                return Err(SimError::ScriptRejected { step, token })
            }
            Err(e) => return Err(decode(e)),
        }
        trace.push(StepRecord {
            step,
            mode,
            token,
            allowed: allowed.len(),
            rejected,
        });
    }

    Ok(Episode {
        generated: state.generated().to_vec(),
        spans: state.extract_spans(),
        trace,
        state,
    })
}

/// Independent check that `span` occurs verbatim in `context[..snapshot_len]`
/// at every recorded start position, and nowhere else.
pub fn span_is_faithful(span: &RecallSpan, context: &[TokenId]) -> bool {
    if span.snapshot_len > context.len() {
        return false;
    }
    let snap = &context[..span.snapshot_len];
    let n = span.tokens.len();
    let found: Vec<usize> = if n == 0 {
        (0..snap.len()).collect()
    } else if n > snap.len() {
        Vec::new()
    } else {
        (0..=snap.len() - n).filter(|&i| snap[i..i + n] == span.tokens[..]).collect()
    };
    (n == 0 || !found.is_empty()) && found == span.context_start_positions
}

pub fn write_trace<W: Write>(trace: &[StepRecord], mut w: W) -> std::io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// A random prompt over the ordinary tokens `0..vocab-2`.
pub fn random_prompt(len: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| TokenId(rng.gen_range(0..(vocab - 2) as u32))).collect()
}
