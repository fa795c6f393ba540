//! Key-value retrieval and its reasoning variant, where the key is the
//! solution of a small math problem.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::words::alnum;
use super::{
    assemble_prompt, finish, fit_length, pick_template, stream, Built, StoreFormat, TaskCategory, TaskGenError,
    TaskInstance, TaskSpec, TextBuilder, TokenCounter,
};
use crate::context::CharInterval;

pub const VALUE_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MathFamily {
    /// `(p - qx) - r(x + s) + t(x + u) + (vx + w) = x + K`
    Linear,
    /// `x = \frac{a}{b} + c \cdot d`
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathProblem {
    pub family: MathFamily,
    /// The question as shown to the model.
    pub text: String,
    pub solution: i64,
}

/// Builds a problem whose unique integer solution is `key`.
pub fn render_math_problem<R: Rng>(family: MathFamily, key: i64, rng: &mut R) -> MathProblem {
    let text = match family {
        MathFamily::Arithmetic => {
            let b: i64 = rng.gen_range(1..=9);
            let c: i64 = rng.gen_range(2..=99);
            let d: i64 = rng.gen_range(1..=99);
            let a = b * (key - c * d);
            format!("Compute $x$ from $$x = \\frac{{{a}}}{{{b}}} + {c} \\cdot {d}$$")
        }
        MathFamily::Linear => {
            let mut g = || rng.gen_range(1..=9i64);
            let (p, q, r, s, t, u, mut v, w) = (g(), g(), g(), g(), g(), g(), g(), g());
            if -q - r + t + v == 1 {
                v += 1;
            }
            let coef = -q - r + t + v;
            let constant = p - r * s + t * u + w;
            // coef * x + constant = x + k at x = key
            let k = (coef - 1) * key + constant;
            let rhs = if k >= 0 { format!("x + {k}") } else { format!("x - {}", -k) };
            format!("Find the $x$ that satisfies $$({p} - {q}x) - {r}(x + {s}) + {t}(x + {u}) + ({v}x + {w}) = {rhs}$$")
        }
    };
    MathProblem {
        family,
        text,
        solution: key,
    }
}

/// Smallest digit count (at least 4) whose signed key space keeps the store
/// at most half full, so rejection sampling of distinct keys stays cheap.
fn key_digits(target_tokens: usize) -> u32 {
    // every record costs at least 4 tokens under the default counter
    let max_entries = (target_tokens / 3 + 16) as u64;
    let mut d = 4;
    while 2 * 10u64.pow(d) - 1 < 2 * max_entries {
        d += 1;
    }
    d
}

struct Store {
    keys: Vec<i64>,
    values: Vec<String>,
    used_keys: HashSet<i64>,
    used_values: HashSet<String>,
    bound: i64,
    rng: ChaCha8Rng,
}

impl Store {
    fn new(bound: i64, rng: ChaCha8Rng) -> Self {
        Store {
            keys: Vec::new(),
            values: Vec::new(),
            used_keys: HashSet::new(),
            used_values: HashSet::new(),
            bound,
            rng,
        }
    }

    fn capacity(&self) -> usize {
        // half of the 2 * bound + 1 keys, rounded down
        self.bound as usize
    }

    fn fresh_key(&mut self) -> i64 {
        loop {
            let k = self.rng.gen_range(-self.bound..=self.bound);
            if self.used_keys.insert(k) {
                return k;
            }
        }
    }

    fn fresh_value(&mut self) -> String {
        loop {
            let v = alnum(&mut self.rng, VALUE_LEN);
            if self.used_values.insert(v.clone()) {
                return v;
            }
        }
    }

    fn reserve(&mut self, key: i64, value: &str) {
        self.used_keys.insert(key);
        self.used_values.insert(value.to_string());
    }

    /// Extends the distractor list to `n` entries where possible.
    fn grow(&mut self, n: usize) -> usize {
        let n = n.min(self.capacity());
        while self.keys.len() < n {
            let k = self.fresh_key();
            let v = self.fresh_value();
            self.keys.push(k);
            self.values.push(v);
        }
        self.keys.len()
    }
}

/// Renders a store and returns the interval of the record at `gold`.
pub(crate) fn render_store(format: StoreFormat, entries: &[(i64, &str)], gold: usize) -> (String, CharInterval) {
    let mut out = TextBuilder::default();
    let mut gold_iv = CharInterval::new(0, 0);
    match format {
        StoreFormat::Lines => {
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push("\n\n");
                }
                let iv = out.push_marked(&format!("Key {k}:\n{v}"));
                if i == gold {
                    gold_iv = iv;
                }
            }
        }
        StoreFormat::Json => {
            out.push("{\n");
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(",\n");
                }
                out.push("  ");
                let iv = out.push_marked(&format!("\"{k}\": \"{v}\""));
                if i == gold {
                    gold_iv = iv;
                }
            }
            out.push("\n}");
        }
        StoreFormat::Csv => {
            out.push("key,value");
            for (i, (k, v)) in entries.iter().enumerate() {
                out.push("\n");
                let iv = out.push_marked(&format!("{k},{v}"));
                if i == gold {
                    gold_iv = iv;
                }
            }
        }
    }
    (out.finish(), gold_iv)
}

struct Query {
    text: String,
    key: i64,
    value: String,
}

fn gen_store_task(
    spec: &TaskSpec,
    counter: &dyn TokenCounter,
    expected: TaskCategory,
    make_query: impl FnOnce(&mut Store, &mut ChaCha8Rng) -> Query,
) -> Result<TaskInstance, TaskGenError> {
    if spec.category != expected {
        return Err(TaskGenError::InvalidSpec(format!(
            "expected category {expected}, got {}",
            spec.category
        )));
    }
    let mut layout = stream(spec.seed, 0);
    let template = pick_template(spec, &mut layout)?;
    let gold_frac: f64 = layout.gen();

    let bound = 10i64.pow(key_digits(spec.target_length)) - 1;
    let mut store = Store::new(bound, stream(spec.seed, 1));
    let mut query_rng = stream(spec.seed, 2);
    let q = make_query(&mut store, &mut query_rng);
    store.reserve(q.key, &q.value);

    let guess = spec.target_length / 6 + 1;
    let store = std::cell::RefCell::new(store);
    let build = |n: usize| -> Result<Built, TaskGenError> {
        let s = store.borrow();
        let distractors = n - 1;
        let gold_at = ((gold_frac * n as f64) as usize).min(distractors);
        let mut entries: Vec<(i64, &str)> = Vec::with_capacity(n);
        entries.extend(s.keys[..gold_at].iter().copied().zip(s.values[..gold_at].iter().map(String::as_str)));
        entries.push((q.key, q.value.as_str()));
        entries.extend(
            s.keys[gold_at..distractors]
                .iter()
                .copied()
                .zip(s.values[gold_at..distractors].iter().map(String::as_str)),
        );
        let (body, gold_iv) = render_store(spec.store_format, &entries, gold_at);
        let prompt = assemble_prompt(spec.category, &body, template, &q.text, spec.query_position)?;
        Ok(Built {
            prompt,
            gold_answers: vec![q.value.clone()],
            body_gold: vec![gold_iv],
            distractors,
        })
    };
    let grow = |n: usize| store.borrow_mut().grow(n.saturating_sub(1)) + 1;
    let (built, tokens) = fit_length(spec, counter, 1, guess, grow, build)?;
    Ok(finish(spec, template, Some(q.key.to_string()), built, tokens))
}

pub fn gen_kv_retrieval(spec: &TaskSpec, counter: &dyn TokenCounter) -> Result<TaskInstance, TaskGenError> {
    gen_store_task(spec, counter, TaskCategory::KvRetrieval, |store, _| {
        let key = store.fresh_key();
        let value = store.fresh_value();
        Query {
            text: format!("Key: {key}"),
            key,
            value,
        }
    })
}

pub fn gen_reasoning_retrieval(spec: &TaskSpec, counter: &dyn TokenCounter) -> Result<TaskInstance, TaskGenError> {
    gen_store_task(spec, counter, TaskCategory::ReasoningRetrieval, |store, rng| {
        let key = store.fresh_key();
        let value = store.fresh_value();
        let family = spec.extras.math_family.unwrap_or(if rng.gen_bool(0.5) {
            MathFamily::Linear
        } else {
            MathFamily::Arithmetic
        });
        let problem = render_math_problem(family, key, rng);
        Query {
            text: format!("Key equation: {}", problem.text),
            key,
            value,
        }
    })
}
