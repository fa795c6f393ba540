//! Multiple needles hidden in seeded filler prose.

use std::collections::HashSet;

use rand::Rng;

use super::words::{adjective_noun, alnum, filler_sentence, uuid_like};
use super::{
    assemble_prompt, finish, fit_length, pick_template, stream, Built, NeedleValueType, TaskCategory, TaskGenError,
    TaskInstance, TaskSpec, TextBuilder, TokenCounter,
};

const SENTENCES_PER_PARAGRAPH: usize = 8;
const MAX_FILLER: usize = 5_000_000;

struct Needle {
    key_index: usize,
    value: String,
    target: bool,
    /// Fractional insertion point in [0, 1).
    at: f64,
}

fn type_word(t: NeedleValueType) -> &'static str {
    match t {
        NeedleValueType::Number => "number",
        NeedleValueType::Word => "word",
        NeedleValueType::Uuid => "uuid",
        NeedleValueType::Alnum => "code",
    }
}

fn needle_sentence(t: NeedleValueType, key: &str, value: &str) -> String {
    format!("One of the special magic {}s for {key} is: {value}.", type_word(t))
}

pub fn gen_multi_niah(spec: &TaskSpec, counter: &dyn TokenCounter) -> Result<TaskInstance, TaskGenError> {
    if spec.category != TaskCategory::MultiNiah {
        return Err(TaskGenError::InvalidSpec(format!(
            "expected category multi_niah, got {}",
            spec.category
        )));
    }
    let x = &spec.extras;
    if x.target_keys == 0 {
        return Err(TaskGenError::InvalidSpec("at least one target needle is required".into()));
    }
    if x.values_per_key == 0 {
        return Err(TaskGenError::InvalidSpec("values_per_key must be at least 1".into()));
    }

    let mut layout = stream(spec.seed, 0);
    let template = pick_template(spec, &mut layout)?;

    let mut nrng = stream(spec.seed, 1);
    let n_keys = x.target_keys + x.distractor_needles;
    let mut seen = HashSet::new();
    let mut keys = Vec::with_capacity(n_keys);
    let mut attempts = 0;
    while keys.len() < n_keys {
        let k = adjective_noun(&mut nrng);
        if seen.insert(k.clone()) {
            keys.push(k);
        }
        attempts += 1;
        if attempts > 100_000 {
            return Err(TaskGenError::InvalidSpec(format!("cannot draw {n_keys} distinct needle keys")));
        }
    }
    let mut used_values = HashSet::new();
    let mut fresh_value = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let v = match x.value_type {
            NeedleValueType::Number => rng.gen_range(1_000_000..10_000_000u32).to_string(),
            NeedleValueType::Word => adjective_noun(rng),
            NeedleValueType::Uuid => uuid_like(rng),
            NeedleValueType::Alnum => alnum(rng, 10),
        };
        if used_values.insert(v.clone()) {
            break v;
        }
    };
    let mut needles = Vec::new();
    for (i, _) in keys.iter().enumerate() {
        let target = i < x.target_keys;
        let copies = if target { x.values_per_key } else { 1 };
        for _ in 0..copies {
            let value = fresh_value(&mut nrng);
            needles.push(Needle {
                key_index: i,
                value,
                target,
                at: layout.gen(),
            });
        }
    }
    let sentences: Vec<String> = needles
        .iter()
        .map(|n| needle_sentence(x.value_type, &keys[n.key_index], &n.value))
        .collect();

    let targets: Vec<&str> = keys[..x.target_keys].iter().map(String::as_str).collect();
    let query = format!(
        "What are all the special magic {}s for {} mentioned in the provided text?",
        type_word(x.value_type),
        targets.join(", ")
    );

    let filler_rng = std::cell::RefCell::new(stream(spec.seed, 3));
    let filler: std::cell::RefCell<Vec<String>> = Default::default();
    let grow = |n: usize| {
        let mut f = filler.borrow_mut();
        let n = n.min(MAX_FILLER);
        let mut rng = filler_rng.borrow_mut();
        while f.len() < n {
            f.push(filler_sentence(&mut *rng));
        }
        f.len()
    };

    let build = |n: usize| -> Result<Built, TaskGenError> {
        let f = filler.borrow();
        // needle i goes before filler sentence slot[i]; ties keep needle order
        let mut order: Vec<(usize, usize)> = needles
            .iter()
            .enumerate()
            .map(|(i, nd)| (((nd.at * (n + 1) as f64) as usize).min(n), i))
            .collect();
        order.sort();
        let mut body = TextBuilder::default();
        let mut intervals = vec![None; needles.len()];
        let mut next = order.iter().peekable();
        let mut written = 0usize;
        let mut put = |body: &mut TextBuilder, s: &str| -> crate::context::CharInterval {
            if written > 0 {
                body.push(if written.is_multiple_of(SENTENCES_PER_PARAGRAPH) { "\n\n" } else { " " });
            }
            written += 1;
            body.push_marked(s)
        };
        for slot in 0..=n {
            while let Some(&&(s, i)) = next.peek() {
                if s != slot {
                    break;
                }
                intervals[i] = Some(put(&mut body, &sentences[i]));
                next.next();
            }
            if slot < n {
                put(&mut body, &f[slot]);
            }
        }
        let prompt = assemble_prompt(spec.category, &body.finish(), template, &query, spec.query_position)?;
        let mut gold_answers = Vec::new();
        let mut body_gold = Vec::new();
        for (i, nd) in needles.iter().enumerate() {
            if nd.target {
                gold_answers.push(nd.value.clone());
                body_gold.push(intervals[i].expect("every needle placed"));
            }
        }
        Ok(Built {
            prompt,
            gold_answers,
            body_gold,
            distractors: x.distractor_needles,
        })
    };

    let guess = spec.target_length / 12 + 1;
    let (built, tokens) = fit_length(spec, counter, 0, guess, grow, build)?;
    Ok(finish(spec, template, Some(targets.join(", ")), built, tokens))
}
