//! Vote tallying: majority and top-N.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::words::{FIRST_NAMES, PLACES};
use super::{
    assemble_prompt, finish, fit_length, pick_template, stream, Built, CandidateKind, StoreFormat, TaskCategory,
    TaskGenError, TaskInstance, TaskSpec, TextBuilder, TokenCounter,
};

const MAX_BASE: usize = 2_000_000;

fn candidates(kind: CandidateKind, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>, TaskGenError> {
    let pool: Vec<String> = match kind {
        CandidateKind::Names => FIRST_NAMES.iter().map(|s| s.to_string()).collect(),
        CandidateKind::Places => PLACES.iter().map(|s| s.to_string()).collect(),
        CandidateKind::Letters => (b'A'..=b'Z').map(|b| (b as char).to_string()).collect(),
        CandidateKind::Numbers => {
            let mut seen = HashSet::new();
            while seen.len() < count.min(900) {
                seen.insert(rng.gen_range(100..1000u32));
            }
            let mut v: Vec<u32> = seen.into_iter().collect();
            v.sort_unstable();
            v.into_iter().map(|n| n.to_string()).collect()
        }
    };
    if count > pool.len() {
        return Err(TaskGenError::InvalidSpec(format!(
            "{count} candidates requested but only {} available for {kind:?}",
            pool.len()
        )));
    }
    let mut picked: Vec<String> = pool.choose_multiple(rng, count).cloned().collect();
    picked.shuffle(rng);
    Ok(picked)
}

/// Vote counts at base level `r`. The first `winners` candidates get
/// at least `r + margin` (the first exactly that), everyone else at most `r`
/// and one loser exactly `r`, so the gap is exactly `margin`.
fn tallies(r: usize, margin: usize, winners: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let spread = (r / 4).max(1);
    let mut counts = Vec::with_capacity(n);
    for i in 0..winners {
        let bonus = if i == 0 { 0 } else { rng.gen_range(0..=spread) };
        counts.push(r + margin + bonus);
    }
    for i in winners..n {
        if i == winners {
            counts.push(r);
        } else {
            counts.push(r - rng.gen_range(0..=spread.min(r)));
        }
    }
    counts
}

fn render_votes(format: StoreFormat, ballots: &[&str]) -> String {
    let mut out = TextBuilder::default();
    match format {
        StoreFormat::Lines => {
            for (i, c) in ballots.iter().enumerate() {
                if i > 0 {
                    out.push("\n");
                }
                out.push(&format!("Voter {}: {c}", i + 1));
            }
        }
        StoreFormat::Csv => {
            out.push("voter,vote");
            for (i, c) in ballots.iter().enumerate() {
                out.push(&format!("\n{},{c}", i + 1));
            }
        }
        StoreFormat::Json => {
            out.push("[\n");
            for (i, c) in ballots.iter().enumerate() {
                if i > 0 {
                    out.push(",\n");
                }
                out.push(&format!("  {{\"voter\": {}, \"vote\": \"{c}\"}}", i + 1));
            }
            out.push("\n]");
        }
    }
    out.finish()
}

pub fn gen_aggregation(spec: &TaskSpec, counter: &dyn TokenCounter) -> Result<TaskInstance, TaskGenError> {
    let x = &spec.extras;
    let winners = match spec.category {
        TaskCategory::MajorityVote => 1,
        TaskCategory::TopNVote => x.top_n,
        other => {
            return Err(TaskGenError::InvalidSpec(format!(
                "expected majority_vote or top_n_vote, got {other}"
            )))
        }
    };
    if x.vote_margin == 0 {
        return Err(TaskGenError::InvalidSpec("vote margin 0 leaves the winner ambiguous".into()));
    }
    if winners == 0 || winners >= x.candidate_count {
        return Err(TaskGenError::InvalidSpec(format!(
            "winning set of {winners} is infeasible with {} candidates",
            x.candidate_count
        )));
    }

    let mut layout = stream(spec.seed, 0);
    let template = pick_template(spec, &mut layout)?;
    let names = candidates(x.candidate_kind, x.candidate_count, &mut stream(spec.seed, 1))?;
    let shuffle_seed: u64 = layout.gen();

    let query = if winners == 1 {
        format!("Which candidate received the most votes? Candidates: {}.", names.join(", "))
    } else {
        format!(
            "Which {winners} candidates received the most votes? Candidates: {}.",
            names.join(", ")
        )
    };

    let build = |r: usize| -> Result<Built, TaskGenError> {
        let counts = tallies(r, x.vote_margin, winners, names.len(), shuffle_seed);
        let mut ballots: Vec<&str> = Vec::with_capacity(counts.iter().sum());
        for (name, &c) in names.iter().zip(&counts) {
            ballots.extend(std::iter::repeat_n(name.as_str(), c));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(r as u64));
        ballots.shuffle(&mut rng);
        let body = render_votes(spec.store_format, &ballots);
        let prompt = assemble_prompt(spec.category, &body, template, &query, spec.query_position)?;
        Ok(Built {
            prompt,
            gold_answers: names[..winners].to_vec(),
            body_gold: Vec::new(),
            distractors: ballots.len() - counts[..winners].iter().sum::<usize>(),
        })
    };
    let grow = |n: usize| n.min(MAX_BASE);
    let guess = spec.target_length / (4 * names.len()) + 1;
    let (built, tokens) = fit_length(spec, counter, 1, guess, grow, build)?;
    Ok(finish(spec, template, None, built, tokens))
}
