//! Task-level answer scoring.
//!
//! Text normalization follows the usual extractive-QA convention: lowercase,
//! drop punctuation, drop the articles "a", "an" and "the", collapse runs of
//! whitespace.
//!
//! `net_recall` has no canonical published definition. Here it is the number
//! of gold items recovered minus the number of spurious predictions, floored
//! at zero and divided by the gold count.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("relevance judgements are empty")]
    EmptyRelevance,
    #[error("document id {0:?} appears more than once in the ranking")]
    DuplicatePrediction(String),
}

pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 if any normalized gold answer occurs inside the normalized prediction.
pub fn sub_em(prediction: &str, gold_answers: &[String]) -> Result<f64, MetricError> {
    if gold_answers.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let pred = normalize_answer(prediction);
    let hit = gold_answers
        .iter()
        .any(|g| pred.contains(normalize_answer(g).as_str()));
    Ok(if hit { 1.0 } else { 0.0 })
}

pub fn exact_match(prediction: &str, gold_answers: &[String]) -> Result<f64, MetricError> {
    if gold_answers.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let pred = normalize_answer(prediction);
    let hit = gold_answers.iter().any(|g| normalize_answer(g) == pred);
    Ok(if hit { 1.0 } else { 0.0 })
}

/// A predicted ranking with graded relevance judgements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub predicted: Vec<String>,
    pub relevance: HashMap<String, f64>,
}

/// NDCG truncated at rank 10 with gain `2^rel - 1` and `log2(rank + 1)`
/// discount. Zero when no document has positive relevance.
pub fn ndcg_at_10(ranking: &Ranking) -> Result<f64, MetricError> {
    const CUTOFF: usize = 10;
    if ranking.relevance.is_empty() {
        return Err(MetricError::EmptyRelevance);
    }
    let mut seen = HashSet::new();
    for id in &ranking.predicted {
        if !seen.insert(id.as_str()) {
            return Err(MetricError::DuplicatePrediction(id.clone()));
        }
    }
    let gain = |rel: f64| 2f64.powf(rel) - 1.0;
    let discount = |rank0: usize| ((rank0 + 2) as f64).log2();

    let dcg: f64 = ranking
        .predicted
        .iter()
        .take(CUTOFF)
        .enumerate()
        .map(|(i, id)| gain(ranking.relevance.get(id).copied().unwrap_or(0.0)) / discount(i))
        .sum();

    let mut ideal: Vec<f64> = ranking.relevance.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(CUTOFF)
        .enumerate()
        .map(|(i, &rel)| gain(rel) / discount(i))
        .sum();

    if idcg <= 0.0 {
        return Ok(0.0);
    }
    Ok((dcg / idcg).clamp(0.0, 1.0))
}

/// `max(0, matched_gold - spurious_predictions) / |gold|` under normalized
/// equality. Duplicates (after normalization) count once on both sides.
pub fn net_recall(predicted_items: &[String], gold_items: &[String]) -> Result<f64, MetricError> {
    if gold_items.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let gold: HashSet<String> = gold_items.iter().map(|g| normalize_answer(g)).collect();
    let predicted: HashSet<String> = predicted_items
        .iter()
        .map(|p| normalize_answer(p))
        .filter(|p| !p.is_empty())
        .collect();
    let matched = gold.intersection(&predicted).count();
    let spurious = predicted.len() - matched;
    Ok(matched.saturating_sub(spurious) as f64 / gold.len() as f64)
}

/// Which metric scores a task's final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMetric {
    SubEm,
    ExactMatch,
    Ndcg10,
    NetRecall,
}

impl std::str::FromStr for AnswerMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sub_em" | "subem" => Ok(AnswerMetric::SubEm),
            "exact_match" | "em" => Ok(AnswerMetric::ExactMatch),
            "ndcg10" | "ndcg@10" | "ndcg_10" => Ok(AnswerMetric::Ndcg10),
            "net_recall" => Ok(AnswerMetric::NetRecall),
            other => Err(format!("unknown answer metric {other:?}")),
        }
    }
}

/// Splits a free-text list answer ("a, b; c") into items.
pub fn split_items(answer: &str) -> Vec<String> {
    answer
        .split([',', ';', '\n', '>'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Scores a parsed answer against the task's gold answers. A missing answer
/// scores 0. For `Ndcg10` the gold answers are the relevant document ids
/// (relevance 1) and the answer is read as a ranked, comma-separated list.
pub fn score_answer(
    metric: AnswerMetric,
    answer: Option<&str>,
    gold: &[String],
) -> Result<f64, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let Some(answer) = answer else {
        return Ok(0.0);
    };
    match metric {
        AnswerMetric::SubEm => sub_em(answer, gold),
        AnswerMetric::ExactMatch => exact_match(answer, gold),
        AnswerMetric::NetRecall => net_recall(&split_items(answer), gold),
        AnswerMetric::Ndcg10 => {
            let mut predicted = Vec::new();
            let mut seen = HashSet::new();
            for item in split_items(answer) {
                if seen.insert(item.clone()) {
                    predicted.push(item);
                }
            }
            let relevance = gold.iter().map(|g| (g.clone(), 1.0)).collect();
            ndcg_at_10(&Ranking { predicted, relevance })
        }
    }
}
