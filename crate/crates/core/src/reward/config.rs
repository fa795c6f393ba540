//! Per-category reward configuration.
//!
//! The file format is TOML with one table per task category:
//!
//! ```toml
//! [composite]            # optional
//! w_format = 0.2
//! w_add = 0.4
//! w_mult = 0.4
//! epsilon = 0.01
//!
//! [category.kv_retrieval]
//! answer_metric = "sub_em"
//! mode = "gold_overlap"
//! tau = 0.9
//! n_free = 2
//! # top_k = 2, delta = 4.0, half_life = 4.0, min_span_chars = 5
//! ```
//!
//! A file only needs to list the categories it overrides; everything else
//! falls back to [`RewardTable::builtin`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CompositeRewardConfig, RecallMode, RetrievalRewardConfig, RewardError};
use crate::metrics::AnswerMetric;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing reward config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("category {category}: {source}")]
    Invalid {
        category: String,
        source: RewardError,
    },
    #[error("no reward configuration for category {0:?}")]
    UnknownCategory(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryConfig {
    pub answer_metric: AnswerMetric,
    #[serde(flatten)]
    pub retrieval: RetrievalRewardConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    #[serde(default)]
    pub composite: CompositeRewardConfig,
    #[serde(default, rename = "category")]
    pub categories: BTreeMap<String, CategoryConfig>,
}

fn row(metric: AnswerMetric, mode: RecallMode, tau: f64, n_free: usize, top_k: Option<usize>) -> CategoryConfig {
    CategoryConfig {
        answer_metric: metric,
        retrieval: RetrievalRewardConfig {
            tau,
            n_free,
            top_k,
            mode,
            ..RetrievalRewardConfig::default()
        },
    }
}

impl RewardTable {
    /// Reward settings for every known category. Categories whose recall
    /// reward does not use overlap carry `tau = 1` as an inert placeholder.
    pub fn builtin() -> Self {
        use AnswerMetric::*;
        use RecallMode::*;
        let rows = [
            ("multi_hop_qa", row(SubEm, GoldOverlap, 0.4, 4, None)),
            ("single_hop_qa", row(SubEm, GoldOverlap, 0.4, 2, Some(1))),
            ("kv_retrieval", row(SubEm, GoldOverlap, 0.9, 2, None)),
            ("multi_niah", row(NetRecall, GoldOverlap, 0.9, 6, None)),
            ("reasoning_retrieval", row(SubEm, GoldOverlap, 0.9, 2, None)),
            ("short_context_math", row(ExactMatch, AlwaysOne, 1.0, 2, None)),
            ("in_context_learning", row(ExactMatch, GoldOverlap, 0.95, 2, Some(2))),
            ("long_doc_qa", row(ExactMatch, BinaryPresence, 1.0, 4, None)),
            ("majority_vote", row(NetRecall, AlwaysOne, 1.0, 2, None)),
            ("top_n_vote", row(NetRecall, AlwaysOne, 1.0, 2, None)),
            ("reranking", row(Ndcg10, GoldOverlap, 0.7, 4, Some(2))),
        ];
        RewardTable {
            composite: CompositeRewardConfig::default(),
            categories: rows.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Parses a config file's contents and layers it over the built-in table.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let parsed: RewardTable = toml::from_str(text)?;
        let mut table = RewardTable::builtin();
        table.composite = parsed.composite;
        table.categories.extend(parsed.categories);
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.composite.validate().map_err(|source| ConfigError::Invalid {
            category: "composite".into(),
            source,
        })?;
        for (name, cfg) in &self.categories {
            cfg.retrieval.validate().map_err(|source| ConfigError::Invalid {
                category: name.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn get(&self, category: &str) -> Result<&CategoryConfig, ConfigError> {
        self.categories
            .get(category)
            .ok_or_else(|| ConfigError::UnknownCategory(category.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("reward table serializes")
    }
}
