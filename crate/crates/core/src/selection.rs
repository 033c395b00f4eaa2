//! In-context example selection: top-k cosine similarity and greedy
//! maximal marginal relevance.
//!
//! Both selectors iterate candidates in ascending id order and only replace
//! the incumbent on a strictly better score, so ties always resolve to the
//! smaller id and results do not depend on insertion order.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingIndex, EmbeddingVector};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("no candidates left after exclusion")]
    EmptyCandidatePool,
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("k must be positive")]
    InvalidK,
    #[error("query vector is zero")]
    ZeroQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionMethod {
    TopKSimilarity,
    Mmr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Chosen examples in selection order. For MMR the score is the marginal
    /// relevance at the step the example was picked.
    pub chosen: Vec<ScoredId>,
    pub method: SelectionMethod,
    pub k: usize,
    pub lambda: Option<f64>,
    pub query_id: Option<String>,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<&str> {
        self.chosen.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn with_query_id(mut self, id: impl Into<String>) -> Self {
        self.query_id = Some(id.into());
        self
    }
}

struct Candidate<'a> {
    id: &'a str,
    vector: &'a EmbeddingVector,
    relevance: f64,
}

fn candidates<'a>(
    index: &'a EmbeddingIndex,
    query: &EmbeddingVector,
    exclude: &BTreeSet<String>,
) -> Result<Vec<Candidate<'a>>, SelectionError> {
    if query.dimension() != index.dimension() {
        return Err(SelectionError::DimensionMismatch {
            expected: index.dimension(),
            got: query.dimension(),
        });
    }
    let query = query.normalized().map_err(|_| SelectionError::ZeroQuery)?;
    let pool: Vec<Candidate<'a>> = index
        .iter()
        .filter(|(id, _)| !exclude.contains(*id))
        .map(|(id, vector)| Candidate { id, vector, relevance: unit_dot(&query, vector) })
        .collect();
    if pool.is_empty() {
        return Err(SelectionError::EmptyCandidatePool);
    }
    Ok(pool)
}

fn unit_dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// The `k` candidates most cosine-similar to `query`, descending; ties by
/// ascending id.
pub fn top_k_similar(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    k: usize,
    exclude: &BTreeSet<String>,
) -> Result<SelectionResult, SelectionError> {
    if k == 0 {
        return Err(SelectionError::InvalidK);
    }
    let mut pool = candidates(index, query, exclude)?;
    // pool is already in ascending id order; the sort is stable.
    pool.sort_by(|a, b| b.relevance.total_cmp(&a.relevance));
    let chosen = pool
        .into_iter()
        .take(k)
        .map(|c| ScoredId { id: c.id.to_string(), score: c.relevance })
        .collect();
    Ok(SelectionResult { chosen, method: SelectionMethod::TopKSimilarity, k, lambda: None, query_id: None })
}

/// Greedy MMR: repeatedly pick
/// `argmax_d λ·sim(d, q) − (1−λ)·max_{s∈S} sim(d, s)` with the redundancy
/// term taken as 0 while `S` is empty.
pub fn mmr_select(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    k: usize,
    lambda: f64,
    exclude: &BTreeSet<String>,
) -> Result<SelectionResult, SelectionError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SelectionError::InvalidLambda(lambda));
    }
    if k == 0 {
        return Err(SelectionError::InvalidK);
    }
    let pool = candidates(index, query, exclude)?;
    let target = k.min(pool.len());
    let mut taken = vec![false; pool.len()];
    // max similarity to anything selected so far; None while S is empty
    let mut redundancy: Vec<Option<f64>> = vec![None; pool.len()];
    let mut chosen = Vec::with_capacity(target);

    while chosen.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in pool.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score = lambda * c.relevance - (1.0 - lambda) * redundancy[i].unwrap_or(0.0);
            let better = match best {
                None => true,
                Some((_, b)) => score.total_cmp(&b) == Ordering::Greater,
            };
            if better {
                best = Some((i, score));
            }
        }
        let (pick, score) = best.expect("remaining candidates exist");
        taken[pick] = true;
        chosen.push(ScoredId { id: pool[pick].id.to_string(), score });
        for (i, c) in pool.iter().enumerate() {
            if !taken[i] {
                let sim = unit_dot(c.vector, pool[pick].vector);
                redundancy[i] = Some(redundancy[i].map_or(sim, |r| r.max(sim)));
            }
        }
    }
    Ok(SelectionResult { chosen, method: SelectionMethod::Mmr, k, lambda: Some(lambda), query_id: None })
}

impl From<EmbeddingError> for SelectionError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimensionMismatch { expected, got } => SelectionError::DimensionMismatch { expected, got },
            _ => SelectionError::ZeroQuery,
        }
    }
}
