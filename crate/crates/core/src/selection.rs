//! Demonstration selection strategies: latent concept alignment, semantic
//! edit-distance similarity, and seeded random.
//!
//! All strategies exclude the query from its own candidate pool (by
//! task_id) and break score ties by ascending pool index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DemonstrationPair;
use crate::metrics::normalized_edit_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Latent,
    Semantic,
    Random,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Latent => "latent",
            Strategy::Semantic => "semantic",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latent" => Ok(Strategy::Latent),
            "semantic" => Ok(Strategy::Semantic),
            "random" => Ok(Strategy::Random),
            other => Err(SelectionError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Per-demo input to [`select_latent`]: the demo's id and its concept score,
/// or `None` when the demo could not be scored (sentinel).
#[derive(Debug, Clone)]
pub struct DemoScore {
    pub demo_task_id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedDemo {
    #[serde(rename = "demo")]
    pub demo_task_id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedDemo {
    #[serde(rename = "demo")]
    pub demo_task_id: String,
    pub reason: String,
}

/// Ordered top-k demonstrations for one query under one strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    #[serde(rename = "query")]
    pub query_task_id: String,
    pub strategy: Strategy,
    pub k: usize,
    /// Rank order: best first (score descending; draw order for random).
    pub selected: Vec<SelectedDemo>,
    pub excluded: Vec<ExcludedDemo>,
}

impl SelectionResult {
    /// Demo ids in prompt-emission order: lowest-ranked first, so the
    /// highest-scoring demonstration sits adjacent to the query block.
    pub fn prompt_order(&self) -> Vec<String> {
        self.selected
            .iter()
            .rev()
            .map(|s| s.demo_task_id.clone())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("k must be >= 1")]
    KZero,
    #[error("no eligible demonstrations for query {0:?}")]
    EmptyEligiblePool(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

/// Rank pool demos by their latent concept score, descending, and take the
/// top k. Sentinel-scored demos are excluded with a reason; ties break by
/// ascending pool index.
pub fn select_latent(
    scores: &[DemoScore],
    query: &DemonstrationPair,
    k: usize,
) -> Result<SelectionResult, SelectionError> {
    if k == 0 {
        return Err(SelectionError::KZero);
    }
    let mut excluded = Vec::new();
    let mut eligible: Vec<(usize, &DemoScore, f64)> = Vec::new();
    for (idx, ds) in scores.iter().enumerate() {
        if ds.demo_task_id == query.task_id {
            excluded.push(ExcludedDemo {
                demo_task_id: ds.demo_task_id.clone(),
                reason: "query".into(),
            });
            continue;
        }
        match ds.score {
            Some(score) => eligible.push((idx, ds, score)),
            None => excluded.push(ExcludedDemo {
                demo_task_id: ds.demo_task_id.clone(),
                reason: "unscoreable".into(),
            }),
        }
    }
    if eligible.is_empty() {
        return Err(SelectionError::EmptyEligiblePool(query.task_id.clone()));
    }
    eligible.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let selected = eligible
        .iter()
        .take(k)
        .map(|(_, ds, score)| SelectedDemo {
            demo_task_id: ds.demo_task_id.clone(),
            score: Some(*score),
        })
        .collect();
    Ok(SelectionResult {
        query_task_id: query.task_id.clone(),
        strategy: Strategy::Latent,
        k,
        selected,
        excluded,
    })
}

/// Rank pool demos by normalized edit similarity between the query prompt
/// and each demo prompt, descending.
pub fn select_semantic(
    pool: &[DemonstrationPair],
    query: &DemonstrationPair,
    k: usize,
) -> Result<SelectionResult, SelectionError> {
    if k == 0 {
        return Err(SelectionError::KZero);
    }
    let mut excluded = Vec::new();
    let mut eligible: Vec<(usize, &DemonstrationPair, f64)> = Vec::new();
    for (idx, demo) in pool.iter().enumerate() {
        if demo.task_id == query.task_id {
            excluded.push(ExcludedDemo {
                demo_task_id: demo.task_id.clone(),
                reason: "query".into(),
            });
            continue;
        }
        let sim = normalized_edit_similarity(&query.prompt_text, &demo.prompt_text);
        eligible.push((idx, demo, sim));
    }
    if eligible.is_empty() {
        return Err(SelectionError::EmptyEligiblePool(query.task_id.clone()));
    }
    eligible.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let selected = eligible
        .iter()
        .take(k)
        .map(|(_, demo, sim)| SelectedDemo {
            demo_task_id: demo.task_id.clone(),
            score: Some(*sim),
        })
        .collect();
    Ok(SelectionResult {
        query_task_id: query.task_id.clone(),
        strategy: Strategy::Semantic,
        k,
        selected,
        excluded,
    })
}

/// Uniform sample of k demos without replacement; order is draw order,
/// deterministic given the seed.
pub fn select_random(
    pool: &[DemonstrationPair],
    query: &DemonstrationPair,
    k: usize,
    seed: u64,
) -> Result<SelectionResult, SelectionError> {
    if k == 0 {
        return Err(SelectionError::KZero);
    }
    let mut excluded = Vec::new();
    let mut eligible: Vec<&DemonstrationPair> = Vec::new();
    for demo in pool {
        if demo.task_id == query.task_id {
            excluded.push(ExcludedDemo {
                demo_task_id: demo.task_id.clone(),
                reason: "query".into(),
            });
        } else {
            eligible.push(demo);
        }
    }
    if eligible.is_empty() {
        return Err(SelectionError::EmptyEligiblePool(query.task_id.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..eligible.len()).collect();
    let take = k.min(eligible.len());
    let mut selected = Vec::with_capacity(take);
    for slot in 0..take {
        let pick = rng.random_range(slot..indices.len());
        indices.swap(slot, pick);
        selected.push(SelectedDemo {
            demo_task_id: eligible[indices[slot]].task_id.clone(),
            score: None,
        });
    }
    Ok(SelectionResult {
        query_task_id: query.task_id.clone(),
        strategy: Strategy::Random,
        k,
        selected,
        excluded,
    })
}
