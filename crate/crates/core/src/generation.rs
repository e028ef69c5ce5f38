//! Few-shot prompt assembly and candidate sampling.
//!
//! The prompt template is bit-exact and versioned; the same problem/solution
//! blocks are reused by concept training and scoring so the model sees one
//! consistent rendering everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, SamplingConfig, TokenSequence};
use crate::corpus::DemonstrationPair;
use crate::selection::SelectionResult;

/// Recorded in every run manifest; bump when the template text changes.
pub const TEMPLATE_VERSION: &str = "v1";

/// `### Problem:\n{prompt}\n### Solution:\n` — the block that precedes a
/// solution, and the suffix every assembled prompt ends with.
pub fn problem_block(prompt_text: &str) -> String {
    format!("### Problem:\n{prompt_text}\n### Solution:\n")
}

/// `{code}\n\n` — a solution body followed by the block separator.
pub fn solution_block(code: &str) -> String {
    format!("{code}\n\n")
}

/// One full demonstration block.
pub fn demo_block(pair: &DemonstrationPair) -> String {
    format!(
        "{}{}",
        problem_block(&pair.prompt_text),
        solution_block(&pair.golden_code)
    )
}

/// Reserved tag characters for pretraining prefixes; none occur in the
/// template or the built-in synthetic task content.
const TAG_CHARS: &[char] = &['@', '$', '%', '&', '~', '^', '|', '`'];

/// Length of a pretraining tag prefix; matches the usual concept-token
/// count so prefixed positions line up with concept-prefixed sequences.
const TAG_LEN: usize = 10;

/// Base-model pretraining texts for a demonstration pool: each block plain,
/// plus a variant prefixed with a family tag.
///
/// The tagged variants teach the base model that tokens sitting before a
/// problem block carry content-predictive signal — the structure concept
/// tokens later exploit. Tags are assigned per family prefix in pool order
/// (wrapping if there are more families than tag characters).
pub fn pretraining_texts(pool: &[DemonstrationPair]) -> Vec<String> {
    let mut families: Vec<&str> = Vec::new();
    let mut texts = Vec::with_capacity(pool.len() * 2);
    for pair in pool {
        let family = crate::corpus::family_of(&pair.task_id).unwrap_or("task");
        let index = match families.iter().position(|f| *f == family) {
            Some(i) => i,
            None => {
                families.push(family);
                families.len() - 1
            }
        };
        let tag: String = std::iter::repeat(TAG_CHARS[index % TAG_CHARS.len()])
            .take(TAG_LEN)
            .collect();
        let block = demo_block(pair);
        texts.push(block.clone());
        texts.push(format!("{tag}{block}"));
    }
    texts
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("demo {0:?} not found in the pool")]
    MissingDemo(String),
    #[error(
        "prompt for query {query:?} needs {token_count} tokens but only {available} fit \
         (budget {budget} minus {max_new_tokens} for generation)"
    )]
    PromptOverflow {
        query: String,
        token_count: usize,
        available: usize,
        budget: usize,
        max_new_tokens: usize,
    },
    #[error("n must be >= 1")]
    NZero,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A rendered few-shot prompt, token-counted against the backend budget.
#[derive(Debug, Clone)]
pub struct PromptAssembly {
    pub rendered_text: String,
    pub demo_ids: Vec<String>,
    pub query_task_id: String,
    pub token_count: usize,
}

/// One sampled candidate for a query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSample {
    #[serde(rename = "task")]
    pub query_task_id: String,
    #[serde(rename = "sample")]
    pub sample_index: usize,
    pub raw_text: String,
    pub extracted_code: String,
    pub sampling_seed: u64,
}

/// Render the few-shot prompt for a query.
///
/// Demonstrations are emitted in the selection's prompt order (lowest rank
/// first, best demonstration adjacent to the query). The assembly fails
/// with an overflow signal when the prompt would not leave room for
/// `max_new_tokens`; the orchestrator reacts by dropping the lowest-ranked
/// demonstration and retrying.
pub fn assemble_few_shot_prompt(
    backend: &dyn ModelBackend,
    selection: &SelectionResult,
    query: &DemonstrationPair,
    pool: &[DemonstrationPair],
    max_new_tokens: usize,
) -> Result<PromptAssembly, GenerationError> {
    let demo_ids = selection.prompt_order();
    assemble_prompt_for_ids(backend, &demo_ids, query, pool, max_new_tokens)
}

/// Template rendering for an explicit demo id order; the overflow-retry
/// loop uses this directly.
pub fn assemble_prompt_for_ids(
    backend: &dyn ModelBackend,
    demo_ids: &[String],
    query: &DemonstrationPair,
    pool: &[DemonstrationPair],
    max_new_tokens: usize,
) -> Result<PromptAssembly, GenerationError> {
    let mut rendered_text = String::new();
    for id in demo_ids {
        let demo = pool
            .iter()
            .find(|p| &p.task_id == id)
            .ok_or_else(|| GenerationError::MissingDemo(id.clone()))?;
        rendered_text.push_str(&demo_block(demo));
    }
    rendered_text.push_str(&problem_block(&query.prompt_text));

    let budget = backend.context_budget();
    let available = budget.saturating_sub(max_new_tokens);
    let token_count = match backend.tokenize(&rendered_text) {
        Ok(seq) => seq.len(),
        // A prompt too long even for the raw context window is still an
        // overflow signal, not a hard failure.
        Err(BackendError::ContextOverflow { length, .. }) => length,
        Err(other) => return Err(other.into()),
    };
    if token_count > available {
        return Err(GenerationError::PromptOverflow {
            query: query.task_id.clone(),
            token_count,
            available,
            budget,
            max_new_tokens,
        });
    }

    Ok(PromptAssembly {
        rendered_text,
        demo_ids: demo_ids.to_vec(),
        query_task_id: query.task_id.clone(),
        token_count,
    })
}

/// Sample `n` candidates from the assembled prompt. Sample `i` uses seed
/// `base_seed + i`, so samples are independent of generation order.
pub fn generate_samples(
    backend: &dyn ModelBackend,
    prompt: &PromptAssembly,
    n: usize,
    cfg: &SamplingConfig,
    base_seed: u64,
) -> Result<Vec<GenerationSample>, GenerationError> {
    if n == 0 {
        return Err(GenerationError::NZero);
    }
    let prefix: TokenSequence = backend.tokenize(&prompt.rendered_text)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed.wrapping_add(i as u64);
        let continuation = backend.sample_continuation(&prefix, cfg, seed)?;
        let raw_text = backend.detokenize(&continuation.token_ids)?;
        let extracted_code = extract_code(&raw_text, &cfg.stop_sequences);
        samples.push(GenerationSample {
            query_task_id: prompt.query_task_id.clone(),
            sample_index: i,
            raw_text,
            extracted_code,
            sampling_seed: seed,
        });
    }
    Ok(samples)
}

/// Text up to the earliest stop-marker occurrence (exclusive), trailing
/// whitespace trimmed; the whole text trimmed when no marker occurs.
pub fn extract_code(raw_text: &str, stop_markers: &[String]) -> String {
    let cut = stop_markers
        .iter()
        .filter(|m| !m.is_empty())
        .filter_map(|m| raw_text.find(m.as_str()))
        .min()
        .unwrap_or(raw_text.len());
    raw_text[..cut].trim_end().to_string()
}
