//! Demonstration selection and evaluation pipeline for few-shot code
//! generation.
//!
//! The crate trains task-specific concept-token embeddings against a frozen
//! language model, scores candidate demonstrations by how strongly they
//! align with a task concept, assembles few-shot prompts from the top-k
//! demonstrations, and evaluates generated code with pass@k, correctness@k,
//! and similarity@k against sandboxed unit tests.

pub mod backend;
pub mod corpus;
pub mod generation;
pub mod metrics;
pub mod pipeline;
pub mod sandbox;
pub mod scoring;
pub mod selection;
pub mod training;
