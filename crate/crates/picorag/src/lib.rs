//! PICO-structured query rewriting and retrieval-augmented generation for
//! evidence-based medicine question answering.
//!
//! The pipeline takes a colloquial medical question, classifies it into a
//! clinical discipline, expands it into professional language, extracts a
//! PICO frame (Population / Intervention / Comparison / Outcome), retrieves
//! evidence chunks from an embedded guideline index, generates a grounded
//! answer, and judges the answer with two LLM-judge protocols. Every stage
//! can be ablated independently, and all model access goes through pluggable
//! backends (scripted mocks, replay transcripts, HTTP providers) with a
//! content-addressed response cache for reproducible batch runs.

pub mod backend;
pub mod classify;
pub mod cli;
pub mod config;
pub mod evaluate;
pub mod generate;
pub mod index;
pub mod pipeline;
pub mod report;
pub mod rewrite;
pub mod template;
pub mod types;

pub use types::{
    AblationFlags, Aggregates, Discipline, EvidenceChunk, ExpandedQuery, GeneratedAnswer,
    JudgeMethod, MatchedElement, PicoFrame, PicoVariant, QueryRecord, RetrievalHit,
    RetrievalMode, RunConfig, RunReport, Stage, UserQuery, Verdict, VerdictOutcome,
};
