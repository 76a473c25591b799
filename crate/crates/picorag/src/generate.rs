//! Final answer generation from the expanded query plus retrieved evidence.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, ChatRequest, Registry};
use crate::template::{Template, TemplateError};
use crate::types::{ExpandedQuery, GeneratedAnswer, RetrievalHit};

const NO_EVIDENCE_NOTICE: &str =
    "(no evidence retrieved; answer from general medical knowledge and say so)";

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Renders numbered evidence blocks `[n] doc#chunk: text` in hit order.
/// Evidence texts go in verbatim up to `budget` characters; when over
/// budget the lowest-scored hits are dropped first. Pure function; returns
/// the prompt and how many hits were dropped.
pub fn render_generation_prompt(
    expanded_text: &str,
    hits: &[RetrievalHit],
    language: &str,
    template: &Template,
    budget: usize,
) -> Result<(String, usize), TemplateError> {
    let mut keep = hits.len();
    let block_chars = |h: &RetrievalHit, n: usize| -> usize {
        format!("[{n}] {}#{}: {}", h.doc_id, h.chunk_id, h.text).chars().count() + 1
    };
    // hits arrive score-ordered, so dropping from the tail drops the
    // lowest-scored first
    while keep > 0 {
        let total: usize = hits[..keep]
            .iter()
            .enumerate()
            .map(|(i, h)| block_chars(h, i + 1))
            .sum();
        if total <= budget {
            break;
        }
        keep -= 1;
    }
    let dropped = hits.len() - keep;
    let evidence = if keep == 0 {
        NO_EVIDENCE_NOTICE.to_string()
    } else {
        hits[..keep]
            .iter()
            .enumerate()
            .map(|(i, h)| format!("[{}] {}#{}: {}", i + 1, h.doc_id, h.chunk_id, h.text))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let prompt = template.render(&[
        ("expanded", expanded_text),
        ("evidence", evidence.as_str()),
        ("language", language),
    ])?;
    Ok((prompt, dropped))
}

/// SHA-256 of the exact rendered prompt, hex-encoded.
pub fn prompt_fingerprint(prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Generates the answer. `evidence_refs` records every hit passed in
/// (the retrieval result that fed generation); hits dropped by the budget
/// are reported via the returned drop count.
pub fn generate(
    expanded: &ExpandedQuery,
    hits: &[RetrievalHit],
    registry: &Registry,
    backend_id: &str,
    language: &str,
    template: &Template,
    budget: usize,
) -> Result<(GeneratedAnswer, usize), GenerateError> {
    let (prompt, dropped) =
        render_generation_prompt(&expanded.text, hits, language, template, budget)?;
    let fingerprint = prompt_fingerprint(&prompt);
    let text = registry.chat(backend_id, &ChatRequest::new(prompt)?)?;
    Ok((
        GeneratedAnswer {
            query_id: expanded.query_id.clone(),
            text,
            evidence_refs: hits.iter().map(RetrievalHit::chunk_ref).collect(),
            prompt_fingerprint: fingerprint,
        },
        dropped,
    ))
}
