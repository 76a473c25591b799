//! Discipline assignment: dataset label first, then an LLM prompt, then an
//! offline keyword fallback. Classification never blocks the pipeline; the
//! last resort is the "unclassified" sentinel.

use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, ChatRequest, Registry};
use crate::template::Template;
use crate::types::{Discipline, UserQuery};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("taxonomy line {line}: {message}")]
    BadTaxonomyLine { line: usize, message: String },
    #[error("taxonomy file {0}: {1}")]
    Io(String, std::io::Error),
}

/// One taxonomy entry: a discipline name with its fallback keywords.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TaxonomyEntry {
    pub name: String,
    pub keywords: Vec<String>,
}

/// Ordered discipline taxonomy. Order matters: keyword-count ties resolve
/// to the earliest entry.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Taxonomy {
    entries: Vec<TaxonomyEntry>,
}

impl Taxonomy {
    /// Parses the taxonomy file format: one entry per line,
    /// `name: keyword, keyword, ...`; `#` lines and blanks are skipped.
    pub fn parse(text: &str) -> Result<Self, ClassifyError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, keywords) = match line.split_once(':') {
                Some((n, k)) => (n.trim(), k),
                None => (line, ""),
            };
            if name.is_empty() {
                return Err(ClassifyError::BadTaxonomyLine {
                    line: i + 1,
                    message: "entry name is empty".to_string(),
                });
            }
            let keywords: Vec<String> = keywords
                .split(',')
                .map(str::trim)
                .filter(|k| !k.is_empty())
                .map(str::to_string)
                .collect();
            entries.push(TaxonomyEntry {
                name: name.to_string(),
                keywords,
            });
        }
        if entries.is_empty() {
            return Err(ClassifyError::EmptyTaxonomy);
        }
        Ok(Taxonomy { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ClassifyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClassifyError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// The default taxonomy shipped with the crate: 22 common clinical
    /// departments with bilingual keywords.
    pub fn default_taxonomy() -> Self {
        Self::parse(include_str!("../assets/taxonomy.txt")).expect("default taxonomy parses")
    }

    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Case-insensitive lookup returning the canonical entry name.
    pub fn find(&self, name: &str) -> Option<&str> {
        let needle = name.trim().to_lowercase();
        self.entries
            .iter()
            .find(|e| e.name.to_lowercase() == needle)
            .map(|e| e.name.as_str())
    }

    /// Rendered list for classification prompts.
    pub fn prompt_list(&self) -> String {
        self.names().collect::<Vec<_>>().join("\n")
    }
}

/// How a discipline was decided, recorded for auditability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifySource {
    DatasetLabel,
    Llm,
    KeywordFallback,
    Unclassified,
}

/// Classifies a query. Order: trusted dataset label, LLM response matched
/// against the taxonomy, keyword fallback, `unclassified`. Backend errors
/// and unmatched responses fall through instead of failing the query.
pub fn classify(
    query: &UserQuery,
    taxonomy: &Taxonomy,
    registry: Option<(&Registry, &str)>,
    template: &Template,
) -> Result<(Discipline, ClassifySource), ClassifyError> {
    if taxonomy.is_empty() {
        return Err(ClassifyError::EmptyTaxonomy);
    }
    if let Some(label) = &query.discipline_label {
        if let Some(name) = taxonomy.find(label) {
            return Ok((Discipline(name.to_string()), ClassifySource::DatasetLabel));
        }
    }
    if let Some((registry, backend_id)) = registry {
        if let Some(name) = llm_classify(&query.text, taxonomy, registry, backend_id, template) {
            return Ok((Discipline(name), ClassifySource::Llm));
        }
    }
    let fallback = keyword_classify(&query.text, taxonomy)?;
    let source = if fallback.is_unclassified() {
        ClassifySource::Unclassified
    } else {
        ClassifySource::KeywordFallback
    };
    Ok((fallback, source))
}

/// Prompts the LLM with the taxonomy and the query, then matches the
/// response: the first taxonomy entry that appears (case-insensitively) in
/// the response wins. `None` on error or no match.
fn llm_classify(
    text: &str,
    taxonomy: &Taxonomy,
    registry: &Registry,
    backend_id: &str,
    template: &Template,
) -> Option<String> {
    let prompt = template
        .render(&[("query", text), ("taxonomy", &taxonomy.prompt_list())])
        .ok()?;
    let req = ChatRequest::new(prompt).ok()?;
    let response = match registry.chat(backend_id, &req) {
        Ok(r) => r,
        Err(BackendError::UnknownBackend(_)) | Err(_) => return None,
    };
    let lowered = response.to_lowercase();
    taxonomy
        .names()
        .find(|name| lowered.contains(&name.to_lowercase()))
        .map(str::to_string)
}

/// Offline keyword classifier: the entry with the highest total keyword
/// occurrence count wins; ties break to taxonomy order; zero matches give
/// `unclassified`. Deterministic and independent of any backend.
pub fn keyword_classify(text: &str, taxonomy: &Taxonomy) -> Result<Discipline, ClassifyError> {
    if taxonomy.is_empty() {
        return Err(ClassifyError::EmptyTaxonomy);
    }
    let lowered = text.to_lowercase();
    let mut best: Option<(usize, &str)> = None;
    for entry in taxonomy.entries() {
        let count: usize = entry
            .keywords
            .iter()
            .map(|k| occurrences(&lowered, &k.to_lowercase()))
            .sum();
        if count > 0 && best.is_none_or(|(c, _)| count > c) {
            best = Some((count, &entry.name));
        }
    }
    Ok(best
        .map(|(_, name)| Discipline(name.to_string()))
        .unwrap_or_else(Discipline::unclassified))
}

fn occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut at = 0;
    while let Some(pos) = haystack[at..].find(needle) {
        count += 1;
        at += pos + needle.len();
    }
    count
}
