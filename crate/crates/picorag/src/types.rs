//! Domain types shared by every pipeline stage.
//!
//! Everything here is immutable after construction, does no I/O, and makes
//! no model calls. Invariants are enforced at construction or checkable via
//! pure predicates ([`validate_frame`], [`Aggregates::recompute`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Sentinel discipline for queries no classifier could place.
pub const UNCLASSIFIED: &str = "unclassified";

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("query text is empty after trimming")]
    EmptyQueryText,
    #[error("query id is empty")]
    EmptyQueryId,
}

/// Unicode NFC, trim, collapse internal whitespace runs to single spaces.
///
/// Applied to all query-side text at construction so that hashes and cache
/// keys are stable across formatting differences.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    let mut in_ws = false;
    for ch in nfc.trim().chars() {
        if ch.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws && !out.is_empty() {
                out.push(' ');
            }
            in_ws = false;
            out.push(ch);
        }
    }
    out
}

/// A raw user question plus optional gold answer and discipline label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UserQuery {
    pub id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discipline_label: Option<String>,
    pub language: String,
}

impl UserQuery {
    /// Builds a validated, normalized query. Empty options are dropped.
    pub fn new(
        id: impl Into<String>,
        text: &str,
        gold_answer: Option<&str>,
        discipline_label: Option<&str>,
        language: Option<&str>,
    ) -> Result<Self, CoreError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(CoreError::EmptyQueryId);
        }
        let text = normalize_text(text);
        if text.is_empty() {
            return Err(CoreError::EmptyQueryText);
        }
        let norm_opt = |v: Option<&str>| {
            v.map(normalize_text)
                .filter(|s| !s.is_empty())
        };
        Ok(Self {
            id,
            text,
            gold_answer: norm_opt(gold_answer),
            discipline_label: norm_opt(discipline_label),
            language: language
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .unwrap_or("zh")
                .to_string(),
        })
    }
}

/// A discipline name drawn from the active taxonomy, or [`UNCLASSIFIED`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Hash)]
pub struct Discipline(pub String);

impl Discipline {
    pub fn unclassified() -> Self {
        Discipline(UNCLASSIFIED.to_string())
    }

    pub fn is_unclassified(&self) -> bool {
        self.0 == UNCLASSIFIED
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A query rewritten into professional, normalized form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExpandedQuery {
    pub query_id: String,
    pub text: String,
    pub discipline: Discipline,
    /// Characters stripped by the output-rule filter.
    pub filter_removed_chars: usize,
}

/// PICO variant selector: full PICO or the Comparison-free PIO form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "UPPERCASE")]
pub enum PicoVariant {
    Pico,
    Pio,
}

impl fmt::Display for PicoVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PicoVariant::Pico => "PICO",
            PicoVariant::Pio => "PIO",
        })
    }
}

/// Structured Population/Intervention/Comparison/Outcome fields.
///
/// Field values are "absent" or non-empty; empty strings are normalized to
/// absent at construction so retrieval-query building is unambiguous.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PicoFrame {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervention: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    pub variant: PicoVariant,
}

impl PicoFrame {
    /// Builds a frame, normalizing each field and dropping empty ones.
    pub fn new(
        population: Option<&str>,
        intervention: Option<&str>,
        comparison: Option<&str>,
        outcome: Option<&str>,
        variant: PicoVariant,
    ) -> Self {
        let norm = |v: Option<&str>| v.map(normalize_text).filter(|s| !s.is_empty());
        PicoFrame {
            population: norm(population),
            intervention: norm(intervention),
            comparison: norm(comparison),
            outcome: norm(outcome),
            variant,
        }
    }

    /// Present fields in P, I, C, O order.
    pub fn present_fields(&self) -> Vec<(MatchedElement, &str)> {
        let mut out = Vec::new();
        if let Some(p) = &self.population {
            out.push((MatchedElement::Population, p.as_str()));
        }
        if let Some(i) = &self.intervention {
            out.push((MatchedElement::Intervention, i.as_str()));
        }
        if let Some(c) = &self.comparison {
            out.push((MatchedElement::Comparison, c.as_str()));
        }
        if let Some(o) = &self.outcome {
            out.push((MatchedElement::Outcome, o.as_str()));
        }
        out
    }

    /// Present fields joined with "; " in P, I, C, O order.
    pub fn concatenated(&self) -> String {
        self.present_fields()
            .iter()
            .map(|(_, v)| *v)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// One violated [`PicoFrame`] invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FrameViolation {
    /// No field is present.
    NoFieldPresent,
    /// Variant is PIO but a comparison is present.
    PioHasComparison,
}

impl fmt::Display for FrameViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameViolation::NoFieldPresent => "no field present",
            FrameViolation::PioHasComparison => "PIO forbids comparison",
        })
    }
}

/// Returns every violated frame invariant; the frame is valid iff the list
/// is empty. Total function, no I/O.
pub fn validate_frame(frame: &PicoFrame) -> Vec<FrameViolation> {
    let mut violations = Vec::new();
    if frame.present_fields().is_empty() {
        violations.push(FrameViolation::NoFieldPresent);
    }
    if frame.variant == PicoVariant::Pio && frame.comparison.is_some() {
        violations.push(FrameViolation::PioHasComparison);
    }
    violations
}

/// A corpus text chunk with its embedding vector and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceChunk {
    pub doc_id: String,
    pub chunk_id: u32,
    pub text: String,
    pub embedding: Vec<f32>,
}

/// Reference to an evidence chunk: `(doc_id, chunk_id)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkRef {
    pub doc_id: String,
    pub chunk_id: u32,
}

/// Which query element produced a retrieval score.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MatchedElement {
    Population,
    Intervention,
    Comparison,
    Outcome,
    /// Concatenated-mode or plain-text retrieval: the whole query string.
    Query,
}

/// One scored retrieval result.
///
/// Result lists are sorted by score descending, ties broken by
/// `(doc_id, chunk_id)` ascending.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub chunk_id: u32,
    pub text: String,
    pub score: f64,
    pub matched_element: MatchedElement,
}

impl RetrievalHit {
    pub fn chunk_ref(&self) -> ChunkRef {
        ChunkRef {
            doc_id: self.doc_id.clone(),
            chunk_id: self.chunk_id,
        }
    }
}

/// The final grounded answer for one query.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratedAnswer {
    pub query_id: String,
    pub text: String,
    pub evidence_refs: Vec<ChunkRef>,
    /// Hash of the exact generation prompt.
    pub prompt_fingerprint: String,
}

/// Judge protocol selector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum JudgeMethod {
    A,
    B,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum VerdictOutcome {
    Pass,
    Fail,
    /// Reserved for unparseable judge output.
    Invalid,
}

/// One judge decision.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Verdict {
    pub query_id: String,
    pub method: JudgeMethod,
    pub outcome: VerdictOutcome,
    pub language_ok: bool,
    pub rationale: String,
}

/// Pipeline stage roles that take a backend binding.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classifier,
    Expander,
    Extractor,
    Generator,
    JudgeA,
    JudgeB,
    Embedder,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Classifier,
        Stage::Expander,
        Stage::Extractor,
        Stage::Generator,
        Stage::JudgeA,
        Stage::JudgeB,
        Stage::Embedder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::Expander => "expander",
            Stage::Extractor => "extractor",
            Stage::Generator => "generator",
            Stage::JudgeA => "judge_a",
            Stage::JudgeB => "judge_b",
            Stage::Embedder => "embedder",
        }
    }
}

/// Ablation switches. All combinations are legal.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_classification: bool,
    #[serde(default)]
    pub no_expansion: bool,
    #[serde(default)]
    pub no_pico: bool,
}

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        AblationFlags {
            no_classification: true,
            no_expansion: true,
            no_pico: true,
        }
    }
}

/// How PICO fields are turned into retrieval queries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Embed each present field; a chunk's score is its max over fields.
    PerElementMax,
    /// Embed one string joining present fields with "; " in P,I,C,O order.
    Concatenated,
}

/// One pipeline configuration: ablations, variant, retrieval and backend
/// bindings. Snapshotted into every [`RunReport`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub ablation: AblationFlags,
    pub pico_variant: PicoVariant,
    pub top_k: usize,
    pub retrieval_mode: RetrievalMode,
    /// Stage role -> registered backend id.
    pub backends: BTreeMap<Stage, String>,
    pub language: String,
    pub language_threshold: f64,
    pub evidence_budget: usize,
    pub seed: u64,
    /// Suppress wall-clock fields so serialized outputs are byte-stable.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ablation: AblationFlags::none(),
            pico_variant: PicoVariant::Pico,
            top_k: 5,
            retrieval_mode: RetrievalMode::PerElementMax,
            backends: BTreeMap::new(),
            language: "zh".to_string(),
            language_threshold: 0.5,
            evidence_budget: 6000,
            seed: 0,
            deterministic: false,
        }
    }
}

/// Everything captured while answering one query.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub query_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discipline: Option<Discipline>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expanded: Option<ExpandedQuery>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<PicoFrame>,
    pub hits: Vec<RetrievalHit>,
    /// Score-ranked hits dropped from the generation prompt by the
    /// evidence budget.
    pub evidence_dropped: usize,
    pub answer: GeneratedAnswer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict_a: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict_b: Option<Verdict>,
    /// Stage fallbacks and degradations, e.g. "expansion_empty_fallback".
    pub flags: Vec<String>,
    /// Absent in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<u64>,
}

/// Per-method accuracy aggregates.
///
/// `accuracy = pass / (total - invalid)`, kept as full-precision counts and
/// rounded only at presentation time. Empty inputs leave accuracies `None`
/// ("n/a"), never 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregates {
    pub total: usize,
    pub pass_a: usize,
    pub fail_a: usize,
    pub invalid_a: usize,
    pub pass_b: usize,
    pub fail_b: usize,
    pub invalid_b: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method_a_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method_b_accuracy: Option<f64>,
}

impl Aggregates {
    /// Recomputes aggregates from records; always equals the stored value
    /// on a well-formed report.
    pub fn recompute(records: &[QueryRecord]) -> Self {
        crate::evaluate::aggregate(
            records
                .iter()
                .map(|r| (r.verdict_a.as_ref(), r.verdict_b.as_ref())),
        )
    }
}

/// Per-query records plus aggregates for one pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub config: RunConfig,
    pub records: Vec<QueryRecord>,
    pub aggregates: Aggregates,
}

impl RunReport {
    /// Canonical JSON form; text tables are derived from this, never the
    /// reverse.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_whitespace_and_trims() {
        assert_eq!(normalize_text("  a\t\tb \n c  "), "a b c");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text(" \n "), "");
        // NFC: e + combining acute -> é
        assert_eq!(normalize_text("e\u{0301}"), "é");
    }

    #[test]
    fn user_query_rejects_blank_text() {
        assert_eq!(
            UserQuery::new("q1", "   ", None, None, None),
            Err(CoreError::EmptyQueryText)
        );
        let q = UserQuery::new("q1", " 宝宝发烧 怎么办 ", Some(""), None, None).unwrap();
        assert_eq!(q.text, "宝宝发烧 怎么办");
        assert_eq!(q.gold_answer, None);
        assert_eq!(q.language, "zh");
    }

    #[test]
    fn valid_frame_passes() {
        let f = PicoFrame::new(Some("adult"), None, None, Some("relief"), PicoVariant::Pico);
        assert!(validate_frame(&f).is_empty());
    }

    #[test]
    fn empty_frame_reports_no_field_present() {
        let f = PicoFrame::new(None, None, None, None, PicoVariant::Pico);
        assert_eq!(validate_frame(&f), vec![FrameViolation::NoFieldPresent]);
    }

    #[test]
    fn pio_with_comparison_reports_violation() {
        let f = PicoFrame::new(None, None, Some("placebo"), None, PicoVariant::Pio);
        assert_eq!(
            validate_frame(&f),
            vec![FrameViolation::PioHasComparison]
        );
    }

    #[test]
    fn frame_normalizes_empty_fields_to_absent() {
        let f = PicoFrame::new(Some("  "), Some("drug"), None, Some(""), PicoVariant::Pico);
        assert_eq!(f.population, None);
        assert_eq!(f.outcome, None);
        assert_eq!(f.concatenated(), "drug");
    }

    #[test]
    fn present_fields_keep_pico_order() {
        let f = PicoFrame::new(
            Some("p"),
            Some("i"),
            Some("c"),
            Some("o"),
            PicoVariant::Pico,
        );
        let order: Vec<MatchedElement> = f.present_fields().iter().map(|(e, _)| *e).collect();
        assert_eq!(
            order,
            vec![
                MatchedElement::Population,
                MatchedElement::Intervention,
                MatchedElement::Comparison,
                MatchedElement::Outcome,
            ]
        );
        assert_eq!(f.concatenated(), "p; i; c; o");
    }
}
