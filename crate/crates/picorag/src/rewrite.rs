//! Query expansion with output-rule filtering, and PICO-frame extraction
//! from the expanded text.
//!
//! Expansion models occasionally append a direct answer after the
//! rewritten question; [`output_filter`] truncates at the first forbidden
//! marker so downstream extraction sees only the expansion. Extraction
//! requests labeled `P:`/`I:`/`C:`/`O:` lines and parses them with
//! [`parse_pico_labels`], with exactly one stricter re-prompt before
//! giving up.

use thiserror::Error;

use crate::backend::{BackendError, ChatRequest, Registry};
use crate::template::{Template, TemplateError};
use crate::types::{normalize_text, Discipline, ExpandedQuery, PicoFrame, PicoVariant, UserQuery};

/// Markers after which expander output is discarded.
pub const DEFAULT_FORBIDDEN_MARKERS: [&str; 4] = ["Answer:", "回答:", "答案:", "In conclusion"];

/// Rendered into the expansion prompt when a real discipline is known.
const NEUTRAL_DISCIPLINE: &str = "general medicine";

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("expansion is empty after output filtering")]
    EmptyExpansion,
    #[error("no labeled PICO lines found")]
    NoLabelsFound,
    #[error("PICO extraction failed after a repair attempt: {0}")]
    ExtractionParse(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Truncates `text` at the earliest forbidden marker and trims the result.
/// A marker matches case-insensitively when it is the first non-whitespace
/// content of a line. Returns the kept text and the number of characters
/// removed (counted from the marker itself). Idempotent.
pub fn output_filter(text: &str, markers: &[String]) -> (String, usize) {
    let total_chars = text.chars().count();
    let mut cut: Option<usize> = None; // char index of the matched marker
    let mut char_pos = 0;
    for line in text.split_inclusive('\n') {
        let leading_ws = line.chars().take_while(|c| c.is_whitespace()).count();
        let content: String = line.chars().skip(leading_ws).collect();
        if marker_prefix(&content, markers) {
            cut = Some(char_pos + leading_ws);
            break;
        }
        char_pos += line.chars().count();
    }
    match cut {
        None => (text.trim().to_string(), 0),
        Some(at) => {
            let kept: String = text.chars().take(at).collect();
            (kept.trim().to_string(), total_chars - at)
        }
    }
}

fn marker_prefix(content: &str, markers: &[String]) -> bool {
    markers.iter().any(|m| ci_starts_with(content, m))
}

fn ci_starts_with(haystack: &str, needle: &str) -> bool {
    let mut h = haystack.chars().flat_map(char::to_lowercase);
    let mut n = needle.chars().flat_map(char::to_lowercase);
    loop {
        match (n.next(), h.next()) {
            (None, _) => return true,
            (Some(_), None) => return false,
            (Some(a), Some(b)) if a != b => return false,
            _ => {}
        }
    }
}

/// Renders the output-rule block for expansion prompts from the active
/// marker list, so the instructions and the filter stay in sync.
pub fn render_output_rules(markers: &[String]) -> String {
    let quoted: Vec<String> = markers.iter().map(|m| format!("\"{m}\"")).collect();
    format!(
        "- Output only the rewritten question, nothing else.\n\
         - Do not answer the question.\n\
         - Never start a line with {}.",
        quoted.join(", ")
    )
}

/// Expands and normalizes a query with a discipline-aware prompt.
///
/// With `neutral_discipline` set (the no-classification ablation) or an
/// unclassified discipline, the discipline placeholder renders as a neutral
/// phrase and the discipline-specific guidance is omitted.
pub fn expand(
    query: &UserQuery,
    discipline: &Discipline,
    registry: &Registry,
    backend_id: &str,
    template: &Template,
    markers: &[String],
    neutral_discipline: bool,
) -> Result<ExpandedQuery, RewriteError> {
    let neutral = neutral_discipline || discipline.is_unclassified();
    let (shown, guidance) = if neutral {
        (NEUTRAL_DISCIPLINE.to_string(), String::new())
    } else {
        (
            discipline.0.clone(),
            format!(
                "Pay particular attention to the history, symptoms, duration, and prior \
                 treatment details a {discipline} specialist would ask about.\n"
            ),
        )
    };
    let prompt = template.render(&[
        ("query", query.text.as_str()),
        ("discipline", shown.as_str()),
        ("discipline_guidance", guidance.as_str()),
        ("output_rules", render_output_rules(markers).as_str()),
    ])?;
    let response = registry.chat(backend_id, &ChatRequest::new(prompt)?)?;
    let (filtered, removed) = output_filter(&response, markers);
    let text = normalize_text(&filtered);
    if text.is_empty() {
        return Err(RewriteError::EmptyExpansion);
    }
    Ok(ExpandedQuery {
        query_id: query.id.clone(),
        text,
        discipline: discipline.clone(),
        filter_removed_chars: removed,
    })
}

/// PICO fields as parsed from labeled lines, before frame construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedPico {
    pub population: Option<String>,
    pub intervention: Option<String>,
    pub comparison: Option<String>,
    pub outcome: Option<String>,
}

/// Parses labeled `P:`/`I:`/`C:`/`O:` lines (single letters or the full
/// words, case-insensitive, ASCII or full-width separator). The remainder
/// of a labeled line plus any following unlabeled lines bind to that field;
/// a repeated label overwrites its earlier value. The values `none`,
/// `n/a`, `-` and the empty string normalize to absent. Errors with
/// [`RewriteError::NoLabelsFound`] when nothing binds a present value.
pub fn parse_pico_labels(text: &str) -> Result<ParsedPico, RewriteError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Field {
        P,
        I,
        C,
        O,
    }
    let mut values: [Option<Vec<String>>; 4] = [None, None, None, None];
    let mut current: Option<Field> = None;
    for line in text.lines() {
        match split_label(line) {
            Some((field_char, rest)) => {
                let field = match field_char {
                    'p' => Field::P,
                    'i' => Field::I,
                    'c' => Field::C,
                    'o' => Field::O,
                    _ => unreachable!(),
                };
                let idx = field as usize;
                values[idx] = Some(vec![rest.to_string()]);
                current = Some(field);
            }
            None => {
                if let Some(field) = current {
                    if !line.trim().is_empty() {
                        values[field as usize]
                            .as_mut()
                            .expect("current field has a value")
                            .push(line.trim().to_string());
                    }
                }
            }
        }
    }
    let finish = |v: Option<Vec<String>>| -> Option<String> {
        let joined = normalize_text(&v?.join(" "));
        let lowered = joined.to_lowercase();
        if matches!(lowered.as_str(), "" | "none" | "n/a" | "-") {
            None
        } else {
            Some(joined)
        }
    };
    let [p, i, c, o] = values;
    let parsed = ParsedPico {
        population: finish(p),
        intervention: finish(i),
        comparison: finish(c),
        outcome: finish(o),
    };
    if parsed == ParsedPico::default() {
        return Err(RewriteError::NoLabelsFound);
    }
    Ok(parsed)
}

/// Matches `optional-whitespace + label + ":"|"："`, returning the
/// normalized label initial and the value remainder.
fn split_label(line: &str) -> Option<(char, &str)> {
    let trimmed = line.trim_start();
    let lowered = trimmed.to_lowercase();
    const LABELS: [(&str, char); 8] = [
        ("population", 'p'),
        ("intervention", 'i'),
        ("comparison", 'c'),
        ("outcome", 'o'),
        ("p", 'p'),
        ("i", 'i'),
        ("c", 'c'),
        ("o", 'o'),
    ];
    for (label, initial) in LABELS {
        if let Some(rest) = lowered.strip_prefix(label) {
            for sep in [":", "："] {
                if rest.starts_with(sep) {
                    // recover the remainder from the original casing
                    let prefix_chars = label.chars().count() + sep.chars().count();
                    let byte_at: usize = trimmed
                        .char_indices()
                        .nth(prefix_chars)
                        .map(|(b, _)| b)
                        .unwrap_or(trimmed.len());
                    return Some((initial, trimmed[byte_at..].trim()));
                }
            }
        }
    }
    None
}

/// Renders the labeled-line block the extraction templates request;
/// PIO mode omits the `C:` line.
pub fn variant_fields(variant: PicoVariant) -> &'static str {
    match variant {
        PicoVariant::Pico => {
            "P: <population / patient>\nI: <intervention>\nC: <comparison>\nO: <outcome>"
        }
        PicoVariant::Pio => "P: <population / patient>\nI: <intervention>\nO: <outcome>",
    }
}

/// Extracts a validated [`PicoFrame`] from the expanded query. On a parse
/// or validation failure, re-prompts once with a stricter format reminder,
/// then errors. In PIO mode a comparison the model emits anyway is
/// dropped so the variant invariant holds.
pub fn extract_pico(
    expanded: &ExpandedQuery,
    variant: PicoVariant,
    registry: &Registry,
    backend_id: &str,
    template: &Template,
    repair_template: &Template,
) -> Result<PicoFrame, RewriteError> {
    let vars = [
        ("expanded", expanded.text.as_str()),
        ("variant_fields", variant_fields(variant)),
    ];
    let mut last_failure = String::new();
    for tpl in [template, repair_template] {
        let prompt = tpl.render(&vars)?;
        let response = registry.chat(backend_id, &ChatRequest::new(prompt)?)?;
        match parse_pico_labels(&response) {
            Ok(parsed) => {
                let comparison = match variant {
                    PicoVariant::Pico => parsed.comparison.as_deref(),
                    PicoVariant::Pio => None,
                };
                let frame = PicoFrame::new(
                    parsed.population.as_deref(),
                    parsed.intervention.as_deref(),
                    comparison,
                    parsed.outcome.as_deref(),
                    variant,
                );
                let violations = crate::types::validate_frame(&frame);
                if violations.is_empty() {
                    return Ok(frame);
                }
                last_failure = violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; ");
            }
            Err(RewriteError::NoLabelsFound) => {
                last_failure = "no labeled lines".to_string();
            }
            Err(other) => return Err(other),
        }
    }
    Err(RewriteError::ExtractionParse(last_failure))
}
