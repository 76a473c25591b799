//! Two-method answer judging and accuracy aggregation.
//!
//! Method A asks a judge whether the answer covers the gold answer's
//! semantic content (relevance). Method B asks a second judge for overall
//! factual accuracy, after a programmatic language gate: an answer in the
//! wrong script fails without spending a judge call. Invalid verdicts
//! (unparseable judge output) are excluded from accuracy denominators and
//! reported separately.

use thiserror::Error;
use unicode_script::{Script, UnicodeScript};

use crate::backend::{BackendError, ChatRequest, Registry};
use crate::template::{Template, TemplateError};
use crate::types::{Aggregates, GeneratedAnswer, JudgeMethod, Verdict, VerdictOutcome};

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub const DEFAULT_LANGUAGE_THRESHOLD: f64 = 0.5;

/// Script-ratio language gate. For "zh": Han characters among all
/// letter-category characters must reach `threshold`; for "en": Latin
/// letters. Digits, punctuation, and whitespace stay out of the
/// denominator; a text with no letters fails. Unknown tags pass (no
/// constraint).
pub fn language_check(text: &str, tag: &str, threshold: f64) -> bool {
    let target = match tag {
        "zh" => Script::Han,
        "en" => Script::Latin,
        _ => return true,
    };
    let mut letters = 0usize;
    let mut matching = 0usize;
    for ch in text.chars() {
        if !ch.is_alphabetic() {
            continue;
        }
        letters += 1;
        if ch.script() == target {
            matching += 1;
        }
    }
    if letters == 0 {
        return false;
    }
    (matching as f64 / letters as f64) >= threshold
}

/// Scans tokens case-insensitively: the first standalone YES/是 means
/// Pass, the first standalone NO/否 means Fail, whichever appears first
/// wins; neither present is Invalid. Total and deterministic.
pub fn parse_verdict(text: &str) -> VerdictOutcome {
    fn note(slot: &mut Option<usize>, pos: usize) {
        if slot.is_none() {
            *slot = Some(pos);
        }
    }
    fn check_run(text: &str, start: usize, end: usize, yes: &mut Option<usize>, no: &mut Option<usize>) {
        match text[start..end].to_lowercase().as_str() {
            "yes" => note(yes, start),
            "no" => note(no, start),
            _ => {}
        }
    }
    let mut first_yes: Option<usize> = None;
    let mut first_no: Option<usize> = None;
    // ASCII word tokens: maximal alphabetic runs
    let mut run_start: Option<usize> = None;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, ch)) in chars.iter().enumerate() {
        if ch.is_ascii_alphabetic() {
            run_start.get_or_insert(pos);
        } else if let Some(start) = run_start.take() {
            check_run(text, start, pos, &mut first_yes, &mut first_no);
        }
        // CJK verdict characters are standalone when not flanked by Han
        if ch == '是' || ch == '否' {
            let han = |idx: Option<&(usize, char)>| {
                idx.map(|(_, c)| c.script() == Script::Han).unwrap_or(false)
            };
            let prev_han = if i == 0 { false } else { han(chars.get(i - 1)) };
            let next_han = han(chars.get(i + 1));
            if !prev_han && !next_han {
                if ch == '是' {
                    note(&mut first_yes, pos);
                } else {
                    note(&mut first_no, pos);
                }
            }
        }
    }
    if let Some(start) = run_start {
        check_run(text, start, text.len(), &mut first_yes, &mut first_no);
    }
    match (first_yes, first_no) {
        (Some(y), Some(n)) => {
            if y < n {
                VerdictOutcome::Pass
            } else {
                VerdictOutcome::Fail
            }
        }
        (Some(_), None) => VerdictOutcome::Pass,
        (None, Some(_)) => VerdictOutcome::Fail,
        (None, None) => VerdictOutcome::Invalid,
    }
}

/// Method A: does the answer cover the gold answer's semantic content?
/// A missing gold yields an Invalid verdict without a judge call.
pub fn judge_method_a(
    answer: &GeneratedAnswer,
    gold: Option<&str>,
    registry: &Registry,
    backend_id: &str,
    template: &Template,
) -> Result<Verdict, EvaluateError> {
    let gold = match gold.map(str::trim).filter(|g| !g.is_empty()) {
        Some(g) => g,
        None => {
            return Ok(Verdict {
                query_id: answer.query_id.clone(),
                method: JudgeMethod::A,
                outcome: VerdictOutcome::Invalid,
                language_ok: true,
                rationale: "no gold answer".to_string(),
            })
        }
    };
    let prompt = template.render(&[("answer", answer.text.as_str()), ("gold", gold)])?;
    let response = registry.chat(backend_id, &ChatRequest::new(prompt)?)?;
    Ok(Verdict {
        query_id: answer.query_id.clone(),
        method: JudgeMethod::A,
        outcome: parse_verdict(&response),
        language_ok: true,
        rationale: response,
    })
}

/// Method B: overall knowledge accuracy with the language gate applied
/// first; a gate failure is a Fail with zero judge calls.
pub fn judge_method_b(
    answer: &GeneratedAnswer,
    gold: Option<&str>,
    registry: &Registry,
    backend_id: &str,
    language: &str,
    threshold: f64,
    template: &Template,
) -> Result<Verdict, EvaluateError> {
    if !language_check(&answer.text, language, threshold) {
        return Ok(Verdict {
            query_id: answer.query_id.clone(),
            method: JudgeMethod::B,
            outcome: VerdictOutcome::Fail,
            language_ok: false,
            rationale: format!("language check failed (expected \"{language}\")"),
        });
    }
    let gold_text = gold.map(str::trim).filter(|g| !g.is_empty()).unwrap_or("(none)");
    let prompt = template.render(&[("answer", answer.text.as_str()), ("gold", gold_text)])?;
    let response = registry.chat(backend_id, &ChatRequest::new(prompt)?)?;
    Ok(Verdict {
        query_id: answer.query_id.clone(),
        method: JudgeMethod::B,
        outcome: parse_verdict(&response),
        language_ok: true,
        rationale: response,
    })
}

/// Folds per-query verdict pairs into aggregates. Per method:
/// `accuracy = pass / (total - invalid)`; an empty denominator leaves the
/// accuracy undefined ("n/a"), never 0. Permutation-invariant.
pub fn aggregate<'a>(
    records: impl IntoIterator<Item = (Option<&'a Verdict>, Option<&'a Verdict>)>,
) -> Aggregates {
    let mut agg = Aggregates {
        total: 0,
        pass_a: 0,
        fail_a: 0,
        invalid_a: 0,
        pass_b: 0,
        fail_b: 0,
        invalid_b: 0,
        method_a_accuracy: None,
        method_b_accuracy: None,
    };
    let mut considered_a = 0usize;
    let mut considered_b = 0usize;
    for (a, b) in records {
        agg.total += 1;
        if let Some(v) = a {
            considered_a += 1;
            match v.outcome {
                VerdictOutcome::Pass => agg.pass_a += 1,
                VerdictOutcome::Fail => agg.fail_a += 1,
                VerdictOutcome::Invalid => agg.invalid_a += 1,
            }
        }
        if let Some(v) = b {
            considered_b += 1;
            match v.outcome {
                VerdictOutcome::Pass => agg.pass_b += 1,
                VerdictOutcome::Fail => agg.fail_b += 1,
                VerdictOutcome::Invalid => agg.invalid_b += 1,
            }
        }
    }
    let acc = |pass: usize, considered: usize, invalid: usize| -> Option<f64> {
        let denom = considered.saturating_sub(invalid);
        (denom > 0).then(|| pass as f64 / denom as f64)
    };
    agg.method_a_accuracy = acc(agg.pass_a, considered_a, agg.invalid_a);
    agg.method_b_accuracy = acc(agg.pass_b, considered_b, agg.invalid_b);
    agg
}
