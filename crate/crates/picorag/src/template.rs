//! Prompt templates with `{{placeholder}}` substitution.
//!
//! Templates are external UTF-8 text assets; defaults are compiled in and
//! any of them can be overridden per run. Placeholders a template is not
//! allowed to use are a load-time error, so a bad override fails before any
//! model call.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name}: unknown placeholder {{{{{placeholder}}}}} (allowed: {allowed})")]
    UnknownPlaceholder {
        name: String,
        placeholder: String,
        allowed: String,
    },
    #[error("template {name}: unclosed placeholder at byte {at}")]
    Unclosed { name: String, at: usize },
    #[error("template {0}: {1}")]
    Io(String, std::io::Error),
    #[error("template {name}: no value bound for {{{{{placeholder}}}}}")]
    MissingValue { name: String, placeholder: String },
}

/// A parsed template: literal segments interleaved with placeholders.
#[derive(Debug, Clone)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
    placeholders: BTreeSet<String>,
}

#[derive(Debug, Clone)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

impl Template {
    /// Parses `text`, rejecting placeholders outside `allowed`.
    pub fn parse(name: &str, text: &str, allowed: &[&str]) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut placeholders = BTreeSet::new();
        let mut rest = text;
        let mut offset = 0;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                segments.push(Segment::Literal(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or(TemplateError::Unclosed {
                name: name.to_string(),
                at: offset + start,
            })?;
            let ph = after[..end].trim().to_string();
            if !allowed.contains(&ph.as_str()) {
                return Err(TemplateError::UnknownPlaceholder {
                    name: name.to_string(),
                    placeholder: ph,
                    allowed: allowed.join(", "),
                });
            }
            placeholders.insert(ph.clone());
            segments.push(Segment::Placeholder(ph));
            offset += start + 2 + end + 2;
            rest = &after[end + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(Template {
            name: name.to_string(),
            segments,
            placeholders,
        })
    }

    pub fn load(name: &str, path: &Path, allowed: &[&str]) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::Io(path.display().to_string(), e))?;
        Self::parse(name, &text, allowed)
    }

    /// Substitutes every placeholder; pure and deterministic.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(ph) => {
                    let val = vars
                        .iter()
                        .find(|(k, _)| k == ph)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingValue {
                            name: self.name.clone(),
                            placeholder: ph.clone(),
                        })?;
                    out.push_str(val);
                }
            }
        }
        Ok(out)
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.placeholders.iter().map(String::as_str)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Which template a stage renders, with its allowed placeholder set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Classify,
    Expand,
    Extract,
    ExtractRepair,
    Generate,
    JudgeA,
    JudgeB,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 7] = [
        TemplateKind::Classify,
        TemplateKind::Expand,
        TemplateKind::Extract,
        TemplateKind::ExtractRepair,
        TemplateKind::Generate,
        TemplateKind::JudgeA,
        TemplateKind::JudgeB,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemplateKind::Classify => "classify",
            TemplateKind::Expand => "expand",
            TemplateKind::Extract => "extract",
            TemplateKind::ExtractRepair => "extract_repair",
            TemplateKind::Generate => "generate",
            TemplateKind::JudgeA => "judge_a",
            TemplateKind::JudgeB => "judge_b",
        }
    }

    pub fn allowed_placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateKind::Classify => &["query", "taxonomy"],
            TemplateKind::Expand => &["query", "discipline", "discipline_guidance", "output_rules"],
            TemplateKind::Extract | TemplateKind::ExtractRepair => &["expanded", "variant_fields"],
            TemplateKind::Generate => &["expanded", "evidence", "language"],
            TemplateKind::JudgeA | TemplateKind::JudgeB => &["answer", "gold"],
        }
    }

    fn default_text(&self) -> &'static str {
        match self {
            TemplateKind::Classify => include_str!("../assets/templates/classify.txt"),
            TemplateKind::Expand => include_str!("../assets/templates/expand.txt"),
            TemplateKind::Extract => include_str!("../assets/templates/extract.txt"),
            TemplateKind::ExtractRepair => include_str!("../assets/templates/extract_repair.txt"),
            TemplateKind::Generate => include_str!("../assets/templates/generate.txt"),
            TemplateKind::JudgeA => include_str!("../assets/templates/judge_a.txt"),
            TemplateKind::JudgeB => include_str!("../assets/templates/judge_b.txt"),
        }
    }
}

/// The full set of stage templates for one run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    classify: Template,
    expand: Template,
    extract: Template,
    extract_repair: Template,
    generate: Template,
    judge_a: Template,
    judge_b: Template,
}

impl TemplateSet {
    /// Compiled-in defaults.
    pub fn defaults() -> Self {
        let t = |kind: TemplateKind| {
            Template::parse(kind.name(), kind.default_text(), kind.allowed_placeholders())
                .expect("default templates are valid")
        };
        TemplateSet {
            classify: t(TemplateKind::Classify),
            expand: t(TemplateKind::Expand),
            extract: t(TemplateKind::Extract),
            extract_repair: t(TemplateKind::ExtractRepair),
            generate: t(TemplateKind::Generate),
            judge_a: t(TemplateKind::JudgeA),
            judge_b: t(TemplateKind::JudgeB),
        }
    }

    /// Replaces one template from a file.
    pub fn override_from_file(
        &mut self,
        kind: TemplateKind,
        path: &Path,
    ) -> Result<(), TemplateError> {
        let t = Template::load(kind.name(), path, kind.allowed_placeholders())?;
        match kind {
            TemplateKind::Classify => self.classify = t,
            TemplateKind::Expand => self.expand = t,
            TemplateKind::Extract => self.extract = t,
            TemplateKind::ExtractRepair => self.extract_repair = t,
            TemplateKind::Generate => self.generate = t,
            TemplateKind::JudgeA => self.judge_a = t,
            TemplateKind::JudgeB => self.judge_b = t,
        }
        Ok(())
    }

    pub fn get(&self, kind: TemplateKind) -> &Template {
        match kind {
            TemplateKind::Classify => &self.classify,
            TemplateKind::Expand => &self.expand,
            TemplateKind::Extract => &self.extract,
            TemplateKind::ExtractRepair => &self.extract_repair,
            TemplateKind::Generate => &self.generate,
            TemplateKind::JudgeA => &self.judge_a,
            TemplateKind::JudgeB => &self.judge_b,
        }
    }
}
