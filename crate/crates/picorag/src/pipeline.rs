//! Stage composition: classify -> expand -> extract -> retrieve ->
//! generate -> judge, with the ablation modes of the experimental matrix.
//!
//! Per-query stage failures degrade to the previous stage's text and are
//! flagged in the record; only configuration errors abort a batch. Batch
//! runs process queries with bounded parallelism, and report record order
//! always equals dataset order, so runs are byte-for-byte reproducible on
//! mock or replay backends at any parallelism level.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::backend::{BackendError, Registry};
use crate::classify::{classify, ClassifyError, Taxonomy};
use crate::evaluate::{aggregate, judge_method_a, judge_method_b, EvaluateError};
use crate::generate::{generate, GenerateError};
use crate::index::{IndexError, RetrievalInput, VectorIndex};
use crate::rewrite::{expand, extract_pico, RewriteError};
use crate::template::{TemplateError, TemplateKind, TemplateSet};
use crate::types::{
    AblationFlags, Discipline, ExpandedQuery, GeneratedAnswer, PicoVariant, QueryRecord,
    RetrievalHit, RunConfig, RunReport, Stage, UserQuery,
};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Table row labels for the five ablation-matrix configurations, in run
/// order.
pub const ABLATION_LABELS: [&str; 5] = [
    "PICOs",
    "w/o classification",
    "w/o expansion",
    "w/o PICO",
    "w/ PIO",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no backend bound for stage \"{0}\"")]
    UnboundService(&'static str),
    #[error("dataset {path}: line {line}: {message}")]
    DatasetRead {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dataset {path}: {source}")]
    DatasetIo {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Shared, immutable services a run needs: backends, templates, taxonomy,
/// the loaded index, and the active forbidden-marker list.
pub struct Services {
    pub registry: Arc<Registry>,
    pub templates: Arc<TemplateSet>,
    pub taxonomy: Arc<Taxonomy>,
    pub index: Arc<VectorIndex>,
    pub markers: Vec<String>,
}

impl Services {
    fn binding<'a>(&self, cfg: &'a RunConfig, stage: Stage) -> Option<&'a str> {
        cfg.backends.get(&stage).map(String::as_str)
    }

    fn require<'a>(&self, cfg: &'a RunConfig, stage: Stage) -> Result<&'a str, PipelineError> {
        self.binding(cfg, stage)
            .ok_or(PipelineError::UnboundService(stage.name()))
    }
}

/// Checks that every stage the config requires is bound and registered.
/// The classifier is optional by design: classification falls back to
/// keywords offline.
pub fn validate_services(
    cfg: &RunConfig,
    services: &Services,
    judging: bool,
) -> Result<(), PipelineError> {
    let mut required = vec![Stage::Generator, Stage::Embedder];
    if !cfg.ablation.no_expansion {
        required.push(Stage::Expander);
    }
    if !cfg.ablation.no_pico {
        required.push(Stage::Extractor);
    }
    if judging {
        required.push(Stage::JudgeA);
        required.push(Stage::JudgeB);
    }
    for stage in required {
        let id = services.require(cfg, stage)?;
        let known = match stage {
            Stage::Embedder => services.registry.has_embed(id),
            _ => services.registry.has_chat(id),
        };
        if !known {
            return Err(PipelineError::Backend(BackendError::UnknownBackend(
                id.to_string(),
            )));
        }
    }
    Ok(())
}

/// Runs one query through the configured stages. `judging` gates both
/// judge calls (single-question answering skips them).
pub fn run_query(
    query: &UserQuery,
    cfg: &RunConfig,
    services: &Services,
    judging: bool,
) -> Result<QueryRecord, PipelineError> {
    let started = Instant::now();
    let mut flags: Vec<String> = Vec::new();

    // (1) classify
    let discipline = if cfg.ablation.no_classification {
        None
    } else {
        let backend = services
            .binding(cfg, Stage::Classifier)
            .map(|id| (services.registry.as_ref(), id));
        let (discipline, source) = classify(
            query,
            &services.taxonomy,
            backend,
            services.templates.get(TemplateKind::Classify),
        )?;
        flags.push(format!("classify_source:{source:?}").to_lowercase());
        Some(discipline)
    };

    // (2) expand
    let expanded = if cfg.ablation.no_expansion {
        None
    } else {
        let expander = services.require(cfg, Stage::Expander)?;
        let neutral = cfg.ablation.no_classification;
        let disc = discipline.clone().unwrap_or_else(Discipline::unclassified);
        match expand(
            query,
            &disc,
            &services.registry,
            expander,
            services.templates.get(TemplateKind::Expand),
            &services.markers,
            neutral,
        ) {
            Ok(e) => Some(e),
            Err(RewriteError::EmptyExpansion) => {
                flags.push("expansion_empty_fallback".to_string());
                None
            }
            Err(RewriteError::Backend(e)) => {
                flags.push(format!("expansion_error_fallback:{e}"));
                None
            }
            Err(e) => return Err(map_rewrite(e)),
        }
    };
    let effective_text = expanded
        .as_ref()
        .map(|e| e.text.as_str())
        .unwrap_or(query.text.as_str());

    // (3) extract PICO
    let frame = if cfg.ablation.no_pico {
        None
    } else {
        let extractor = services.require(cfg, Stage::Extractor)?;
        let basis = ExpandedQuery {
            query_id: query.id.clone(),
            text: effective_text.to_string(),
            discipline: discipline.clone().unwrap_or_else(Discipline::unclassified),
            filter_removed_chars: 0,
        };
        match extract_pico(
            &basis,
            cfg.pico_variant,
            &services.registry,
            extractor,
            services.templates.get(TemplateKind::Extract),
            services.templates.get(TemplateKind::ExtractRepair),
        ) {
            Ok(f) => Some(f),
            Err(RewriteError::ExtractionParse(m)) => {
                flags.push(format!("extraction_failed_fallback:{m}"));
                None
            }
            Err(RewriteError::Backend(e)) => {
                flags.push(format!("extraction_error_fallback:{e}"));
                None
            }
            Err(e) => return Err(map_rewrite(e)),
        }
    };

    // (4) retrieve
    let embedder = services.require(cfg, Stage::Embedder)?;
    let input = match &frame {
        Some(f) => RetrievalInput::Frame(f),
        None => RetrievalInput::Text(effective_text),
    };
    let hits: Vec<RetrievalHit> = match services.index.retrieve(
        input,
        cfg.top_k,
        cfg.retrieval_mode,
        &services.registry,
        embedder,
    ) {
        Ok(h) => h,
        Err(IndexError::Backend(e)) => {
            flags.push(format!("retrieval_error:{e}"));
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };

    // (5) generate
    let generator = services.require(cfg, Stage::Generator)?;
    let gen_basis = ExpandedQuery {
        query_id: query.id.clone(),
        text: effective_text.to_string(),
        discipline: discipline.clone().unwrap_or_else(Discipline::unclassified),
        filter_removed_chars: 0,
    };
    let (answer, evidence_dropped) = match generate(
        &gen_basis,
        &hits,
        &services.registry,
        generator,
        &cfg.language,
        services.templates.get(TemplateKind::Generate),
        cfg.evidence_budget,
    ) {
        Ok(r) => r,
        Err(GenerateError::Backend(e)) => {
            flags.push(format!("generation_error:{e}"));
            (
                GeneratedAnswer {
                    query_id: query.id.clone(),
                    text: String::new(),
                    evidence_refs: hits.iter().map(RetrievalHit::chunk_ref).collect(),
                    prompt_fingerprint: String::new(),
                },
                0,
            )
        }
        Err(GenerateError::Template(e)) => return Err(e.into()),
    };

    // (6) judge
    let (verdict_a, verdict_b) = if judging {
        let judge_a_id = services.require(cfg, Stage::JudgeA)?;
        let judge_b_id = services.require(cfg, Stage::JudgeB)?;
        let verdict_a = match judge_method_a(
            &answer,
            query.gold_answer.as_deref(),
            &services.registry,
            judge_a_id,
            services.templates.get(TemplateKind::JudgeA),
        ) {
            Ok(v) => Some(v),
            Err(EvaluateError::Backend(e)) => {
                flags.push(format!("judge_a_error:{e}"));
                None
            }
            Err(EvaluateError::Template(e)) => return Err(e.into()),
        };
        let verdict_b = match judge_method_b(
            &answer,
            query.gold_answer.as_deref(),
            &services.registry,
            judge_b_id,
            &cfg.language,
            cfg.language_threshold,
            services.templates.get(TemplateKind::JudgeB),
        ) {
            Ok(v) => Some(v),
            Err(EvaluateError::Backend(e)) => {
                flags.push(format!("judge_b_error:{e}"));
                None
            }
            Err(EvaluateError::Template(e)) => return Err(e.into()),
        };
        (verdict_a, verdict_b)
    } else {
        (None, None)
    };

    Ok(QueryRecord {
        query_id: query.id.clone(),
        query_text: query.text.clone(),
        discipline,
        expanded,
        frame,
        hits,
        evidence_dropped,
        answer,
        verdict_a,
        verdict_b,
        flags,
        timing_ms: (!cfg.deterministic).then(|| started.elapsed().as_millis() as u64),
    })
}

fn map_rewrite(e: RewriteError) -> PipelineError {
    match e {
        RewriteError::Backend(b) => PipelineError::Backend(b),
        RewriteError::Template(t) => PipelineError::Template(t),
        // EmptyExpansion / parse failures are handled as fallbacks above
        other => PipelineError::Backend(BackendError::Provider {
            backend: "rewrite".to_string(),
            message: other.to_string(),
        }),
    }
}

/// Runs a batch with bounded parallelism. Record order equals dataset
/// order regardless of completion order.
pub fn run_batch(
    queries: &[UserQuery],
    cfg: &RunConfig,
    services: &Services,
    parallelism: usize,
) -> Result<RunReport, PipelineError> {
    validate_services(cfg, services, true)?;
    let parallelism = parallelism.max(1);
    let records = map_queries(queries, parallelism, |q| run_query(q, cfg, services, true))?;
    let aggregates = aggregate(
        records
            .iter()
            .map(|r| (r.verdict_a.as_ref(), r.verdict_b.as_ref())),
    );
    Ok(RunReport {
        config: cfg.clone(),
        records,
        aggregates,
    })
}

#[cfg(feature = "parallel")]
fn map_queries<F>(
    queries: &[UserQuery],
    parallelism: usize,
    f: F,
) -> Result<Vec<QueryRecord>, PipelineError>
where
    F: Fn(&UserQuery) -> Result<QueryRecord, PipelineError> + Send + Sync,
{
    if parallelism == 1 {
        return queries.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| {
            PipelineError::Backend(BackendError::Provider {
                backend: "thread-pool".to_string(),
                message: e.to_string(),
            })
        })?;
    // indexed parallel collect preserves input order
    pool.install(|| queries.par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn map_queries<F>(
    queries: &[UserQuery],
    _parallelism: usize,
    f: F,
) -> Result<Vec<QueryRecord>, PipelineError>
where
    F: Fn(&UserQuery) -> Result<QueryRecord, PipelineError> + Send + Sync,
{
    queries.iter().map(f).collect()
}

/// The five ablation-matrix configurations derived from `base`:
/// full PICOs, w/o classification, w/o expansion, w/o PICO, w/ PIO.
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    let mut full = base.clone();
    full.ablation = AblationFlags::none();
    full.pico_variant = PicoVariant::Pico;

    let mut no_classification = full.clone();
    no_classification.ablation.no_classification = true;

    let mut no_expansion = full.clone();
    no_expansion.ablation.no_expansion = true;

    let mut no_pico = full.clone();
    no_pico.ablation.no_pico = true;

    let mut pio = full.clone();
    pio.pico_variant = PicoVariant::Pio;

    vec![full, no_classification, no_expansion, no_pico, pio]
}

/// Runs the experimental matrix: five configurations in table order,
/// sharing services (and therefore the response cache) across runs.
pub fn ablation_matrix(
    queries: &[UserQuery],
    base_cfg: &RunConfig,
    services: &Services,
    parallelism: usize,
) -> Result<Vec<RunReport>, PipelineError> {
    ablation_configs(base_cfg)
        .iter()
        .map(|cfg| run_batch(queries, cfg, services, parallelism))
        .collect()
}

/// Loads a `{id, question, gold_answer?, discipline?, language?}` JSONL
/// dataset, validating each record.
pub fn load_dataset(path: &Path) -> Result<Vec<UserQuery>, PipelineError> {
    let file = File::open(path).map_err(|source| PipelineError::DatasetIo {
        path: path.display().to_string(),
        source,
    })?;
    let mut queries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::DatasetIo {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let query = parse_dataset_line(&line).map_err(|message| PipelineError::DatasetRead {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?;
        if !seen.insert(query.id.clone()) {
            return Err(PipelineError::DatasetRead {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("duplicate id \"{}\"", query.id),
            });
        }
        queries.push(query);
    }
    Ok(queries)
}

/// Parses one dataset record; unknown fields are allowed and ignored here
/// (ingest preserves them).
pub fn parse_dataset_line(line: &str) -> Result<UserQuery, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let id = v
        .get("id")
        .and_then(serde_json::Value::as_str)
        .ok_or("missing \"id\"")?;
    let question = v
        .get("question")
        .and_then(serde_json::Value::as_str)
        .ok_or("missing \"question\"")?;
    UserQuery::new(
        id,
        question,
        v.get("gold_answer").and_then(serde_json::Value::as_str),
        v.get("discipline").and_then(serde_json::Value::as_str),
        v.get("language").and_then(serde_json::Value::as_str),
    )
    .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{OneOrMany, ScriptRule};
    use crate::backend::BackendSpec;
    use crate::index::{build_index, BuildParams, CorpusDoc};
    use crate::types::RetrievalMode;
    use std::collections::BTreeMap;

    fn rule(contains: &str, response: &str) -> ScriptRule {
        ScriptRule {
            contains: OneOrMany::One(contains.to_string()),
            response: response.to_string(),
        }
    }

    fn mock(rules: Vec<ScriptRule>, default: &str) -> BackendSpec {
        BackendSpec::ScriptedMock {
            script: vec![],
            rules,
            default: Some(default.to_string()),
        }
    }

    /// A complete scripted service set covering every stage.
    fn scripted_services() -> Services {
        let mut reg = Registry::new();
        reg.register("clf", &mock(vec![rule("鼻塞", "Otorhinolaryngology")], "Pediatrics"))
            .unwrap();
        reg.register(
            "exp",
            &mock(
                vec![rule("鼻塞", "成年患者出现鼻塞症状，应如何处理？")],
                "患儿发热，应如何护理？",
            ),
        )
        .unwrap();
        reg.register(
            "ext",
            &mock(
                vec![rule("鼻塞", "P: 成年鼻塞患者\nI: 生理盐水冲洗\nC: none\nO: 通气改善")],
                "P: 发热患儿\nI: 物理降温\nC: none\nO: 退热",
            ),
        )
        .unwrap();
        reg.register("gen", &mock(vec![], "建议多饮水，注意休息。[1]")).unwrap();
        reg.register("ja", &mock(vec![], "YES")).unwrap();
        reg.register("jb", &mock(vec![], "YES")).unwrap();
        reg.register("emb", &BackendSpec::HashEmbed { dim: 32 }).unwrap();
        let registry = Arc::new(reg);

        let docs = vec![
            Ok(CorpusDoc {
                doc_id: "g1".into(),
                title: String::new(),
                text: "鼻塞患者可以使用生理盐水冲洗鼻腔。严重时就医。".into(),
            }),
            Ok(CorpusDoc {
                doc_id: "g2".into(),
                title: String::new(),
                text: "发热患儿应适当物理降温，补充水分。".into(),
            }),
        ];
        let index = build_index(
            docs,
            &registry,
            "emb",
            &BuildParams {
                chunk_size: 100,
                chunk_overlap: 10,
                deterministic: true,
            },
        )
        .unwrap();

        Services {
            registry,
            templates: Arc::new(TemplateSet::defaults()),
            taxonomy: Arc::new(Taxonomy::default_taxonomy()),
            index: Arc::new(index),
            markers: crate::rewrite::DEFAULT_FORBIDDEN_MARKERS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    fn config() -> RunConfig {
        let mut backends = BTreeMap::new();
        backends.insert(Stage::Classifier, "clf".to_string());
        backends.insert(Stage::Expander, "exp".to_string());
        backends.insert(Stage::Extractor, "ext".to_string());
        backends.insert(Stage::Generator, "gen".to_string());
        backends.insert(Stage::JudgeA, "ja".to_string());
        backends.insert(Stage::JudgeB, "jb".to_string());
        backends.insert(Stage::Embedder, "emb".to_string());
        RunConfig {
            backends,
            top_k: 2,
            retrieval_mode: RetrievalMode::PerElementMax,
            deterministic: true,
            ..RunConfig::default()
        }
    }

    fn queries() -> Vec<UserQuery> {
        vec![
            UserQuery::new("q1", "这几天鼻塞难受怎么办", Some("用生理盐水冲洗"), None, None)
                .unwrap(),
            UserQuery::new("q2", "宝宝发烧了怎么办", Some("物理降温"), None, None).unwrap(),
        ]
    }

    #[test]
    fn full_run_captures_every_artifact() {
        let services = scripted_services();
        let cfg = config();
        let record = run_query(&queries()[0], &cfg, &services, true).unwrap();
        assert!(record.discipline.is_some());
        assert!(record.expanded.is_some());
        assert!(record.frame.is_some());
        assert!(!record.hits.is_empty() && record.hits.len() <= cfg.top_k);
        assert!(!record.answer.text.is_empty());
        assert!(record.verdict_a.is_some());
        assert!(record.verdict_b.is_some());
        assert_eq!(record.timing_ms, None, "deterministic mode suppresses timing");
    }

    #[test]
    fn baseline_uses_raw_text_and_skips_stage_backends() {
        let services = scripted_services();
        let mut cfg = config();
        cfg.ablation = AblationFlags::all();
        let record = run_query(&queries()[0], &cfg, &services, true).unwrap();
        assert_eq!(record.discipline, None);
        assert_eq!(record.expanded, None);
        assert_eq!(record.frame, None);
        assert!(!record.hits.is_empty());
        assert_eq!(services.registry.requests("clf"), 0);
        assert_eq!(services.registry.requests("exp"), 0);
        assert_eq!(services.registry.requests("ext"), 0);
        assert!(services.registry.requests("gen") > 0);
    }

    #[test]
    fn pio_variant_frame_lacks_comparison() {
        let services = scripted_services();
        let mut cfg = config();
        cfg.pico_variant = PicoVariant::Pio;
        let record = run_query(&queries()[0], &cfg, &services, true).unwrap();
        let frame = record.frame.unwrap();
        assert_eq!(frame.variant, PicoVariant::Pio);
        assert_eq!(frame.comparison, None);
    }

    #[test]
    fn batch_report_order_and_aggregates() {
        let services = scripted_services();
        let cfg = config();
        let report = run_batch(&queries(), &cfg, &services, 1).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.records[0].query_id, "q1");
        assert_eq!(report.records[1].query_id, "q2");
        assert_eq!(report.aggregates.total, 2);
        assert_eq!(report.aggregates.pass_a, 2);
        assert_eq!(
            crate::types::Aggregates::recompute(&report.records),
            report.aggregates
        );
    }

    #[test]
    fn parallelism_levels_agree_byte_for_byte() {
        let services = scripted_services();
        let cfg = config();
        let qs = queries();
        let seq = run_batch(&qs, &cfg, &services, 1).unwrap().to_json();
        let par = run_batch(&qs, &cfg, &services, 4).unwrap().to_json();
        assert_eq!(seq, par);
    }

    #[test]
    fn empty_dataset_gives_na_aggregates() {
        let services = scripted_services();
        let cfg = config();
        let report = run_batch(&[], &cfg, &services, 1).unwrap();
        assert_eq!(report.records.len(), 0);
        assert_eq!(report.aggregates.method_a_accuracy, None);
    }

    #[test]
    fn unbound_generator_aborts() {
        let services = scripted_services();
        let mut cfg = config();
        cfg.backends.remove(&Stage::Generator);
        let err = run_batch(&queries(), &cfg, &services, 1).unwrap_err();
        assert!(matches!(err, PipelineError::UnboundService("generator")));
    }

    #[test]
    fn matrix_produces_five_reports_in_order() {
        let services = scripted_services();
        let cfg = config();
        let reports = ablation_matrix(&queries(), &cfg, &services, 1).unwrap();
        assert_eq!(reports.len(), 5);
        assert_eq!(reports[0].config.ablation, AblationFlags::none());
        assert!(reports[1].config.ablation.no_classification);
        assert!(reports[2].config.ablation.no_expansion);
        assert!(reports[3].config.ablation.no_pico);
        assert_eq!(reports[4].config.pico_variant, PicoVariant::Pio);
    }

    #[test]
    fn half_passing_judges_aggregate_to_fifty_percent() {
        // judge A passes exactly one of two queries
        let mut services = scripted_services();
        let mut reg = Registry::new();
        reg.register("clf", &mock(vec![], "Pediatrics")).unwrap();
        reg.register("exp", &mock(vec![], "扩写后的问题")).unwrap();
        reg.register("ext", &mock(vec![], "P: 患者\nO: 好转")).unwrap();
        reg.register("gen", &mock(vec![], "建议就医。")).unwrap();
        reg.register("ja", &mock(vec![rule("用生理盐水冲洗", "YES")], "NO"))
            .unwrap();
        reg.register("jb", &mock(vec![], "YES")).unwrap();
        reg.register("emb", &BackendSpec::HashEmbed { dim: 32 }).unwrap();
        services.registry = Arc::new(reg);
        let report = run_batch(&queries(), &config(), &services, 1).unwrap();
        assert_eq!(report.aggregates.pass_a, 1);
        assert_eq!(report.aggregates.method_a_accuracy, Some(0.5));
    }
}
