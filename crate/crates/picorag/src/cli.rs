//! Command-line interface: ingest datasets, build indexes, answer a single
//! question, run batches and ablations, and re-render stored reports.
//!
//! Exit codes: 0 success, 1 validation failure, 2 missing input,
//! 3 backend/provider failure, 4 config error.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{BackendError, BackendSpec, Registry};
use crate::config::{self, ConfigError, FileConfig};
use crate::index::{build_index, read_corpus, BuildParams, IndexError, VectorIndex};
use crate::pipeline::{
    ablation_matrix, load_dataset, run_batch, run_query, validate_services, PipelineError,
};
use crate::report::{load_report, write_report, ReportError, StoredReport};
use crate::types::{
    normalize_text, AblationFlags, PicoVariant, QueryRecord, RetrievalMode, RunConfig, UserQuery,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Parser)]
#[command(
    name = "picorag",
    version,
    about = "PICO-structured query rewriting and retrieval-augmented generation for medical QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Pico,
    Pio,
}

impl From<VariantArg> for PicoVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Pico => PicoVariant::Pico,
            VariantArg::Pio => PicoVariant::Pio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerElement,
    Concat,
}

impl From<ModeArg> for RetrievalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerElement => RetrievalMode::PerElementMax,
            ModeArg::Concat => RetrievalMode::Concatenated,
        }
    }
}

/// Overrides shared by ask/run/ablate.
#[derive(clap::Args)]
struct RunOverrides {
    /// Comma-separated ablations: no-classify,no-expand,no-pico
    #[arg(long)]
    ablation: Option<String>,
    /// PICO variant
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Retrieval depth
    #[arg(long)]
    top_k: Option<usize>,
    /// Retrieval mode
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Sampling seed (overrides the config seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress wall-clock fields for byte-stable outputs
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a qa-jsonl dataset
    Ingest {
        dataset: PathBuf,
        /// Input format
        #[arg(long, default_value = "qa-jsonl")]
        format: String,
        /// Normalized output path (default: <dataset>.normalized.jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chunk, embed, and persist a guideline corpus
    Index {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config supplying the embedder binding
        #[arg(long)]
        config: Option<PathBuf>,
        /// hash-embed dimension when no config is given
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 500)]
        chunk_size: usize,
        #[arg(long, default_value_t = 50)]
        chunk_overlap: usize,
        /// Re-read the written index and re-check every invariant
        #[arg(long)]
        verify: bool,
        /// Write built_at = 0 so rebuilds are byte-identical
        #[arg(long)]
        deterministic: bool,
    },
    /// Answer one question end to end (judging skipped)
    Ask {
        question: String,
        #[arg(long)]
        config: PathBuf,
        /// Machine-readable record on stdout
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Judge a dataset under one configuration
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Report path (default report.json)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<usize>,
        /// Evaluate only a seed-driven sample of N queries
        #[arg(long)]
        sample: Option<usize>,
        /// Record a replay transcript next to the report
        #[arg(long)]
        record: bool,
        /// Print the report JSON instead of the table
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Run the five-configuration ablation matrix
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Report path (default ablation_report.json)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        record: bool,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Re-render the table for a stored report file
    Report { input: PathBuf },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn config_failure(e: ConfigError) -> Failure {
    let code = match &e {
        ConfigError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            EXIT_MISSING_INPUT
        }
        ConfigError::Index(IndexError::NotLoaded(_)) => EXIT_MISSING_INPUT,
        ConfigError::Index(IndexError::Io { source, .. })
            if source.kind() == std::io::ErrorKind::NotFound =>
        {
            EXIT_MISSING_INPUT
        }
        _ => EXIT_CONFIG,
    };
    Failure::new(code, e.to_string())
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let code = match &e {
        PipelineError::UnboundService(_) => EXIT_CONFIG,
        PipelineError::DatasetIo { source, .. }
            if source.kind() == std::io::ErrorKind::NotFound =>
        {
            EXIT_MISSING_INPUT
        }
        PipelineError::DatasetIo { .. } | PipelineError::DatasetRead { .. } => EXIT_VALIDATION,
        PipelineError::Backend(BackendError::Provider { .. }) => EXIT_BACKEND,
        PipelineError::Backend(_) => EXIT_CONFIG,
        PipelineError::Index(IndexError::NotLoaded(_)) => EXIT_MISSING_INPUT,
        _ => EXIT_VALIDATION,
    };
    Failure::new(code, e.to_string())
}

fn index_failure(e: IndexError) -> Failure {
    let code = match &e {
        IndexError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            EXIT_MISSING_INPUT
        }
        IndexError::NotLoaded(_) => EXIT_MISSING_INPUT,
        IndexError::Backend(BackendError::Provider { .. }) => EXIT_BACKEND,
        _ => EXIT_VALIDATION,
    };
    Failure::new(code, e.to_string())
}

fn report_failure(e: ReportError) -> Failure {
    let code = match &e {
        ReportError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            EXIT_MISSING_INPUT
        }
        _ => EXIT_VALIDATION,
    };
    Failure::new(code, e.to_string())
}

/// Parses the CLI from `std::env::args` and runs it; returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_VALIDATION;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest { dataset, format, out } => cmd_ingest(&dataset, &format, out.as_deref()),
        Command::Index {
            corpus,
            out,
            config,
            dim,
            chunk_size,
            chunk_overlap,
            verify,
            deterministic,
        } => cmd_index(
            &corpus,
            &out,
            config.as_deref(),
            dim,
            chunk_size,
            chunk_overlap,
            verify,
            deterministic,
        ),
        Command::Ask {
            question,
            config,
            json,
            overrides,
        } => cmd_ask(&question, &config, json, &overrides),
        Command::Run {
            dataset,
            config,
            out,
            parallel,
            sample,
            record,
            json,
            overrides,
        } => cmd_run(
            &dataset,
            &config,
            out.as_deref(),
            parallel,
            sample,
            record,
            json,
            &overrides,
        ),
        Command::Ablate {
            dataset,
            config,
            out,
            parallel,
            sample,
            record,
            json,
            overrides,
        } => cmd_ablate(
            &dataset,
            &config,
            out.as_deref(),
            parallel,
            sample,
            record,
            json,
            &overrides,
        ),
        Command::Report { input } => cmd_report(&input),
    }
}

fn parse_ablation_csv(csv: &str) -> Result<AblationFlags, Failure> {
    let mut flags = AblationFlags::none();
    for token in csv.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "no-classify" | "no-classification" => flags.no_classification = true,
            "no-expand" | "no-expansion" => flags.no_expansion = true,
            "no-pico" => flags.no_pico = true,
            other => {
                return Err(Failure::new(
                    EXIT_VALIDATION,
                    format!(
                        "unknown ablation \"{other}\" (expected no-classify, no-expand, no-pico)"
                    ),
                ))
            }
        }
    }
    Ok(flags)
}

fn apply_overrides(cfg: &mut RunConfig, o: &RunOverrides) -> Result<(), Failure> {
    if let Some(csv) = &o.ablation {
        cfg.ablation = parse_ablation_csv(csv)?;
    }
    if let Some(v) = o.variant {
        cfg.pico_variant = v.into();
    }
    if let Some(k) = o.top_k {
        if k < 1 {
            return Err(Failure::new(EXIT_VALIDATION, "--top-k must be >= 1"));
        }
        cfg.top_k = k;
    }
    if let Some(m) = o.mode {
        cfg.retrieval_mode = m.into();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if o.deterministic {
        cfg.deterministic = true;
    }
    Ok(())
}

/// Seed-driven sampling that preserves dataset order.
fn sample_queries(queries: Vec<UserQuery>, sample: Option<usize>, seed: u64) -> Vec<UserQuery> {
    let Some(n) = sample else {
        return queries;
    };
    if n >= queries.len() {
        return queries;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, queries.len(), n).into_vec();
    picked.sort_unstable();
    let mut keep: Vec<UserQuery> = Vec::with_capacity(n);
    for (i, q) in queries.into_iter().enumerate() {
        if picked.binary_search(&i).is_ok() {
            keep.push(q);
        }
    }
    keep
}

fn cmd_ingest(dataset: &Path, format: &str, out: Option<&Path>) -> Result<(), Failure> {
    if format != "qa-jsonl" {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("unsupported format \"{format}\" (only qa-jsonl)"),
        ));
    }
    let file = std::fs::File::open(dataset).map_err(|e| {
        let code = if e.kind() == std::io::ErrorKind::NotFound {
            EXIT_MISSING_INPUT
        } else {
            EXIT_VALIDATION
        };
        Failure::new(code, format!("{}: {e}", dataset.display()))
    })?;
    let mut errors: Vec<String> = Vec::new();
    let mut normalized_lines: Vec<String> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    let mut count = 0usize;
    let mut missing_gold = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::new(EXIT_VALIDATION, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match normalize_record(&line, &mut seen_ids) {
            Ok((normalized, has_gold)) => {
                count += 1;
                if !has_gold {
                    missing_gold += 1;
                }
                normalized_lines.push(normalized);
            }
            Err(message) => errors.push(format!("line {}: {message}", i + 1)),
        }
    }
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("{e}");
        }
        return Err(Failure::new(
            EXIT_VALIDATION,
            format!("{} invalid record(s) in {}", errors.len(), dataset.display()),
        ));
    }
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = dataset.as_os_str().to_owned();
        p.push(".normalized.jsonl");
        PathBuf::from(p)
    });
    let mut body = normalized_lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(&out_path, body)
        .map_err(|e| Failure::new(EXIT_VALIDATION, format!("{}: {e}", out_path.display())))?;
    println!("{count} queries, {missing_gold} missing gold");
    println!("normalized dataset written to {}", out_path.display());
    Ok(())
}

/// Validates one dataset record and returns its normalized JSON line;
/// unknown fields are preserved.
fn normalize_record(
    line: &str,
    seen_ids: &mut std::collections::HashSet<String>,
) -> Result<(String, bool), String> {
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("record is not a JSON object")?;
    let id = obj
        .get("id")
        .and_then(serde_json::Value::as_str)
        .ok_or("missing \"id\"")?
        .to_string();
    if id.trim().is_empty() {
        return Err("empty \"id\"".to_string());
    }
    if !seen_ids.insert(id.clone()) {
        return Err(format!("duplicate id \"{id}\""));
    }
    let question = obj
        .get("question")
        .and_then(serde_json::Value::as_str)
        .ok_or("missing \"question\"")?;
    let question = normalize_text(question);
    if question.is_empty() {
        return Err("empty \"question\"".to_string());
    }
    obj.insert("question".into(), serde_json::Value::String(question));
    let mut has_gold = false;
    if let Some(gold) = obj.get("gold_answer").and_then(serde_json::Value::as_str) {
        let gold = normalize_text(gold);
        if gold.is_empty() {
            obj.remove("gold_answer");
        } else {
            has_gold = true;
            obj.insert("gold_answer".into(), serde_json::Value::String(gold));
        }
    }
    Ok((v.to_string(), has_gold))
}

#[allow(clippy::too_many_arguments)]
fn cmd_index(
    corpus: &Path,
    out: &Path,
    config: Option<&Path>,
    dim: usize,
    chunk_size: usize,
    chunk_overlap: usize,
    verify: bool,
    deterministic: bool,
) -> Result<(), Failure> {
    let (registry, embedder_id) = match config {
        Some(path) => {
            let file = FileConfig::load(path).map_err(config_failure)?;
            let (registry, bindings) = file.build_registry(None).map_err(config_failure)?;
            let embedder = bindings
                .get(&crate::types::Stage::Embedder)
                .cloned()
                .ok_or_else(|| Failure::new(EXIT_CONFIG, "config binds no embedder"))?;
            (registry, embedder)
        }
        None => {
            let mut registry = Registry::new();
            registry
                .register("hash-embed", &BackendSpec::HashEmbed { dim })
                .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
            (registry, "hash-embed".to_string())
        }
    };
    let docs = read_corpus(corpus).map_err(index_failure)?;
    let params = BuildParams {
        chunk_size,
        chunk_overlap,
        deterministic,
    };
    let index = build_index(docs, &registry, &embedder_id, &params).map_err(index_failure)?;
    index.save(out).map_err(index_failure)?;
    let h = index.header();
    println!(
        "indexed {} chunks, dim {}, embedder \"{}\", chunk_size {}, overlap {}",
        index.len(),
        h.dimension,
        h.embedder_id,
        h.chunk_size,
        h.chunk_overlap
    );
    if verify {
        let reloaded = VectorIndex::load(out).map_err(index_failure)?;
        if reloaded != index {
            return Err(Failure::new(
                EXIT_VALIDATION,
                "verification failed: reloaded index differs from the built index",
            ));
        }
        println!("verify ok ({} chunks)", reloaded.len());
    }
    Ok(())
}

fn cmd_ask(
    question: &str,
    config_path: &Path,
    json: bool,
    overrides: &RunOverrides,
) -> Result<(), Failure> {
    let loaded = config::load_run(config_path, None).map_err(config_failure)?;
    let mut cfg = loaded.run;
    apply_overrides(&mut cfg, overrides)?;
    let query = UserQuery::new("ask", question, None, None, Some(&cfg.language))
        .map_err(|e| Failure::new(EXIT_VALIDATION, e.to_string()))?;
    validate_services(&cfg, &loaded.services, false).map_err(pipeline_failure)?;
    let record = run_query(&query, &cfg, &loaded.services, false).map_err(pipeline_failure)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&record).expect("record serializes")
        );
    } else {
        print!("{}", render_ask_transcript(&record));
    }
    Ok(())
}

/// Human-readable single-question transcript; golden-file stable for
/// scripted configurations.
pub fn render_ask_transcript(record: &QueryRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("question: {}\n", record.query_text));
    if let Some(d) = &record.discipline {
        out.push_str(&format!("discipline: {d}\n"));
    }
    if let Some(e) = &record.expanded {
        out.push_str(&format!("expanded: {}\n", e.text));
    }
    if let Some(f) = &record.frame {
        out.push_str(&format!("pico [{}]:\n", f.variant));
        for (element, value) in f.present_fields() {
            let letter = match element {
                crate::types::MatchedElement::Population => "P",
                crate::types::MatchedElement::Intervention => "I",
                crate::types::MatchedElement::Comparison => "C",
                crate::types::MatchedElement::Outcome => "O",
                crate::types::MatchedElement::Query => "Q",
            };
            out.push_str(&format!("  {letter}: {value}\n"));
        }
    }
    out.push_str("evidence:\n");
    if record.hits.is_empty() {
        out.push_str("  (none)\n");
    }
    for (i, h) in record.hits.iter().enumerate() {
        out.push_str(&format!(
            "  [{}] {}#{} score={:.4} matched={}\n",
            i + 1,
            h.doc_id,
            h.chunk_id,
            h.score,
            match h.matched_element {
                crate::types::MatchedElement::Population => "population",
                crate::types::MatchedElement::Intervention => "intervention",
                crate::types::MatchedElement::Comparison => "comparison",
                crate::types::MatchedElement::Outcome => "outcome",
                crate::types::MatchedElement::Query => "query",
            }
        ));
        out.push_str(&format!("      {}\n", h.text));
    }
    out.push_str("answer:\n");
    out.push_str(&record.answer.text);
    if !record.answer.text.ends_with('\n') {
        out.push('\n');
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    dataset: &Path,
    config_path: &Path,
    out: Option<&Path>,
    parallel: Option<usize>,
    sample: Option<usize>,
    record: bool,
    json: bool,
    overrides: &RunOverrides,
) -> Result<(), Failure> {
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("report.json"));
    let record_path = record.then(|| replay_path(&out_path));
    let loaded = config::load_run(config_path, record_path.as_deref()).map_err(config_failure)?;
    let mut cfg = loaded.run;
    apply_overrides(&mut cfg, overrides)?;
    let queries = load_dataset(dataset).map_err(pipeline_failure)?;
    let queries = sample_queries(queries, sample, cfg.seed);
    let parallelism = parallel.unwrap_or(loaded.parallelism);
    let report =
        run_batch(&queries, &cfg, &loaded.services, parallelism).map_err(pipeline_failure)?;
    let stored = StoredReport::Single(Box::new(report));
    write_report(&out_path, &stored).map_err(report_failure)?;
    if json {
        print!("{}", stored.to_json());
    } else {
        print!("{}", stored.render().map_err(report_failure)?);
        println!("report written to {}", out_path.display());
    }
    if let Some(p) = record_path {
        println!("replay transcript written to {}", p.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    dataset: &Path,
    config_path: &Path,
    out: Option<&Path>,
    parallel: Option<usize>,
    sample: Option<usize>,
    record: bool,
    json: bool,
    overrides: &RunOverrides,
) -> Result<(), Failure> {
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("ablation_report.json"));
    let record_path = record.then(|| replay_path(&out_path));
    let loaded = config::load_run(config_path, record_path.as_deref()).map_err(config_failure)?;
    let mut cfg = loaded.run;
    apply_overrides(&mut cfg, overrides)?;
    let queries = load_dataset(dataset).map_err(pipeline_failure)?;
    let queries = sample_queries(queries, sample, cfg.seed);
    let parallelism = parallel.unwrap_or(loaded.parallelism);
    let reports = ablation_matrix(&queries, &cfg, &loaded.services, parallelism)
        .map_err(pipeline_failure)?;
    let stored = StoredReport::Matrix(reports);
    write_report(&out_path, &stored).map_err(report_failure)?;
    if json {
        print!("{}", stored.to_json());
    } else {
        print!("{}", stored.render().map_err(report_failure)?);
        println!("report written to {}", out_path.display());
    }
    if let Some(p) = record_path {
        println!("replay transcript written to {}", p.display());
    }
    Ok(())
}

fn replay_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    name.push_str(".replay.jsonl");
    out.with_file_name(name)
}

fn cmd_report(input: &Path) -> Result<(), Failure> {
    let stored = load_report(input).map_err(report_failure)?;
    print!("{}", stored.render().map_err(report_failure)?);
    Ok(())
}

/// Exposed for tests: a canonical [`BTreeMap`] of stage bindings.
pub fn bindings_of(pairs: &[(crate::types::Stage, &str)]) -> BTreeMap<crate::types::Stage, String> {
    pairs
        .iter()
        .map(|(s, id)| (*s, id.to_string()))
        .collect()
}
