//! Declarative run configuration files (TOML): backend descriptors, stage
//! bindings, template and taxonomy overrides, index and cache paths,
//! ablation flags, and the seed.
//!
//! A stage binds to the backend named in `[bindings]`, or, when that table
//! omits it, to a backend registered under the stage's own name
//! (`classifier`, `expander`, `extractor`, `generator`, `judge_a`,
//! `judge_b`, `embedder`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::backend::{cache::ResponseCache, BackendError, BackendSpec, Registry};
use crate::classify::{ClassifyError, Taxonomy};
use crate::index::{IndexError, VectorIndex};
use crate::pipeline::Services;
use crate::rewrite::DEFAULT_FORBIDDEN_MARKERS;
use crate::template::{TemplateError, TemplateKind, TemplateSet};
use crate::types::{AblationFlags, PicoVariant, RetrievalMode, RunConfig, Stage};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config: unknown template kind \"{0}\"")]
    UnknownTemplateKind(String),
    #[error("config: no index path set (required for ask/run/ablate)")]
    MissingIndex,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Taxonomy(#[from] ClassifyError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

fn default_language() -> String {
    "zh".to_string()
}

fn default_language_threshold() -> f64 {
    crate::evaluate::DEFAULT_LANGUAGE_THRESHOLD
}

fn default_top_k() -> usize {
    5
}

fn default_retrieval_mode() -> RetrievalMode {
    RetrievalMode::PerElementMax
}

fn default_pico_variant() -> PicoVariant {
    PicoVariant::Pico
}

fn default_evidence_budget() -> usize {
    6000
}

fn default_parallelism() -> usize {
    1
}

/// The on-disk configuration document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default = "default_language_threshold")]
    pub language_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_retrieval_mode")]
    pub retrieval_mode: RetrievalMode,
    #[serde(default = "default_pico_variant")]
    pub pico_variant: PicoVariant,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default = "default_evidence_budget")]
    pub evidence_budget: usize,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Forbidden output markers; defaults to the built-in list.
    #[serde(default)]
    pub markers: Option<Vec<String>>,
    /// Template overrides by kind name.
    #[serde(default)]
    pub templates: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub bindings: BTreeMap<Stage, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: FileConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        // relative paths resolve against the config file's directory
        if let Some(dir) = path.parent() {
            let anchor = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            if let Some(p) = cfg.index.as_mut() {
                anchor(p);
            }
            if let Some(p) = cfg.taxonomy.as_mut() {
                anchor(p);
            }
            if let Some(p) = cfg.cache.as_mut() {
                anchor(p);
            }
            for p in cfg.templates.values_mut() {
                anchor(p);
            }
            for spec in cfg.backends.values_mut() {
                if let BackendSpec::Replay { path, .. } = spec {
                    anchor(path);
                }
            }
        }
        Ok(cfg)
    }

    /// Builds the registry (with cache attached when configured) and the
    /// resolved stage bindings.
    pub fn build_registry(
        &self,
        cache_override: Option<&Path>,
    ) -> Result<(Registry, BTreeMap<Stage, String>), ConfigError> {
        let mut registry = Registry::new();
        for (id, spec) in &self.backends {
            registry.register(id, spec)?;
        }
        let cache_path = cache_override.map(Path::to_path_buf).or_else(|| self.cache.clone());
        if let Some(path) = cache_path {
            registry.attach_cache(Arc::new(ResponseCache::open(&path)?));
        }
        let mut bindings = self.bindings.clone();
        for stage in Stage::ALL {
            if bindings.contains_key(&stage) {
                continue;
            }
            let name = stage.name();
            if registry.has_chat(name) || registry.has_embed(name) {
                bindings.insert(stage, name.to_string());
            }
        }
        Ok((registry, bindings))
    }

    pub fn build_templates(&self) -> Result<TemplateSet, ConfigError> {
        let mut set = TemplateSet::defaults();
        for (name, path) in &self.templates {
            let kind = TemplateKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| ConfigError::UnknownTemplateKind(name.clone()))?;
            set.override_from_file(kind, path)?;
        }
        Ok(set)
    }

    pub fn build_taxonomy(&self) -> Result<Taxonomy, ConfigError> {
        Ok(match &self.taxonomy {
            Some(path) => Taxonomy::load(path)?,
            None => Taxonomy::default_taxonomy(),
        })
    }

    pub fn markers(&self) -> Vec<String> {
        self.markers.clone().unwrap_or_else(|| {
            DEFAULT_FORBIDDEN_MARKERS.iter().map(|s| s.to_string()).collect()
        })
    }

    /// The [`RunConfig`] snapshot with the given resolved bindings.
    pub fn run_config(&self, bindings: BTreeMap<Stage, String>) -> RunConfig {
        RunConfig {
            ablation: self.ablation,
            pico_variant: self.pico_variant,
            top_k: self.top_k,
            retrieval_mode: self.retrieval_mode,
            backends: bindings,
            language: self.language.clone(),
            language_threshold: self.language_threshold,
            evidence_budget: self.evidence_budget,
            seed: self.seed,
            deterministic: self.deterministic,
        }
    }
}

/// Everything a pipeline command needs, loaded from one config file.
pub struct LoadedRun {
    pub run: RunConfig,
    pub services: Services,
    pub parallelism: usize,
}

/// Loads config, registry, templates, taxonomy, and the index.
/// `cache_override` redirects the response cache (the `--record` path).
pub fn load_run(path: &Path, cache_override: Option<&Path>) -> Result<LoadedRun, ConfigError> {
    let file = FileConfig::load(path)?;
    let (registry, bindings) = file.build_registry(cache_override)?;
    let templates = file.build_templates()?;
    let taxonomy = file.build_taxonomy()?;
    let index_path = file.index.as_ref().ok_or(ConfigError::MissingIndex)?;
    let index = VectorIndex::load(index_path)?;
    let run = file.run_config(bindings);
    Ok(LoadedRun {
        run,
        services: Services {
            registry: Arc::new(registry),
            templates: Arc::new(templates),
            taxonomy: Arc::new(taxonomy),
            index: Arc::new(index),
            markers: file.markers(),
        },
        parallelism: file.parallelism.max(1),
    })
}
