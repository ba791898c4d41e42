//! Pipeline configuration file: JSON with `${VAR}` interpolation. Relative
//! paths resolve against the directory holding the config file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use funcgraph_core::backend::{HttpBackend, HttpBackendConfig, ModelBackend, ModelClient, ModelHint, ReplayBackend, RetryPolicy};
use funcgraph_core::canonical;
use funcgraph_core::description::DescriptionConfig;
use funcgraph_core::detection::{DetectionConfig, Detector, FixtureDetector, HttpDetector};
use funcgraph_core::eval::embedding::{EmbeddingBackend, HttpEmbedding, ToyEmbedding};
use funcgraph_core::eval::EvalConfig;
use funcgraph_core::fusion::FusionConfig;
use funcgraph_core::prompts::PromptSet;
use funcgraph_core::reasoning::ReasoningConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("environment variable {0} referenced by the config is not set")]
    MissingVar(String),
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorBackendConfig {
    Fixture { dir: PathBuf },
    Http { url: String },
}

fn default_timeout() -> u64 {
    120
}

fn default_in_flight() -> usize {
    funcgraph_core::backend::DEFAULT_MAX_IN_FLIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelBackendConfig {
    Replay {
        dir: PathBuf,
    },
    Http {
        base_url: String,
        #[serde(default)]
        api_key: Option<String>,
        llm_model: String,
        vlm_model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingBackendConfig {
    Toy,
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key: Option<String>,
        dimension: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub detector: DetectorBackendConfig,
    pub model: ModelBackendConfig,
    #[serde(default = "toy")]
    pub embeddings: EmbeddingBackendConfig,
    /// Space used to retrieve relation texts; defaults to `embeddings`.
    #[serde(default)]
    pub relation_embeddings: Option<EmbeddingBackendConfig>,
}

fn toy() -> EmbeddingBackendConfig {
    EmbeddingBackendConfig::Toy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    pub cors_origins: Vec<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
            cors_origins: vec!["http://localhost:5173".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenes: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub backends: BackendsConfig,
    /// Optional response cache shared across runs.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Overrides for the built-in prompt templates.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    /// Ground-truth graphs, one `<scene>.json` per scene. Also where the
    /// annotation API stores its writes.
    #[serde(default)]
    pub gt_dir: Option<PathBuf>,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub description: DescriptionConfig,
    #[serde(default)]
    pub reasoning: ReasoningConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

/// Replaces `${NAME}` in every string of `value` using `lookup`.
pub fn interpolate(value: &mut Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    match value {
        Value::String(s) => {
            *s = interpolate_str(s, lookup)?;
        }
        Value::Array(items) => {
            for v in items {
                interpolate(v, lookup)?;
            }
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                interpolate(v, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn interpolate_str(s: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            return Err(ConfigError::Parse(format!("unterminated ${{ in {s:?}")));
        };
        let name = &after[..end];
        out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingVar(name.to_owned()))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_with_base(&text, &base, &|k| std::env::var(k).ok())
    }

    pub fn from_str_with_base(
        text: &str,
        base: &Path,
        lookup: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut raw: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        interpolate(&mut raw, lookup)?;
        let mut cfg: PipelineConfig = serde_json::from_value(raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.scenes.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        for p in [&mut self.cache_dir, &mut self.prompts_dir, &mut self.gt_dir].into_iter().flatten() {
            fix(p);
        }
        if let DetectorBackendConfig::Fixture { dir } = &mut self.backends.detector {
            fix(dir);
        }
        if let ModelBackendConfig::Replay { dir } = &mut self.backends.model {
            fix(dir);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scenes.is_empty() {
            return Err(ConfigError::Invalid("no scenes listed".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.scenes {
            let id = scene_id_of(s);
            if !ids.insert(id.clone()) {
                return Err(ConfigError::Invalid(format!("scene id {id} listed twice")));
            }
        }
        self.fusion.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.description.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.node_ks.iter().chain(&self.eval.triplet_ks).any(|&k| k == 0) {
            return Err(ConfigError::Invalid("recall K values must be at least 1".into()));
        }
        Ok(())
    }

    /// Directories a pipeline run reads from must exist before it starts.
    pub fn check_inputs(&self) -> Result<(), ConfigError> {
        for s in &self.scenes {
            if !s.is_dir() {
                return Err(ConfigError::MissingPath {
                    what: "scene directory",
                    path: s.clone(),
                });
            }
        }
        if let DetectorBackendConfig::Fixture { dir } = &self.backends.detector {
            if !dir.is_dir() {
                return Err(ConfigError::MissingPath {
                    what: "detector fixture directory",
                    path: dir.clone(),
                });
            }
        }
        if let ModelBackendConfig::Replay { dir } = &self.backends.model {
            if !dir.is_dir() {
                return Err(ConfigError::MissingPath {
                    what: "model replay directory",
                    path: dir.clone(),
                });
            }
        }
        if let Some(p) = &self.prompts_dir {
            if !p.is_dir() {
                return Err(ConfigError::MissingPath {
                    what: "prompts directory",
                    path: p.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.scenes.iter().map(|p| scene_id_of(p)).collect()
    }

    pub fn scene_path(&self, id: &str) -> Option<&Path> {
        self.scenes.iter().find(|p| scene_id_of(p) == id).map(PathBuf::as_path)
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.gt_dir.clone().unwrap_or_else(|| self.output_dir.join("gt"))
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::from_dir(dir).map_err(|e| ConfigError::Invalid(format!("prompts: {e}"))),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn detector(&self) -> Box<dyn Detector> {
        match &self.backends.detector {
            DetectorBackendConfig::Fixture { dir } => Box::new(FixtureDetector::new(dir)),
            DetectorBackendConfig::Http { url } => Box::new(HttpDetector::new(url.clone())),
        }
    }

    pub fn model_backend(&self) -> Arc<dyn ModelBackend> {
        match &self.backends.model {
            ModelBackendConfig::Replay { dir } => Arc::new(ReplayBackend::new(dir)),
            ModelBackendConfig::Http {
                base_url,
                api_key,
                llm_model,
                vlm_model,
                timeout_secs,
                ..
            } => {
                let models = HashMap::from([(ModelHint::Llm, llm_model.clone()), (ModelHint::Vlm, vlm_model.clone())]);
                Arc::new(HttpBackend::new(HttpBackendConfig {
                    base_url: base_url.clone(),
                    api_key: api_key.clone(),
                    models,
                    timeout: Duration::from_secs(*timeout_secs),
                    retry: RetryPolicy::default(),
                }))
            }
        }
    }

    pub fn model_client(&self) -> ModelClient {
        let mut client = ModelClient::new(self.model_backend());
        if let ModelBackendConfig::Http { max_in_flight, .. } = &self.backends.model {
            client = client.with_max_in_flight(*max_in_flight);
        }
        if let Some(dir) = &self.cache_dir {
            client = client.with_cache_dir(dir);
        }
        client
    }

    pub fn label_embeddings(&self) -> Box<dyn EmbeddingBackend> {
        build_embedding(&self.backends.embeddings)
    }

    pub fn relation_embeddings(&self) -> Box<dyn EmbeddingBackend> {
        build_embedding(self.backends.relation_embeddings.as_ref().unwrap_or(&self.backends.embeddings))
    }

    /// Digest of everything that shapes the outputs: stage settings,
    /// backend identities, prompts and scene ids. Filesystem locations and
    /// secrets are left out so the digest is stable across machines.
    pub fn digest(&self) -> Result<String, ConfigError> {
        #[derive(Serialize)]
        struct Semantic<'a> {
            scenes: Vec<String>,
            backends: std::collections::BTreeMap<&'static str, String>,
            prompts: String,
            detection: &'a DetectionConfig,
            fusion: &'a FusionConfig,
            description: &'a DescriptionConfig,
            reasoning: &'a ReasoningConfig,
        }
        Ok(canonical::digest_of(&Semantic {
            scenes: self.scene_ids(),
            backends: self.backend_ids(),
            prompts: self.prompts()?.digest(),
            detection: &self.detection,
            fusion: &self.fusion,
            description: &self.description,
            reasoning: &self.reasoning,
        }))
    }

    pub fn backend_ids(&self) -> std::collections::BTreeMap<&'static str, String> {
        let model = match &self.backends.model {
            ModelBackendConfig::Replay { .. } => "replay".to_owned(),
            ModelBackendConfig::Http { llm_model, vlm_model, .. } => format!("http:llm={llm_model},vlm={vlm_model}"),
        };
        std::collections::BTreeMap::from([
            ("detector", self.detector().id()),
            ("model", model),
            ("embeddings", self.label_embeddings().id()),
        ])
    }
}

fn build_embedding(cfg: &EmbeddingBackendConfig) -> Box<dyn EmbeddingBackend> {
    match cfg {
        EmbeddingBackendConfig::Toy => Box::new(ToyEmbedding),
        EmbeddingBackendConfig::Http {
            base_url,
            model,
            api_key,
            dimension,
        } => Box::new(HttpEmbedding::new(base_url.clone(), model.clone(), api_key.clone(), *dimension)),
    }
}

pub fn scene_id_of(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_owned()
}
