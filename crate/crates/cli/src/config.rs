//! Pipeline configuration file and the provider factory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rapo_core::embedding::{CachedEmbedder, Embedder, HashEmbedder, MOCK_DIMENSION, MOCK_HASH_SEED};
use rapo_core::graph::{DEFAULT_K_MOD, DEFAULT_K_SCENE};
use rapo_core::providers::http::{HttpChatProvider, HttpProviderConfig, HttpVlm};
use rapo_core::providers::{
    AlignmentVerifier, ConcisionVerifier, LlmProvider, MockLlm, MockT2v, MockVlm, MotionProxyAssessor, ProviderSet,
    RetryPolicy, TaskAssessor, Verifier,
};
use rapo_core::sspo::LoopConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default, rename = "loop")]
    pub sspo: LoopConfig,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub retry: RetryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Training captions the relation graph is built from.
    pub corpus: Option<String>,
    /// User prompts to optimize.
    pub prompts: Option<String>,
    pub graph_file: Option<String>,
    #[serde(default = "default_run_dir")]
    pub run_dir: String,
    pub merge_examples: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            prompts: None,
            graph_file: None,
            run_dir: default_run_dir(),
            merge_examples: None,
        }
    }
}

fn default_run_dir() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default = "default_k_scene")]
    pub k_scene: usize,
    #[serde(default = "default_k_mod")]
    pub k_mod: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_scene: DEFAULT_K_SCENE,
            k_mod: DEFAULT_K_MOD,
        }
    }
}

fn default_k_scene() -> usize {
    DEFAULT_K_SCENE
}

fn default_k_mod() -> usize {
    DEFAULT_K_MOD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_delay_ms")]
    pub base_delay_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: default_attempts(),
            base_delay_ms: default_delay_ms(),
        }
    }
}

fn default_attempts() -> u32 {
    3
}

fn default_delay_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSpec {
    pub name: Option<String>,
    pub endpoint: String,
    pub model: String,
    pub auth_env: Option<String>,
    pub timeout_secs: Option<u64>,
}

impl HttpSpec {
    fn build(&self, role: &str) -> Result<HttpChatProvider, ConfigError> {
        let name = self.name.clone().unwrap_or_else(|| format!("http-{role}"));
        HttpChatProvider::new(name, HttpProviderConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            auth_env: self.auth_env.clone(),
            timeout_secs: self.timeout_secs.unwrap_or(120),
        })
        .map_err(|e| ConfigError::Invalid(format!("providers.{role}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmSpec {
    Mock { name: Option<String> },
    Http(HttpSpec),
}

impl Default for LlmSpec {
    fn default() -> Self {
        LlmSpec::Mock { name: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Mock { dimension: Option<usize>, hash_seed: Option<u64> },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Mock {
            dimension: None,
            hash_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum T2vSpec {
    Mock { capacity: Option<usize> },
}

impl Default for T2vSpec {
    fn default() -> Self {
        T2vSpec::Mock { capacity: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VlmSpec {
    #[default]
    Mock,
    Http(HttpSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifierSpec {
    /// `name` selects the mock: `alignment` or `concision`.
    Mock { name: String, budget: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Mock { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    #[serde(default)]
    pub llm: LlmSpec,
    #[serde(default)]
    pub llm_refactor: LlmSpec,
    #[serde(default)]
    pub llm_discriminator: LlmSpec,
    #[serde(default)]
    pub llm_rewriter: LlmSpec,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub t2v: T2vSpec,
    #[serde(default)]
    pub vlm: VlmSpec,
    #[serde(default = "default_verifiers")]
    pub verifiers: Vec<VerifierSpec>,
    #[serde(default)]
    pub task_assessor: Option<TaskSpec>,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            llm: LlmSpec::default(),
            llm_refactor: LlmSpec::default(),
            llm_discriminator: LlmSpec::default(),
            llm_rewriter: LlmSpec::default(),
            embedder: EmbedderSpec::default(),
            t2v: T2vSpec::default(),
            vlm: VlmSpec::default(),
            verifiers: default_verifiers(),
            task_assessor: None,
        }
    }
}

fn default_verifiers() -> Vec<VerifierSpec> {
    ["alignment", "concision"]
        .into_iter()
        .map(|n| VerifierSpec::Mock {
            name: n.into(),
            budget: None,
        })
        .collect()
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// A parsed config with paths resolved against the config file's directory.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub file: PipelineConfig,
    pub base: PathBuf,
    pub run_dir: PathBuf,
    pub workers: usize,
}

impl ResolvedConfig {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.file.paths.corpus.as_deref().map(|p| self.resolve(p))
    }

    pub fn prompts_path(&self) -> Option<PathBuf> {
        self.file.paths.prompts.as_deref().map(|p| self.resolve(p))
    }

    pub fn graph_path(&self) -> PathBuf {
        match &self.file.paths.graph_file {
            Some(p) => self.resolve(p),
            None => self.run_dir.join("graph.rgf"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.file.seed
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.file.retry.max_attempts,
            base_delay: Duration::from_millis(self.file.retry.base_delay_ms),
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            seed: Some(self.file.seed),
            ..self.file.sspo.clone()
        }
    }

    /// The run-defining part of the config: everything except where the run lives.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut file = self.file.clone();
        file.paths.run_dir = String::new();
        file.workers = None;
        serde_json::to_value(file).expect("config serializes")
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<PipelineConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ResolvedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut file = parse_config(&text, path)?;
    if let Some(seed) = overrides.seed {
        file.seed = seed;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let run_dir = overrides
        .run_dir
        .clone()
        .unwrap_or_else(|| base.join(&file.paths.run_dir));
    let workers = overrides.workers.or(file.workers).unwrap_or(1);
    let cfg = ResolvedConfig {
        file,
        base,
        run_dir,
        workers,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ResolvedConfig) -> Result<(), ConfigError> {
    if cfg.workers == 0 {
        return Err(ConfigError::Invalid("workers must be at least 1".into()));
    }
    if cfg.file.retry.max_attempts == 0 {
        return Err(ConfigError::Invalid("retry.max_attempts must be at least 1".into()));
    }
    cfg.file
        .sspo
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let p = &cfg.file.providers;
    if p.verifiers.is_empty() {
        return Err(ConfigError::Invalid("providers.verifiers needs at least one verifier".into()));
    }
    let mut names = Vec::new();
    for v in &p.verifiers {
        let VerifierSpec::Mock { name, .. } = v;
        if !matches!(name.as_str(), "alignment" | "concision") {
            return Err(ConfigError::Invalid(format!("unknown mock verifier {name:?}")));
        }
        if names.contains(&name) {
            return Err(ConfigError::Invalid(format!("verifier {name:?} listed twice")));
        }
        names.push(name);
    }
    if let Some(TaskSpec::Mock { name }) = &p.task_assessor {
        if name != "motion-proxy" {
            return Err(ConfigError::Invalid(format!("unknown mock task assessor {name:?}")));
        }
    }
    if let EmbedderSpec::Mock { dimension: Some(0), .. } = p.embedder {
        return Err(ConfigError::Invalid("embedder dimension must be positive".into()));
    }
    Ok(())
}

fn build_llm(spec: &LlmSpec, role: &str) -> Result<Arc<dyn LlmProvider>, ConfigError> {
    Ok(match spec {
        LlmSpec::Mock { name: None } => Arc::new(MockLlm::default()),
        LlmSpec::Mock { name: Some(n) } => Arc::new(MockLlm::named(n.clone())),
        LlmSpec::Http(h) => Arc::new(h.build(role)?),
    })
}

/// Instantiates every provider role. Nothing is contacted here.
pub fn build_providers(cfg: &ResolvedConfig) -> Result<ProviderSet, ConfigError> {
    let p = &cfg.file.providers;
    let EmbedderSpec::Mock { dimension, hash_seed } = p.embedder;
    let embedder: Arc<dyn Embedder> = Arc::new(CachedEmbedder::new(HashEmbedder::new(
        dimension.unwrap_or(MOCK_DIMENSION),
        hash_seed.unwrap_or(MOCK_HASH_SEED),
    )));
    let T2vSpec::Mock { capacity } = p.t2v;
    let t2v = Arc::new(capacity.map(|capacity| MockT2v { capacity }).unwrap_or_default());
    let vlm: Arc<dyn rapo_core::providers::VlmProvider> = match &p.vlm {
        VlmSpec::Mock => Arc::new(MockVlm),
        VlmSpec::Http(h) => Arc::new(HttpVlm::new(h.build("vlm")?, Some(cfg.seed()))),
    };
    let verifiers = p
        .verifiers
        .iter()
        .map(|VerifierSpec::Mock { name, budget }| -> Arc<dyn Verifier> {
            match name.as_str() {
                "alignment" => Arc::new(AlignmentVerifier),
                _ => Arc::new(budget.map(|budget| ConcisionVerifier { budget }).unwrap_or_default()),
            }
        })
        .collect();
    let task_assessor = p
        .task_assessor
        .as_ref()
        .map(|TaskSpec::Mock { .. }| Arc::new(MotionProxyAssessor) as Arc<dyn TaskAssessor>);
    Ok(ProviderSet {
        llm: build_llm(&p.llm, "llm")?,
        llm_refactor: build_llm(&p.llm_refactor, "llm_refactor")?,
        llm_discriminator: build_llm(&p.llm_discriminator, "llm_discriminator")?,
        llm_rewriter: build_llm(&p.llm_rewriter, "llm_rewriter")?,
        embedder,
        t2v,
        vlm,
        verifiers,
        task_assessor,
    })
}
