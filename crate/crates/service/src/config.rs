//! Service configuration: a TOML file overlaid with environment variables.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use habitus_core::gateway::{
    CacheMode, Gateway, HttpProvider, MockProvider, ProviderSettings, ReplayCache, RetryPolicy, TokenBucket,
    ENV_API_KEY, ENV_BASE_URL, ENV_MODEL,
};
use habitus_core::generation::{default_paraphrase_examples, GenerationSettings, ParaphraseExample};
use habitus_core::induction::InductionConfig;
use habitus_core::retrieval::{Embedder, HashEmbedder, HttpEmbedder, HttpEmbedderSettings};

pub const ENV_BIND: &str = "HABITUS_BIND";
pub const ENV_DATA_DIR: &str = "HABITUS_DATA_DIR";
pub const ENV_PROVIDER: &str = "HABITUS_PROVIDER";
pub const ENV_MOCK_SEED: &str = "HABITUS_MOCK_SEED";
pub const ENV_EMBEDDER_URL: &str = "HABITUS_EMBEDDER_URL";
pub const ENV_EMBEDDER_DIM: &str = "HABITUS_EMBEDDER_DIM";
pub const ENV_CACHE_PATH: &str = "HABITUS_CACHE_PATH";
pub const ENV_CACHE_MODE: &str = "HABITUS_CACHE_MODE";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// HTTP when an API key or base URL is configured, otherwise the mock.
    #[default]
    Auto,
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Seed of the mock provider.
    pub seed: u64,
    pub base_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    /// Sustained request rate; unlimited when absent.
    pub requests_per_second: Option<f64>,
    pub burst: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Auto,
            seed: 0,
            base_url: None,
            api_key: None,
            timeout_secs: 120,
            max_attempts: RetryPolicy::default().max_attempts,
            requests_per_second: None,
            burst: 4,
        }
    }
}

impl ProviderConfig {
    pub fn resolved_kind(&self) -> ProviderKind {
        match self.kind {
            ProviderKind::Auto if self.api_key.is_some() || self.base_url.is_some() => ProviderKind::Http,
            ProviderKind::Auto => ProviderKind::Mock,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub path: Option<PathBuf>,
    /// Defaults to `record` when a path is set.
    pub mode: Option<CacheMode>,
}

impl CacheConfig {
    pub fn effective_mode(&self) -> CacheMode {
        self.mode
            .unwrap_or(if self.path.is_some() { CacheMode::Record } else { CacheMode::Off })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http(HttpEmbedderSettings),
}

fn default_dimension() -> usize {
    HashEmbedder::DEFAULT_DIMENSION
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dimension: default_dimension() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Allowed browser origins; any origin when empty.
    pub cors_origins: Vec<String>,
    pub max_sessions: usize,
    /// Static files served at `/` (the web client), if any.
    pub ui_dir: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub cache: CacheConfig,
    pub embedder: EmbedderConfig,
    pub generation: GenerationSettings,
    pub induction: InductionConfig,
    /// JSON file with paraphrase examples replacing the bundled ones.
    pub paraphrase_examples: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".to_owned(),
            data_dir: PathBuf::from("habitus-data"),
            cors_origins: Vec::new(),
            max_sessions: 1000,
            ui_dir: None,
            provider: ProviderConfig::default(),
            cache: CacheConfig::default(),
            embedder: EmbedderConfig::default(),
            generation: GenerationSettings::default(),
            induction: InductionConfig::default(),
            paraphrase_examples: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Read `path` (defaults when `None`) and apply the process environment.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ServiceConfig::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    /// Overlay environment variables looked up through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(v) = var(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = var(ENV_DATA_DIR) {
            self.data_dir = v.into();
        }
        if let Some(v) = var(ENV_PROVIDER) {
            self.provider.kind = serde_json::from_value(serde_json::Value::String(v.to_lowercase()))
                .with_context(|| format!("{ENV_PROVIDER} must be auto, mock or http"))?;
        }
        if let Some(v) = var(ENV_MOCK_SEED) {
            self.provider.seed = v.parse().with_context(|| format!("{ENV_MOCK_SEED} is not an integer"))?;
        }
        if let Some(v) = var(ENV_BASE_URL) {
            self.provider.base_url = Some(v);
        }
        if let Some(v) = var(ENV_API_KEY).or_else(|| var("OPENAI_API_KEY")) {
            self.provider.api_key = Some(v);
        }
        if let Some(v) = var(ENV_MODEL) {
            self.generation.config.model_id = v;
        }
        if let Some(url) = var(ENV_EMBEDDER_URL) {
            let dimension = match var(ENV_EMBEDDER_DIM) {
                Some(d) => d.parse().with_context(|| format!("{ENV_EMBEDDER_DIM} is not an integer"))?,
                None => match &self.embedder {
                    EmbedderConfig::Http(s) => s.dimension,
                    EmbedderConfig::Hash { .. } => bail!("{ENV_EMBEDDER_URL} needs {ENV_EMBEDDER_DIM}"),
                },
            };
            let model_id = match &self.embedder {
                EmbedderConfig::Http(s) => s.model_id.clone(),
                EmbedderConfig::Hash { .. } => None,
            };
            self.embedder = EmbedderConfig::Http(HttpEmbedderSettings { url, dimension, model_id, timeout_secs: 60 });
        }
        if let Some(v) = var(ENV_CACHE_PATH) {
            self.cache.path = Some(v.into());
        }
        if let Some(v) = var(ENV_CACHE_MODE) {
            self.cache.mode = Some(
                serde_json::from_value(serde_json::Value::String(v.to_lowercase()))
                    .with_context(|| format!("{ENV_CACHE_MODE} must be off, record or replay"))?,
            );
        }
        Ok(())
    }

    pub fn build_gateway(&self) -> anyhow::Result<Gateway> {
        let p = &self.provider;
        let mut gateway = match p.resolved_kind() {
            ProviderKind::Http => {
                let mut settings = ProviderSettings { api_key: p.api_key.clone(), timeout_secs: p.timeout_secs, ..Default::default() };
                if let Some(url) = &p.base_url {
                    settings.base_url = url.clone();
                }
                Gateway::new(HttpProvider::new(settings))
            }
            _ => {
                if p.kind == ProviderKind::Auto {
                    log::warn!("no LLM provider configured; using the offline mock (seed {})", p.seed);
                }
                Gateway::new(MockProvider::new(p.seed))
            }
        };
        gateway = gateway.with_retry(RetryPolicy { max_attempts: p.max_attempts.max(1), ..Default::default() });
        if let Some(rps) = p.requests_per_second {
            if rps.is_nan() || rps <= 0.0 {
                bail!("requests_per_second must be positive");
            }
            gateway = gateway.with_rate_limit(TokenBucket::new(p.burst.max(1), rps));
        }
        let mode = self.cache.effective_mode();
        match (&self.cache.path, mode) {
            (_, CacheMode::Off) => {}
            (Some(path), mode) => {
                let cache = ReplayCache::open(path).with_context(|| format!("opening cache {}", path.display()))?;
                gateway = gateway.with_cache(Arc::new(cache), mode);
            }
            (None, _) => bail!("cache mode {mode:?} needs a cache path"),
        }
        Ok(gateway)
    }

    pub fn build_embedder(&self) -> Arc<dyn Embedder> {
        match &self.embedder {
            EmbedderConfig::Hash { dimension } => Arc::new(HashEmbedder::new(*dimension)),
            EmbedderConfig::Http(settings) => Arc::new(HttpEmbedder::new(settings.clone())),
        }
    }

    pub fn load_paraphrase_examples(&self) -> anyhow::Result<Vec<ParaphraseExample>> {
        let examples = match &self.paraphrase_examples {
            Some(path) => {
                let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))?
            }
            None => default_paraphrase_examples(),
        };
        if examples.len() < self.generation.k_examples {
            bail!("{} paraphrase examples configured but {} are needed", examples.len(), self.generation.k_examples);
        }
        Ok(examples)
    }

    pub fn retry_delay_hint(&self) -> Duration {
        RetryPolicy::default().base_delay
    }
}
