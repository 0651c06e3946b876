//! Run configuration: TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, Client, HttpBackend, HttpConfig, MockBackend, RetryPolicy, VisionBackend,
    DEFAULT_MAX_OUTPUT_TOKENS,
};
use crate::geometry::CropConfig;
use crate::pipeline::Strategy;
use crate::prompting::PromptSet;
use crate::store::{Digest, ResponseStore, StoreError};
use crate::synthetic::{load_sidecar, OracleBackend, SyntheticError};

/// Overrides `cache_dir` when set.
pub const CACHE_DIR_ENV: &str = "TEXTCOT_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http(HttpConfig),
    #[default]
    Mock,
    /// Ground-truth oracle over a generated suite, read from its sidecar.
    Oracle { scenes: PathBuf },
}

impl BackendConfig {
    pub fn build(&self) -> Result<Arc<dyn VisionBackend>, ConfigError> {
        Ok(match self {
            BackendConfig::Http(c) => Arc::new(HttpBackend::new(c.clone())?),
            BackendConfig::Mock => Arc::new(MockBackend::default()),
            BackendConfig::Oracle { scenes } => Arc::new(OracleBackend::from_sidecar(load_sidecar(scenes)?)),
        })
    }
}

fn default_concurrency() -> usize {
    4
}

fn default_max_output_tokens() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backend: BackendConfig,
    /// Manifest files; each becomes a report column.
    pub datasets: Vec<PathBuf>,
    /// Each becomes a report row.
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub crop: CropConfig,
    #[serde(default)]
    pub prompts: PromptSet,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

/// The settings that determine results; resume requires these to match.
#[derive(Serialize)]
struct ResultDefining<'a> {
    backend: &'a BackendConfig,
    datasets: &'a [PathBuf],
    strategies: &'a [Strategy],
    crop: &'a CropConfig,
    prompts: &'a PromptSet,
    seed: u64,
    max_output_tokens: u32,
}

impl RunConfig {
    pub fn new(backend: BackendConfig, datasets: Vec<PathBuf>, strategies: Vec<Strategy>, output_dir: PathBuf) -> Self {
        Self {
            backend,
            datasets,
            strategies,
            crop: CropConfig::default(),
            prompts: PromptSet::default(),
            seed: 0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            retry: RetryPolicy::default(),
            output_dir,
            concurrency: default_concurrency(),
            resume: false,
            cache_dir: None,
        }
    }

    /// Parse a TOML config. Relative paths are resolved against the
    /// directory holding the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let absolute = std::path::absolute(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        config.resolve_paths(absolute.parent().unwrap_or(Path::new("/")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.datasets.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        if let BackendConfig::Oracle { scenes } = &mut self.backend {
            fix(scenes);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.datasets.is_empty() {
            return Err(ConfigError::Invalid("at least one dataset is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(ConfigError::Invalid("at least one strategy is required".into()));
        }
        let mut labels: Vec<String> = self.strategies.iter().map(ToString::to_string).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid(format!("strategy '{}' is listed twice", w[0])));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(ConfigError::Invalid("max_output_tokens must be at least 1".into()));
        }
        self.crop.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Cache directory after applying the environment override.
    pub fn effective_cache_dir(&self) -> Option<PathBuf> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.cache_dir.clone(),
        }
    }

    /// Hash of the result-defining settings. Output location, concurrency,
    /// resume and caching do not change results and are left out.
    pub fn config_hash(&self) -> String {
        let view = ResultDefining {
            backend: &self.backend,
            datasets: &self.datasets,
            strategies: &self.strategies,
            crop: &self.crop,
            prompts: &self.prompts,
            seed: self.seed,
            max_output_tokens: self.max_output_tokens,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        Digest::of(&bytes).to_hex()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn build_client(&self) -> Result<Client, ConfigError> {
        let mut client = Client::new(self.backend.build()?)
            .with_retry(self.retry)
            .with_max_output_tokens(self.max_output_tokens);
        if let Some(dir) = self.effective_cache_dir() {
            client = client.with_store(ResponseStore::open(dir)?);
        }
        Ok(client)
    }
}
