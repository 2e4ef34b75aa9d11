use std::path::{Path, PathBuf};
use std::sync::Arc;

use branchline::gateway::{BackendConfig, BackendKind, Gateway, GatewayError};
use branchline::orchestrator::{Orchestrator, OrchestratorConfig};
use branchline::store::{EdgeStore, StoreError};
use branchline::template::{PromptSet, TemplateError};
use serde::{Deserialize, Serialize};

/// Shared by `serve` and the local CLI commands. Every section is optional.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// store = "./branchline-store"
/// templates = "./prompts"
///
/// [backend]
/// kind = "http-chat"
/// endpoint = "http://localhost:8000/v1/chat/completions"
///
/// [orchestrator]
/// evaluation_model = "gpt-4.1"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub listen: String,
    /// Store root; an in-memory store when unset.
    pub store: Option<PathBuf>,
    /// Directory of template overrides.
    pub templates: Option<PathBuf>,
    pub backend: BackendConfig,
    pub orchestrator: OrchestratorConfig,
    /// Environment variable holding the bearer token clients must present.
    pub auth_token_env: Option<String>,
    /// Ceiling on one turn request, including every backend call.
    pub turn_timeout_ms: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            store: None,
            templates: None,
            backend: BackendConfig {
                kind: BackendKind::HttpChat {
                    endpoint: None,
                    auth_env: "BRANCHLINE_API_KEY".into(),
                },
                timeout_ms: 120_000,
                retry: Default::default(),
            },
            orchestrator: OrchestratorConfig::default(),
            auth_token_env: None,
            turn_timeout_ms: 300_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|reason| ConfigError::Parse {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn open_store(&self) -> Result<EdgeStore, StoreError> {
        match &self.store {
            Some(root) => EdgeStore::open(root),
            None => Ok(EdgeStore::in_memory()),
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, TemplateError> {
        match &self.templates {
            Some(dir) => PromptSet::load_dir(dir),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn orchestrator(&self, store: Arc<EdgeStore>) -> Result<Orchestrator, ConfigError> {
        let gateway = Gateway::from_config(&self.backend)?;
        Ok(Orchestrator::new(
            store,
            Arc::new(gateway),
            self.prompts()?,
            self.orchestrator.clone(),
        ))
    }

    pub fn auth_token(&self) -> Result<Option<String>, ConfigError> {
        match &self.auth_token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ConfigError::MissingToken(var.clone())),
        }
    }
}
