//! TOML application config shared by the server and the eval CLI.
//!
//! ```toml
//! data_dir = "data/transcripts"
//!
//! [session]
//! mode = "full"
//! time_limit_secs = 1200
//! language = "ko"
//!
//! [session.backend]
//! backend = "mock"
//!
//! [engine]
//! provenance_window = 4
//!
//! [assets]
//! prompts_dir = "prompts"
//! ```
//!
//! Every section is optional; omitted fields take the built-in defaults.
//! Relative asset paths resolve against the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig};
use crate::gateway::{
    Backend, BackendKind, GatewayConfig, HttpBackend, MockBackend, MockRules, PromptTemplates,
};
use crate::memory::SlotCueLexicon;
use crate::session::{BackendFactory, Clock, SessionConfig, SessionService, TranscriptStore};
use crate::strategy;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetPaths {
    /// Directory of `<kind>.txt` files overriding the shipped prompts.
    pub prompts_dir: Option<PathBuf>,
    /// JSON few-shot store replacing the shipped one.
    pub fewshot: Option<PathBuf>,
    /// JSON slot-cue lexicon replacing the shipped one.
    pub slot_cues: Option<PathBuf>,
    /// JSON mock rule table replacing the shipped one.
    pub mock_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Where transcripts are persisted; `None` keeps them in memory only.
    pub data_dir: Option<PathBuf>,
    /// Defaults applied to sessions created without explicit settings.
    pub session: SessionConfig,
    pub engine: EngineConfig,
    pub assets: AssetPaths,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid {what}: {message}")]
    Asset { what: &'static str, message: String },
}

fn asset_err(what: &'static str) -> impl Fn(String) -> ConfigError {
    move |message| ConfigError::Asset { what, message }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: AppConfig = toml::from_str(text)?;
        config
            .engine
            .validate()
            .map_err(asset_err("engine config"))?;
        Ok(config)
    }

    /// Loads a config file and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut().filter(|p| p.is_relative()) {
                *inner = base.join(&*inner);
            }
        };
        resolve(&mut config.data_dir);
        resolve(&mut config.assets.prompts_dir);
        resolve(&mut config.assets.fewshot);
        resolve(&mut config.assets.slot_cues);
        resolve(&mut config.assets.mock_rules);
        Ok(config)
    }

    pub fn templates(&self) -> Result<PromptTemplates, ConfigError> {
        match &self.assets.prompts_dir {
            Some(dir) => PromptTemplates::with_overrides(dir)
                .map_err(|e| asset_err("prompts")(e.to_string())),
            None => Ok(PromptTemplates::builtin()),
        }
    }

    pub fn engine(&self) -> Result<Engine, ConfigError> {
        let fewshot = match &self.assets.fewshot {
            Some(p) => {
                strategy::load_store(p).map_err(|e| asset_err("few-shot store")(e.to_string()))?
            }
            None => strategy::builtin_store(),
        };
        let cues = match &self.assets.slot_cues {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| asset_err("slot cues")(e.to_string()))?;
                SlotCueLexicon::new(
                    serde_json::from_str(&text)
                        .map_err(|e| asset_err("slot cues")(e.to_string()))?,
                )
            }
            None => SlotCueLexicon::builtin(),
        };
        Ok(Engine::new(
            self.engine.clone(),
            fewshot,
            Arc::new(strategy::TokenOverlapCosine),
            cues,
        ))
    }

    pub fn mock_backend(&self) -> Result<MockBackend, ConfigError> {
        match &self.assets.mock_rules {
            Some(p) => Ok(MockBackend::new(
                MockRules::load(p).map_err(|e| asset_err("mock rules")(e.to_string()))?,
            )),
            None => Ok(MockBackend::builtin()),
        }
    }

    /// Backend factory honouring the configured mock rule table. With
    /// `force_mock`, every session gets the mock regardless of its config.
    pub fn backend_factory(&self, force_mock: bool) -> Result<BackendFactory, ConfigError> {
        let mock = self.mock_backend()?;
        Ok(Arc::new(move |config: &GatewayConfig| {
            if force_mock || config.backend == BackendKind::Mock {
                return Ok(Arc::new(mock.clone()) as Arc<dyn Backend>);
            }
            HttpBackend::from_env(config)
                .map(|b| Arc::new(b) as Arc<dyn Backend>)
                .map_err(|e| e.to_string())
        }))
    }

    pub fn build_service(
        &self,
        clock: Arc<dyn Clock>,
        force_mock: bool,
    ) -> Result<SessionService, ConfigError> {
        let store = match &self.data_dir {
            Some(dir) => {
                Some(TranscriptStore::new(dir).map_err(|e| asset_err("data dir")(e.to_string()))?)
            }
            None => None,
        };
        Ok(SessionService::new(
            self.engine()?,
            Arc::new(self.templates()?),
            self.backend_factory(force_mock)?,
            clock,
            store,
        ))
    }
}
