//! Edit settings shared by `run`, `serve` and the session API.
//!
//! Layering is defaults < config file < environment < flags. Flags and
//! environment both arrive through clap (`#[arg(env = ...)]`), so a flag
//! beats its variable; whatever clap leaves unset falls back to the file,
//! then to [`EditSettings::default`]. Secrets are read from the environment
//! only and never serialized.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use foldedit_core::ild::{Backend, DegradingBackend, ExecConfig, RemoteBackend, RemoteConfig, SymbolicBackend};
use foldedit_core::llm::{LlmClient, LlmConfig};
use foldedit_core::planner::{Planner, SessionConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BACKEND_TOKEN_ENV: &str = "FOLDEDIT_BACKEND_TOKEN";
pub const LLM_TOKEN_ENV: &str = "FOLDEDIT_LLM_TOKEN";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Symbolic,
    Remote,
    Degrading,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    #[default]
    Rule,
    Llm,
}

/// One field-level validation message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> FieldError {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid settings: {}", .0.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
}

/// Everything that decides how a session edits. Frozen once a session is
/// created.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSettings {
    pub backend: BackendKind,
    pub planner: PlannerKind,
    /// Blend feather sigma in pixels; unset means size-relative.
    pub feather: Option<f64>,
    /// Mask dilation in pixels; unset means size-relative.
    pub margin: Option<u32>,
    pub retry_budget: u32,
    pub turn_limit: u32,
    pub backend_url: Option<String>,
    pub backend_timeout_ms: u64,
    pub degrade_sigma: f64,
    pub degrade_amplitude: f64,
    pub degrade_seed: u64,
    pub llm_url: Option<String>,
    pub llm_model: String,
}

impl Default for EditSettings {
    fn default() -> EditSettings {
        let d = DegradingBackend::default();
        let s = SessionConfig::default();
        EditSettings {
            backend: BackendKind::Symbolic,
            planner: PlannerKind::Rule,
            feather: None,
            margin: None,
            retry_budget: s.retry_budget,
            turn_limit: s.turn_limit,
            backend_url: None,
            backend_timeout_ms: 30_000,
            degrade_sigma: d.sigma,
            degrade_amplitude: d.amplitude,
            degrade_seed: d.seed,
            llm_url: None,
            llm_model: "default".into(),
        }
    }
}

pub const MAX_RETRY_BUDGET: u32 = 32;

/// The live objects a session is built from.
pub struct Built {
    pub backend: Arc<dyn Backend>,
    pub planner: Planner,
    pub cfg: SessionConfig,
}

impl EditSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if let Some(f) = self.feather {
            if !(f.is_finite() && f >= 0.0) {
                errs.push(FieldError::new("feather", "must be a finite number >= 0"));
            }
        }
        if self.retry_budget > MAX_RETRY_BUDGET {
            errs.push(FieldError::new(
                "retry_budget",
                format!("must be at most {MAX_RETRY_BUDGET}"),
            ));
        }
        if self.turn_limit == 0 {
            errs.push(FieldError::new("turn_limit", "must be at least 1"));
        }
        if self.backend_timeout_ms == 0 {
            errs.push(FieldError::new("backend_timeout_ms", "must be positive"));
        }
        if self.backend == BackendKind::Remote && self.backend_url.as_deref().is_none_or(str::is_empty) {
            errs.push(FieldError::new("backend_url", "required for the remote backend"));
        }
        if !(self.degrade_sigma.is_finite() && self.degrade_sigma >= 0.0) {
            errs.push(FieldError::new("degrade_sigma", "must be a finite number >= 0"));
        }
        if !(self.degrade_amplitude.is_finite() && self.degrade_amplitude >= 0.0) {
            errs.push(FieldError::new("degrade_amplitude", "must be a finite number >= 0"));
        }
        if self.planner == PlannerKind::Llm && self.llm_url.as_deref().is_none_or(str::is_empty) {
            errs.push(FieldError::new("llm_url", "required for the llm planner"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Validates, then instantiates the backend and planner. Tokens come
    /// from the environment at this point.
    pub fn build(&self) -> Result<Built, ConfigError> {
        self.validate()?;
        let backend: Arc<dyn Backend> = match self.backend {
            BackendKind::Symbolic => Arc::new(SymbolicBackend::default()),
            BackendKind::Degrading => Arc::new(DegradingBackend {
                sigma: self.degrade_sigma,
                amplitude: self.degrade_amplitude,
                seed: self.degrade_seed,
                ..DegradingBackend::default()
            }),
            BackendKind::Remote => {
                let mut rc = RemoteConfig::new(self.backend_url.clone().unwrap_or_default());
                rc.timeout_ms = self.backend_timeout_ms;
                rc.token = std::env::var(BACKEND_TOKEN_ENV).ok();
                Arc::new(RemoteBackend::new(rc))
            }
        };
        let planner = match self.planner {
            PlannerKind::Rule => Planner::RuleBased,
            PlannerKind::Llm => {
                let mut lc = LlmConfig::new(self.llm_url.clone().unwrap_or_default(), self.llm_model.clone());
                lc.token = std::env::var(LLM_TOKEN_ENV).ok();
                Planner::Llm(LlmClient::new(lc))
            }
        };
        let cfg = SessionConfig {
            retry_budget: self.retry_budget,
            turn_limit: self.turn_limit,
            exec: ExecConfig {
                margin: self.margin,
                feather: self.feather,
                ..ExecConfig::default()
            },
            ..SessionConfig::default()
        };
        Ok(Built { backend, planner, cfg })
    }

    /// Applies a JSON object of overrides, as sent by API clients.
    pub fn overlay_json(&self, patch: &serde_json::Value) -> Result<EditSettings, ConfigError> {
        let serde_json::Value::Object(patch) = patch else {
            return Err(ConfigError::Invalid(vec![FieldError::new(
                "config",
                "must be a JSON object",
            )]));
        };
        let mut base = match serde_json::to_value(self).expect("settings serialize") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("settings serialize to an object"),
        };
        for (k, v) in patch {
            if !base.contains_key(k) {
                return Err(ConfigError::Invalid(vec![FieldError::new(
                    k.clone(),
                    "unknown setting",
                )]));
            }
            base.insert(k.clone(), v.clone());
        }
        serde_json::from_value(serde_json::Value::Object(base.clone())).map_err(|e| {
            // serde names no field on type errors; find the first key that
            // fails on its own so the client gets a field-level message
            let field = patch
                .iter()
                .find(|(k, v)| {
                    let mut m = serde_json::Map::new();
                    m.insert((*k).clone(), (*v).clone());
                    serde_json::from_value::<EditSettings>(serde_json::Value::Object(m)).is_err()
                })
                .map_or_else(|| "config".to_string(), |(k, _)| k.clone());
            ConfigError::Invalid(vec![FieldError::new(field, e.to_string())])
        })
    }
}

/// Settings flags shared by `run` and `serve`; each is also read from the
/// named environment variable.
#[derive(Args, Clone, Debug, Default)]
pub struct EditArgs {
    /// Editing backend
    #[arg(long, env = "FOLDEDIT_BACKEND", value_enum)]
    pub backend: Option<BackendKind>,
    /// Planner mode
    #[arg(long, env = "FOLDEDIT_PLANNER", value_enum)]
    pub planner: Option<PlannerKind>,
    /// Blend feather sigma in pixels
    #[arg(long, env = "FOLDEDIT_FEATHER")]
    pub feather: Option<f64>,
    /// Mask dilation in pixels
    #[arg(long, env = "FOLDEDIT_MARGIN")]
    pub margin: Option<u32>,
    /// Extra attempts per sub-goal
    #[arg(long, env = "FOLDEDIT_RETRY_BUDGET")]
    pub retry_budget: Option<u32>,
    /// Committed turns per session
    #[arg(long, env = "FOLDEDIT_TURN_LIMIT")]
    pub turn_limit: Option<u32>,
    /// Remote backend endpoint (token: FOLDEDIT_BACKEND_TOKEN)
    #[arg(long, env = "FOLDEDIT_BACKEND_URL")]
    pub backend_url: Option<String>,
    /// Remote backend timeout in milliseconds
    #[arg(long, env = "FOLDEDIT_BACKEND_TIMEOUT_MS")]
    pub backend_timeout_ms: Option<u64>,
    /// Degrading backend blur sigma
    #[arg(long, env = "FOLDEDIT_DEGRADE_SIGMA")]
    pub degrade_sigma: Option<f64>,
    /// Degrading backend noise amplitude in byte units
    #[arg(long, env = "FOLDEDIT_DEGRADE_AMPLITUDE")]
    pub degrade_amplitude: Option<f64>,
    /// Degrading backend noise seed
    #[arg(long, env = "FOLDEDIT_DEGRADE_SEED")]
    pub degrade_seed: Option<u64>,
    /// Chat-completions endpoint for the llm planner (token: FOLDEDIT_LLM_TOKEN)
    #[arg(long, env = "FOLDEDIT_LLM_URL")]
    pub llm_url: Option<String>,
    /// Model name sent to the llm endpoint
    #[arg(long, env = "FOLDEDIT_LLM_MODEL")]
    pub llm_model: Option<String>,
}

impl EditArgs {
    pub fn apply(&self, mut s: EditSettings) -> EditSettings {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { s.$f = v.clone(); } )* };
        }
        set!(
            backend,
            planner,
            retry_budget,
            turn_limit,
            backend_timeout_ms,
            degrade_sigma,
            degrade_amplitude,
            degrade_seed,
            llm_model
        );
        if self.feather.is_some() {
            s.feather = self.feather;
        }
        if self.margin.is_some() {
            s.margin = self.margin;
        }
        if self.backend_url.is_some() {
            s.backend_url = self.backend_url.clone();
        }
        if self.llm_url.is_some() {
            s.llm_url = self.llm_url.clone();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSettings {
    pub addr: String,
    pub store: PathBuf,
    pub turn_timeout_secs: u64,
}

impl Default for ServeSettings {
    fn default() -> ServeSettings {
        ServeSettings {
            addr: "127.0.0.1:8080".into(),
            store: PathBuf::from("foldedit-store"),
            turn_timeout_secs: 120,
        }
    }
}

/// The TOML config file: an `[edit]` table and a `[serve]` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub edit: EditSettings,
    pub serve: ServeSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, ConfigError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let err = |message: String| ConfigError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_prefers_flags_over_file_over_defaults() {
        let file: FileConfig = toml::from_str("[edit]\nretry_budget = 7\nfeather = 1.5\n").unwrap();
        assert_eq!(file.edit.turn_limit, EditSettings::default().turn_limit);
        let args = EditArgs {
            retry_budget: Some(2),
            ..EditArgs::default()
        };
        let s = args.apply(file.edit);
        assert_eq!((s.retry_budget, s.feather), (2, Some(1.5)));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[edit]\nretries = 1\n").is_err());
    }

    #[test]
    fn validation_names_fields() {
        let s = EditSettings {
            backend: BackendKind::Remote,
            feather: Some(-1.0),
            turn_limit: 0,
            ..EditSettings::default()
        };
        let Err(ConfigError::Invalid(errs)) = s.validate() else {
            panic!()
        };
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["feather", "turn_limit", "backend_url"]);
    }

    #[test]
    fn json_overlay_reports_the_offending_field() {
        let base = EditSettings::default();
        let s = base
            .overlay_json(&serde_json::json!({"backend": "degrading", "margin": 4}))
            .unwrap();
        assert_eq!((s.backend, s.margin), (BackendKind::Degrading, Some(4)));
        let Err(ConfigError::Invalid(e)) = base.overlay_json(&serde_json::json!({"margin": "wide"})) else {
            panic!()
        };
        assert_eq!(e[0].field, "margin");
        let Err(ConfigError::Invalid(e)) = base.overlay_json(&serde_json::json!({"colour": 1})) else {
            panic!()
        };
        assert_eq!(e[0].field, "colour");
    }

    #[test]
    fn secrets_never_serialize() {
        let text = serde_json::to_string(&EditSettings::default()).unwrap();
        assert!(!text.contains("token"));
    }
}
