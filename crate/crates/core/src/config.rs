//! Run configuration file: a `[model]` table and a `[train]` table.
//!
//! ```toml
//! [model]
//! dim = 16
//! units = 2
//! layers = 2
//! tau = 1.0
//! backbone = "gru"
//! routing = "gumbel"
//! baseline = "none"
//!
//! [train]
//! lr = 0.001
//! epochs = 20
//! alpha = 0.1
//! ```
//!
//! Omitted `[train]` keys take their defaults; `model.event_types` defaults
//! to the largest id in the data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CaseqConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: CaseqConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string() + &span_hint(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => format!(" (line {})", text[..r.start.min(text.len())].lines().count().max(1)),
        None => String::new(),
    }
}
