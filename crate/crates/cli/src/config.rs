//! Pipeline configuration file (TOML, or JSON by `.json` extension).

use std::path::{Path, PathBuf};

use originality::bucketer::{content_hash, RunConfig};
use originality::corpus::ColumnSchema;
use originality::embed::BatchOptions;
use originality::judge::ChatConfig;
use originality::transport::{EndpointConfig, RetryPolicy};
use originality::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: SchemaConfig,
    pub run: RunConfig,
    pub chat: Option<ChatConfig>,
    pub embeddings: Option<EmbeddingsConfig>,
    pub retry: RetryPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub participant: String,
    pub task: String,
    pub idea: String,
    pub order: Option<String>,
    /// Label column of reference labeling tables.
    pub label: String,
    /// Participant column of measure tables; defaults to `participant`.
    pub measure_participant: Option<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        let c = ColumnSchema::default();
        Self {
            participant: c.participant,
            task: c.task,
            idea: c.idea,
            order: c.order,
            label: "label".into(),
            measure_participant: None,
        }
    }
}

impl SchemaConfig {
    pub fn columns(&self) -> ColumnSchema {
        ColumnSchema {
            participant: self.participant.clone(),
            task: self.task.clone(),
            idea: self.idea.clone(),
            order: self.order.clone(),
        }
    }

    pub fn measure_participant(&self) -> &str {
        self.measure_participant.as_deref().unwrap_or(&self.participant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsConfig {
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// JSON-lines embedding cache shared across runs.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

impl EmbeddingsConfig {
    pub fn batch_options(&self) -> BatchOptions {
        let d = BatchOptions::default();
        BatchOptions {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            parallelism: self.parallelism.unwrap_or(d.parallelism),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.run.validate()?;
        Ok(config)
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}
