//! Minimal blocking JSON client for OpenAI-compatible HTTP endpoints.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL including the API version prefix, e.g. `http://localhost:11434/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. `None` for endpoints
    /// that need no authentication.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
        }
    }

    /// Resolves the API key. A declared but unset variable is a transport
    /// error so that runs fail before any work is done.
    pub fn api_key(&self) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.trim().is_empty() => Ok(Some(key)),
                _ => Err(Error::Transport(format!(
                    "API key variable {var} is not set for {}",
                    self.base_url
                ))),
            },
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            path.trim_start_matches('/')
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

pub struct JsonClient {
    http: reqwest::blocking::Client,
    endpoint: EndpointConfig,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(endpoint: EndpointConfig, retry: RetryPolicy) -> Result<Self> {
        let api_key = endpoint.api_key()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(format!("building HTTP client: {e}")))?;
        Ok(Self {
            http,
            endpoint,
            api_key,
            retry,
        })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = self.endpoint.url(path);
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(&url, body) {
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    log::warn!("POST {url} attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                }
            }
            if attempt < attempts {
                std::thread::sleep(Duration::from_millis(self.retry.backoff_ms * u64::from(attempt)));
            }
        }
        Err(Error::Transport(format!(
            "POST {url} failed after {attempts} attempts: {last}"
        )))
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> std::result::Result<Resp, String> {
        let mut req = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {}", truncate(&text, 300)));
        }
        serde_json::from_str(&text).map_err(|e| format!("bad response body: {e}: {}", truncate(&text, 300)))
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
