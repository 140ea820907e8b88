use super::{GenerationError, GeneratorClient, PromptSpec};
use crate::http::{self, HttpError, ReplayLog, RetryPolicy, Semaphore};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

pub const GEN_URL_ENV: &str = "EVASION_GEN_URL";
pub const GEN_KEY_ENV: &str = "EVASION_GEN_KEY";

/// Replayed and live exchanges share this id so provenance is identical.
const REMOTE_ID: &str = "remote";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Exchange {
    prompt_hash: String,
    prompt: String,
    text: String,
}

/// HTTP code-generation client. Requests are `{prompt, temperature: 0.0}`,
/// responses `{text}`.
pub struct RemoteGenerator {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
    limiter: Semaphore,
    policy: RetryPolicy,
    log: Option<ReplayLog>,
}

impl RemoteGenerator {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration, max_in_flight: usize) -> Self {
        RemoteGenerator {
            url: url.into(),
            key,
            agent: http::agent(timeout),
            limiter: Semaphore::new(max_in_flight),
            policy: RetryPolicy::default(),
            log: None,
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self, GenerationError> {
        let url =
            std::env::var(GEN_URL_ENV).map_err(|_| GenerationError::Failed(format!("{GEN_URL_ENV} is not set")))?;
        Ok(Self::new(url, std::env::var(GEN_KEY_ENV).ok(), timeout, 4))
    }

    pub fn with_backoff(mut self, max_attempts: u32, base: Duration) -> Self {
        self.policy = RetryPolicy {
            max_attempts,
            base_backoff: base,
        };
        self
    }

    /// Appends every exchange to `path` for later replay.
    pub fn recording_to(mut self, path: &Path) -> Result<Self, GenerationError> {
        self.log = Some(ReplayLog::append_to(path)?);
        Ok(self)
    }
}

impl GeneratorClient for RemoteGenerator {
    fn id(&self) -> String {
        REMOTE_ID.to_string()
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn generate(&self, prompt: &PromptSpec) -> Result<String, GenerationError> {
        let rendered = prompt.render();
        let body = json!({ "prompt": rendered, "temperature": 0.0 });
        let response = {
            let _permit = self.limiter.acquire();
            http::with_retries(&self.policy, || {
                http::post_json(&self.agent, &self.url, self.key.as_deref(), &body)
            })
        };
        let value = response.map_err(|e| match e {
            HttpError::Retryable(m) => GenerationError::Retryable(m),
            HttpError::Protocol(m) | HttpError::Fatal(m) => GenerationError::Failed(m),
        })?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| GenerationError::Unparseable {
                reason: "response has no string field \"text\"".into(),
                raw: value.to_string(),
            })?
            .to_string();
        if let Some(log) = &self.log {
            log.record(&Exchange {
                prompt_hash: prompt.hash(),
                prompt: rendered,
                text: text.clone(),
            })?;
        }
        Ok(text)
    }
}

/// Serves generator output from a replay log without network access.
#[derive(Debug, Clone, Default)]
pub struct ReplayGenerator {
    by_hash: HashMap<String, String>,
}

impl ReplayGenerator {
    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path)?;
        let mut by_hash = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: Exchange = serde_json::from_str(line).map_err(|e| GenerationError::Unparseable {
                reason: format!("replay log line {}: {e}", i + 1),
                raw: line.to_string(),
            })?;
            // The latest response for a prompt wins.
            by_hash.insert(ex.prompt_hash, ex.text);
        }
        Ok(ReplayGenerator { by_hash })
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }
}

impl GeneratorClient for ReplayGenerator {
    fn id(&self) -> String {
        REMOTE_ID.to_string()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn generate(&self, prompt: &PromptSpec) -> Result<String, GenerationError> {
        let hash = prompt.hash();
        self.by_hash
            .get(&hash)
            .cloned()
            .ok_or(GenerationError::MissingReplay(hash))
    }
}
