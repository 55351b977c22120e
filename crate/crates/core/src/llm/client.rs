use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::{sha256_hex, ResponseCache};
use crate::http::{bounded_map, endpoint_url, JsonPoster, RetryPolicy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Anything that turns a conversation into a reply.
pub trait ChatModel: Sync {
    fn model_name(&self) -> &str;

    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;

    /// Upper bound on concurrent calls made through [`ChatModel::complete_many`].
    fn max_in_flight(&self) -> usize {
        4
    }

    /// Replies for each conversation, in input order.
    fn complete_many(&self, conversations: &[Vec<ChatMessage>]) -> Vec<Result<String>> {
        bounded_map(conversations, self.max_in_flight(), |m| self.complete(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    /// Base URL; `/v1/chat/completions` is appended when missing.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry_backoff_ms: u64,
    /// Forwarded to the service when set.
    pub seed: Option<u64>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: "http://localhost:8000".into(),
            model: String::new(),
            temperature: 0.0,
            max_tokens: 800,
            max_retries: 3,
            timeout_secs: 600,
            max_in_flight: 4,
            retry_backoff_ms: 500,
            seed: None,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        if self.model.trim().is_empty() {
            return Err(Error::Config("model name is empty".into()));
        }
        Ok(())
    }
}

/// Chat-completions client with a content-addressed reply cache.
pub struct HttpChatClient {
    cfg: LlmClientConfig,
    url: String,
    poster: JsonPoster,
    cache: ResponseCache,
}

impl HttpChatClient {
    pub fn new(cfg: LlmClientConfig, cache: ResponseCache) -> Result<Self> {
        cfg.validate()?;
        let poster = JsonPoster::new(RetryPolicy {
            max_retries: cfg.max_retries,
            timeout: Duration::from_secs(cfg.timeout_secs),
            backoff: Duration::from_millis(cfg.retry_backoff_ms),
        });
        let url = endpoint_url(&cfg.endpoint, "/v1/chat/completions");
        Ok(HttpChatClient { cfg, url, poster, cache })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }

    pub fn request_count(&self) -> usize {
        self.poster.request_count()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn request_body(&self, messages: &[ChatMessage]) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        });
        if let Some(seed) = self.cfg.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl ChatModel for HttpChatClient {
    fn model_name(&self) -> &str {
        &self.cfg.model
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = self.request_body(messages);
        let key = sha256_hex(&[
            self.url.as_bytes(),
            self.cfg.model.as_bytes(),
            body.to_string().as_bytes(),
        ]);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let reply = self.poster.post(&self.url, &body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Service(format!("{}: reply lacks choices[0].message.content", self.url)))?
            .to_string();
        self.cache.put(&key, &text)?;
        Ok(text)
    }
}
