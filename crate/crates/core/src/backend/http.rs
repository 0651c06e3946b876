//! Chat-completions-with-vision HTTP adapter.
//!
//! Sends one user turn holding a text part and a base64 PNG `image_url`
//! part, and reads `choices[0].message.content` back.

use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Completion, Limiter, VisionBackend, VisionRequest};
use crate::geometry::BboxConvention;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Identifier folded into cache keys.
    pub id: String,
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    pub model: String,
    pub bbox_convention: BboxConvention,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            id: "http".into(),
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            api_key_env: None,
            model: "default".into(),
            bbox_convention: BboxConvention::Fraction,
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limiter = Limiter::new(config.max_in_flight);
        Ok(Self {
            config,
            api_key,
            client,
            limiter,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    pub fn request_body(&self, request: &VisionRequest) -> Value {
        let data = base64::engine::general_purpose::STANDARD.encode(request.image.png());
        let mut body = json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": request.prompt.text},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{data}")}}
                ]
            }],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        });
        if let Some(seed) = request.params.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

/// Pull the completion text out of a chat-completions response body.
pub(crate) fn extract_content(body: &Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::Malformed(format!("unexpected content {other}"))),
    }
}

impl VisionBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.config.id
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn bbox_convention(&self) -> BboxConvention {
        self.config.bbox_convention
    }

    fn complete(&self, request: &VisionRequest) -> Result<Completion, BackendError> {
        let body = self.request_body(request);
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut builder = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let latency_ms = started.elapsed().as_millis() as u64;

        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {text}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Refusal {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(Completion {
            text: extract_content(&parsed)?,
            latency_ms,
        })
    }
}
