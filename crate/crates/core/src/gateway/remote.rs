//! OpenAI-compatible HTTP providers (`/embeddings`, `/chat/completions`).

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatProvider, EmbeddingProvider, ProviderError};

pub const API_KEY_ENV: &str = "CDSR_API_KEY";
pub const BASE_URL_ENV: &str = "CDSR_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Clone, Debug)]
pub struct RemoteSettings {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl RemoteSettings {
    pub fn from_env() -> Self {
        Self {
            base_url: std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string()),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(60),
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into()
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, agent: &ureq::Agent, path: &str, body: serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        let mut req = agent.post(self.url(path));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ProviderError::Transport(e.to_string()))?;
        resp.body_mut().read_json::<serde_json::Value>().map_err(|e| ProviderError::BadResponse(e.to_string()))
    }
}

pub struct RemoteEmbedder {
    settings: RemoteSettings,
    model: String,
    dim: Option<usize>,
    id: String,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(settings: RemoteSettings, model: impl Into<String>, dim: Option<usize>) -> Self {
        let model = model.into();
        let id = format!("remote-embed-{model}");
        let agent = settings.agent();
        Self { settings, model, dim, id, agent }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let v = self.settings.post(&self.agent, "embeddings", json!({ "model": self.model, "input": text }))?;
        let parsed: EmbeddingResponse = serde_json::from_value(v).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        parsed.data.into_iter().next().map(|d| d.embedding).ok_or_else(|| ProviderError::BadResponse("no embedding in response".into()))
    }
}

pub struct RemoteChat {
    settings: RemoteSettings,
    model: String,
    id: String,
    agent: ureq::Agent,
}

impl RemoteChat {
    pub fn new(settings: RemoteSettings, model: impl Into<String>) -> Self {
        let model = model.into();
        let id = format!("remote-chat-{model}");
        let agent = settings.agent();
        Self { settings, model, id, agent }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl ChatProvider for RemoteChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let v = self.settings.post(&self.agent, "chat/completions", body)?;
        let parsed: ChatResponse = serde_json::from_value(v).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let text = parsed.choices.into_iter().next().and_then(|c| c.message.content).unwrap_or_default();
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyCompletion);
        }
        Ok(text.trim().to_string())
    }
}
