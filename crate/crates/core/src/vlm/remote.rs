//! HTTP/JSON providers. Images travel as base64 with their media type.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Generation, Provider, ProviderError, ProviderRequest};
use crate::config::{BlockThreshold, GenerationParams, HarmCategory};

pub const GEMINI_KEY_ENV: &str = "GEMINI_API_KEY";
pub const OPENAI_KEY_ENV: &str = "OPENAI_API_KEY";

const GEMINI_BASE: &str = "https://generativelanguage.googleapis.com/v1beta";
const OPENAI_BASE: &str = "https://api.openai.com/v1";

fn http_client() -> Result<Client, ProviderError> {
    Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .map_err(|e| ProviderError::Config(e.to_string()))
}

fn key_from_env(var: &str) -> Result<String, ProviderError> {
    match std::env::var(var) {
        Ok(k) if !k.trim().is_empty() => Ok(k),
        _ => Err(ProviderError::Config(format!(
            "remote provider selected but ${var} is not set"
        ))),
    }
}

fn classify_status(status: StatusCode, body: &str) -> ProviderError {
    let msg = format!("HTTP {status}: {}", body.chars().take(500).collect::<String>());
    match status.as_u16() {
        401 | 403 => ProviderError::Auth(msg),
        408 | 429 => ProviderError::Transient(msg),
        s if s >= 500 => ProviderError::Transient(msg),
        _ => ProviderError::Fatal(msg),
    }
}

fn classify_send(err: reqwest::Error) -> ProviderError {
    if err.is_timeout() || err.is_connect() || err.is_request() {
        ProviderError::Transient(err.to_string())
    } else {
        ProviderError::Fatal(err.to_string())
    }
}

fn post_json(req: reqwest::blocking::RequestBuilder, body: &Value) -> Result<Value, ProviderError> {
    let resp = req.json(body).send().map_err(classify_send)?;
    let status = resp.status();
    let text = resp.text().map_err(classify_send)?;
    if !status.is_success() {
        return Err(classify_status(status, &text));
    }
    serde_json::from_str(&text).map_err(|e| ProviderError::Fatal(format!("unparseable response body: {e}")))
}

/// Gemini `models/{model}:generateContent`.
#[derive(Debug, Clone)]
pub struct GeminiProvider {
    id: String,
    model: String,
    base_url: String,
    api_key: String,
    client: Client,
}

impl GeminiProvider {
    pub fn new(model: &str, base_url: Option<&str>, api_key: String) -> Result<Self, ProviderError> {
        Ok(Self {
            id: format!("gemini:{model}"),
            model: model.to_string(),
            base_url: base_url.unwrap_or(GEMINI_BASE).trim_end_matches('/').to_string(),
            api_key,
            client: http_client()?,
        })
    }

    pub fn from_env(model: &str) -> Result<Self, ProviderError> {
        Self::new(model, None, key_from_env(GEMINI_KEY_ENV)?)
    }

    fn category(c: HarmCategory) -> &'static str {
        match c {
            HarmCategory::Harassment => "HARM_CATEGORY_HARASSMENT",
            HarmCategory::HateSpeech => "HARM_CATEGORY_HATE_SPEECH",
            HarmCategory::SexualContent => "HARM_CATEGORY_SEXUALLY_EXPLICIT",
            HarmCategory::DangerousContent => "HARM_CATEGORY_DANGEROUS_CONTENT",
        }
    }

    fn threshold(t: BlockThreshold) -> &'static str {
        match t {
            BlockThreshold::BlockNone => "BLOCK_NONE",
            BlockThreshold::BlockFew => "BLOCK_ONLY_HIGH",
            BlockThreshold::BlockSome => "BLOCK_MEDIUM_AND_ABOVE",
            BlockThreshold::BlockMost => "BLOCK_LOW_AND_ABOVE",
        }
    }

    /// Request body for one call.
    pub fn request_body(req: &ProviderRequest) -> Value {
        let mut parts = vec![json!({ "text": req.prompt })];
        parts.extend(
            req.images
                .iter()
                .map(|img| json!({ "inline_data": { "mime_type": img.media_type, "data": img.base64() } })),
        );
        json!({
            "contents": [{ "role": "user", "parts": parts }],
            "generationConfig": generation_config(&req.params),
            "safetySettings": req.params.safety.iter().map(|(c, t)| json!({
                "category": Self::category(*c),
                "threshold": Self::threshold(*t),
            })).collect::<Vec<_>>(),
        })
    }

    /// Interprets a `generateContent` response body.
    pub fn parse_response(body: &Value) -> Result<Generation, ProviderError> {
        if body.pointer("/promptFeedback/blockReason").is_some() {
            return Ok(Generation::blocked());
        }
        let candidate = body
            .pointer("/candidates/0")
            .ok_or_else(|| ProviderError::Fatal("response has no candidates".into()))?;
        let text: String = candidate
            .pointer("/content/parts")
            .and_then(Value::as_array)
            .map(|parts| {
                parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(Value::as_str))
                    .collect()
            })
            .unwrap_or_default();
        let finish = candidate.get("finishReason").and_then(Value::as_str).unwrap_or("");
        if matches!(finish, "SAFETY" | "BLOCKLIST" | "PROHIBITED_CONTENT") && text.is_empty() {
            return Ok(Generation::blocked());
        }
        Ok(Generation::text(text))
    }
}

fn generation_config(params: &GenerationParams) -> Value {
    json!({ "temperature": params.temperature, "maxOutputTokens": params.max_output_tokens })
}

impl Provider for GeminiProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ProviderRequest) -> Result<Generation, ProviderError> {
        let url = format!("{}/models/{}:generateContent", self.base_url, self.model);
        let builder = self.client.post(url).header("x-goog-api-key", &self.api_key);
        let body = post_json(builder, &Self::request_body(req))?;
        Self::parse_response(&body)
    }
}

/// OpenAI-compatible `/chat/completions`. Safety settings have no wire
/// equivalent here; they are recorded in the run config only.
#[derive(Debug, Clone)]
pub struct OpenAiCompatProvider {
    id: String,
    model: String,
    base_url: String,
    api_key: String,
    client: Client,
}

impl OpenAiCompatProvider {
    pub fn new(model: &str, base_url: Option<&str>, api_key: String) -> Result<Self, ProviderError> {
        Ok(Self {
            id: format!("openai:{model}"),
            model: model.to_string(),
            base_url: base_url.unwrap_or(OPENAI_BASE).trim_end_matches('/').to_string(),
            api_key,
            client: http_client()?,
        })
    }

    pub fn from_env(model: &str, base_url: Option<&str>) -> Result<Self, ProviderError> {
        Self::new(model, base_url, key_from_env(OPENAI_KEY_ENV)?)
    }

    pub fn request_body(&self, req: &ProviderRequest) -> Value {
        let mut content = vec![json!({ "type": "text", "text": req.prompt })];
        content.extend(req.images.iter().map(|img| {
            json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{};base64,{}", img.media_type, img.base64()) },
            })
        }));
        json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": content }],
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_output_tokens,
        })
    }

    pub fn parse_response(body: &Value) -> Result<Generation, ProviderError> {
        let choice = body
            .pointer("/choices/0")
            .ok_or_else(|| ProviderError::Fatal("response has no choices".into()))?;
        if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
            return Ok(Generation::blocked());
        }
        if let Some(refusal) = choice.pointer("/message/refusal").and_then(Value::as_str) {
            if !refusal.is_empty() {
                return Ok(Generation::blocked());
            }
        }
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default();
        Ok(Generation::text(text))
    }
}

impl Provider for OpenAiCompatProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ProviderRequest) -> Result<Generation, ProviderError> {
        let url = format!("{}/chat/completions", self.base_url);
        let builder = self.client.post(url).bearer_auth(&self.api_key);
        let body = post_json(builder, &self.request_body(req))?;
        Self::parse_response(&body)
    }
}
