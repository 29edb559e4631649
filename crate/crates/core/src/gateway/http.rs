use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ApiStyle, BackendConfig, BackendKind, EmbeddingVector, GatewayError, LmBackend, TokenScore};
use crate::promptkit::{RenderedPrompt, TemplateKind};

/// Blocking HTTP backend speaking either the native or the OpenAI dialect.
pub struct HttpBackend {
    cfg: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.cfg.base_url)
            .field("model", &self.cfg.model_name)
            .finish()
    }
}

enum Endpoint {
    Generate,
    Score,
    Embed,
}

#[derive(Deserialize)]
struct NativeText {
    text: String,
}

#[derive(Deserialize)]
struct NativeTokens {
    tokens: Vec<TokenScore>,
}

#[derive(Deserialize)]
struct NativeEmbedding {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            cfg,
            agent,
            api_key: api_key.filter(|k| !k.is_empty()),
            next_id: AtomicU64::new(1),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying transport failures up to `max_retries` times.
    fn post(&self, path: &str, endpoint: Endpoint, body: &Value) -> Result<Value, GatewayError> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let mut attempt = 0;
        loop {
            match self.post_once(path, &endpoint, body, &request_id) {
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    let backoff = self.cfg.retry_backoff_ms.saturating_mul(1 << attempt.min(10));
                    std::thread::sleep(Duration::from_millis(backoff));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once(
        &self,
        path: &str,
        endpoint: &Endpoint,
        body: &Value,
        request_id: &str,
    ) -> Result<Value, GatewayError> {
        let mut req = self
            .agent
            .post(&self.url(path))
            .header("Content-Type", "application/json")
            .header("X-Request-Id", request_id);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            return resp
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| GatewayError::Protocol(format!("response body: {e}")));
        }
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            404 | 405 | 501 if matches!(endpoint, Endpoint::Score) => {
                Err(GatewayError::UnsupportedByBackend(format!(
                    "scoring endpoint answered {status}"
                )))
            }
            429 | 500..=599 => Err(GatewayError::Transport {
                status: Some(status),
                cause: truncate(&text),
            }),
            _ => Err(GatewayError::BackendRefused {
                status,
                body: truncate(&text),
            }),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

fn map_transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::Timeout,
        other => GatewayError::Transport {
            status: None,
            cause: other.to_string(),
        },
    }
}

fn decode<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, GatewayError> {
    serde_json::from_value(v).map_err(|e| GatewayError::Protocol(e.to_string()))
}

fn messages_json(prompt: &RenderedPrompt) -> Value {
    Value::Array(
        prompt
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect(),
    )
}

/// Keeps the tokens at or after `boundary` (in characters) from an echoed
/// OpenAI logprob block. A token straddling the boundary contributes its
/// logprob and the part of its text that lies in the continuation.
pub(crate) fn continuation_tokens(logprobs: &Value, boundary: usize) -> Result<Vec<TokenScore>, GatewayError> {
    let unsupported = || GatewayError::UnsupportedByBackend("completion response lacks echoed logprobs".into());
    let tokens = logprobs.get("tokens").and_then(Value::as_array).ok_or_else(unsupported)?;
    let lps = logprobs.get("token_logprobs").and_then(Value::as_array).ok_or_else(unsupported)?;
    let offsets = logprobs.get("text_offset").and_then(Value::as_array).ok_or_else(unsupported)?;
    if tokens.len() != lps.len() || tokens.len() != offsets.len() {
        return Err(GatewayError::Protocol("logprob arrays differ in length".into()));
    }
    let mut out = Vec::new();
    for ((tok, lp), off) in tokens.iter().zip(lps).zip(offsets) {
        let tok = tok.as_str().ok_or_else(|| GatewayError::Protocol("token not a string".into()))?;
        let off = off.as_u64().ok_or_else(|| GatewayError::Protocol("bad text_offset".into()))? as usize;
        let len = tok.chars().count();
        if off + len <= boundary {
            continue;
        }
        let lp = lp
            .as_f64()
            .ok_or_else(|| GatewayError::Protocol(format!("missing logprob for token {tok:?}")))?;
        let skip = boundary.saturating_sub(off);
        out.push(TokenScore::new(tok.chars().skip(skip).collect::<String>(), lp));
    }
    Ok(out)
}

fn first_choice(v: &Value) -> Result<&Value, GatewayError> {
    v.get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))
}

impl LmBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }

    fn generate(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        let chat = prompt.family == TemplateKind::GenericMessages;
        let mut body = json!({
            "model": self.cfg.model_name,
            "temperature": 0,
            "max_tokens": self.cfg.max_tokens,
        });
        if chat {
            body["messages"] = messages_json(prompt);
        } else {
            body["prompt"] = Value::String(prompt.text.clone());
        }
        match self.cfg.api_style {
            ApiStyle::Native => {
                let v = self.post("generate", Endpoint::Generate, &body)?;
                Ok(decode::<NativeText>(v)?.text)
            }
            ApiStyle::Openai if chat => {
                let v = self.post("chat/completions", Endpoint::Generate, &body)?;
                first_choice(&v)?
                    .pointer("/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| GatewayError::Protocol("choice has no message content".into()))
            }
            ApiStyle::Openai => {
                let v = self.post("completions", Endpoint::Generate, &body)?;
                first_choice(&v)?
                    .get("text")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| GatewayError::Protocol("choice has no text".into()))
            }
        }
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<Vec<TokenScore>, GatewayError> {
        match self.cfg.api_style {
            ApiStyle::Native => {
                let body = json!({
                    "model": self.cfg.model_name,
                    "prompt": prompt,
                    "continuation": continuation,
                });
                let v = self.post("score", Endpoint::Score, &body)?;
                Ok(decode::<NativeTokens>(v)?.tokens)
            }
            ApiStyle::Openai => {
                let body = json!({
                    "model": self.cfg.model_name,
                    "prompt": format!("{prompt}{continuation}"),
                    "max_tokens": 0,
                    "temperature": 0,
                    "echo": true,
                    "logprobs": 0,
                });
                let v = self.post("completions", Endpoint::Score, &body)?;
                let lp = first_choice(&v)?
                    .get("logprobs")
                    .filter(|l| !l.is_null())
                    .ok_or_else(|| {
                        GatewayError::UnsupportedByBackend("completion response lacks logprobs".into())
                    })?;
                continuation_tokens(lp, prompt.chars().count())
            }
        }
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, GatewayError> {
        let body = json!({"model": self.cfg.model_name, "input": text});
        let values = match self.cfg.api_style {
            ApiStyle::Native => decode::<NativeEmbedding>(self.post("embed", Endpoint::Embed, &body)?)?.embedding,
            ApiStyle::Openai => {
                let v = self.post("embeddings", Endpoint::Embed, &body)?;
                let arr = v
                    .pointer("/data/0/embedding")
                    .cloned()
                    .ok_or_else(|| GatewayError::Protocol("response has no data[0].embedding".into()))?;
                decode::<Vec<f64>>(arr)?
            }
        };
        EmbeddingVector::from_wire(values)
    }
}
