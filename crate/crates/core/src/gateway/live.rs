//! OpenAI-compatible chat completions over HTTP, with retry on transient
//! transport failures.

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{CompletionBackend, CompletionRequest, CompletionResult, GatewayError, RenderedPrompt};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: connection problems, timeouts, 429 and 5xx.
    Transient(String),
    Permanent(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Transient(m) => write!(f, "transient: {m}"),
            TransportError::Permanent(m) => write!(f, "permanent: {m}"),
        }
    }
}

/// POSTs a JSON body to a path under the provider base URL.
#[async_trait]
pub trait JsonTransport: Send + Sync {
    async fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::Client,
    base_url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client builds");
        Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
        }
    }

    /// Reads `OPENAI_API_KEY` and optional `OPENAI_BASE_URL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let key = std::env::var("OPENAI_API_KEY")
            .map_err(|_| GatewayError::Config("OPENAI_API_KEY is not set".into()))?;
        let base = std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into());
        Ok(Self::new(base, key))
    }
}

#[async_trait]
impl JsonTransport for HttpTransport {
    async fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let resp = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(TransportError::Permanent(format!("{status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Permanent(format!("bad json: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails permanently, or retries run out.
    /// Returns the value and the number of attempts made.
    pub async fn run<T, F, Fut>(&self, mut op: F) -> Result<(T, u32), GatewayError>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, TransportError>>,
    {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match op().await {
                Ok(v) => return Ok((v, attempt)),
                Err(TransportError::Permanent(m)) => return Err(GatewayError::Provider(m)),
                Err(TransportError::Transient(m)) => {
                    if attempt > self.max_retries {
                        return Err(GatewayError::RetriesExhausted { attempts: attempt, last: m });
                    }
                    tracing::warn!(attempt, error = %m, "transient provider failure, retrying");
                    tokio::time::sleep(self.delay(attempt - 1)).await;
                }
            }
        }
    }
}

pub struct OpenAiBackend {
    transport: Arc<dyn JsonTransport>,
    retry: RetryPolicy,
}

impl OpenAiBackend {
    pub fn new(transport: Arc<dyn JsonTransport>) -> Self {
        Self {
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        Ok(Self::new(Arc::new(HttpTransport::from_env()?)))
    }
}

fn chat_body(request: &CompletionRequest, prompt: &RenderedPrompt) -> Value {
    let mut body = json!({
        "model": request.model,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": prompt.user},
        ],
    });
    if let Some(t) = request.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(m) = request.max_tokens {
        body["max_tokens"] = json!(m);
    }
    body
}

#[async_trait]
impl CompletionBackend for OpenAiBackend {
    fn id(&self) -> &str {
        "live"
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> Result<CompletionResult, GatewayError> {
        let body = chat_body(request, prompt);
        let started = Instant::now();
        let (reply, attempts) = self
            .retry
            .run(|| self.transport.post_json("chat/completions", &body))
            .await?;
        let text = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::Provider("reply has no message content".into()))?
            .to_string();
        let tokens = |k: &str| reply["usage"][k].as_u64().unwrap_or(0) as u32;
        Ok(CompletionResult {
            text,
            prompt_tokens: tokens("prompt_tokens"),
            completion_tokens: tokens("completion_tokens"),
            backend: "live".into(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts,
        })
    }
}
