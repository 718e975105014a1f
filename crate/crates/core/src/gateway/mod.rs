//! The single boundary to completion and embedding providers.
//!
//! Every model call goes through [`Gateway`]: it renders the template, bounds
//! in-flight requests with a semaphore and hands the rendered prompt to a
//! [`CompletionBackend`]. Three backends exist: a live OpenAI-compatible
//! client, a deterministic fixture-table mock, and a replay store keyed by
//! request hash.

mod embed;
mod live;
mod mock;
mod replay;
mod structured;
mod template;

pub use embed::{EmbeddingResult, Embedder, MockEmbedder, OpenAiEmbedder};
pub use live::{HttpTransport, JsonTransport, OpenAiBackend, RetryPolicy, TransportError};
pub use mock::{MockBackend, MockEntry, MockTable};
pub use replay::{request_hash, RecordingBackend, ReplayBackend, ReplayRecord};
pub use structured::{parse_structured_list, serialize_structured_list, MechanismPair, StructuredList};
pub use template::{render_prompt, Bindings, PromptTemplate, RenderedPrompt, TemplateId};

use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("unbound placeholder {0:?}")]
    UnboundPlaceholder(String),
    #[error("no mock fixture for template {template}")]
    MockMiss { template: TemplateId },
    #[error("no recorded response for {template} request {hash}")]
    ReplayMiss { template: TemplateId, hash: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("nothing to embed")]
    EmptyInput,
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

/// Which model and sampling settings each template uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Expansion, structuring, distillation and the interactive features.
    pub generation_model: String,
    pub taxonomy_model: String,
    pub embedding_model: String,
    pub expansion_max_tokens: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generation_model: "gpt-4".into(),
            taxonomy_model: "gpt-3.5-turbo".into(),
            embedding_model: "text-embedding-ada-002".into(),
            expansion_max_tokens: 1500,
        }
    }
}

impl ModelConfig {
    pub fn model_for(&self, template: TemplateId) -> &str {
        match template {
            TemplateId::Taxonomy => &self.taxonomy_model,
            _ => &self.generation_model,
        }
    }

    /// Zero for the extraction-style templates, provider default otherwise.
    pub fn temperature_for(&self, template: TemplateId) -> Option<f32> {
        match template {
            TemplateId::Taxonomy
            | TemplateId::StructureOutput
            | TemplateId::DistillSeed
            | TemplateId::DistillSeedNoBody => Some(0.0),
            _ => None,
        }
    }

    pub fn max_tokens_for(&self, template: TemplateId) -> Option<u32> {
        match template {
            TemplateId::ExpandBreadth | TemplateId::ExpandDepth => Some(self.expansion_max_tokens),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template: TemplateId,
    pub bindings: Bindings,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub backend: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

impl CompletionResult {
    pub fn local(text: impl Into<String>, backend: &str) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            backend: backend.to_string(),
            latency_ms: 0,
            attempts: 1,
        }
    }
}

#[async_trait]
pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;

    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> Result<CompletionResult, GatewayError>;
}

pub const DEFAULT_CONCURRENCY: usize = 10;

pub struct Gateway {
    backend: Arc<dyn CompletionBackend>,
    embedder: Arc<dyn Embedder>,
    limiter: Arc<Semaphore>,
    models: ModelConfig,
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            backend,
            embedder,
            limiter: Arc::new(Semaphore::new(DEFAULT_CONCURRENCY)),
            models: ModelConfig::default(),
        }
    }

    pub fn with_concurrency(mut self, permits: usize) -> Self {
        self.limiter = Arc::new(Semaphore::new(permits.max(1)));
        self
    }

    pub fn with_models(mut self, models: ModelConfig) -> Self {
        self.models = models;
        self
    }

    pub fn models(&self) -> &ModelConfig {
        &self.models
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// A request with the configured model and sampling defaults for `template`.
    pub fn request(&self, template: TemplateId, bindings: Bindings) -> CompletionRequest {
        CompletionRequest {
            template,
            bindings,
            model: self.models.model_for(template).to_string(),
            temperature: self.models.temperature_for(template),
            max_tokens: self.models.max_tokens_for(template),
        }
    }

    pub async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let prompt = render_prompt(request.template, &request.bindings)?;
        let _permit = self.limiter.acquire().await.expect("semaphore never closed");
        let started = Instant::now();
        let mut result = self.backend.complete(request, &prompt).await?;
        if result.text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        if result.latency_ms == 0 {
            result.latency_ms = started.elapsed().as_millis() as u64;
        }
        tracing::debug!(template = %request.template, backend = %result.backend, "completion");
        Ok(result)
    }

    /// One vector per input text, in input order.
    pub async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingResult>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let _permit = self.limiter.acquire().await.expect("semaphore never closed");
        let vectors = self.embedder.embed(texts).await?;
        if vectors.len() != texts.len() {
            return Err(GatewayError::Provider(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        let model = self.embedder.model().to_string();
        Ok(vectors
            .into_iter()
            .map(|vector| EmbeddingResult {
                vector,
                model: model.clone(),
            })
            .collect())
    }
}
