//! Record/replay of completions, keyed by a hash of the model name and the
//! rendered prompt. One JSON file per request: `<dir>/<hash>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionBackend, CompletionRequest, CompletionResult, GatewayError, RenderedPrompt, TemplateId};

/// Hex SHA-256 over template id, model and rendered prompt text.
pub fn request_hash(template: TemplateId, model: &str, prompt: &RenderedPrompt) -> String {
    let mut hasher = Sha256::new();
    for part in [template.as_str(), model, &prompt.system, &prompt.user] {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub hash: String,
    pub template: TemplateId,
    pub model: String,
    pub system: String,
    pub user: String,
    pub response: String,
}

impl ReplayRecord {
    pub fn new(template: TemplateId, model: &str, prompt: &RenderedPrompt, response: &str) -> Self {
        Self {
            hash: request_hash(template, model, prompt),
            template,
            model: model.to_string(),
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            response: response.to_string(),
        }
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, GatewayError> {
        fs::create_dir_all(dir).map_err(|e| GatewayError::Fixture(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{}.json", self.hash));
        let mut text = serde_json::to_string_pretty(self).expect("record serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

pub struct ReplayBackend {
    records: HashMap<String, ReplayRecord>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.hash.clone(), r)).collect(),
        }
    }

    /// Loads every `*.json` record in `dir`. A record whose stored hash does
    /// not match its contents is rejected.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref();
        let entries = fs::read_dir(dir).map_err(|e| GatewayError::Fixture(format!("{}: {e}", dir.display())))?;
        let mut records = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| GatewayError::Fixture(e.to_string()))?.path();
            if path.extension().is_none_or(|x| x != "json") {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
            let record: ReplayRecord = serde_json::from_str(&text)
                .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
            let prompt = RenderedPrompt {
                system: record.system.clone(),
                user: record.user.clone(),
            };
            if request_hash(record.template, &record.model, &prompt) != record.hash {
                return Err(GatewayError::Fixture(format!("{}: hash does not match content", path.display())));
            }
            records.push(record);
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[async_trait]
impl CompletionBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> Result<CompletionResult, GatewayError> {
        let hash = request_hash(request.template, &request.model, prompt);
        self.records
            .get(&hash)
            .map(|r| CompletionResult::local(r.response.clone(), "replay"))
            .ok_or(GatewayError::ReplayMiss {
                template: request.template,
                hash,
            })
    }
}

/// Passes requests to an inner backend and writes each success to `dir` in
/// the replay format.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    dir: PathBuf,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

#[async_trait]
impl CompletionBackend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> Result<CompletionResult, GatewayError> {
        let result = self.inner.complete(request, prompt).await?;
        ReplayRecord::new(request.template, &request.model, prompt, &result.text).write_to(&self.dir)?;
        Ok(result)
    }
}
