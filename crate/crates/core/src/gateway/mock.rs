//! Deterministic stand-in for a completion provider.
//!
//! A [`MockTable`] is a list of entries, each naming a template, a (possibly
//! empty) subset of bindings to match, and what to reply with. The entry with
//! the most matching bindings wins; ties go to the earliest entry. A reply is
//! either a fixed `response`, one of several `responses` picked by a stable
//! hash of the request, or `echo`: the value of the named binding.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Bindings, CompletionBackend, CompletionRequest, CompletionResult, GatewayError, RenderedPrompt, TemplateId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub template: TemplateId,
    #[serde(default)]
    pub bindings: Bindings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo: Option<String>,
}

impl MockEntry {
    fn check(&self) -> Result<(), GatewayError> {
        let kinds = [
            self.response.is_some(),
            self.responses.as_ref().is_some_and(|r| !r.is_empty()),
            self.echo.is_some(),
        ];
        if kinds.iter().filter(|k| **k).count() != 1 {
            return Err(GatewayError::Fixture(format!(
                "{} entry {:?} needs exactly one of response, responses, echo",
                self.template, self.bindings
            )));
        }
        Ok(())
    }

    fn matches(&self, request: &CompletionRequest) -> bool {
        self.template == request.template
            && self
                .bindings
                .iter()
                .all(|(k, v)| request.bindings.get(k) == Some(v))
    }

    fn reply(&self, request: &CompletionRequest) -> Option<String> {
        if let Some(r) = &self.response {
            return Some(r.clone());
        }
        if let Some(rs) = &self.responses {
            let pick = (stable_hash(request) % rs.len() as u64) as usize;
            return Some(rs[pick].clone());
        }
        let name = self.echo.as_ref()?;
        request.bindings.get(name).cloned()
    }
}

fn stable_hash(request: &CompletionRequest) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(request.template.as_str().as_bytes());
    for (k, v) in &request.bindings {
        hasher.update([0u8]);
        hasher.update(k.as_bytes());
        hasher.update([0u8]);
        hasher.update(v.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    pub entries: Vec<MockEntry>,
}

const BUILTIN: [(&str, &str); 4] = [
    ("seed.json", include_str!("../../fixtures/mock/seed.json")),
    ("taxonomy.json", include_str!("../../fixtures/mock/taxonomy.json")),
    ("expansion.json", include_str!("../../fixtures/mock/expansion.json")),
    ("interactions.json", include_str!("../../fixtures/mock/interactions.json")),
];

impl MockTable {
    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let table: MockTable =
            serde_json::from_str(text).map_err(|e| GatewayError::Fixture(e.to_string()))?;
        for e in &table.entries {
            e.check()?;
        }
        Ok(table)
    }

    /// The committed fixture tables bundled into the binary.
    pub fn builtin() -> Self {
        let mut table = MockTable::default();
        for (name, text) in BUILTIN {
            let part = Self::from_json(text).unwrap_or_else(|e| panic!("bundled fixture {name}: {e}"));
            table.entries.extend(part.entries);
        }
        table
    }

    /// Loads one JSON file, or every `*.json` in a directory in name order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|e| GatewayError::Fixture(format!("{}: {e}", p.display())))
        };
        if path.is_dir() {
            let mut files: Vec<_> = fs::read_dir(path)
                .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            let mut table = MockTable::default();
            for f in files {
                table.entries.extend(Self::from_json(&read(&f)?)?.entries);
            }
            Ok(table)
        } else {
            Self::from_json(&read(path)?)
        }
    }

    pub fn lookup(&self, request: &CompletionRequest) -> Option<&MockEntry> {
        let mut best: Option<&MockEntry> = None;
        for e in self.entries.iter().filter(|e| e.matches(request)) {
            if best.is_none_or(|b| e.bindings.len() > b.bindings.len()) {
                best = Some(e);
            }
        }
        best
    }
}

pub struct MockBackend {
    table: MockTable,
    calls: AtomicUsize,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self::from_table(MockTable::default())
    }

    pub fn from_table(table: MockTable) -> Self {
        Self {
            table,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn builtin() -> Self {
        Self::from_table(MockTable::builtin())
    }

    pub fn with_entry(mut self, entry: MockEntry) -> Self {
        self.table.entries.push(entry);
        self
    }

    pub fn with_response<'a>(
        self,
        template: TemplateId,
        bindings: impl IntoIterator<Item = (&'a str, &'a str)>,
        response: &str,
    ) -> Self {
        self.with_entry(MockEntry {
            template,
            bindings: bindings
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            response: Some(response.to_string()),
            responses: None,
            echo: None,
        })
    }

    /// Completions served so far, including misses.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn table(&self) -> &MockTable {
        &self.table
    }
}

#[async_trait]
impl CompletionBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        _prompt: &RenderedPrompt,
    ) -> Result<CompletionResult, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.table
            .lookup(request)
            .and_then(|e| e.reply(request))
            .map(|text| CompletionResult::local(text, "mock"))
            .ok_or(GatewayError::MockMiss {
                template: request.template,
            })
    }
}
