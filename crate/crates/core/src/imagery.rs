//! One representative image per mechanism: the first image-search hit for
//! `"<organism>:<mechanism>"`, cached on disk by query.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{RetryPolicy, TransportError};
use crate::model::Dataset;

pub const DEFAULT_IMAGE_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageStatus {
    Ok,
    NoneFound,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub record_id: String,
    pub query: String,
    /// Present exactly when `status` is ok.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub fetched_at: DateTime<Utc>,
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `<organism>:<mechanism>`, verbatim.
pub fn build_image_query(organism: &str, mechanism: &str) -> String {
    format!("{organism}:{mechanism}")
}

#[async_trait]
pub trait ImageSearch: Send + Sync {
    fn id(&self) -> &str;

    /// URL of the first image result, or `None` when there are no results.
    async fn first_image(&self, query: &str) -> Result<Option<String>, String>;
}

/// Serves results from a fixture map of query to URL.
#[derive(Debug, Default)]
pub struct StubSearch {
    results: BTreeMap<String, String>,
    calls: AtomicUsize,
}

#[derive(Deserialize)]
struct StubFile {
    results: BTreeMap<String, String>,
}

const STUB_FIXTURE: &str = include_str!("../fixtures/images/stub.json");

impl StubSearch {
    pub fn new(results: BTreeMap<String, String>) -> Self {
        Self {
            results,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn builtin() -> Self {
        Self::from_json(STUB_FIXTURE).expect("bundled image fixture parses")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let f: StubFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(Self::new(f.results))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ImageSearch for StubSearch {
    fn id(&self) -> &str {
        "stub"
    }

    async fn first_image(&self, query: &str) -> Result<Option<String>, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.results.get(query).cloned())
    }
}

/// Google Custom Search JSON API, image results with safe search on.
pub struct GoogleImageSearch {
    client: reqwest::Client,
    key: String,
    engine_id: String,
    endpoint: String,
    retry: RetryPolicy,
}

impl GoogleImageSearch {
    pub fn new(key: impl Into<String>, engine_id: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client builds"),
            key: key.into(),
            engine_id: engine_id.into(),
            endpoint: "https://www.googleapis.com/customsearch/v1".into(),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `GOOGLE_CSE_KEY` and `GOOGLE_CSE_ID`.
    pub fn from_env() -> Result<Self, String> {
        let key = std::env::var("GOOGLE_CSE_KEY").map_err(|_| "GOOGLE_CSE_KEY is not set".to_string())?;
        let id = std::env::var("GOOGLE_CSE_ID").map_err(|_| "GOOGLE_CSE_ID is not set".to_string())?;
        Ok(Self::new(key, id))
    }

    /// Query parameters sent with every search.
    pub fn params<'a>(&'a self, query: &'a str) -> [(&'static str, &'a str); 6] {
        [
            ("key", &self.key),
            ("cx", &self.engine_id),
            ("q", query),
            ("searchType", "image"),
            ("safe", "active"),
            ("num", "1"),
        ]
    }

    async fn get_once(&self, query: &str) -> Result<serde_json::Value, TransportError> {
        let resp = self
            .client
            .get(&self.endpoint)
            .query(&self.params(query))
            .send()
            .await
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(status.to_string()));
        }
        if !status.is_success() {
            return Err(TransportError::Permanent(status.to_string()));
        }
        resp.json()
            .await
            .map_err(|e| TransportError::Permanent(e.to_string()))
    }
}

#[async_trait]
impl ImageSearch for GoogleImageSearch {
    fn id(&self) -> &str {
        "google-cse"
    }

    async fn first_image(&self, query: &str) -> Result<Option<String>, String> {
        let (body, _) = self
            .retry
            .run(|| self.get_once(query))
            .await
            .map_err(|e| e.to_string())?;
        Ok(body["items"][0]["link"].as_str().map(str::to_string))
    }
}

/// Directory of `<sha256(query)>.json` files holding [`ImageResult`]s.
#[derive(Debug, Clone)]
pub struct ImageCache {
    dir: PathBuf,
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, query: &str) -> PathBuf {
        self.dir.join(format!("{}.json", hex::encode(Sha256::digest(query.as_bytes()))))
    }

    pub fn get(&self, query: &str) -> Option<ImageResult> {
        let text = fs::read_to_string(self.path_for(query)).ok()?;
        serde_json::from_str::<ImageResult>(&text)
            .ok()
            .filter(|r| r.query == query)
    }

    pub fn put(&self, result: &ImageResult) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let text = serde_json::to_string_pretty(result).expect("image result serializes");
        fs::write(self.path_for(&result.query), text)
    }
}

/// Search plus memory and optional disk cache. Errors are not cached, so a
/// later run retries them.
pub struct ImageFetcher {
    search: Arc<dyn ImageSearch>,
    disk: Option<ImageCache>,
    memory: Mutex<HashMap<String, ImageResult>>,
}

impl ImageFetcher {
    pub fn new(search: Arc<dyn ImageSearch>, disk: Option<ImageCache>) -> Self {
        Self {
            search,
            disk,
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub async fn fetch_representative_image(&self, record_id: &str, query: &str) -> ImageResult {
        let cached = self
            .memory
            .lock()
            .expect("cache lock")
            .get(query)
            .cloned()
            .or_else(|| self.disk.as_ref().and_then(|d| d.get(query)));
        if let Some(mut hit) = cached {
            hit.record_id = record_id.to_string();
            return hit;
        }
        let (url, status, error) = match self.search.first_image(query).await {
            Ok(Some(url)) if !url.is_empty() => (Some(url), ImageStatus::Ok, None),
            Ok(_) => (None, ImageStatus::NoneFound, None),
            Err(e) => (None, ImageStatus::Error, Some(e)),
        };
        let result = ImageResult {
            record_id: record_id.to_string(),
            query: query.to_string(),
            url,
            fetched_at: Utc::now(),
            status,
            error,
        };
        if status != ImageStatus::Error {
            self.memory
                .lock()
                .expect("cache lock")
                .insert(query.to_string(), result.clone());
            if let Some(d) = &self.disk {
                if let Err(e) = d.put(&result) {
                    tracing::warn!(error = %e, "could not write image cache");
                }
            }
        }
        result
    }
}

/// Looks up an image for every record (of one problem, if given) and sets
/// `image_url` on the ok ones. At most `concurrency` searches run at once.
pub async fn fetch_images(
    dataset: &mut Dataset,
    fetcher: &ImageFetcher,
    problem: Option<&str>,
    concurrency: usize,
) -> Vec<ImageResult> {
    let jobs: Vec<(String, String)> = dataset
        .records()
        .iter()
        .filter(|r| problem.is_none_or(|p| r.problem == p))
        .map(|r| (r.id.clone(), build_image_query(&r.organism.display_name, &r.mechanism)))
        .collect();
    let results: Vec<ImageResult> = stream::iter(jobs)
        .map(|(id, q)| async move { fetcher.fetch_representative_image(&id, &q).await })
        .buffered(concurrency.max(1))
        .collect()
        .await;
    for r in &results {
        if r.status == ImageStatus::Ok {
            dataset
                .set_image_url(&r.record_id, r.url.clone())
                .expect("id taken from the dataset");
        }
    }
    results
}

/// Default cache directory: `<dataset stem>.images/` next to the dataset.
pub fn default_cache_dir(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    dataset_path.with_file_name(format!("{stem}.images"))
}
