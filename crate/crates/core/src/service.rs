//! HTTP API over an immutable dataset snapshot: browsing problems, clusters
//! and mechanisms, plus the explain/compare/combine/critique interactions.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::clustering::{ClusterModel, ClusterSet};
use crate::gateway::{Bindings, Gateway, TemplateId};
use crate::model::{Dataset, MechanismRecord, Problem};

/// Longest accepted critique text, in characters.
pub const MAX_IDEA_CHARS: usize = 32 * 1024;

/// Everything a handler can see. Built once at startup and never mutated.
pub struct Snapshot {
    pub dataset: Dataset,
    pub clusters: ClusterSet,
    pub problems: Vec<Problem>,
    pub gateway: Arc<Gateway>,
}

impl Snapshot {
    /// Serves the problems present in the dataset.
    pub fn new(dataset: Dataset, clusters: ClusterSet, gateway: Arc<Gateway>) -> Self {
        let problems = dataset.problems().to_vec();
        Self {
            dataset,
            clusters,
            problems,
            gateway,
        }
    }

    pub fn with_problems(mut self, problems: Vec<Problem>) -> Self {
        self.problems = problems;
        self
    }

    fn problem(&self, id: &str) -> Result<&Problem, ApiError> {
        self.problems
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| ApiError::not_found(format!("unknown problem {id:?}")))
    }

    fn record(&self, id: &str) -> Result<&MechanismRecord, ApiError> {
        self.dataset
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown mechanism {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub id: String,
    pub title: String,
    pub record_count: usize,
    pub cluster_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberView {
    pub id: String,
    pub mechanism: String,
    pub organism: String,
    pub image_url: Option<String>,
}

impl From<&MechanismRecord> for MemberView {
    fn from(r: &MechanismRecord) -> Self {
        Self {
            id: r.id.clone(),
            mechanism: r.mechanism.clone(),
            organism: r.organism.display_name.clone(),
            image_url: r.image_url.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterView {
    pub id: u32,
    pub label: Vec<String>,
    pub size: usize,
    pub members: Vec<MemberView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClustersView {
    pub problem: Problem,
    pub clusters: Vec<ClusterView>,
    /// Records of the problem that the cluster model does not cover.
    pub unclustered: Vec<MemberView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Explain,
    Compare,
    Combine,
    Critique,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExplainRequest {
    pub mechanism_id: String,
    pub problem_id: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PairRequest {
    pub a: String,
    pub b: String,
    pub problem_id: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CritiqueRequest {
    pub idea_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionResponse {
    pub kind: InteractionKind,
    pub markdown: String,
    pub inputs: Value,
    /// Format checks that the reply failed, such as a compare reply without
    /// a table. The markdown is still returned.
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Header cells of the first markdown table in `md`: a pipe row directly
/// followed by a `|---|---|` delimiter row with the same number of cells.
pub fn markdown_table_headers(md: &str) -> Option<Vec<String>> {
    let lines: Vec<&str> = md.lines().map(str::trim).collect();
    lines.windows(2).find_map(|w| {
        let header = table_cells(w[0])?;
        let delim = table_cells(w[1])?;
        let is_delim = delim.iter().all(|c| {
            let c = c.trim_matches(':');
            c.len() >= 3 && c.chars().all(|ch| ch == '-')
        });
        (is_delim && delim.len() == header.len()).then_some(header)
    })
}

fn table_cells(line: &str) -> Option<Vec<String>> {
    if !line.contains('|') {
        return None;
    }
    let inner = line.strip_prefix('|').unwrap_or(line);
    let inner = inner.strip_suffix('|').unwrap_or(inner);
    let cells: Vec<String> = inner.split('|').map(|c| c.trim().to_string()).collect();
    (cells.len() >= 2).then_some(cells)
}

/// True when `md` has at least one ATX heading (`# Title`).
pub fn has_markdown_heading(md: &str) -> bool {
    md.lines().any(|l| {
        let t = l.trim_start();
        let hashes = t.chars().take_while(|&c| c == '#').count();
        (1..=6).contains(&hashes) && t[hashes..].starts_with(' ')
    })
}

pub fn router(snapshot: Arc<Snapshot>) -> Router {
    router_with_cors(snapshot, AllowOrigin::any())
}

pub fn router_with_cors(snapshot: Arc<Snapshot>, origin: AllowOrigin) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/problems", get(list_problems))
        .route("/problems/:id/clusters", get(problem_clusters))
        .route("/problems/:id/clusters/:cid", get(one_cluster))
        .route("/mechanisms/:id", get(mechanism))
        .route("/actions/explain", post(explain))
        .route("/actions/compare", post(compare))
        .route("/actions/combine", post(combine))
        .route("/actions/critique", post(critique))
        .layer(cors)
        .with_state(snapshot)
}

pub async fn serve(snapshot: Arc<Snapshot>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(snapshot)).await
}

type Shared = State<Arc<Snapshot>>;

async fn healthz(State(s): Shared) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "records": s.dataset.len(),
        "problems": s.problems.len(),
        "backend": s.gateway.backend_id(),
    }))
}

async fn list_problems(State(s): Shared) -> Json<Vec<ProblemSummary>> {
    Json(
        s.problems
            .iter()
            .map(|p| ProblemSummary {
                id: p.id.clone(),
                title: p.title.clone(),
                record_count: s.dataset.count_for(&p.id),
                cluster_count: s.clusters.problems.get(&p.id).map_or(0, |m| m.effective_k),
            })
            .collect(),
    )
}

fn cluster_view(s: &Snapshot, model: &ClusterModel, cid: u32, ids: &[String]) -> ClusterView {
    let members: Vec<MemberView> = ids
        .iter()
        .filter_map(|id| s.dataset.get(id))
        .map(MemberView::from)
        .collect();
    ClusterView {
        id: cid,
        label: model.labels.get(&cid).cloned().unwrap_or_default(),
        size: members.len(),
        members,
    }
}

fn clusters_view(s: &Snapshot, problem: &Problem) -> ClustersView {
    let model = s.clusters.problems.get(&problem.id);
    let clusters = model
        .map(|m| {
            m.members()
                .iter()
                .map(|(&cid, ids)| cluster_view(s, m, cid, ids))
                .collect()
        })
        .unwrap_or_default();
    let unclustered = s
        .dataset
        .records_for(&problem.id)
        .filter(|r| model.is_none_or(|m| !m.assignments.contains_key(&r.id)))
        .map(MemberView::from)
        .collect();
    ClustersView {
        problem: problem.clone(),
        clusters,
        unclustered,
    }
}

async fn problem_clusters(State(s): Shared, Path(id): Path<String>) -> Result<Json<ClustersView>, ApiError> {
    let problem = s.problem(&id)?;
    Ok(Json(clusters_view(&s, problem)))
}

async fn one_cluster(State(s): Shared, Path((id, cid)): Path<(String, String)>) -> Result<Json<ClusterView>, ApiError> {
    s.problem(&id)?;
    let unknown = || ApiError::not_found(format!("unknown cluster {cid:?} for {id}"));
    let cid: u32 = cid.parse().map_err(|_| unknown())?;
    let model = s.clusters.problems.get(&id).ok_or_else(unknown)?;
    let members = model.members();
    let ids = members.get(&cid).ok_or_else(unknown)?;
    Ok(Json(cluster_view(&s, model, cid, ids)))
}

async fn mechanism(State(s): Shared, Path(id): Path<String>) -> Result<Json<MechanismRecord>, ApiError> {
    Ok(Json(s.record(&id)?.clone()))
}

async fn run(s: &Snapshot, template: TemplateId, bindings: Bindings) -> Result<String, ApiError> {
    let request = s.gateway.request(template, bindings);
    s.gateway
        .complete(&request)
        .await
        .map(|r| r.text)
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))
}

fn bind(pairs: &[(&str, &str)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

async fn explain(State(s): Shared, Json(req): Json<ExplainRequest>) -> Result<Json<InteractionResponse>, ApiError> {
    let problem = s.problem(&req.problem_id)?;
    let r = s.record(&req.mechanism_id)?;
    let bindings = bind(&[
        ("problem", &problem.title),
        ("organism", &r.organism.display_name),
        ("mechanism", &r.mechanism),
    ]);
    let markdown = run(&s, TemplateId::Explain, bindings).await?;
    Ok(Json(InteractionResponse {
        kind: InteractionKind::Explain,
        markdown,
        inputs: json!({ "mechanism_id": req.mechanism_id, "problem_id": req.problem_id }),
        warnings: Vec::new(),
    }))
}

async fn pair_action(s: &Snapshot, kind: InteractionKind, req: PairRequest) -> Result<InteractionResponse, ApiError> {
    if req.a == req.b {
        return Err(ApiError::bad_request("a and b must be different mechanisms"));
    }
    let problem = s.problem(&req.problem_id)?;
    let a = s.record(&req.a)?;
    let b = s.record(&req.b)?;
    let template = match kind {
        InteractionKind::Compare => TemplateId::Compare,
        _ => TemplateId::Combine,
    };
    let bindings = bind(&[
        ("problem", &problem.title),
        ("organism_a", &a.organism.display_name),
        ("mechanism_a", &a.mechanism),
        ("organism_b", &b.organism.display_name),
        ("mechanism_b", &b.mechanism),
    ]);
    let markdown = run(s, template, bindings).await?;
    let mut warnings = Vec::new();
    match kind {
        InteractionKind::Compare if markdown_table_headers(&markdown).is_none() => {
            warnings.push("reply has no markdown table".to_string())
        }
        InteractionKind::Combine if !has_markdown_heading(&markdown) => {
            warnings.push("reply has no section headers".to_string())
        }
        _ => {}
    }
    Ok(InteractionResponse {
        kind,
        markdown,
        inputs: json!({ "a": req.a, "b": req.b, "problem_id": req.problem_id }),
        warnings,
    })
}

async fn compare(State(s): Shared, Json(req): Json<PairRequest>) -> Result<Json<InteractionResponse>, ApiError> {
    pair_action(&s, InteractionKind::Compare, req).await.map(Json)
}

async fn combine(State(s): Shared, Json(req): Json<PairRequest>) -> Result<Json<InteractionResponse>, ApiError> {
    pair_action(&s, InteractionKind::Combine, req).await.map(Json)
}

async fn critique(State(s): Shared, Json(req): Json<CritiqueRequest>) -> Result<Json<InteractionResponse>, ApiError> {
    let idea = req.idea_text.trim();
    if idea.is_empty() {
        return Err(ApiError::bad_request("idea_text is empty"));
    }
    let chars = idea.chars().count();
    if chars > MAX_IDEA_CHARS {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("idea_text has {chars} characters, limit is {MAX_IDEA_CHARS}"),
        ));
    }
    let markdown = run(&s, TemplateId::Critique, bind(&[("idea", idea)])).await?;
    Ok(Json(InteractionResponse {
        kind: InteractionKind::Critique,
        markdown,
        inputs: json!({ "idea_text": req.idea_text }),
        warnings: Vec::new(),
    }))
}

/// Cluster sizes keyed by cluster id, for checking a served partition.
pub fn cluster_sizes(view: &ClustersView) -> BTreeMap<u32, usize> {
    view.clusters.iter().map(|c| (c.id, c.size)).collect()
}
