//! Seeding from stored strategy pages: a group page per functional problem
//! links to strategy posts, each of which is distilled into one short
//! mechanism description.
//!
//! Corpus layout on disk:
//!
//! ```text
//! <root>/problems/<slug>/group.html
//! <root>/problems/<slug>/strategies/<n>.html   (n = 1-based card position)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::future::join_all;
use scraper::{ElementRef, Html, Selector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Bindings, Gateway, GatewayError, TemplateId};
use crate::model::{
    validate_record, AppendOutcome, Dataset, DatasetError, MechanismRecord, Organism, Problem, Source,
    ValidationReport, WordLimits,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("group page has no strategy links (layout changed?)")]
    NoStrategyLinks,
    #[error("strategy page has no title")]
    MissingTitle,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("fetch failed for {url}: {message}")]
    Fetch { url: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyLink {
    pub organism: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPage {
    pub organism: String,
    pub title: String,
    /// Empty when the post has no body text.
    pub body_text: String,
    pub references: Vec<String>,
    pub url: String,
}

fn sel(css: &str) -> Selector {
    Selector::parse(css).expect("static selector")
}

fn text_of(el: ElementRef<'_>) -> String {
    el.text().collect::<Vec<_>>().join(" ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One entry per strategy card, in page order. Duplicates are kept.
pub fn parse_group_page(html: &str) -> Result<Vec<StrategyLink>, IngestError> {
    let doc = Html::parse_document(html);
    let card = sel("article.strategy-card");
    let link = sel("a[href]");
    let name = sel(".organism-name");
    let mut out = Vec::new();
    for c in doc.select(&card) {
        let Some(href) = c.select(&link).next().and_then(|a| a.value().attr("href")) else {
            continue;
        };
        let organism = c.select(&name).next().map(text_of).unwrap_or_default();
        out.push(StrategyLink {
            organism,
            url: href.trim().to_string(),
        });
    }
    if out.is_empty() {
        return Err(IngestError::NoStrategyLinks);
    }
    Ok(out)
}

pub fn parse_strategy_page(html: &str, url: &str) -> Result<StrategyPage, IngestError> {
    let doc = Html::parse_document(html);
    let title = doc
        .select(&sel("h1.entry-title"))
        .next()
        .or_else(|| doc.select(&sel("h1")).next())
        .map(text_of)
        .filter(|t| !t.is_empty())
        .ok_or(IngestError::MissingTitle)?;
    let organism = doc
        .select(&sel(".organism-name"))
        .next()
        .map(text_of)
        .unwrap_or_default();
    let body_text = doc
        .select(&sel(".entry-content p"))
        .map(text_of)
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n");
    let references = doc
        .select(&sel(".references li"))
        .map(text_of)
        .filter(|r| !r.is_empty())
        .collect();
    Ok(StrategyPage {
        organism,
        title,
        body_text,
        references,
        url: url.to_string(),
    })
}

/// Post text handed to the distill prompt: title, body and references.
pub fn post_text(page: &StrategyPage) -> String {
    let mut text = format!("{}\n\n{}", page.title, page.body_text);
    if !page.references.is_empty() {
        text.push_str("\n\nReferences:");
        for r in &page.references {
            text.push_str("\n- ");
            text.push_str(r);
        }
    }
    text
}

/// First non-empty line of a completion, without wrapping quotes.
pub fn clean_mechanism(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim().to_string()
}

pub fn distill_bindings(problem: &Problem, organism: &str, page: &StrategyPage) -> (TemplateId, Bindings) {
    let mut b = Bindings::new();
    b.insert("problem".into(), problem.title.clone());
    b.insert("organism".into(), organism.to_string());
    if page.body_text.trim().is_empty() {
        (TemplateId::DistillSeedNoBody, b)
    } else {
        b.insert("asknature_text".into(), post_text(page));
        (TemplateId::DistillSeed, b)
    }
}

/// Distills one strategy page into a seed record. The report carries any
/// word-limit warning.
pub async fn distill_seed(
    gateway: &Gateway,
    problem: &Problem,
    organism: &str,
    page: &StrategyPage,
    limits: &WordLimits,
) -> Result<(MechanismRecord, ValidationReport), IngestError> {
    let (template, bindings) = distill_bindings(problem, organism, page);
    let source = match template {
        TemplateId::DistillSeed => Source::SeedAsknature,
        _ => Source::SeedMissingBody,
    };
    let result = gateway.complete(&gateway.request(template, bindings)).await?;
    let mechanism = clean_mechanism(&result.text);
    if mechanism.is_empty() {
        return Err(GatewayError::EmptyCompletion.into());
    }
    let record = MechanismRecord::new(&problem.id, &mechanism, Organism::new(organism), source);
    let report = validate_record(&record, limits);
    Ok((record, report))
}

/// Problem titles never seeded, one per line in the config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionList {
    titles: Vec<String>,
}

const DEFAULT_EXCLUSIONS: &str = include_str!("../config/excluded_problems.txt");

impl Default for ExclusionList {
    fn default() -> Self {
        Self::parse(DEFAULT_EXCLUSIONS)
    }
}

impl ExclusionList {
    /// One title per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self {
            titles: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        Ok(Self::parse(&fs::read_to_string(path).map_err(io_err(path))?))
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }

    pub fn excludes(&self, slug: &str) -> bool {
        self.titles.iter().any(|t| Problem::slugify(t) == slug)
    }
}

/// A problem directory with its parsed pages.
#[derive(Debug, Clone)]
pub struct ProblemPages {
    pub problem: Problem,
    pub entries: Vec<(StrategyLink, StrategyPage)>,
}

/// Reads one problem directory. Strategy files are matched to cards by
/// position; cards without a stored page are skipped with a warning.
pub fn read_problem_dir(dir: &Path) -> Result<ProblemPages, IngestError> {
    let slug = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let problem = Problem::from_slug(&slug).map_err(|e| IngestError::Io {
        path: dir.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()),
    })?;
    let group_path = dir.join("group.html");
    let links = parse_group_page(&fs::read_to_string(&group_path).map_err(io_err(&group_path))?)?;
    let mut entries = Vec::new();
    for (i, link) in links.into_iter().enumerate() {
        let path = dir.join("strategies").join(format!("{}.html", i + 1));
        let html = match fs::read_to_string(&path) {
            Ok(h) => h,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "missing strategy page");
                continue;
            }
        };
        let page = parse_strategy_page(&html, &link.url)?;
        entries.push((link, page));
    }
    Ok(ProblemPages { problem, entries })
}

/// Problem directories under `<root>/problems`, sorted by slug, minus excluded ones.
pub fn problem_dirs(root: &Path, exclusions: &ExclusionList) -> Result<Vec<PathBuf>, IngestError> {
    let base = root.join("problems");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&base)
        .map_err(io_err(&base))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| {
            let slug = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            !exclusions.excludes(slug)
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub problems: Vec<String>,
    pub outcome: AppendOutcome,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
}

/// Parses the corpus, distills every page concurrently and appends the
/// seeds in (problem, card) order.
pub async fn seed_corpus(
    gateway: Arc<Gateway>,
    root: &Path,
    exclusions: &ExclusionList,
    dataset: &mut Dataset,
) -> Result<SeedReport, IngestError> {
    let mut report = SeedReport::default();
    let limits = *dataset.limits();
    for dir in problem_dirs(root, exclusions)? {
        let pages = read_problem_dir(&dir)?;
        report.problems.push(pages.problem.id.clone());
        let jobs = pages.entries.iter().map(|(link, page)| {
            let organism = if link.organism.is_empty() { &page.organism } else { &link.organism };
            distill_seed(&gateway, &pages.problem, organism, page, &limits)
        });
        let mut batch = Vec::new();
        for ((link, _), res) in pages.entries.iter().zip(join_all(jobs).await) {
            match res {
                Ok((record, rep)) => {
                    for w in rep.warnings() {
                        report.warnings.push(format!("{} {}: {}", record.problem, record.organism.name, w.message));
                    }
                    batch.push(record);
                }
                Err(e) => report.failures.push(format!("{} {}: {e}", pages.problem.id, link.url)),
            }
        }
        let outcome = dataset.append(batch)?;
        report.outcome.accepted += outcome.accepted;
        report.outcome.rejected_duplicates += outcome.rejected_duplicates;
    }
    Ok(report)
}

/// Downloads a group page and its strategy pages into the corpus layout.
pub async fn fetch_problem(
    client: &reqwest::Client,
    group_url: &str,
    root: &Path,
    slug: &str,
) -> Result<usize, IngestError> {
    let base = reqwest::Url::parse(group_url).map_err(|e| IngestError::Fetch {
        url: group_url.to_string(),
        message: e.to_string(),
    })?;
    let get = |url: String| async move {
        let resp = client.get(&url).send().await.map_err(|e| IngestError::Fetch {
            url: url.clone(),
            message: e.to_string(),
        })?;
        if !resp.status().is_success() {
            return Err(IngestError::Fetch {
                url,
                message: resp.status().to_string(),
            });
        }
        resp.text().await.map_err(|e| IngestError::Fetch {
            url,
            message: e.to_string(),
        })
    };
    let dir = root.join("problems").join(slug);
    let strategies = dir.join("strategies");
    fs::create_dir_all(&strategies).map_err(io_err(&strategies))?;
    let group = get(group_url.to_string()).await?;
    let links = parse_group_page(&group)?;
    let group_path = dir.join("group.html");
    fs::write(&group_path, &group).map_err(io_err(&group_path))?;
    for (i, link) in links.iter().enumerate() {
        let url = base.join(&link.url).map(|u| u.to_string()).unwrap_or_else(|_| link.url.clone());
        let html = get(url).await?;
        let path = strategies.join(format!("{}.html", i + 1));
        fs::write(&path, html).map_err(io_err(&path))?;
    }
    Ok(links.len())
}
