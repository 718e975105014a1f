//! Domain types shared by every stage of the pipeline, plus the append-only
//! JSONL dataset store.
//!
//! A [`MechanismRecord`] is one (problem, mechanism, organism) triple. Records
//! for a problem are numbered by `generation_index` in creation order, and a
//! normalized dedup key keeps repeated phrasings from being stored twice.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::TaxonomicHierarchy;

/// A functional problem such as "Manage Turbulence", identified by a slug.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub title: String,
}

impl Problem {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        let title = title.into();
        if !is_valid_slug(&id) {
            return Err(ModelError::InvalidSlug(id));
        }
        if title.trim().is_empty() {
            return Err(ModelError::EmptyTitle(id));
        }
        Ok(Self { id, title })
    }

    /// Builds a problem whose title is the title-cased slug
    /// (`manage-turbulence` becomes `Manage Turbulence`).
    pub fn from_slug(id: &str) -> Result<Self, ModelError> {
        let title = id
            .split('-')
            .map(|w| {
                let mut chars = w.chars();
                match chars.next() {
                    Some(first) => first.to_uppercase().chain(chars).collect::<String>(),
                    None => String::new(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        Self::new(id, title)
    }

    /// Slug for a free-form title: lowercase, non-alphanumerics collapsed to `-`.
    pub fn slugify(title: &str) -> String {
        let mut slug = String::new();
        for ch in title.trim().chars() {
            if ch.is_ascii_alphanumeric() {
                slug.push(ch.to_ascii_lowercase());
            } else if !slug.ends_with('-') && !slug.is_empty() {
                slug.push('-');
            }
        }
        slug.trim_end_matches('-').to_string()
    }
}

/// Lowercase, hyphen-separated, non-empty.
pub fn is_valid_slug(s: &str) -> bool {
    !s.is_empty()
        && s.split('-').all(|part| {
            !part.is_empty()
                && part
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Organism {
    /// Identity key: `lowercase(trim(display_name))`.
    pub name: String,
    pub display_name: String,
}

impl Organism {
    pub fn new(display_name: impl Into<String>) -> Self {
        let display_name = display_name.into();
        Self {
            name: display_name.trim().to_lowercase(),
            display_name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    SeedAsknature,
    SeedMissingBody,
    ExpansionBreadth,
    ExpansionDepth,
}

impl Source {
    pub fn is_seed(self) -> bool {
        matches!(self, Source::SeedAsknature | Source::SeedMissingBody)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::SeedAsknature => "seed-asknature",
            Source::SeedMissingBody => "seed-missing-body",
            Source::ExpansionBreadth => "expansion-breadth",
            Source::ExpansionDepth => "expansion-depth",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dataset row. Field order here is the on-disk JSONL field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub id: String,
    pub problem: String,
    pub mechanism: String,
    pub organism: Organism,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<TaxonomicHierarchy>,
    pub generation_index: u64,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_batch: Option<String>,
    pub word_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
}

impl MechanismRecord {
    /// New unindexed record. The id is derived from the dedup key, so equal
    /// keys always get equal ids; `generation_index` is assigned on append.
    pub fn new(problem: &str, mechanism: &str, organism: Organism, source: Source) -> Self {
        let mechanism = mechanism.trim().to_string();
        let key = dedup_key(problem, &organism.name, &mechanism);
        Self {
            id: record_id(&key),
            problem: problem.to_string(),
            word_count: word_count(&mechanism),
            mechanism,
            organism,
            taxonomy: None,
            generation_index: 0,
            source,
            parent_batch: None,
            image_url: None,
            cluster_id: None,
        }
    }

    pub fn with_batch(mut self, batch: impl Into<String>) -> Self {
        self.parent_batch = Some(batch.into());
        self
    }

    pub fn with_taxonomy(mut self, taxonomy: Option<TaxonomicHierarchy>) -> Self {
        self.taxonomy = taxonomy;
        self
    }

    pub fn dedup_key(&self) -> String {
        dedup_key(&self.problem, &self.organism.name, &self.mechanism)
    }
}

/// Whitespace-token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_mechanism(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect::<String>()
        .to_lowercase();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}'
    )
}

pub fn dedup_key(problem: &str, organism_name: &str, mechanism: &str) -> String {
    format!(
        "{}\u{1f}{}\u{1f}{}",
        problem,
        normalize_mechanism(organism_name),
        normalize_mechanism(mechanism)
    )
}

fn record_id(key: &str) -> String {
    let digest = Sha256::digest(key.as_bytes());
    format!("m-{}", &hex::encode(digest)[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordLimits {
    pub seed: usize,
    pub expansion: usize,
}

impl Default for WordLimits {
    fn default() -> Self {
        Self {
            seed: 12,
            expansion: 14,
        }
    }
}

impl WordLimits {
    pub fn limit_for(&self, source: Source) -> usize {
        if source.is_seed() {
            self.seed
        } else {
            self.expansion
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    fn error(&mut self, field: &str, message: impl Into<String>) {
        self.findings.push(Finding {
            field: field.to_string(),
            severity: Severity::Error,
            message: message.into(),
        });
    }

    fn warning(&mut self, field: &str, message: impl Into<String>) {
        self.findings.push(Finding {
            field: field.to_string(),
            severity: Severity::Warning,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .findings
            .iter()
            .map(|x| format!("{:?} {}: {}", x.severity, x.field, x.message))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks record invariants. Word-limit breaches are warnings only.
pub fn validate_record(record: &MechanismRecord, limits: &WordLimits) -> ValidationReport {
    let mut report = ValidationReport::default();
    if record.id.trim().is_empty() {
        report.error("id", "id is empty");
    }
    if !is_valid_slug(&record.problem) {
        report.error("problem", format!("invalid problem slug {:?}", record.problem));
    }
    if record.mechanism.trim().is_empty() {
        report.error("mechanism", "mechanism is empty");
    }
    if record.organism.name.is_empty() {
        report.error("organism", "organism name is empty");
    } else if record.organism.name != record.organism.display_name.trim().to_lowercase() {
        report.error(
            "organism",
            format!(
                "name {:?} is not the normalized display name {:?}",
                record.organism.name, record.organism.display_name
            ),
        );
    }
    let counted = word_count(&record.mechanism);
    if record.word_count != counted {
        report.error(
            "word_count",
            format!("word_count {} != {} tokens", record.word_count, counted),
        );
    }
    if let Some(tax) = &record.taxonomy {
        if let Err(e) = tax.check() {
            report.error("taxonomy", e.to_string());
        }
    }
    let limit = limits.limit_for(record.source);
    if counted > limit && !record.mechanism.trim().is_empty() {
        report.warning("word_count", format!("word_count {} > {}", counted, limit));
    }
    report
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid problem slug {0:?}")]
    InvalidSlug(String),
    #[error("problem {0:?} has an empty title")]
    EmptyTitle(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate of the record on line {first_line}")]
    DuplicateKey { line: usize, first_line: usize },
    #[error("line {line}: generation_index {found} for problem {problem:?}, expected {expected}")]
    IndexGap {
        line: usize,
        problem: String,
        expected: u64,
        found: u64,
    },
    #[error("line {line}: invalid record: {report}")]
    InvalidLine {
        line: usize,
        report: ValidationReport,
    },
    #[error("batch rejected, {} invalid record(s)", .0.len())]
    InvalidBatch(Vec<(usize, ValidationReport)>),
    #[error("unknown record id {0:?}")]
    UnknownRecord(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendOutcome {
    pub accepted: usize,
    pub rejected_duplicates: usize,
}

/// Ordered record store with a dedup index. Single writer: `append` is the
/// only way to add records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    problems: Vec<Problem>,
    records: Vec<MechanismRecord>,
    dedup_index: HashSet<String>,
    next_index: HashMap<String, u64>,
    limits: WordLimits,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_limits(limits: WordLimits) -> Self {
        Self {
            limits,
            ..Self::default()
        }
    }

    pub fn limits(&self) -> &WordLimits {
        &self.limits
    }

    /// Problems in order of first appearance.
    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn records(&self) -> &[MechanismRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records_for<'a>(&'a self, problem: &'a str) -> impl Iterator<Item = &'a MechanismRecord> + 'a {
        self.records.iter().filter(move |r| r.problem == problem)
    }

    pub fn count_for(&self, problem: &str) -> usize {
        self.next_index.get(problem).copied().unwrap_or(0) as usize
    }

    pub fn get(&self, id: &str) -> Option<&MechanismRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.dedup_index.contains(key)
    }

    /// Appends valid, non-duplicate records in input order. If any record has
    /// validation errors nothing is appended.
    pub fn append(&mut self, new: Vec<MechanismRecord>) -> Result<AppendOutcome, DatasetError> {
        let invalid: Vec<(usize, ValidationReport)> = new
            .iter()
            .enumerate()
            .map(|(i, r)| (i, validate_record(r, &self.limits)))
            .filter(|(_, rep)| rep.has_errors())
            .collect();
        if !invalid.is_empty() {
            return Err(DatasetError::InvalidBatch(invalid));
        }
        let mut outcome = AppendOutcome::default();
        for mut record in new {
            let key = record.dedup_key();
            if !self.dedup_index.insert(key.clone()) {
                outcome.rejected_duplicates += 1;
                continue;
            }
            record.id = record_id(&key);
            let next = self.next_index.entry(record.problem.clone()).or_insert(0);
            record.generation_index = *next;
            *next += 1;
            self.note_problem(&record.problem);
            self.records.push(record);
            outcome.accepted += 1;
        }
        Ok(outcome)
    }

    fn note_problem(&mut self, id: &str) {
        if !self.problems.iter().any(|p| p.id == id) {
            // slug validity was checked by validate_record
            if let Ok(p) = Problem::from_slug(id) {
                self.problems.push(p);
            }
        }
    }

    fn record_mut(&mut self, id: &str) -> Result<&mut MechanismRecord, DatasetError> {
        self.records
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| DatasetError::UnknownRecord(id.to_string()))
    }

    pub fn set_taxonomy(
        &mut self,
        id: &str,
        taxonomy: Option<TaxonomicHierarchy>,
    ) -> Result<(), DatasetError> {
        self.record_mut(id)?.taxonomy = taxonomy;
        Ok(())
    }

    pub fn set_cluster_id(&mut self, id: &str, cluster: Option<u32>) -> Result<(), DatasetError> {
        self.record_mut(id)?.cluster_id = cluster;
        Ok(())
    }

    pub fn set_image_url(&mut self, id: &str, url: Option<String>) -> Result<(), DatasetError> {
        self.record_mut(id)?.image_url = url;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            // MechanismRecord contains only strings, integers and maps
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        Self::from_jsonl_with_limits(text, WordLimits::default())
    }

    pub fn from_jsonl_with_limits(text: &str, limits: WordLimits) -> Result<Self, DatasetError> {
        let mut ds = Dataset::with_limits(limits);
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: MechanismRecord =
                serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let report = validate_record(&record, &ds.limits);
            if report.has_errors() {
                return Err(DatasetError::InvalidLine {
                    line: line_no,
                    report,
                });
            }
            let key = record.dedup_key();
            if let Some(&first_line) = first_seen.get(&key) {
                return Err(DatasetError::DuplicateKey {
                    line: line_no,
                    first_line,
                });
            }
            let expected = ds.next_index.get(&record.problem).copied().unwrap_or(0);
            if record.generation_index != expected {
                return Err(DatasetError::IndexGap {
                    line: line_no,
                    problem: record.problem.clone(),
                    expected,
                    found: record.generation_index,
                });
            }
            first_seen.insert(key.clone(), line_no);
            ds.dedup_index.insert(key);
            ds.next_index.insert(record.problem.clone(), expected + 1);
            ds.note_problem(&record.problem);
            ds.records.push(record);
        }
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    /// Loads `path`, or returns an empty dataset if it does not exist.
    pub fn load_or_default(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        if path.as_ref().exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    /// Writes through a temp file and rename so readers never see a torn file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let io_err = |source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io_err)?;
            f.write_all(self.to_jsonl().as_bytes()).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }
}
