//! Taxonomy accuracy against a gold set and organism-diversity curves over
//! generation index.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dataset, MechanismRecord};
use crate::taxonomy::{organism_key, Rank, TaxonomicHierarchy, TaxonomyResolver};

/// Problems averaged over by the diversity evaluation.
pub const EVAL_PROBLEMS: [&str; 5] = [
    "manage-impact",
    "manage-tension",
    "manage-compression",
    "manage-turbulence",
    "modify-speed",
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("gold set lists {0:?} more than once")]
    DuplicateOrganism(String),
    #[error("no records for {0}")]
    NoRecords(String),
    #[error("no problems given")]
    NoProblems,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldEntry {
    pub organism: String,
    pub hierarchy: TaxonomicHierarchy,
}

/// Reference hierarchies keyed by organism name, in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldTaxonomySet {
    pub source: String,
    pub entries: Vec<GoldEntry>,
}

impl GoldTaxonomySet {
    pub fn new(source: impl Into<String>, entries: Vec<GoldEntry>) -> Result<Self, EvalError> {
        let mut entries = entries;
        let mut seen = HashSet::new();
        for e in &mut entries {
            e.organism = organism_key(&e.organism);
            if !seen.insert(e.organism.clone()) {
                return Err(EvalError::DuplicateOrganism(e.organism.clone()));
            }
        }
        Ok(Self {
            source: source.into(),
            entries,
        })
    }

    pub fn builtin() -> Self {
        Self::from_json(include_str!("../fixtures/gold_taxonomy.json")).expect("bundled gold set is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let raw: GoldTaxonomySet = serde_json::from_str(text).map_err(|e| EvalError::Io {
            path: "<gold>".into(),
            message: e.to_string(),
        })?;
        Self::new(raw.source, raw.entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            EvalError::Io { message, .. } => EvalError::Io {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn organisms(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.organism.as_str())
    }

    pub fn get(&self, organism: &str) -> Option<&TaxonomicHierarchy> {
        let key = organism_key(organism);
        self.entries.iter().find(|e| e.organism == key).map(|e| &e.hierarchy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankAccuracy {
    pub rank: Rank,
    pub correct: usize,
    pub total: usize,
    /// Accuracy in tenths of a percent, rounded half up (967 is 96.7%).
    pub tenths: u32,
}

impl RankAccuracy {
    pub fn new(rank: Rank, correct: usize, total: usize) -> Self {
        Self {
            rank,
            correct,
            total,
            tenths: percent_tenths(correct, total),
        }
    }

    pub fn percentage(&self) -> f64 {
        self.tenths as f64 / 10.0
    }
}

impl fmt::Display for RankAccuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.tenths / 10;
        let frac = self.tenths % 10;
        if frac == 0 {
            write!(f, "{whole}% ({}/{})", self.correct, self.total)
        } else {
            write!(f, "{whole}.{frac}% ({}/{})", self.correct, self.total)
        }
    }
}

/// `100 * correct / total` in tenths, rounded half up, in integer arithmetic.
pub fn percent_tenths(correct: usize, total: usize) -> u32 {
    if total == 0 {
        return 0;
    }
    ((correct as u64 * 2000 + total as u64) / (total as u64 * 2)) as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub ranks: Vec<RankAccuracy>,
}

impl AccuracyTable {
    pub fn get(&self, rank: Rank) -> &RankAccuracy {
        &self.ranks[rank.index()]
    }

    /// Markdown table with one column per rank, in the `96.7% (87/90)` style.
    pub fn to_markdown(&self, label: &str) -> String {
        let mut out = String::from("| Model |");
        for r in &self.ranks {
            out.push_str(&format!(" {} |", r.rank));
        }
        out.push_str("\n|---|");
        for _ in &self.ranks {
            out.push_str("---|");
        }
        out.push_str(&format!("\n| {label} |"));
        for r in &self.ranks {
            out.push_str(&format!(" {r} |"));
        }
        out.push('\n');
        out
    }
}

/// One wrong or missing rank for one organism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub organism: String,
    pub rank: Rank,
    pub expected: String,
    pub predicted: Option<String>,
}

/// Per-rank exact match of lowercased names. Organisms absent from
/// `predictions` count as wrong at every rank.
pub fn score_taxonomy(
    predictions: &BTreeMap<String, TaxonomicHierarchy>,
    gold: &GoldTaxonomySet,
) -> Result<AccuracyTable, EvalError> {
    Ok(score_with_diff(predictions, gold)?.0)
}

fn score_with_diff(
    predictions: &BTreeMap<String, TaxonomicHierarchy>,
    gold: &GoldTaxonomySet,
) -> Result<(AccuracyTable, Vec<Mismatch>), EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let by_key: BTreeMap<String, &TaxonomicHierarchy> =
        predictions.iter().map(|(k, v)| (organism_key(k), v)).collect();
    let mut correct = [0usize; 7];
    let mut diff = Vec::new();
    for entry in &gold.entries {
        let predicted = by_key.get(&entry.organism);
        for rank in Rank::ALL {
            let expected = entry.hierarchy.get(rank);
            let got = predicted.map(|h| h.get(rank).to_lowercase());
            if got.as_deref() == Some(expected) {
                correct[rank.index()] += 1;
            } else {
                diff.push(Mismatch {
                    organism: entry.organism.clone(),
                    rank,
                    expected: expected.to_string(),
                    predicted: got,
                });
            }
        }
    }
    let ranks = Rank::ALL
        .into_iter()
        .map(|r| RankAccuracy::new(r, correct[r.index()], gold.len()))
        .collect();
    Ok((AccuracyTable { ranks }, diff))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyEval {
    pub model: String,
    pub table: AccuracyTable,
    pub mismatches: Vec<Mismatch>,
    /// Organisms whose lookup failed, with the error. These count as misses.
    pub failures: Vec<(String, String)>,
}

/// Fetches a hierarchy for every gold organism through `resolver`, then
/// scores. Use a fresh resolver so nothing is served from an earlier cache.
pub async fn run_taxonomy_eval(
    gold: &GoldTaxonomySet,
    resolver: &TaxonomyResolver,
    model: &str,
) -> Result<TaxonomyEval, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let results = futures::future::join_all(gold.organisms().map(|o| resolver.fetch(o))).await;
    let mut predictions = BTreeMap::new();
    let mut failures = Vec::new();
    for (organism, res) in gold.organisms().zip(results) {
        match res {
            Ok(h) => {
                predictions.insert(organism.to_string(), h);
            }
            Err(e) => failures.push((organism.to_string(), e.to_string())),
        }
    }
    let (table, mismatches) = score_with_diff(&predictions, gold)?;
    Ok(TaxonomyEval {
        model: model.to_string(),
        table,
        mismatches,
        failures,
    })
}

/// What counts as a distinct name on the diversity curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityLevel {
    Rank(Rank),
    /// Normalized organism name, the finest level.
    Organism,
}

impl DiversityLevel {
    fn name_of(self, record: &MechanismRecord) -> Option<&str> {
        match self {
            DiversityLevel::Organism => Some(record.organism.name.as_str()),
            DiversityLevel::Rank(r) => record.taxonomy.as_ref().map(|t| t.get(r)),
        }
    }
}

impl std::str::FromStr for DiversityLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "organism" | "species" => Ok(DiversityLevel::Organism),
            other => other.parse::<Rank>().map(DiversityLevel::Rank).map_err(|e| e.to_string()),
        }
    }
}

impl fmt::Display for DiversityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiversityLevel::Organism => f.write_str("organism"),
            DiversityLevel::Rank(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityCurve {
    pub level: DiversityLevel,
    pub problems: Vec<String>,
    /// `mean_unique[i]` is the mean over problems of the distinct names among
    /// generation indices `0..=i`.
    pub mean_unique: Vec<f64>,
}

impl DiversityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,mean_unique\n");
        for (i, v) in self.mean_unique.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Cumulative distinct names per generation index for one problem. Records
/// without a name at the level (no taxonomy yet) add nothing.
pub fn cumulative_unique(records: &[&MechanismRecord], level: DiversityLevel) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .map(|r| {
            if let Some(name) = level.name_of(r) {
                seen.insert(name.to_string());
            }
            seen.len()
        })
        .collect()
}

/// Mean cumulative-unique series across `problems`, truncated to the
/// shortest problem.
pub fn diversity_curve(
    dataset: &Dataset,
    problems: &[&str],
    level: DiversityLevel,
) -> Result<DiversityCurve, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::NoProblems);
    }
    let mut series = Vec::new();
    for p in problems {
        let mut records: Vec<&MechanismRecord> = dataset.records_for(p).collect();
        if records.is_empty() {
            return Err(EvalError::NoRecords(p.to_string()));
        }
        records.sort_by_key(|r| r.generation_index);
        series.push(cumulative_unique(&records, level));
    }
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let n = series.len() as f64;
    let mean_unique = (0..len)
        .map(|i| series.iter().map(|s| s[i] as f64).sum::<f64>() / n)
        .collect();
    Ok(DiversityCurve {
        level,
        problems: problems.iter().map(|p| p.to_string()).collect(),
        mean_unique,
    })
}
