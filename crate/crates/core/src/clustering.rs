//! k-means over mechanism embeddings, with each cluster labelled by its five
//! most frequent non-stopword words.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{Dataset, DatasetError};

pub const DEFAULT_K: usize = 20;
pub const MAX_ITERATIONS: usize = 100;
pub const LABEL_WORDS: usize = 5;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no records for problem {0:?}")]
    NoRecords(String),
    #[error("embeddings have mixed dimensions")]
    MixedDimensions,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

const STOPWORDS_EN: &str = include_str!("../config/stopwords_en.txt");

#[derive(Debug, Clone)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    /// The bundled English list (one word per line).
    pub fn english() -> Self {
        Self::parse(STOPWORDS_EN)
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

/// Lowercase tokens split on anything that is not a letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Top words by frequency (ties alphabetical), stopwords removed.
pub fn label_cluster<S: AsRef<str>>(texts: &[S], stopwords: &Stopwords) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for w in tokenize(t.as_ref()) {
            if !stopwords.contains(&w) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(LABEL_WORDS).map(|(w, _)| w).collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; equidistant centroids go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Within-cluster sum of squares.
pub fn objective(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// k-means++ seeding: the first centre uniformly, each next one with
/// probability proportional to squared distance from the nearest chosen
/// centre. If every remaining point coincides with a centre, the next one is
/// drawn uniformly from the points not yet chosen.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                rest[rng.gen_range(0..rest.len())]
            }
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[next]));
        }
    }
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after each assignment step, starting with the seeding.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = centroids.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(centroids)
        .map(|((s, c), old)| {
            if c == 0 {
                // an empty cluster keeps its centre
                old.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect()
}

/// Lloyd's algorithm from k-means++ seeds, until the assignment stops
/// changing or `max_iter` updates have run.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = kmeans_plus_plus(points, k, &mut rng)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut history = vec![objective(points, &assignments, &centroids)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        centroids = update_centroids(points, &assignments, &centroids);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        history.push(objective(points, &next, &centroids));
        if next == assignments {
            break;
        }
        assignments = next;
    }
    KMeansResult {
        centroids,
        assignments,
        objective_history: history,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub problem: String,
    pub k: usize,
    pub effective_k: usize,
    pub seed: u64,
    pub embedding_model: String,
    pub centroids: Vec<Vec<f64>>,
    /// Record id to cluster id.
    pub assignments: BTreeMap<String, u32>,
    pub labels: BTreeMap<u32, Vec<String>>,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    /// Record ids per cluster, in record-id order.
    pub fn members(&self) -> BTreeMap<u32, Vec<String>> {
        let mut out: BTreeMap<u32, Vec<String>> = (0..self.effective_k as u32).map(|c| (c, Vec::new())).collect();
        for (id, &c) in &self.assignments {
            out.entry(c).or_default().push(id.clone());
        }
        out
    }
}

/// Clusters the problem's mechanisms and writes the cluster ids back onto
/// the records.
pub async fn cluster_problem(
    gateway: &Gateway,
    dataset: &mut Dataset,
    problem: &str,
    k: usize,
    seed: u64,
) -> Result<ClusterModel, ClusterError> {
    let mut records: Vec<(String, String)> = dataset
        .records_for(problem)
        .map(|r| (r.id.clone(), r.mechanism.clone()))
        .collect();
    if records.is_empty() {
        return Err(ClusterError::NoRecords(problem.to_string()));
    }
    records.sort();
    let texts: Vec<String> = records.iter().map(|(_, m)| m.clone()).collect();
    let embedded = gateway.embed(&texts).await?;
    let dim = embedded[0].vector.len();
    if embedded.iter().any(|e| e.vector.len() != dim) {
        return Err(ClusterError::MixedDimensions);
    }
    let embedding_model = embedded[0].model.clone();
    let points: Vec<Vec<f64>> = embedded.into_iter().map(|e| e.vector).collect();
    let result = kmeans(&points, k, seed, MAX_ITERATIONS);
    let effective_k = result.centroids.len();

    let stopwords = Stopwords::english();
    let mut by_cluster: BTreeMap<u32, Vec<&str>> = (0..effective_k as u32).map(|c| (c, Vec::new())).collect();
    let mut assignments = BTreeMap::new();
    for ((id, text), &c) in records.iter().zip(&result.assignments) {
        by_cluster.entry(c as u32).or_default().push(text);
        assignments.insert(id.clone(), c as u32);
    }
    let labels = by_cluster
        .iter()
        .map(|(&c, texts)| (c, label_cluster(texts, &stopwords)))
        .collect();
    for (id, &c) in &assignments {
        dataset.set_cluster_id(id, Some(c))?;
    }
    Ok(ClusterModel {
        problem: problem.to_string(),
        k,
        effective_k,
        seed,
        embedding_model,
        centroids: result.centroids,
        assignments,
        labels,
        objective_history: result.objective_history,
        iterations: result.iterations,
    })
}

/// Cluster models for several problems, stored as one JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub problems: BTreeMap<String, ClusterModel>,
}

impl ClusterSet {
    /// `<dataset stem>.clusters.json` next to the dataset.
    pub fn default_path(dataset_path: &Path) -> PathBuf {
        let stem = dataset_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        dataset_path.with_file_name(format!("{stem}.clusters.json"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClusterError> {
        let path = path.as_ref();
        let err = |message: String| ClusterError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn load_or_default(path: impl AsRef<Path>) -> Result<Self, ClusterError> {
        if path.as_ref().exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClusterError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("cluster set serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| ClusterError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
