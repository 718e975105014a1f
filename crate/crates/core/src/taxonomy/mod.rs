//! Seven-rank organism taxonomies: the rank order, the hierarchy type, the
//! tolerant parser for model replies, and a caching resolver that asks the
//! gateway for hierarchies it has not seen yet.

mod tree;

pub use tree::{build_tree, NodeId, SortKey, TaxonNode, TaxonomicTree};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use regex::Regex;
use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{Bindings, Gateway, GatewayError, TemplateId};
use crate::model::Dataset;

/// Taxonomic ranks, highest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Domain,
    Kingdom,
    Phylum,
    Class,
    Order,
    Family,
    Genus,
}

impl Rank {
    pub const ALL: [Rank; 7] = [
        Rank::Domain,
        Rank::Kingdom,
        Rank::Phylum,
        Rank::Class,
        Rank::Order,
        Rank::Family,
        Rank::Genus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rank::Domain => "domain",
            Rank::Kingdom => "kingdom",
            Rank::Phylum => "phylum",
            Rank::Class => "class",
            Rank::Order => "order",
            Rank::Family => "family",
            Rank::Genus => "genus",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Rank::Domain => "domains",
            Rank::Kingdom => "kingdoms",
            Rank::Phylum => "phyla",
            Rank::Class => "classes",
            Rank::Order => "orders",
            Rank::Family => "families",
            Rank::Genus => "genera",
        }
    }

    /// The next rank down, `None` for genus.
    pub fn child(self) -> Option<Rank> {
        Rank::ALL.get(self.index() + 1).copied()
    }

    pub fn parent(self) -> Option<Rank> {
        self.index().checked_sub(1).map(|i| Rank::ALL[i])
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rank {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Rank::ALL
            .into_iter()
            .find(|r| r.as_str() == s || r.plural() == s)
            .ok_or(TaxonomyError::UnknownRank(s))
    }
}

/// All seven rank names for one organism, lowercased.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaxonomicHierarchy {
    names: [String; 7],
}

impl TaxonomicHierarchy {
    /// Names in rank order, domain first. Names are trimmed and lowercased.
    pub fn from_names<S: AsRef<str>>(names: [S; 7]) -> Result<Self, TaxonomyError> {
        let names = names.map(|n| n.as_ref().trim().to_lowercase());
        let missing: Vec<Rank> = Rank::ALL
            .into_iter()
            .filter(|r| names[r.index()].is_empty())
            .collect();
        if !missing.is_empty() {
            return Err(TaxonomyError::Incomplete {
                organism: String::new(),
                missing,
            });
        }
        Ok(Self { names })
    }

    pub fn from_map(map: &BTreeMap<Rank, String>) -> Result<Self, TaxonomyError> {
        let names = Rank::ALL.map(|r| map.get(&r).cloned().unwrap_or_default());
        Self::from_names(names)
    }

    pub fn get(&self, rank: Rank) -> &str {
        &self.names[rank.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Rank, &str)> {
        Rank::ALL.into_iter().map(move |r| (r, self.get(r)))
    }

    /// Names from domain down to and including `rank`.
    pub fn path_to(&self, rank: Rank) -> &[String] {
        &self.names[..=rank.index()]
    }

    pub(crate) fn check(&self) -> Result<(), TaxonomyError> {
        for (rank, name) in self.iter() {
            if name.is_empty() || name != name.to_lowercase() || name != name.trim() {
                return Err(TaxonomyError::BadName {
                    rank,
                    name: name.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl Serialize for TaxonomicHierarchy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(7))?;
        for (rank, name) in self.iter() {
            map.serialize_entry(rank.as_str(), name)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for TaxonomicHierarchy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HierarchyVisitor;

        impl<'de> Visitor<'de> for HierarchyVisitor {
            type Value = TaxonomicHierarchy;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from the seven rank names to taxon names")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut map = BTreeMap::new();
                while let Some((key, value)) = access.next_entry::<String, String>()? {
                    let rank = Rank::from_str(&key).map_err(de::Error::custom)?;
                    map.insert(rank, value);
                }
                TaxonomicHierarchy::from_map(&map).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_map(HierarchyVisitor)
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown rank {0:?}")]
    UnknownRank(String),
    #[error("incomplete hierarchy for {organism:?}: missing {missing:?}")]
    Incomplete {
        organism: String,
        missing: Vec<Rank>,
    },
    #[error("rank {rank} has invalid name {name:?}")]
    BadName { rank: Rank, name: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("hierarchy cache {path}: {message}")]
    Cache { path: String, message: String },
}

fn rank_pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)["'`]?\s*(domain|kingdom|phylum|class|order|family|genus)\s*["'`]?\s*:\s*["'`]([^"'`\n]*)["'`]"#,
        )
        .expect("valid regex")
    })
}

/// Parses a dictionary-like reply (`{"domain": "Eukarya", ...}`), tolerating
/// code fences, single quotes and surrounding prose. Names are lowercased.
pub fn parse_hierarchy_reply(organism: &str, raw: &str) -> Result<TaxonomicHierarchy, TaxonomyError> {
    let mut map: BTreeMap<Rank, String> = BTreeMap::new();
    for caps in rank_pair_regex().captures_iter(raw) {
        let rank = Rank::from_str(&caps[1]).expect("regex only matches rank names");
        let value = caps[2].trim();
        if !value.is_empty() {
            map.entry(rank).or_insert_with(|| value.to_string());
        }
    }
    let missing: Vec<Rank> = Rank::ALL
        .into_iter()
        .filter(|r| !map.contains_key(r))
        .collect();
    if !missing.is_empty() {
        return Err(TaxonomyError::Incomplete {
            organism: organism.to_string(),
            missing,
        });
    }
    TaxonomicHierarchy::from_map(&map)
}

/// Normalized cache key for an organism name.
pub fn organism_key(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    organism: String,
    hierarchy: TaxonomicHierarchy,
}

/// Fetches hierarchies through the gateway's taxonomy prompt and caches them
/// by organism name. Reads are concurrent; writes take the lock briefly.
pub struct TaxonomyResolver {
    gateway: Arc<Gateway>,
    cache: RwLock<BTreeMap<String, TaxonomicHierarchy>>,
    requests: AtomicUsize,
}

impl TaxonomyResolver {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self {
            gateway,
            cache: RwLock::new(BTreeMap::new()),
            requests: AtomicUsize::new(0),
        }
    }

    /// Number of gateway requests issued so far.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cached(&self, organism: &str) -> Option<TaxonomicHierarchy> {
        self.cache
            .read()
            .expect("cache lock")
            .get(&organism_key(organism))
            .cloned()
    }

    pub fn insert(&self, organism: &str, hierarchy: TaxonomicHierarchy) {
        self.cache
            .write()
            .expect("cache lock")
            .insert(organism_key(organism), hierarchy);
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seeds the cache from records that already carry a taxonomy.
    pub fn prime_from(&self, dataset: &Dataset) {
        let mut cache = self.cache.write().expect("cache lock");
        for r in dataset.records() {
            if let Some(t) = &r.taxonomy {
                cache
                    .entry(organism_key(&r.organism.name))
                    .or_insert_with(|| t.clone());
            }
        }
    }

    pub async fn fetch(&self, organism: &str) -> Result<TaxonomicHierarchy, TaxonomyError> {
        let key = organism_key(organism);
        if let Some(h) = self.cached(&key) {
            return Ok(h);
        }
        let mut bindings = Bindings::new();
        bindings.insert("organism".into(), key.clone());
        let request = self.gateway.request(TemplateId::Taxonomy, bindings);
        self.requests.fetch_add(1, Ordering::SeqCst);
        let result = self.gateway.complete(&request).await?;
        let hierarchy = parse_hierarchy_reply(&key, &result.text)?;
        self.insert(&key, hierarchy.clone());
        Ok(hierarchy)
    }

    /// Loads a JSONL cache of `{organism, hierarchy}` lines; a missing file is
    /// an empty cache.
    pub fn load_cache(&self, path: impl AsRef<Path>) -> Result<usize, TaxonomyError> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(0);
        }
        let cache_err = |message: String| TaxonomyError::Cache {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| cache_err(e.to_string()))?;
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine = serde_json::from_str(line)
                .map_err(|e| cache_err(format!("line {}: {}", i + 1, e)))?;
            self.insert(&entry.organism, entry.hierarchy);
            n += 1;
        }
        Ok(n)
    }

    /// Writes the cache sorted by organism name.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<(), TaxonomyError> {
        let path = path.as_ref();
        let cache_err = |e: std::io::Error| TaxonomyError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(cache_err)?;
        }
        let mut out = Vec::new();
        for (organism, hierarchy) in self.cache.read().expect("cache lock").iter() {
            let line = CacheLine {
                organism: organism.clone(),
                hierarchy: hierarchy.clone(),
            };
            serde_json::to_writer(&mut out, &line).expect("cache line serializes");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(cache_err)?;
        f.write_all(&out).map_err(cache_err)
    }

    /// Fetches a hierarchy for every record that lacks one. Failed lookups
    /// leave the record without taxonomy and are returned as
    /// `(organism, error)` pairs.
    pub async fn annotate(&self, dataset: &mut Dataset) -> Vec<(String, String)> {
        let missing: std::collections::BTreeSet<String> = dataset
            .records()
            .iter()
            .filter(|r| r.taxonomy.is_none())
            .map(|r| r.organism.name.clone())
            .collect();
        let results = futures::future::join_all(missing.iter().map(|o| self.fetch(o))).await;
        let mut failures = Vec::new();
        let mut found = BTreeMap::new();
        for (name, res) in missing.into_iter().zip(results) {
            match res {
                Ok(h) => {
                    found.insert(name, h);
                }
                Err(e) => failures.push((name, e.to_string())),
            }
        }
        let targets: Vec<(String, TaxonomicHierarchy)> = dataset
            .records()
            .iter()
            .filter(|r| r.taxonomy.is_none())
            .filter_map(|r| found.get(&r.organism.name).map(|h| (r.id.clone(), h.clone())))
            .collect();
        for (id, h) in targets {
            dataset.set_taxonomy(&id, Some(h)).expect("id taken from the dataset");
        }
        failures
    }
}
