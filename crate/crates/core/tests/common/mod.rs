#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use bioanalog::clustering::{cluster_problem, ClusterSet, DEFAULT_K};
use bioanalog::expansion::{run_pipeline, ExpansionConfig};
use bioanalog::gateway::{Gateway, MockBackend, MockEmbedder};
use bioanalog::imagery::{fetch_images, ImageFetcher, StubSearch};
use bioanalog::ingest::{seed_corpus, ExclusionList};
use bioanalog::model::{Dataset, MechanismRecord, Organism, Source};
use bioanalog::taxonomy::TaxonomyResolver;

pub const CASE_PROBLEM: &str = "manage-turbulence";
pub const MICROALGAE: (&str, &str) = (
    "Intertidal microalgae",
    "Adaptive cell shape shifting reduces drag under strong turbulent currents",
);
pub const COPEPOD: (&str, &str) = (
    "Parasitic copepod",
    "Friction-based attachment with hooked appendages resists dislodging by fast flow",
);

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn corpus_dir() -> PathBuf {
    manifest_dir().join("fixtures/corpus")
}

pub fn mock_gateway() -> Arc<Gateway> {
    Arc::new(Gateway::new(
        Arc::new(MockBackend::builtin()),
        Arc::new(MockEmbedder::default()),
    ))
}

pub fn case_study_records() -> Vec<MechanismRecord> {
    [MICROALGAE, COPEPOD]
        .iter()
        .map(|(o, m)| MechanismRecord::new(CASE_PROBLEM, m, Organism::new(*o), Source::ExpansionDepth))
        .collect()
}

/// Seeds the fixture corpus, runs `batches` expansion batches per problem,
/// appends the two case-study mechanisms, attaches stub images and clusters
/// every problem with k = 20.
pub async fn fixture_snapshot(gateway: Arc<Gateway>, batches: usize) -> (Dataset, ClusterSet) {
    let mut ds = Dataset::new();
    seed_corpus(gateway.clone(), &corpus_dir(), &ExclusionList::default(), &mut ds)
        .await
        .expect("seed corpus");
    let resolver = TaxonomyResolver::new(gateway.clone());
    resolver.annotate(&mut ds).await;
    let config = ExpansionConfig {
        batches_per_run: batches,
        seed: 7,
        ..ExpansionConfig::default()
    };
    let problems: Vec<String> = ds.problems().iter().map(|p| p.id.clone()).collect();
    for p in &problems {
        run_pipeline(&gateway, &resolver, &mut ds, p, &config, None)
            .await
            .expect("expansion");
    }
    ds.append(case_study_records()).expect("append case study");
    let fetcher = ImageFetcher::new(Arc::new(StubSearch::builtin()), None);
    fetch_images(&mut ds, &fetcher, None, 4).await;
    let mut clusters = ClusterSet::default();
    for p in &problems {
        let model = cluster_problem(&gateway, &mut ds, p, DEFAULT_K, 0).await.expect("cluster");
        clusters.problems.insert(p.clone(), model);
    }
    (ds, clusters)
}

pub fn record_id(ds: &Dataset, organism: &str) -> String {
    ds.records()
        .iter()
        .find(|r| r.organism.display_name == organism)
        .map(|r| r.id.clone())
        .unwrap_or_else(|| panic!("no record for {organism}"))
}
