//! Taxonomy-tree-guided expansion.
//!
//! Each iteration rebuilds the problem's tree from every record so far, cuts
//! it at a reference rank and plans a batch of ten prompts: five breadth
//! prompts asking for new taxa outside the most populated nodes, and five
//! depth prompts asking for new children under the least populated nodes.
//! Replies are structured by a second completion, parsed, annotated with
//! taxonomy and appended in plan order.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use futures::future::join_all;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{
    parse_structured_list, render_prompt, Bindings, Gateway, GatewayError, MechanismPair, RenderedPrompt, TemplateId,
};
use crate::model::{validate_record, Dataset, DatasetError, MechanismRecord, Organism, Problem, Source};
use crate::taxonomy::{build_tree, NodeId, Rank, SortKey, TaxonomicTree, TaxonomyResolver};

pub const BATCH_SIZE: usize = 10;
pub const BREADTH_ITEMS: usize = 5;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("no records with taxonomy for problem {0:?}; run seeding first")]
    EmptyTree(String),
    #[error("{0} has no child rank to expand into")]
    NoChildRank(Rank),
    #[error("all {0} expansion completions failed")]
    AllFailed(usize),
    #[error("bad rank policy {0:?}: expected rotate or fixed:<rank> above genus")]
    BadRankPolicy(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How the reference rank is picked for each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankPolicy {
    /// Cycles class, order, family by iteration number.
    Rotate,
    Fixed(Rank),
}

const ROTATION: [Rank; 3] = [Rank::Class, Rank::Order, Rank::Family];

impl RankPolicy {
    pub fn rank_for(self, iteration: usize) -> Rank {
        match self {
            RankPolicy::Rotate => ROTATION[iteration % ROTATION.len()],
            RankPolicy::Fixed(r) => r,
        }
    }
}

impl FromStr for RankPolicy {
    type Err = ExpansionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ExpansionError::BadRankPolicy(s.to_string());
        if s == "rotate" {
            return Ok(RankPolicy::Rotate);
        }
        let rank: Rank = s.strip_prefix("fixed:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if rank.child().is_none() {
            return Err(bad());
        }
        Ok(RankPolicy::Fixed(rank))
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankPolicy::Rotate => f.write_str("rotate"),
            RankPolicy::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub batches_per_run: usize,
    pub rank_policy: RankPolicy,
    pub word_limit: usize,
    pub max_exclusions: usize,
    /// Entries kept from one reply; the rest are ignored.
    pub max_entries_per_reply: usize,
    pub sort_key: SortKey,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            batches_per_run: 10,
            rank_policy: RankPolicy::Rotate,
            word_limit: 14,
            max_exclusions: 50,
            max_entries_per_reply: 10,
            sort_key: SortKey::ImmediateChildren,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Breadth,
    Depth,
}

impl Strategy {
    pub fn source(self) -> Source {
        match self {
            Strategy::Breadth => Source::ExpansionBreadth,
            Strategy::Depth => Source::ExpansionDepth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionItem {
    pub strategy: Strategy,
    /// Path of the depth target, `domain/.../name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub excluded: Vec<String>,
    pub template: TemplateId,
    pub bindings: Bindings,
    pub prompt: RenderedPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub batch_id: String,
    pub problem: String,
    pub reference_rank: Rank,
    pub items: Vec<ExpansionItem>,
}

impl ExpansionPlan {
    pub fn count(&self, strategy: Strategy) -> usize {
        self.items.iter().filter(|i| i.strategy == strategy).count()
    }
}

/// An existing mechanism shown in the prompt as a worked example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub organism: String,
    pub mechanism: String,
}

impl From<&MechanismRecord> for Example {
    fn from(r: &MechanismRecord) -> Self {
        Self {
            organism: r.organism.display_name.clone(),
            mechanism: r.mechanism.clone(),
        }
    }
}

fn brace_list(names: &[String]) -> String {
    names.join(", ")
}

fn example_bindings(problem: &str, example: &Example, word_limit: usize) -> Bindings {
    let mut b = Bindings::new();
    b.insert("problem".into(), problem.to_string());
    b.insert("example_organism".into(), example.organism.clone());
    b.insert("example_mechanism".into(), example.mechanism.clone());
    b.insert("word_limit".into(), word_limit.to_string());
    b
}

pub fn breadth_bindings(
    problem: &str,
    rank: Rank,
    excluded: &[String],
    example: &Example,
    word_limit: usize,
) -> Bindings {
    let mut b = example_bindings(problem, example, word_limit);
    b.insert("rank".into(), rank.as_str().into());
    b.insert("rank_plural".into(), rank.plural().into());
    b.insert("excluded".into(), brace_list(excluded));
    b
}

/// "come up with a few biological <rank plural> not in {...}".
pub fn build_breadth_prompt(
    problem: &str,
    rank: Rank,
    excluded: &[String],
    example: &Example,
    word_limit: usize,
) -> Result<RenderedPrompt, GatewayError> {
    render_prompt(
        TemplateId::ExpandBreadth,
        &breadth_bindings(problem, rank, excluded, example, word_limit),
    )
}

pub fn depth_bindings(
    problem: &str,
    parent_rank: Rank,
    parent_name: &str,
    excluded: &[String],
    example: &Example,
    word_limit: usize,
) -> Result<Bindings, ExpansionError> {
    let child = parent_rank.child().ok_or(ExpansionError::NoChildRank(parent_rank))?;
    let mut b = example_bindings(problem, example, word_limit);
    b.insert("parent_rank".into(), parent_rank.as_str().into());
    b.insert("parent_name".into(), parent_name.to_string());
    b.insert("child_rank".into(), child.as_str().into());
    b.insert("child_rank_plural".into(), child.plural().into());
    b.insert("excluded".into(), brace_list(excluded));
    Ok(b)
}

/// "come up with a few biological <child plural> in <rank> <name> that are
/// not any of {...}". Fails for a genus parent.
pub fn build_depth_prompt(
    problem: &str,
    parent_rank: Rank,
    parent_name: &str,
    excluded: &[String],
    example: &Example,
    word_limit: usize,
) -> Result<RenderedPrompt, ExpansionError> {
    let b = depth_bindings(problem, parent_rank, parent_name, excluded, example, word_limit)?;
    Ok(render_prompt(TemplateId::ExpandDepth, &b)?)
}

pub fn batch_id(problem: &str, iteration: usize) -> String {
    format!("{problem}-b{iteration:03}")
}

/// Next iteration number for `problem`, from the batch ids already stored.
pub fn next_iteration(dataset: &Dataset, problem: &str) -> usize {
    let prefix = format!("{problem}-b");
    dataset
        .records_for(problem)
        .filter_map(|r| r.parent_batch.as_deref())
        .filter_map(|b| b.strip_prefix(&prefix))
        .filter_map(|n| n.parse::<usize>().ok())
        .map(|n| n + 1)
        .max()
        .unwrap_or(0)
}

/// Deterministic per-iteration generator.
pub fn iteration_rng(seed: u64, problem: &str, iteration: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(problem.as_bytes());
    h.update((iteration as u64).to_be_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn unique_names(tree: &TaxonomicTree, ids: &[NodeId]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    ids.iter()
        .map(|&i| tree.node(i).name.clone())
        .filter(|n| seen.insert(n.clone()))
        .collect()
}

fn under(record: &MechanismRecord, rank: Rank, path: &str) -> bool {
    record
        .taxonomy
        .as_ref()
        .is_some_and(|t| t.path_to(rank).join("/") == path)
}

/// Plans one batch. `records` are the problem's records, the pool for the
/// worked example in each prompt.
pub fn plan_batch(
    tree: &TaxonomicTree,
    problem: &str,
    records: &[MechanismRecord],
    config: &ExpansionConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExpansionPlan, ExpansionError> {
    let rank = config.rank_policy.rank_for(iteration);
    if rank.child().is_none() {
        return Err(ExpansionError::NoChildRank(rank));
    }
    let ranked = tree.cut_and_rank(rank, config.sort_key);
    if tree.is_empty() || ranked.is_empty() || records.is_empty() {
        return Err(ExpansionError::EmptyTree(problem.to_string()));
    }
    let excluded = unique_names(tree, &tree.most_populated(rank, config.max_exclusions, config.sort_key));
    let title = Problem::from_slug(problem).map(|p| p.title).unwrap_or_else(|_| problem.to_string());
    let mut items = Vec::with_capacity(BATCH_SIZE);
    for _ in 0..BREADTH_ITEMS {
        let example = Example::from(records.choose(rng).expect("records non-empty"));
        let bindings = breadth_bindings(&title, rank, &excluded, &example, config.word_limit);
        items.push(ExpansionItem {
            strategy: Strategy::Breadth,
            target: None,
            excluded: excluded.clone(),
            template: TemplateId::ExpandBreadth,
            prompt: render_prompt(TemplateId::ExpandBreadth, &bindings)?,
            bindings,
        });
    }
    for i in 0..BATCH_SIZE - BREADTH_ITEMS {
        let target = ranked[i % ranked.len()];
        let path = tree.path(target);
        let pool: Vec<&MechanismRecord> = records.iter().filter(|r| under(r, rank, &path)).collect();
        let example = match pool.choose(rng) {
            Some(r) => Example::from(*r),
            None => Example::from(records.choose(rng).expect("records non-empty")),
        };
        let children = tree.sample_children_with(target, config.max_exclusions, rng);
        let bindings = depth_bindings(
            &title,
            rank,
            &tree.node(target).name,
            &children,
            &example,
            config.word_limit,
        )?;
        items.push(ExpansionItem {
            strategy: Strategy::Depth,
            target: Some(path),
            excluded: children,
            template: TemplateId::ExpandDepth,
            prompt: render_prompt(TemplateId::ExpandDepth, &bindings)?,
            bindings,
        });
    }
    Ok(ExpansionPlan {
        batch_id: batch_id(problem, iteration),
        problem: problem.to_string(),
        reference_rank: rank,
        items,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub entries: usize,
    pub dropped: usize,
    /// Set when the expansion or structuring call, or the parse, failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub batch_id: String,
    pub iteration: usize,
    pub reference_rank: Rank,
    pub tree_nodes: usize,
    pub new_records: Vec<String>,
    pub duplicates_dropped: usize,
    pub completion_failures: usize,
    pub parse_failures: usize,
    pub taxonomy_failures: Vec<String>,
    pub invalid_dropped: usize,
    pub word_limit_warnings: usize,
    pub items: Vec<ItemOutcome>,
    pub plan: ExpansionPlan,
}

enum ItemError {
    Completion(GatewayError),
    Parse(String),
}

async fn run_item(gateway: &Gateway, item: &ExpansionItem) -> Result<(Vec<MechanismPair>, usize), ItemError> {
    let raw = gateway
        .complete(&gateway.request(item.template, item.bindings.clone()))
        .await
        .map_err(ItemError::Completion)?;
    let mut b = Bindings::new();
    b.insert("raw_text".into(), raw.text);
    let structured = gateway
        .complete(&gateway.request(TemplateId::StructureOutput, b))
        .await
        .map_err(|e| ItemError::Parse(e.to_string()))?;
    let list = parse_structured_list(&structured.text).map_err(|e| ItemError::Parse(e.to_string()))?;
    Ok((list.entries, list.dropped))
}

/// One build-plan-complete-append cycle. Results are merged in (item, entry)
/// order before anything is appended, so completion timing never changes
/// generation indices.
pub async fn run_iteration(
    gateway: &Gateway,
    resolver: &TaxonomyResolver,
    dataset: &mut Dataset,
    problem: &str,
    config: &ExpansionConfig,
    iteration: usize,
) -> Result<IterationReport, ExpansionError> {
    let records: Vec<MechanismRecord> = dataset
        .records_for(problem)
        .filter(|r| r.taxonomy.is_some())
        .cloned()
        .collect();
    let tree = build_tree(dataset.records_for(problem));
    let mut rng = iteration_rng(config.seed, problem, iteration);
    let plan = plan_batch(&tree, problem, &records, config, iteration, &mut rng)?;

    let results = join_all(plan.items.iter().map(|item| run_item(gateway, item))).await;
    let mut outcomes = Vec::with_capacity(results.len());
    let mut candidates = Vec::new();
    let (mut completion_failures, mut parse_failures) = (0, 0);
    for (item, res) in plan.items.iter().zip(results) {
        match res {
            Ok((entries, dropped)) => {
                let kept: Vec<_> = entries.into_iter().take(config.max_entries_per_reply).collect();
                outcomes.push(ItemOutcome {
                    entries: kept.len(),
                    dropped,
                    error: None,
                });
                for pair in kept {
                    let record = MechanismRecord::new(
                        problem,
                        &pair.mechanism,
                        Organism::new(pair.organism.trim()),
                        item.strategy.source(),
                    )
                    .with_batch(plan.batch_id.clone());
                    candidates.push(record);
                }
            }
            Err(e) => {
                let message = match e {
                    ItemError::Completion(e) => {
                        completion_failures += 1;
                        e.to_string()
                    }
                    ItemError::Parse(m) => {
                        parse_failures += 1;
                        m
                    }
                };
                tracing::warn!(batch = %plan.batch_id, error = %message, "expansion item failed");
                outcomes.push(ItemOutcome {
                    error: Some(message),
                    ..ItemOutcome::default()
                });
            }
        }
    }
    if completion_failures == plan.items.len() {
        return Err(ExpansionError::AllFailed(completion_failures));
    }

    let organisms: BTreeSet<String> = candidates.iter().map(|r| r.organism.name.clone()).collect();
    let fetched = join_all(organisms.iter().map(|o| resolver.fetch(o))).await;
    let mut taxonomy_failures = Vec::new();
    let mut found = std::collections::BTreeMap::new();
    for (name, res) in organisms.iter().zip(fetched) {
        match res {
            Ok(h) => {
                found.insert(name.clone(), h);
            }
            Err(e) => {
                tracing::warn!(organism = %name, error = %e, "taxonomy lookup failed");
                taxonomy_failures.push(name.clone());
            }
        }
    }

    let limits = *dataset.limits();
    let mut valid = Vec::with_capacity(candidates.len());
    let (mut invalid_dropped, mut word_limit_warnings) = (0, 0);
    for mut record in candidates {
        record.taxonomy = found.get(&record.organism.name).cloned();
        let report = validate_record(&record, &limits);
        if report.has_errors() {
            invalid_dropped += 1;
            tracing::warn!(report = %report, "dropping invalid expansion record");
            continue;
        }
        word_limit_warnings += report.warnings().count();
        valid.push(record);
    }
    let before = dataset.len();
    let outcome = dataset.append(valid)?;
    let new_records = dataset.records()[before..].iter().map(|r| r.id.clone()).collect();

    Ok(IterationReport {
        batch_id: plan.batch_id.clone(),
        iteration,
        reference_rank: plan.reference_rank,
        tree_nodes: tree.node_count(),
        new_records,
        duplicates_dropped: outcome.rejected_duplicates,
        completion_failures,
        parse_failures,
        taxonomy_failures,
        invalid_dropped,
        word_limit_warnings,
        items: outcomes,
        plan,
    })
}

/// Where iteration reports go: `<dir>/<stem>.reports/<batch>.json`.
pub fn reports_dir(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    dataset_path.with_file_name(format!("{stem}.reports"))
}

/// Runs `config.batches_per_run` iterations in sequence. With a path, the
/// dataset and the iteration report are written after every iteration, so
/// an interrupted run keeps the finished iterations.
pub async fn run_pipeline(
    gateway: &Gateway,
    resolver: &TaxonomyResolver,
    dataset: &mut Dataset,
    problem: &str,
    config: &ExpansionConfig,
    persist: Option<&Path>,
) -> Result<Vec<IterationReport>, ExpansionError> {
    let start = next_iteration(dataset, problem);
    let mut reports = Vec::with_capacity(config.batches_per_run);
    for iteration in start..start + config.batches_per_run {
        let report = run_iteration(gateway, resolver, dataset, problem, config, iteration).await?;
        tracing::info!(
            batch = %report.batch_id,
            rank = %report.reference_rank,
            new = report.new_records.len(),
            duplicates = report.duplicates_dropped,
            "iteration done"
        );
        if let Some(path) = persist {
            dataset.save(path)?;
            let dir = reports_dir(path);
            let io = |source| ExpansionError::Io {
                path: dir.display().to_string(),
                source,
            };
            fs::create_dir_all(&dir).map_err(io)?;
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            fs::write(dir.join(format!("{}.json", report.batch_id)), text).map_err(io)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockEmbedder, MockEntry, MockTable};
    use crate::taxonomy::TaxonomicHierarchy;
    use std::sync::Arc;

    fn record(org: &str, class: &str, order: &str) -> MechanismRecord {
        MechanismRecord::new("manage-impact", &format!("{org} absorbs shocks"), Organism::new(org), Source::SeedAsknature)
            .with_taxonomy(Some(TaxonomicHierarchy::from_names(["eukarya", "animalia", "chordata", class, order, &format!("{org}idae"), org]).unwrap()))
    }

    fn class_config() -> ExpansionConfig {
        ExpansionConfig {
            rank_policy: RankPolicy::Fixed(Rank::Class),
            ..ExpansionConfig::default()
        }
    }

    fn example() -> Example {
        Example {
            organism: "Woodpecker".into(),
            mechanism: "Spongy skull bone absorbs shocks".into(),
        }
    }

    #[test]
    fn breadth_prompt_names_rank_and_exclusions() {
        let p = build_breadth_prompt("Manage Impact", Rank::Class, &["insecta".into(), "aves".into()], &example(), 14).unwrap();
        assert!(p.user.contains("biological classes not in {insecta, aves}"));
        assert!(p.user.contains("using 14 words or less"));
        let empty = build_breadth_prompt("Manage Impact", Rank::Class, &[], &example(), 14).unwrap();
        assert!(empty.user.contains("not in {}"));
    }

    #[test]
    fn depth_prompt_shape() {
        let p = build_depth_prompt("Manage Tension", Rank::Order, "araneae", &["araneidae".into()], &example(), 14).unwrap();
        assert!(p.user.contains("families in order araneae that are not any of {araneidae"));
        assert!(matches!(
            build_depth_prompt("x", Rank::Genus, "apis", &[], &example(), 14),
            Err(ExpansionError::NoChildRank(Rank::Genus))
        ));
    }

    #[test]
    fn rank_policy_parsing() {
        assert_eq!("rotate".parse::<RankPolicy>().unwrap(), RankPolicy::Rotate);
        assert_eq!("fixed:order".parse::<RankPolicy>().unwrap(), RankPolicy::Fixed(Rank::Order));
        assert!("fixed:genus".parse::<RankPolicy>().is_err());
        assert!("sometimes".parse::<RankPolicy>().is_err());
        let r = RankPolicy::Rotate;
        assert_eq!([r.rank_for(0), r.rank_for(1), r.rank_for(2), r.rank_for(3)], [Rank::Class, Rank::Order, Rank::Family, Rank::Class]);
    }

    #[test]
    fn seven_classes_plan() {
        // class sizes (immediate children = orders): a:1 b:1 c:1 d:2 e:2 f:3 g:1
        let spec = [("a", "o1"), ("b", "o1"), ("c", "o1"), ("d", "o1"), ("d", "o2"), ("e", "o1"), ("e", "o2"), ("f", "o1"), ("f", "o2"), ("f", "o3"), ("g", "o1")];
        let records: Vec<_> = spec.iter().enumerate().map(|(i, (c, o))| record(&format!("org{i}"), c, o)).collect();
        let tree = build_tree(&records);
        let mut rng = iteration_rng(1, "manage-impact", 0);
        let plan = plan_batch(&tree, "manage-impact", &records, &class_config(), 0, &mut rng).unwrap();
        assert_eq!(plan.items.len(), 10);
        assert_eq!(plan.count(Strategy::Breadth), 5);
        let targets: Vec<_> = plan.items[5..].iter().map(|i| i.target.clone().unwrap()).collect();
        assert_eq!(targets, ["eukarya/animalia/chordata/a", "eukarya/animalia/chordata/b", "eukarya/animalia/chordata/c", "eukarya/animalia/chordata/g", "eukarya/animalia/chordata/d"]);
        for item in &plan.items[..5] {
            assert_eq!(item.excluded, ["f", "d", "e", "a", "b", "c", "g"]);
        }
        // the depth example comes from the target's subtree
        assert!(plan.items[5].bindings["example_mechanism"].starts_with("org0"));
    }

    #[test]
    fn two_nodes_cycle() {
        let records = vec![record("x", "a", "o1"), record("y", "b", "o1"), record("z", "b", "o2")];
        let tree = build_tree(&records);
        let mut rng = iteration_rng(0, "p", 0);
        let plan = plan_batch(&tree, "manage-impact", &records, &class_config(), 0, &mut rng).unwrap();
        let names: Vec<_> = plan.items[5..].iter().map(|i| i.bindings["parent_name"].clone()).collect();
        assert_eq!(names, ["a", "b", "a", "b", "a"]);
    }

    #[test]
    fn exclusions_capped_at_fifty() {
        let records: Vec<_> = (0..60).map(|i| record(&format!("o{i}"), &format!("c{i:02}"), "o")).collect();
        let mut records = records;
        // make c59 the most populated
        records.push(record("extra", "c59", "o2"));
        let tree = build_tree(&records);
        let mut rng = iteration_rng(0, "p", 0);
        let plan = plan_batch(&tree, "manage-impact", &records, &class_config(), 0, &mut rng).unwrap();
        let ex = &plan.items[0].excluded;
        assert_eq!(ex.len(), 50);
        assert_eq!(ex[0], "c59");
        assert_eq!(ex[1], "c00");
        assert_eq!(ex[49], "c48");
    }

    #[test]
    fn empty_tree_is_an_error() {
        let tree = TaxonomicTree::new();
        let mut rng = iteration_rng(0, "p", 0);
        assert!(matches!(
            plan_batch(&tree, "manage-impact", &[], &class_config(), 0, &mut rng),
            Err(ExpansionError::EmptyTree(_))
        ));
    }

    fn seeded() -> Dataset {
        let mut ds = Dataset::new();
        let mut r = MechanismRecord::new("manage-impact", "Spongy skull bone and hyoid sling absorb repeated pecking shocks", Organism::new("Woodpecker"), Source::SeedAsknature);
        r.taxonomy = Some(TaxonomicHierarchy::from_names(["eukarya", "animalia", "chordata", "aves", "piciformes", "picidae", "dendrocopos"]).unwrap());
        ds.append(vec![r]).unwrap();
        ds
    }

    fn gw(mock: MockBackend) -> Arc<Gateway> {
        Arc::new(Gateway::new(Arc::new(mock), Arc::new(MockEmbedder::default())))
    }

    #[tokio::test]
    async fn unparseable_replies_add_nothing() {
        let mock = MockBackend::new()
            .with_response(TemplateId::ExpandBreadth, [], "I cannot help")
            .with_response(TemplateId::ExpandDepth, [], "I cannot help")
            .with_response(TemplateId::StructureOutput, [], "no mechanisms found");
        let gateway = gw(mock);
        let resolver = TaxonomyResolver::new(gateway.clone());
        let mut ds = seeded();
        let report = run_iteration(&gateway, &resolver, &mut ds, "manage-impact", &class_config(), 0).await.unwrap();
        assert_eq!(report.parse_failures, 10);
        assert!(report.new_records.is_empty());
        assert_eq!(ds.len(), 1);
    }

    #[tokio::test]
    async fn all_completions_failing_is_an_error() {
        let gateway = gw(MockBackend::new());
        let resolver = TaxonomyResolver::new(gateway.clone());
        let mut ds = seeded();
        assert!(matches!(
            run_iteration(&gateway, &resolver, &mut ds, "manage-impact", &class_config(), 0).await,
            Err(ExpansionError::AllFailed(10))
        ));
    }

    #[tokio::test]
    async fn repeated_mechanism_is_dropped() {
        let reply = r#"[{"mechanism":"Spongy skull bone and hyoid sling absorb repeated pecking shocks.","organism":"Woodpecker"},{"mechanism":"Keratin sheath over porous core damps blows","organism":"Muskox"}]"#;
        let table = MockTable {
            entries: vec![
                MockEntry { template: TemplateId::ExpandBreadth, bindings: Bindings::new(), response: Some("text".into()), responses: None, echo: None },
                MockEntry { template: TemplateId::ExpandDepth, bindings: Bindings::new(), response: Some("text".into()), responses: None, echo: None },
                MockEntry { template: TemplateId::StructureOutput, bindings: Bindings::new(), response: Some(reply.into()), responses: None, echo: None },
            ],
        };
        let gateway = gw(MockBackend::from_table(table).with_response(
            TemplateId::Taxonomy,
            [("organism", "muskox")],
            r#"{"domain": "Eukarya", "kingdom": "Animalia", "phylum": "Chordata", "class": "Mammalia", "order": "Artiodactyla", "family": "Bovidae", "genus": "Ovibos"}"#,
        ));
        let resolver = TaxonomyResolver::new(gateway.clone());
        resolver.prime_from(&seeded());
        let mut ds = seeded();
        let report = run_iteration(&gateway, &resolver, &mut ds, "manage-impact", &class_config(), 0).await.unwrap();
        // 10 replies x 2 entries: one new record, everything else a duplicate
        assert_eq!(report.new_records.len(), 1);
        assert_eq!(report.duplicates_dropped, 19);
        let new = ds.get(&report.new_records[0]).unwrap();
        assert_eq!(new.source, Source::ExpansionBreadth);
        assert_eq!(new.parent_batch.as_deref(), Some("manage-impact-b000"));
        assert_eq!(new.taxonomy.as_ref().unwrap().get(Rank::Genus), "ovibos");
        assert_eq!(new.generation_index, 1);
    }

    #[tokio::test]
    async fn zero_batches_is_a_no_op() {
        let gateway = gw(MockBackend::builtin());
        let resolver = TaxonomyResolver::new(gateway.clone());
        let mut ds = seeded();
        let before = ds.clone();
        let config = ExpansionConfig { batches_per_run: 0, ..ExpansionConfig::default() };
        let reports = run_pipeline(&gateway, &resolver, &mut ds, "manage-impact", &config, None).await.unwrap();
        assert!(reports.is_empty());
        assert_eq!(ds, before);
    }

    #[tokio::test]
    async fn second_iteration_sees_first_iteration_organisms() {
        let gateway = gw(MockBackend::builtin());
        let resolver = TaxonomyResolver::new(gateway.clone());
        let mut ds = seeded();
        let config = ExpansionConfig { batches_per_run: 2, seed: 7, ..ExpansionConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let reports = run_pipeline(&gateway, &resolver, &mut ds, "manage-impact", &config, Some(&path)).await.unwrap();
        assert_eq!(reports.len(), 2);
        assert!(!reports[0].new_records.is_empty());
        let first_batch: Vec<&MechanismRecord> = ds.records().iter().filter(|r| r.parent_batch.as_deref() == Some("manage-impact-b000")).collect();
        let tree_after_first = build_tree(ds.records().iter().filter(|r| r.parent_batch.as_deref() != Some("manage-impact-b001")));
        assert_eq!(reports[1].tree_nodes, tree_after_first.node_count());
        assert!(first_batch.iter().all(|r| r.taxonomy.is_some()));
        assert!(reports_dir(&path).join("manage-impact-b001.json").exists());
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert_eq!(next_iteration(&ds, "manage-impact"), 2);
        // a plan's depth targets always exist in that iteration's tree
        assert_eq!(reports[1].plan.reference_rank, Rank::Order);
    }
}
