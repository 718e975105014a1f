use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bioanalog::clustering::{cluster_problem, ClusterSet, DEFAULT_K};
use bioanalog::evaluation::{diversity_curve, run_taxonomy_eval, DiversityLevel, GoldTaxonomySet, EVAL_PROBLEMS};
use bioanalog::expansion::{run_pipeline, ExpansionConfig, RankPolicy};
use bioanalog::gateway::{
    CompletionBackend, Embedder, Gateway, MockBackend, MockEmbedder, MockTable, ModelConfig, OpenAiBackend,
    OpenAiEmbedder, RecordingBackend, ReplayBackend, DEFAULT_CONCURRENCY,
};
use bioanalog::imagery::{
    default_cache_dir, fetch_images, GoogleImageSearch, ImageCache, ImageFetcher, ImageSearch, ImageStatus,
    StubSearch, DEFAULT_IMAGE_CONCURRENCY,
};
use bioanalog::ingest::{fetch_problem, seed_corpus, ExclusionList};
use bioanalog::model::Dataset;
use bioanalog::service::{serve, Snapshot};
use bioanalog::taxonomy::TaxonomyResolver;

type AnyError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "bioanalog", version, about = "Generate, cluster, evaluate and serve biological-analogy mechanisms")]
struct Cli {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Replay,
    Live,
}

#[derive(Args)]
struct BackendArgs {
    /// Completion backend. `live` reads OPENAI_API_KEY (and OPENAI_BASE_URL).
    #[arg(long, value_enum, default_value = "mock", global = true)]
    backend: BackendKind,
    /// Mock fixture file or directory; the bundled fixtures when omitted.
    #[arg(long, global = true)]
    mock_fixtures: Option<PathBuf>,
    #[arg(long, global = true)]
    replay_dir: Option<PathBuf>,
    /// Also write every completion to this directory in replay format.
    #[arg(long, global = true)]
    record_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    generation_model: Option<String>,
    #[arg(long, global = true)]
    taxonomy_model: Option<String>,
    #[arg(long, global = true)]
    embedding_model: Option<String>,
    #[arg(long, default_value_t = DEFAULT_CONCURRENCY, global = true)]
    concurrency: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Distill seed mechanisms from a stored corpus and annotate taxonomy.
    Seed {
        #[arg(long, default_value = "fixtures/corpus")]
        corpus: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        exclusions: Option<PathBuf>,
    },
    /// Run taxonomy-guided expansion batches.
    Expand {
        #[arg(long)]
        dataset: PathBuf,
        /// Every problem in the dataset when omitted.
        #[arg(long)]
        problem: Option<String>,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value = "rotate")]
        rank_policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embed and k-means cluster each problem's mechanisms.
    Cluster {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        problem: Option<String>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `<dataset stem>.clusters.json` when omitted.
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Look up a representative image per record.
    Images {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        problem: Option<String>,
        #[arg(long, value_enum, default_value = "stub")]
        provider: ImageProvider,
        /// Stub result map; the bundled one when omitted.
        #[arg(long)]
        stub_fixtures: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_IMAGE_CONCURRENCY)]
        image_concurrency: usize,
    },
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the dataset and interaction endpoints over HTTP.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Download a strategy group page and its strategy pages into a corpus.
    Fetch {
        #[arg(long)]
        group_url: String,
        #[arg(long)]
        slug: String,
        #[arg(long, default_value = "fixtures/corpus")]
        corpus: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageProvider {
    Stub,
    Google,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Per-rank taxonomy accuracy against a gold set.
    Taxonomy {
        /// The bundled 90-organism set when omitted.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Write the full result (table, mismatches, failures) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean cumulative unique names over generation index.
    Diversity {
        #[arg(long)]
        dataset: PathBuf,
        /// A rank name, or `organism`.
        #[arg(long, default_value = "genus")]
        rank: String,
        #[arg(long, value_delimiter = ',')]
        problems: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_gateway(args: &BackendArgs) -> Result<Arc<Gateway>, AnyError> {
    let defaults = ModelConfig::default();
    let models = ModelConfig {
        generation_model: args.generation_model.clone().unwrap_or(defaults.generation_model),
        taxonomy_model: args.taxonomy_model.clone().unwrap_or(defaults.taxonomy_model),
        embedding_model: args.embedding_model.clone().unwrap_or(defaults.embedding_model),
        ..defaults
    };
    let (backend, embedder): (Arc<dyn CompletionBackend>, Arc<dyn Embedder>) = match args.backend {
        BackendKind::Mock => {
            let table = match &args.mock_fixtures {
                Some(p) => MockTable::load(p)?,
                None => MockTable::builtin(),
            };
            (Arc::new(MockBackend::from_table(table)), Arc::new(MockEmbedder::default()))
        }
        BackendKind::Replay => {
            let dir = args.replay_dir.as_ref().ok_or("--backend replay needs --replay-dir")?;
            (Arc::new(ReplayBackend::open(dir)?), Arc::new(MockEmbedder::default()))
        }
        BackendKind::Live => (
            Arc::new(OpenAiBackend::from_env()?),
            Arc::new(OpenAiEmbedder::from_env(models.embedding_model.clone())?),
        ),
    };
    let backend: Arc<dyn CompletionBackend> = match &args.record_dir {
        Some(dir) => Arc::new(RecordingBackend::new(backend, dir.clone())),
        None => backend,
    };
    Ok(Arc::new(
        Gateway::new(backend, embedder)
            .with_concurrency(args.concurrency)
            .with_models(models),
    ))
}

fn problems_or_all(dataset: &Dataset, problem: &Option<String>) -> Vec<String> {
    match problem {
        Some(p) => vec![p.clone()],
        None => dataset.problems().iter().map(|p| p.id.clone()).collect(),
    }
}

async fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::Seed {
            corpus,
            dataset,
            exclusions,
        } => {
            let gateway = build_gateway(&cli.backend)?;
            let exclusions = match exclusions {
                Some(p) => ExclusionList::load(p)?,
                None => ExclusionList::default(),
            };
            let mut ds = Dataset::load_or_default(&dataset)?;
            let report = seed_corpus(gateway.clone(), &corpus, &exclusions, &mut ds).await?;
            let resolver = TaxonomyResolver::new(gateway);
            resolver.prime_from(&ds);
            let tax_failures = resolver.annotate(&mut ds).await;
            ds.save(&dataset)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for f in &report.failures {
                eprintln!("failed: {f}");
            }
            for (o, e) in &tax_failures {
                eprintln!("taxonomy failed: {o}: {e}");
            }
            println!(
                "seeded {} records across {} problems ({} duplicates skipped)",
                report.outcome.accepted,
                report.problems.len(),
                report.outcome.rejected_duplicates
            );
        }
        Command::Expand {
            dataset,
            problem,
            batches,
            rank_policy,
            seed,
        } => {
            let gateway = build_gateway(&cli.backend)?;
            let config = ExpansionConfig {
                batches_per_run: batches,
                rank_policy: rank_policy.parse::<RankPolicy>()?,
                seed,
                ..ExpansionConfig::default()
            };
            let mut ds = Dataset::load(&dataset)?;
            let resolver = TaxonomyResolver::new(gateway.clone());
            resolver.prime_from(&ds);
            for p in problems_or_all(&ds, &problem) {
                let reports = run_pipeline(&gateway, &resolver, &mut ds, &p, &config, Some(&dataset)).await?;
                let added: usize = reports.iter().map(|r| r.new_records.len()).sum();
                println!("{p}: {} batches, {added} new records, {} total", reports.len(), ds.count_for(&p));
            }
        }
        Command::Cluster {
            dataset,
            problem,
            k,
            seed,
            clusters,
        } => {
            let gateway = build_gateway(&cli.backend)?;
            let mut ds = Dataset::load(&dataset)?;
            let path = clusters.unwrap_or_else(|| ClusterSet::default_path(&dataset));
            let mut set = ClusterSet::load_or_default(&path)?;
            for p in problems_or_all(&ds, &problem) {
                let model = cluster_problem(&gateway, &mut ds, &p, k, seed).await?;
                println!("{p}: {} clusters after {} iterations", model.effective_k, model.iterations);
                set.problems.insert(p, model);
            }
            ds.save(&dataset)?;
            set.save(&path)?;
        }
        Command::Images {
            dataset,
            problem,
            provider,
            stub_fixtures,
            cache_dir,
            image_concurrency,
        } => {
            let search: Arc<dyn ImageSearch> = match provider {
                ImageProvider::Stub => Arc::new(match stub_fixtures {
                    Some(p) => StubSearch::from_json(&std::fs::read_to_string(p)?)?,
                    None => StubSearch::builtin(),
                }),
                ImageProvider::Google => Arc::new(GoogleImageSearch::from_env()?),
            };
            let cache = ImageCache::new(cache_dir.unwrap_or_else(|| default_cache_dir(&dataset)));
            let fetcher = ImageFetcher::new(search, Some(cache));
            let mut ds = Dataset::load(&dataset)?;
            let results = fetch_images(&mut ds, &fetcher, problem.as_deref(), image_concurrency).await;
            ds.save(&dataset)?;
            let ok = results.iter().filter(|r| r.status == ImageStatus::Ok).count();
            for r in results.iter().filter(|r| r.status == ImageStatus::Error) {
                eprintln!("image lookup failed for {}: {}", r.record_id, r.error.as_deref().unwrap_or(""));
            }
            println!("{ok} of {} records have an image", results.len());
        }
        Command::Eval(EvalCommand::Taxonomy { gold, out }) => {
            let gateway = build_gateway(&cli.backend)?;
            let gold = match gold {
                Some(p) => GoldTaxonomySet::load(p)?,
                None => GoldTaxonomySet::builtin(),
            };
            let model = gateway.models().taxonomy_model.clone();
            let resolver = TaxonomyResolver::new(gateway);
            let eval = run_taxonomy_eval(&gold, &resolver, &model).await?;
            print!("{}", eval.table.to_markdown(&model));
            for m in &eval.mismatches {
                println!(
                    "{}\t{}\texpected {}\tgot {}",
                    m.organism,
                    m.rank,
                    m.expected,
                    m.predicted.as_deref().unwrap_or("-")
                );
            }
            for (o, e) in &eval.failures {
                eprintln!("lookup failed: {o}: {e}");
            }
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&eval)? + "\n")?;
            }
        }
        Command::Eval(EvalCommand::Diversity {
            dataset,
            rank,
            problems,
            out,
        }) => {
            let ds = Dataset::load(&dataset)?;
            let level: DiversityLevel = rank.parse()?;
            let problems: Vec<&str> = if problems.is_empty() {
                EVAL_PROBLEMS.to_vec()
            } else {
                problems.iter().map(String::as_str).collect()
            };
            let curve = diversity_curve(&ds, &problems, level)?;
            match out {
                Some(path) => {
                    curve.write_csv(&path)?;
                    println!("{} points written to {}", curve.mean_unique.len(), path.display());
                }
                None => print!("{}", curve.to_csv()),
            }
        }
        Command::Serve {
            dataset,
            clusters,
            port,
            host,
        } => {
            let gateway = build_gateway(&cli.backend)?;
            let ds = Dataset::load(&dataset)?;
            let clusters = ClusterSet::load_or_default(clusters.unwrap_or_else(|| ClusterSet::default_path(&dataset)))?;
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            serve(Arc::new(Snapshot::new(ds, clusters, gateway)), addr).await?;
        }
        Command::Fetch { group_url, slug, corpus } => {
            let client = reqwest::Client::builder().user_agent("bioanalog-fetch").build()?;
            let n = fetch_problem(&client, &group_url, Path::new(&corpus), &slug).await?;
            println!("stored {n} strategy pages for {slug}");
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
