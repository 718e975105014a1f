//! Regenerates the taxonomy replay fixtures under `fixtures/replay/<model>/`
//! from the gold set plus a per-model list of wrong answers.
//!
//!     cargo run --example gold_replays -- [out_dir]

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use bioanalog::evaluation::GoldTaxonomySet;
use bioanalog::gateway::{render_prompt, Bindings, ModelConfig, ReplayRecord, TemplateId};
use bioanalog::taxonomy::{Rank, TaxonomicHierarchy};

type Override = (&'static str, Rank, &'static str);

const GPT4_ERRORS: &[Override] = &[
    ("swordfish", Rank::Order, "perciformes"),
    ("giant clam", Rank::Order, "veneroida"),
    ("abalone", Rank::Order, "archaeogastropoda"),
    ("naked mole-rat", Rank::Family, "bathyergidae"),
    ("nutria", Rank::Family, "myocastoridae"),
    ("danio rerio", Rank::Family, "cyprinidae"),
    ("glyptodon", Rank::Family, "glyptodontidae"),
    ("golden silk orb-weaver", Rank::Family, "nephilidae"),
    ("hummingbird", Rank::Genus, "various"),
];

const GPT35_ERRORS: &[Override] = &[
    ("swordfish", Rank::Order, "perciformes"),
    ("giant clam", Rank::Order, "veneroida"),
    ("abalone", Rank::Order, "neogastropoda"),
    ("lybia edmondsoni", Rank::Order, "hymenoptera"),
    ("naked mole-rat", Rank::Family, "bathyergidae"),
    ("nutria", Rank::Family, "myocastoridae"),
    ("danio rerio", Rank::Family, "cyprinidae"),
    ("bonytail chub", Rank::Family, "cyprinidae"),
    ("hummingbird", Rank::Genus, "archilochus"),
    ("deer", Rank::Genus, "odocoileus"),
    ("squirrels", Rank::Genus, "tamiasciurus"),
    ("herons", Rank::Genus, "egretta"),
    ("hyenas", Rank::Genus, "crocuta"),
    ("echidnas", Rank::Genus, "zaglossus"),
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn reply(h: &TaxonomicHierarchy, fenced: bool) -> String {
    let body = h
        .iter()
        .map(|(r, n)| format!("\"{}\": \"{}\"", capitalize(r.as_str()), capitalize(n)))
        .collect::<Vec<_>>()
        .join(", ");
    if fenced {
        format!("```python\n{{{body}}}\n```")
    } else {
        format!("{{{body}}}")
    }
}

fn apply(h: &TaxonomicHierarchy, organism: &str, errors: &[Override]) -> TaxonomicHierarchy {
    let mut map: BTreeMap<Rank, String> = h.iter().map(|(r, n)| (r, n.to_string())).collect();
    for (o, rank, wrong) in errors {
        if *o == organism {
            map.insert(*rank, wrong.to_string());
        }
    }
    TaxonomicHierarchy::from_map(&map).expect("complete hierarchy")
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/replay"));
    let gold = GoldTaxonomySet::builtin();
    for (model, errors, fence_every) in [("gpt-4", GPT4_ERRORS, 0usize), ("gpt-3.5-turbo", GPT35_ERRORS, 7)] {
        for (o, _, _) in errors {
            assert!(gold.get(o).is_some(), "{o} not in gold set");
        }
        let dir = out.join(model);
        if dir.exists() {
            fs::remove_dir_all(&dir).expect("clear old fixtures");
        }
        let models = ModelConfig {
            taxonomy_model: model.to_string(),
            ..ModelConfig::default()
        };
        for (i, entry) in gold.entries.iter().enumerate() {
            let mut bindings = Bindings::new();
            bindings.insert("organism".into(), entry.organism.clone());
            let prompt = render_prompt(TemplateId::Taxonomy, &bindings).expect("taxonomy prompt renders");
            let predicted = apply(&entry.hierarchy, &entry.organism, errors);
            let fenced = fence_every > 0 && i % fence_every == 0;
            ReplayRecord::new(
                TemplateId::Taxonomy,
                models.model_for(TemplateId::Taxonomy),
                &prompt,
                &reply(&predicted, fenced),
            )
            .write_to(&dir)
            .expect("write replay record");
        }
        println!("{}: {} records", dir.display(), gold.len());
    }
}
