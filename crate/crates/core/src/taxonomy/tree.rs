use std::cmp::Ordering;
use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Rank, TaxonomicHierarchy};
use crate::model::MechanismRecord;

pub type NodeId = usize;

/// How nodes at one rank are sized when ranking them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SortKey {
    #[default]
    ImmediateChildren,
    SubtreeSize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaxonNode {
    /// `None` only for the root.
    pub rank: Option<Rank>,
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Organisms attached here; only genus nodes carry any.
    pub organisms: Vec<String>,
}

/// Rooted tree over the union of all hierarchy paths. Node 0 is the root.
/// Genus nodes hold organisms in place of a species level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaxonomicTree {
    nodes: Vec<TaxonNode>,
    #[serde(skip)]
    index: HashMap<(NodeId, String), NodeId>,
    skipped: usize,
}

impl Default for TaxonomicTree {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds the tree from the records that carry a taxonomy; the rest are
/// skipped and counted.
pub fn build_tree<'a, I>(records: I) -> TaxonomicTree
where
    I: IntoIterator<Item = &'a MechanismRecord>,
{
    let mut tree = TaxonomicTree::new();
    for r in records {
        match &r.taxonomy {
            Some(h) => tree.insert(&r.organism.name, h),
            None => tree.skipped += 1,
        }
    }
    tree
}

impl TaxonomicTree {
    pub fn new() -> Self {
        Self {
            nodes: vec![TaxonNode {
                rank: None,
                name: String::new(),
                parent: None,
                children: Vec::new(),
                organisms: Vec::new(),
            }],
            index: HashMap::new(),
            skipped: 0,
        }
    }

    pub fn from_hierarchies<'a, I>(items: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a TaxonomicHierarchy)>,
    {
        let mut tree = Self::new();
        for (organism, h) in items {
            tree.insert(organism, h);
        }
        tree
    }

    /// Adds one organism path. Re-inserting an organism is a no-op.
    pub fn insert(&mut self, organism: &str, hierarchy: &TaxonomicHierarchy) {
        let mut at = self.root();
        for (rank, name) in hierarchy.iter() {
            let key = (at, name.to_string());
            at = match self.index.get(&key) {
                Some(&id) => id,
                None => {
                    let id = self.nodes.len();
                    self.nodes.push(TaxonNode {
                        rank: Some(rank),
                        name: name.to_string(),
                        parent: Some(at),
                        children: Vec::new(),
                        organisms: Vec::new(),
                    });
                    self.nodes[at].children.push(id);
                    self.index.insert(key, id);
                    id
                }
            };
        }
        let organisms = &mut self.nodes[at].organisms;
        if !organisms.iter().any(|o| o == organism) {
            organisms.push(organism.to_string());
        }
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> &TaxonNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TaxonNode] {
        &self.nodes
    }

    /// Node count including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Records skipped by [`build_tree`] for lack of a taxonomy.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn organism_count(&self) -> usize {
        self.nodes.iter().map(|n| n.organisms.len()).sum()
    }

    /// Nodes at `rank` in insertion order.
    pub fn nodes_at(&self, rank: Rank) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].rank == Some(rank))
            .collect()
    }

    /// Immediate children; for a genus node, its organisms.
    pub fn child_count(&self, id: NodeId) -> usize {
        let n = &self.nodes[id];
        if n.rank == Some(Rank::Genus) {
            n.organisms.len()
        } else {
            n.children.len()
        }
    }

    /// Every node below `id`, counting attached organisms as leaves.
    pub fn subtree_size(&self, id: NodeId) -> usize {
        let n = &self.nodes[id];
        n.organisms.len()
            + n.children
                .iter()
                .map(|&c| 1 + self.subtree_size(c))
                .sum::<usize>()
    }

    pub fn size(&self, id: NodeId, key: SortKey) -> usize {
        match key {
            SortKey::ImmediateChildren => self.child_count(id),
            SortKey::SubtreeSize => self.subtree_size(id),
        }
    }

    /// Names from the domain down to this node, joined with `/`.
    pub fn path(&self, id: NodeId) -> String {
        let mut parts = Vec::new();
        let mut at = Some(id);
        while let Some(i) = at {
            if self.nodes[i].rank.is_some() {
                parts.push(self.nodes[i].name.as_str());
            }
            at = self.nodes[i].parent;
        }
        parts.reverse();
        parts.join("/")
    }

    fn name_order(&self, a: NodeId, b: NodeId) -> Ordering {
        self.nodes[a]
            .name
            .cmp(&self.nodes[b].name)
            .then_with(|| self.path(a).cmp(&self.path(b)))
    }

    /// Nodes at `rank`, smallest first; ties broken alphabetically by name.
    pub fn cut_and_rank(&self, rank: Rank, key: SortKey) -> Vec<NodeId> {
        let mut ids = self.nodes_at(rank);
        ids.sort_by(|&a, &b| {
            self.size(a, key)
                .cmp(&self.size(b, key))
                .then_with(|| self.name_order(a, b))
        });
        ids
    }

    /// Up to `n` nodes at `rank`, largest first; ties broken alphabetically.
    pub fn most_populated(&self, rank: Rank, n: usize, key: SortKey) -> Vec<NodeId> {
        let mut ids = self.nodes_at(rank);
        ids.sort_by(|&a, &b| {
            self.size(b, key)
                .cmp(&self.size(a, key))
                .then_with(|| self.name_order(a, b))
        });
        ids.truncate(n);
        ids
    }

    /// Names of the children of `id` (organisms for a genus node).
    pub fn child_names(&self, id: NodeId) -> Vec<String> {
        let n = &self.nodes[id];
        if n.rank == Some(Rank::Genus) {
            n.organisms.clone()
        } else {
            n.children
                .iter()
                .map(|&c| self.nodes[c].name.clone())
                .collect()
        }
    }

    /// `min(n, children)` child names drawn without replacement.
    pub fn sample_children_with<R: Rng + ?Sized>(&self, id: NodeId, n: usize, rng: &mut R) -> Vec<String> {
        let names = self.child_names(id);
        let amount = n.min(names.len());
        index::sample(rng, names.len(), amount)
            .into_iter()
            .map(|i| names[i].clone())
            .collect()
    }

    pub fn sample_children(&self, id: NodeId, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_children_with(id, n, &mut rng)
    }
}
