//! Heterogeneous user-recipe-ingredient graph.

pub mod augment;
pub mod io;
pub mod split;

pub use augment::{augment, GraphView};
pub use io::{fingerprint_files, load_dir, load_graph, save_dir, DatasetFiles};
pub use split::{
    leave_one_out_split, leave_one_out_split_with, sample_training_negative, InteractionSplit, SplitFile,
    EVAL_NEGATIVES,
};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    User,
    Recipe,
    Ingredient,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::User, NodeType::Recipe, NodeType::Ingredient];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::User => "user",
            NodeType::Recipe => "recipe",
            NodeType::Ingredient => "ingredient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    #[serde(rename = "user-recipe")]
    UserRecipe,
    #[serde(rename = "recipe-recipe")]
    RecipeRecipe,
    #[serde(rename = "recipe-ingredient")]
    RecipeIngredient,
    #[serde(rename = "ingredient-ingredient")]
    IngredientIngredient,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::UserRecipe,
        RelationType::RecipeRecipe,
        RelationType::RecipeIngredient,
        RelationType::IngredientIngredient,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::UserRecipe => "user-recipe",
            RelationType::RecipeRecipe => "recipe-recipe",
            RelationType::RecipeIngredient => "recipe-ingredient",
            RelationType::IngredientIngredient => "ingredient-ingredient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// `(source type, destination type)` as stored in edge files.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            RelationType::UserRecipe => (NodeType::User, NodeType::Recipe),
            RelationType::RecipeRecipe => (NodeType::Recipe, NodeType::Recipe),
            RelationType::RecipeIngredient => (NodeType::Recipe, NodeType::Ingredient),
            RelationType::IngredientIngredient => (NodeType::Ingredient, NodeType::Ingredient),
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, RelationType::RecipeRecipe | RelationType::IngredientIngredient)
    }

    pub fn touches(self, t: NodeType) -> bool {
        let (a, b) = self.endpoints();
        a == t || b == t
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A node type together with one relation incident to it: the unit over which
/// neighbourhoods `N_{i,r}` are defined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub node_type: NodeType,
    pub relation: RelationType,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::new(NodeType::User, RelationType::UserRecipe),
        Slot::new(NodeType::Recipe, RelationType::UserRecipe),
        Slot::new(NodeType::Recipe, RelationType::RecipeRecipe),
        Slot::new(NodeType::Recipe, RelationType::RecipeIngredient),
        Slot::new(NodeType::Ingredient, RelationType::RecipeIngredient),
        Slot::new(NodeType::Ingredient, RelationType::IngredientIngredient),
    ];

    pub const fn new(node_type: NodeType, relation: RelationType) -> Self {
        Self { node_type, relation }
    }

    pub fn of(node_type: NodeType, relation: RelationType) -> Result<Self> {
        if !relation.touches(node_type) {
            return Err(Error::contract(format!(
                "relation {relation} is not incident to {node_type} nodes"
            )));
        }
        Ok(Self::new(node_type, relation))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("valid slot")
    }

    pub fn neighbor_type(self) -> NodeType {
        let (a, b) = self.relation.endpoints();
        if self.node_type == a {
            b
        } else {
            a
        }
    }

    /// Whether this node type is the stored edge source.
    fn is_source_side(self) -> bool {
        self.relation.endpoints().0 == self.node_type
    }

    /// Relations incident to `t`, in slot order.
    pub fn for_type(t: NodeType) -> impl Iterator<Item = Slot> {
        Self::ALL.into_iter().filter(move |s| s.node_type == t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Compressed neighbour lists for one [`Slot`], sorted by neighbour id.
#[derive(Clone, Debug)]
pub struct Csr {
    offsets: Vec<usize>,
    /// Centre node of each adjacency entry (the softmax segment).
    pub dst: Arc<[usize]>,
    /// Neighbour id of each adjacency entry.
    pub src: Arc<[usize]>,
    pub weight: Vec<f64>,
}

impl Csr {
    fn build(n: usize, mut pairs: Vec<(usize, usize, f64)>) -> Self {
        pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0; n + 1];
        for &(c, _, _) in &pairs {
            offsets[c + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Self {
            offsets,
            dst: pairs.iter().map(|p| p.0).collect(),
            src: pairs.iter().map(|p| p.1).collect(),
            weight: pairs.iter().map(|p| p.2).collect(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.src.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        (self.offsets[i]..self.offsets[i + 1])
            .map(|k| (self.src[k], self.weight[k]))
            .collect()
    }
}

/// Neighbour lists for all six slots, built from kept edges.
#[derive(Clone, Debug)]
pub struct Adjacency {
    slots: Vec<Csr>,
}

impl Adjacency {
    fn build(counts: &[usize; 3], edges: &[Vec<Edge>; 4], keep: Option<&[Vec<bool>; 4]>) -> Self {
        let slots = Slot::ALL
            .iter()
            .map(|&slot| {
                let r = slot.relation.index();
                let kept = edges[r]
                    .iter()
                    .enumerate()
                    .filter(|(e, _)| keep.is_none_or(|k| k[r][*e]));
                let pairs: Vec<_> = if slot.relation.is_symmetric() || slot.is_source_side() {
                    kept.map(|(_, e)| (e.src, e.dst, e.weight)).collect()
                } else {
                    kept.map(|(_, e)| (e.dst, e.src, e.weight)).collect()
                };
                Csr::build(counts[slot.node_type.index()], pairs)
            })
            .collect();
        Self { slots }
    }

    pub fn slot(&self, slot: Slot) -> &Csr {
        &self.slots[slot.index()]
    }
}

/// Typed nodes, typed weighted edges, and per-type feature matrices.
///
/// Symmetric relations keep both directions: `(u, v, w)` is stored iff
/// `(v, u, w)` is (a self-loop is stored once).
#[derive(Clone, Debug)]
pub struct HeteroGraph {
    counts: [usize; 3],
    edges: [Vec<Edge>; 4],
    features: [Option<Tensor>; 3],
    adjacency: Adjacency,
}

impl PartialEq for HeteroGraph {
    fn eq(&self, other: &Self) -> bool {
        self.counts == other.counts && self.edges == other.edges && self.features == other.features
    }
}

impl HeteroGraph {
    /// Validates and canonicalises the edge lists. For symmetric relations each
    /// pair may be given in one or both directions.
    pub fn new(counts: [usize; 3], edges: [Vec<Edge>; 4], features: [Option<Tensor>; 3]) -> Result<Self> {
        let mut canon: [Vec<Edge>; 4] = Default::default();
        for rel in RelationType::ALL {
            let (st, dt) = rel.endpoints();
            let mut seen: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for e in &edges[rel.index()] {
                if e.src >= counts[st.index()] || e.dst >= counts[dt.index()] {
                    return Err(Error::contract(format!(
                        "{rel} edge ({}, {}) references a node outside {}x{}",
                        e.src,
                        e.dst,
                        counts[st.index()],
                        counts[dt.index()]
                    )));
                }
                if !e.weight.is_finite() {
                    return Err(Error::contract(format!(
                        "{rel} edge ({}, {}) has non-finite weight",
                        e.src, e.dst
                    )));
                }
                let key = if rel.is_symmetric() {
                    (e.src.min(e.dst), e.src.max(e.dst))
                } else {
                    (e.src, e.dst)
                };
                match seen.get(&key) {
                    None => {
                        seen.insert(key, e.weight);
                    }
                    Some(&w) if rel.is_symmetric() && w == e.weight => {}
                    Some(_) => return Err(Error::contract(format!("duplicate {rel} edge ({}, {})", e.src, e.dst))),
                }
            }
            let mut list = Vec::with_capacity(seen.len() * if rel.is_symmetric() { 2 } else { 1 });
            for (&(s, d), &w) in &seen {
                list.push(Edge {
                    src: s,
                    dst: d,
                    weight: w,
                });
                if rel.is_symmetric() && s != d {
                    list.push(Edge {
                        src: d,
                        dst: s,
                        weight: w,
                    });
                }
            }
            list.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
            canon[rel.index()] = list;
        }
        for t in NodeType::ALL {
            if let Some(f) = &features[t.index()] {
                if !f.is_matrix() || f.rows() != counts[t.index()] {
                    return Err(Error::contract(format!(
                        "{t} feature matrix has shape {:?} but there are {} {t} nodes",
                        f.shape(),
                        counts[t.index()]
                    )));
                }
            }
        }
        let adjacency = Adjacency::build(&counts, &canon, None);
        Ok(Self {
            counts,
            edges: canon,
            features,
            adjacency,
        })
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.counts[t.index()]
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Stored (directed) edge list; symmetric relations hold both directions.
    pub fn edges(&self, r: RelationType) -> &[Edge] {
        &self.edges[r.index()]
    }

    /// Number of distinct edges, counting an undirected pair once.
    pub fn edge_count(&self, r: RelationType) -> usize {
        if r.is_symmetric() {
            self.edges(r).iter().filter(|e| e.src <= e.dst).count()
        } else {
            self.edges(r).len()
        }
    }

    pub fn features(&self, t: NodeType) -> Option<&Tensor> {
        self.features[t.index()].as_ref()
    }

    pub fn feature_dim(&self, t: NodeType) -> Option<usize> {
        self.features(t).map(Tensor::cols)
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn neighbors(&self, t: NodeType, node: usize, relation: RelationType) -> Result<Vec<(usize, f64)>> {
        neighbors_in(&self.adjacency, &self.counts, t, node, relation)
    }

    /// Each user's recipes, sorted.
    pub fn interactions(&self) -> Vec<Vec<usize>> {
        let mut per_user = vec![Vec::new(); self.count(NodeType::User)];
        for e in self.edges(RelationType::UserRecipe) {
            per_user[e.src].push(e.dst);
        }
        per_user
    }

    /// Copy of the graph without the given user-recipe edges.
    pub fn without_interactions(&self, removed: &[(usize, usize)]) -> Result<Self> {
        let removed: std::collections::HashSet<(usize, usize)> = removed.iter().copied().collect();
        let mut edges = self.edges.clone();
        edges[RelationType::UserRecipe.index()].retain(|e| !removed.contains(&(e.src, e.dst)));
        Self::new(self.counts, edges, self.features.clone())
    }

    /// A view keeping every node and edge.
    pub fn full_view(&self) -> GraphView<'_> {
        GraphView::full(self)
    }

    pub(crate) fn raw_edges(&self) -> &[Vec<Edge>; 4] {
        &self.edges
    }
}

fn neighbors_in(
    adjacency: &Adjacency,
    counts: &[usize; 3],
    t: NodeType,
    node: usize,
    relation: RelationType,
) -> Result<Vec<(usize, f64)>> {
    let slot = Slot::of(t, relation)?;
    if node >= counts[t.index()] {
        return Err(Error::contract(format!(
            "{t} node {node} does not exist ({} nodes)",
            counts[t.index()]
        )));
    }
    Ok(adjacency.slot(slot).neighbors(node))
}
