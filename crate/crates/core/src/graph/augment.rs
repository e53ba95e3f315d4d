use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{neighbors_in, Adjacency, HeteroGraph, NodeType, RelationType};
use crate::error::{Error, Result};

/// A stochastic sub-graph of a [`HeteroGraph`] produced by node and edge dropout.
///
/// Dropped nodes keep their features but lose every incident edge.
#[derive(Clone, Debug)]
pub struct GraphView<'g> {
    base: &'g HeteroGraph,
    node_keep: [Vec<bool>; 3],
    /// Edge survival from the edge-dropout draw alone.
    edge_draw: [Vec<bool>; 4],
    /// Final survival: drawn and both endpoints kept.
    edge_keep: [Vec<bool>; 4],
    seed: Option<u64>,
    adjacency: Option<Adjacency>,
}

impl<'g> GraphView<'g> {
    pub(super) fn full(base: &'g HeteroGraph) -> Self {
        let node_keep = NodeType::ALL.map(|t| vec![true; base.count(t)]);
        let edge_keep = RelationType::ALL.map(|r| vec![true; base.edges(r).len()]);
        Self {
            base,
            node_keep,
            edge_draw: edge_keep.clone(),
            edge_keep,
            seed: None,
            adjacency: None,
        }
    }

    pub fn base(&self) -> &'g HeteroGraph {
        self.base
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn adjacency(&self) -> &Adjacency {
        self.adjacency.as_ref().unwrap_or(self.base.adjacency())
    }

    pub fn node_kept(&self, t: NodeType, id: usize) -> bool {
        self.node_keep[t.index()][id]
    }

    pub fn edge_kept(&self, r: RelationType, edge: usize) -> bool {
        self.edge_keep[r.index()][edge]
    }

    pub fn edge_drawn(&self, r: RelationType, edge: usize) -> bool {
        self.edge_draw[r.index()][edge]
    }

    pub fn kept_edges(&self, r: RelationType) -> usize {
        self.edge_keep[r.index()].iter().filter(|k| **k).count()
    }

    pub fn neighbors(&self, t: NodeType, node: usize, relation: RelationType) -> Result<Vec<(usize, f64)>> {
        neighbors_in(self.adjacency(), &self.base.counts, t, node, relation)
    }

    /// Fraction of stored edges that survived the edge draw, before removal of
    /// edges touching dropped nodes.
    pub fn drawn_edge_fraction(&self) -> f64 {
        let (kept, total) = self
            .edge_draw
            .iter()
            .flatten()
            .fold((0usize, 0usize), |(k, t), &d| (k + d as usize, t + 1));
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    /// True when no node or edge was removed.
    pub fn is_identity(&self) -> bool {
        self.node_keep.iter().flatten().all(|k| *k) && self.edge_keep.iter().flatten().all(|k| *k)
    }
}

/// Drops each node with probability `node_drop`, then each edge with
/// probability `edge_drop`; edges touching dropped nodes are removed as well.
/// An undirected pair is dropped as a unit.
pub fn augment(g: &HeteroGraph, node_drop: f64, edge_drop: f64, seed: u64) -> Result<GraphView<'_>> {
    for (name, p) in [("node", node_drop), ("edge", edge_drop)] {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("{name} dropout ratio {p} outside [0, 1)")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_keep = NodeType::ALL.map(|t| {
        (0..g.count(t))
            .map(|_| rng.random::<f64>() >= node_drop)
            .collect::<Vec<_>>()
    });
    let mut edge_draw: [Vec<bool>; 4] = Default::default();
    let mut edge_keep: [Vec<bool>; 4] = Default::default();
    for r in RelationType::ALL {
        let edges = g.edges(r);
        let (st, dt) = r.endpoints();
        let mut draw = vec![false; edges.len()];
        if r.is_symmetric() {
            let mut pair_draw = std::collections::HashMap::new();
            for e in edges.iter().filter(|e| e.src <= e.dst) {
                pair_draw.insert((e.src, e.dst), rng.random::<f64>() >= edge_drop);
            }
            for (i, e) in edges.iter().enumerate() {
                draw[i] = pair_draw[&(e.src.min(e.dst), e.src.max(e.dst))];
            }
        } else {
            draw.iter_mut().for_each(|d| *d = rng.random::<f64>() >= edge_drop);
        }
        let keep = edges
            .iter()
            .zip(&draw)
            .map(|(e, &d)| d && node_keep[st.index()][e.src] && node_keep[dt.index()][e.dst])
            .collect();
        edge_draw[r.index()] = draw;
        edge_keep[r.index()] = keep;
    }
    let adjacency = Some(Adjacency::build(&g.counts, g.raw_edges(), Some(&edge_keep)));
    Ok(GraphView {
        base: g,
        node_keep,
        edge_draw,
        edge_keep,
        seed: Some(seed),
        adjacency,
    })
}
