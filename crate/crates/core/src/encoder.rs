//! Heterogeneous graph encoder: node-level multi-head attention inside each
//! relation, then relation-level attention across a node's relations.

use std::sync::Arc;

use rand::Rng;

use crate::config::{RelationFusion, ScoreScope, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{Csr, GraphView, HeteroGraph, NodeType, RelationType, Slot};
use crate::params::{uniform, xavier_uniform, ParamId, ParamStore, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub leaky_slope: f64,
    pub interaction_weighted: bool,
    pub edge_weight_bias: bool,
    pub fusion: RelationFusion,
    pub score_scope: ScoreScope,
    pub user_dim: usize,
}

impl From<&TrainConfig> for EncoderSpec {
    fn from(c: &TrainConfig) -> Self {
        Self {
            hidden: c.hidden,
            heads: c.heads,
            layers: c.layers,
            leaky_slope: c.leaky_slope,
            interaction_weighted: c.interaction_weighted,
            edge_weight_bias: c.edge_weight_bias,
            fusion: c.relation_fusion,
            score_scope: c.relation_score_scope,
            user_dim: c.user_dim,
        }
    }
}

#[derive(Clone, Debug)]
struct RelationParams {
    w_r: ParamId,
    /// Per head, a `1 x 2 d_head` row: first half scores the centre node,
    /// second half the neighbour.
    att: Vec<ParamId>,
    w_h: Vec<ParamId>,
    w_a: ParamId,
}

#[derive(Clone, Debug)]
struct LayerParams {
    relations: Vec<RelationParams>,
    w_rel: ParamId,
    q: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct InputParams {
    /// Trainable input vectors for node types without a feature file.
    x: Option<ParamId>,
    w: ParamId,
}

/// Attention weights recorded during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// Per slot with at least one edge: one `E x 1` attention column per head,
    /// aligned with the slot's CSR entries.
    pub alpha: Vec<(Slot, Vec<Var>)>,
    /// Per node type: the slots fused and the `n x k` relation weights.
    pub beta: Vec<(NodeType, Vec<Slot>, Var)>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Projected inputs, indexed by [`NodeType::index`].
    pub input: [Var; 3],
    /// Embeddings after the last layer.
    pub output: [Var; 3],
    pub trace: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct HeteroEncoder {
    spec: EncoderSpec,
    inputs: Vec<InputParams>,
    layers: Vec<LayerParams>,
}

impl HeteroEncoder {
    /// Registers every encoder parameter in `store`, Glorot-initialised from `rng`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        graph: &HeteroGraph,
        spec: EncoderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.hidden;
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!(
                "heads: {} does not divide hidden {d}",
                spec.heads
            )));
        }
        let dm = d / spec.heads;
        let mut inputs = Vec::new();
        for t in NodeType::ALL {
            let (x, din) = match graph.feature_dim(t) {
                Some(f) => (None, f),
                None => {
                    let x = uniform(rng, graph.count(t), spec.user_dim, 1.0);
                    (Some(store.insert(format!("input/{}/x", t.name()), x)?), spec.user_dim)
                }
            };
            let w = store.insert(format!("input/W_{}", t.name()), xavier_uniform(rng, din, d))?;
            inputs.push(InputParams { x, w });
        }
        let mut layers = Vec::new();
        for l in 0..spec.layers {
            let mut relations = Vec::new();
            for r in RelationType::ALL {
                let p = format!("enc/L{l}/rel={}", r.name());
                let w_r = store.insert(format!("{p}/W_r"), xavier_uniform(rng, d, d))?;
                let mut att = Vec::new();
                let mut w_h = Vec::new();
                for m in 0..spec.heads {
                    att.push(store.insert(format!("{p}/att_h{m}"), xavier_uniform(rng, 1, 2 * dm))?);
                    w_h.push(store.insert(format!("{p}/W_h{m}"), xavier_uniform(rng, d, dm))?);
                }
                let w_a = store.insert(format!("{p}/W_a"), xavier_uniform(rng, d, d))?;
                relations.push(RelationParams { w_r, att, w_h, w_a });
            }
            let p = format!("enc/L{l}/relatt");
            let w_rel = store.insert(format!("{p}/W_R"), xavier_uniform(rng, d, d))?;
            let q = store.insert(format!("{p}/q"), xavier_uniform(rng, d, 1))?;
            let b = store.insert(format!("{p}/b"), Tensor::zeros(&[1, d]))?;
            layers.push(LayerParams { relations, w_rel, q, b });
        }
        Ok(Self { spec, inputs, layers })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Projects raw features (or trainable input vectors) to the hidden width.
    pub fn project_inputs(&self, tape: &mut Tape, pv: &ParamVars, graph: &HeteroGraph) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for t in NodeType::ALL {
            let p = &self.inputs[t.index()];
            let x = match (p.x, graph.features(t)) {
                (Some(id), _) => pv.var(id),
                (None, Some(f)) => tape.constant(f.clone()),
                (None, None) => {
                    return Err(Error::contract(format!(
                        "node type {} has no features and no input vectors",
                        t.name()
                    )))
                }
            };
            out.push(tape.matmul(x, pv.var(p.w))?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Runs every layer over the adjacency of `view`.
    pub fn encode(&self, tape: &mut Tape, pv: &ParamVars, view: &GraphView<'_>) -> Result<EncoderOutput> {
        let input = self.project_inputs(tape, pv, view.base())?;
        let mut h = input;
        let mut trace = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (next, lt) = self.layer(tape, pv, l, view, &h)?;
            h = next;
            trace.push(lt);
        }
        Ok(EncoderOutput {
            input,
            output: h,
            trace,
        })
    }

    fn layer(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        l: usize,
        view: &GraphView<'_>,
        h: &[Var; 3],
    ) -> Result<([Var; 3], LayerTrace)> {
        let adj = view.adjacency();
        let mut lt = LayerTrace::default();
        let mut out = *h;
        for t in NodeType::ALL {
            let mut rel_out = Vec::new();
            for slot in Slot::for_type(t) {
                let csr = adj.slot(slot);
                if csr.entries() == 0 {
                    continue;
                }
                let (emb, alphas) = self.relation_embedding(tape, pv, l, slot, csr, h)?;
                lt.alpha.push((slot, alphas));
                rel_out.push((slot, emb));
            }
            if rel_out.is_empty() {
                continue;
            }
            let (fused, beta) = self.fuse_relations(tape, pv, l, t, view, &rel_out, h[t.index()])?;
            out[t.index()] = fused;
            lt.beta.push((t, rel_out.iter().map(|p| p.0).collect(), beta));
        }
        Ok((out, lt))
    }

    /// Aggregates one relation's neighbourhood into an `n x d` embedding
    /// (zero rows for nodes without neighbours in that relation).
    fn relation_embedding(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        l: usize,
        slot: Slot,
        csr: &Csr,
        h: &[Var; 3],
    ) -> Result<(Var, Vec<Var>)> {
        let rp = &self.layers[l].relations[slot.relation.index()];
        let n = csr.nodes();
        let dm = self.spec.hidden / self.spec.heads;
        let (src, dst): (Arc<[usize]>, Arc<[usize]>) = (csr.src.clone(), csr.dst.clone());
        let h_dst = h[slot.node_type.index()];
        let h_src = h[slot.neighbor_type().index()];
        let w_r = pv.var(rp.w_r);
        let z_src = tape.matmul(h_src, w_r)?;
        let z_dst = if slot.node_type == slot.neighbor_type() {
            z_src
        } else {
            tape.matmul(h_dst, w_r)?
        };
        let plain_sum = if self.spec.interaction_weighted {
            None
        } else {
            let ones = tape.constant(Tensor::full(&[csr.entries(), 1], 1.0));
            Some(tape.edge_weighted_sum(h_src, ones, src.clone(), dst.clone(), n)?)
        };
        let bias = self.spec.edge_weight_bias.then(|| {
            // Negative weights (e.g. NPMI) contribute no bias.
            let col = csr.weight.iter().map(|w| w.max(0.0).ln_1p()).collect();
            tape.constant(Tensor::column(col))
        });
        let mut heads = Vec::with_capacity(self.spec.heads);
        let mut alphas = Vec::with_capacity(self.spec.heads);
        for m in 0..self.spec.heads {
            let zs = tape.slice_cols(z_src, m * dm, dm)?;
            let zd = tape.slice_cols(z_dst, m * dm, dm)?;
            let a = pv.var(rp.att[m]);
            let a_dst = tape.slice_cols(a, 0, dm)?;
            let a_src = tape.slice_cols(a, dm, dm)?;
            let a_dst = tape.transpose(a_dst)?;
            let a_src = tape.transpose(a_src)?;
            let s_dst = tape.matmul(zd, a_dst)?;
            let s_src = tape.matmul(zs, a_src)?;
            let e_dst = tape.gather_rows(s_dst, dst.clone())?;
            let e_src = tape.gather_rows(s_src, src.clone())?;
            let mut e = tape.add(e_dst, e_src)?;
            e = tape.leaky_relu(e, self.spec.leaky_slope);
            if let Some(b) = bias {
                e = tape.add(e, b)?;
            }
            let alpha = tape.segment_softmax(e, dst.clone(), n)?;
            let msg = tape.edge_weighted_sum(zs, alpha, src.clone(), dst.clone(), n)?;
            let agg = match plain_sum {
                Some(s) => s,
                None => tape.edge_weighted_sum(h_src, alpha, src.clone(), dst.clone(), n)?,
            };
            let prod = tape.mul(h_dst, agg)?;
            let inter = tape.matmul(prod, pv.var(rp.w_h[m]))?;
            let pre = tape.add(msg, inter)?;
            heads.push(tape.relu(pre));
            alphas.push(alpha);
        }
        let cat = tape.concat_cols(&heads)?;
        Ok((tape.matmul(cat, pv.var(rp.w_a))?, alphas))
    }

    /// Weighted sum of the relation embeddings of nodes of type `t`. Relation
    /// scores are averaged over the nodes that have neighbours in that
    /// relation (within the view or the full graph, per `score_scope`); nodes
    /// with no neighbours at all keep their previous embedding.
    #[allow(clippy::too_many_arguments)]
    fn fuse_relations(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        l: usize,
        t: NodeType,
        view: &GraphView<'_>,
        rel_out: &[(Slot, Var)],
        h_prev: Var,
    ) -> Result<(Var, Var)> {
        let adj = view.adjacency();
        let n = view.base().count(t);
        let k = rel_out.len();
        let mut mask = vec![false; n * k];
        for (r, (slot, _)) in rel_out.iter().enumerate() {
            let csr = adj.slot(*slot);
            for i in 0..n {
                mask[i * k + r] = csr.degree(i) > 0;
            }
        }
        let logits = match self.spec.fusion {
            RelationFusion::Mean => tape.constant(Tensor::zeros(&[n, k])),
            RelationFusion::Attention => {
                let lp = &self.layers[l];
                let mut scores = Vec::with_capacity(k);
                for (r, &(slot, emb)) in rel_out.iter().enumerate() {
                    let scope: Vec<bool> = match self.spec.score_scope {
                        ScoreScope::View => (0..n).map(|i| mask[i * k + r]).collect(),
                        ScoreScope::Graph => {
                            let csr = view.base().adjacency().slot(slot);
                            (0..n).map(|i| csr.degree(i) > 0).collect()
                        }
                    };
                    let active = scope.iter().filter(|m| **m).count();
                    if active == 0 {
                        scores.push(tape.constant(Tensor::scalar(0.0)));
                        continue;
                    }
                    let proj = tape.matmul(emb, pv.var(lp.w_rel))?;
                    let proj = tape.add_row(proj, pv.var(lp.b))?;
                    let act = tape.tanh(proj);
                    let s = tape.matmul(act, pv.var(lp.q))?;
                    let weights = (0..n)
                        .map(|i| if scope[i] { 1.0 / active as f64 } else { 0.0 })
                        .collect();
                    let s = tape.mul_const(s, Tensor::column(weights))?;
                    scores.push(tape.sum(s));
                }
                let row = tape.concat_cols(&scores)?;
                let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
                tape.matmul(ones, row)?
            }
        };
        let beta = tape.masked_softmax(logits, &mask)?;
        let keep = (0..n)
            .map(|i| {
                if mask[i * k..(i + 1) * k].iter().any(|m| *m) {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let keep = tape.constant(Tensor::column(keep));
        let mut acc = tape.mul_col(h_prev, keep)?;
        for (r, &(_, emb)) in rel_out.iter().enumerate() {
            let b = tape.slice_cols(beta, r, 1)?;
            let part = tape.mul_col(emb, b)?;
            acc = tape.add(acc, part)?;
        }
        Ok((acc, beta))
    }
}
