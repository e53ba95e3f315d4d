//! Straight-line reimplementation of the model forward pass on nested
//! `Vec<f64>` rows, reading parameters by name. Shares no code with the
//! tape-based implementation.

#![allow(dead_code)]

use reciperec_core::config::{Pooling, RelationFusion};
use reciperec_core::{HeteroGraph, NodeType, RecipeRec, RelationType, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k, "inner dimension");
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn vm(v: &[f64], b: &Mat) -> Vec<f64> {
    mm(&vec![v.to_vec()], b).remove(0)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut d = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (x, y) in row.iter().zip(b.row(r)) {
            d = d.max((x - y).abs());
        }
    }
    d
}

pub struct Oracle<'a> {
    pub model: &'a RecipeRec,
    pub graph: &'a HeteroGraph,
}

/// Neighbours `(id, weight)` of `node` (of type `t`) under relation `r`, read
/// straight from the stored edge list.
pub fn neighbours(g: &HeteroGraph, t: NodeType, node: usize, r: RelationType) -> Vec<(usize, f64)> {
    let (st, dt) = r.endpoints();
    g.edges(r)
        .iter()
        .filter_map(|e| {
            if st == t && e.src == node {
                Some((e.dst, e.weight))
            } else if st != dt && dt == t && e.dst == node {
                Some((e.src, e.weight))
            } else {
                None
            }
        })
        .collect()
}

fn other(r: RelationType, t: NodeType) -> NodeType {
    let (a, b) = r.endpoints();
    if a == t {
        b
    } else {
        a
    }
}

impl<'a> Oracle<'a> {
    pub fn p(&self, name: &str) -> Mat {
        mat(self
            .model
            .store()
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}")))
    }

    pub fn inputs(&self) -> [Mat; 3] {
        let mut out: Vec<Mat> = Vec::new();
        for t in NodeType::ALL {
            let x = match self.graph.features(t) {
                Some(f) if self.model.store().get(&format!("input/{}/x", t.name())).is_none() => mat(f),
                _ => self.p(&format!("input/{}/x", t.name())),
            };
            out.push(mm(&x, &self.p(&format!("input/W_{}", t.name()))));
        }
        [out[0].clone(), out[1].clone(), out[2].clone()]
    }

    /// Relation embedding of `node` (type `t`) under `r` at layer `l`, or
    /// `None` when the node has no neighbours there.
    pub fn relation_embedding(
        &self,
        l: usize,
        t: NodeType,
        r: RelationType,
        node: usize,
        h: &[Mat; 3],
    ) -> Option<Vec<f64>> {
        let cfg = self.model.config();
        let nb = neighbours(self.graph, t, node, r);
        if nb.is_empty() {
            return None;
        }
        let pre = format!("enc/L{l}/rel={}", r.name());
        let w_r = self.p(&format!("{pre}/W_r"));
        let nt = other(r, t);
        let dm = cfg.hidden / cfg.heads;
        let hi = &h[t.index()][node];
        let zi = vm(hi, &w_r);
        let zj: Vec<Vec<f64>> = nb.iter().map(|&(j, _)| vm(&h[nt.index()][j], &w_r)).collect();
        let mut cat = Vec::new();
        for m in 0..cfg.heads {
            let a = &self.p(&format!("{pre}/att_h{m}"))[0];
            let e: Vec<f64> = nb
                .iter()
                .zip(&zj)
                .map(|(&(_, w), z)| {
                    let s = dot(&a[..dm], &zi[m * dm..(m + 1) * dm]) + dot(&a[dm..], &z[m * dm..(m + 1) * dm]);
                    let s = if s > 0.0 { s } else { cfg.leaky_slope * s };
                    if cfg.edge_weight_bias {
                        s + (1.0 + w.max(0.0)).ln()
                    } else {
                        s
                    }
                })
                .collect();
            let alpha = softmax(&e);
            let mut msg = vec![0.0; dm];
            let mut agg = vec![0.0; cfg.hidden];
            for (k, &(j, _)) in nb.iter().enumerate() {
                let c = if cfg.interaction_weighted { alpha[k] } else { 1.0 };
                for q in 0..dm {
                    msg[q] += alpha[k] * zj[k][m * dm + q];
                }
                for q in 0..cfg.hidden {
                    agg[q] += c * h[nt.index()][j][q];
                }
            }
            let prod: Vec<f64> = hi.iter().zip(&agg).map(|(a, b)| a * b).collect();
            let inter = vm(&prod, &self.p(&format!("{pre}/W_h{m}")));
            cat.extend(relu(msg.iter().zip(&inter).map(|(a, b)| a + b).collect()));
        }
        Some(vm(&cat, &self.p(&format!("{pre}/W_a"))))
    }

    /// Attention weights of `node` over its neighbours for one head.
    pub fn alpha(&self, l: usize, t: NodeType, r: RelationType, node: usize, head: usize, h: &[Mat; 3]) -> Vec<f64> {
        let cfg = self.model.config();
        let nb = neighbours(self.graph, t, node, r);
        let pre = format!("enc/L{l}/rel={}", r.name());
        let w_r = self.p(&format!("{pre}/W_r"));
        let dm = cfg.hidden / cfg.heads;
        let zi = vm(&h[t.index()][node], &w_r);
        let a = &self.p(&format!("{pre}/att_h{head}"))[0];
        let e: Vec<f64> = nb
            .iter()
            .map(|&(j, _)| {
                let zj = vm(&h[other(r, t).index()][j], &w_r);
                let s = dot(&a[..dm], &zi[head * dm..(head + 1) * dm]) + dot(&a[dm..], &zj[head * dm..(head + 1) * dm]);
                if s > 0.0 {
                    s
                } else {
                    cfg.leaky_slope * s
                }
            })
            .collect();
        softmax(&e)
    }

    pub fn layer(&self, l: usize, h: &[Mat; 3]) -> [Mat; 3] {
        let cfg = self.model.config();
        let mut out = h.clone();
        for t in NodeType::ALL {
            let n = self.graph.count(t);
            let rels: Vec<RelationType> = RelationType::ALL.into_iter().filter(|r| r.touches(t)).collect();
            let emb: Vec<Vec<Option<Vec<f64>>>> = rels
                .iter()
                .map(|&r| (0..n).map(|i| self.relation_embedding(l, t, r, i, h)).collect())
                .collect();
            let pre = format!("enc/L{l}/relatt");
            let scores: Vec<f64> = emb
                .iter()
                .map(|per_node| {
                    if cfg.relation_fusion == RelationFusion::Mean {
                        return 0.0;
                    }
                    let (w_rel, q, b) = (
                        self.p(&format!("{pre}/W_R")),
                        self.p(&format!("{pre}/q")),
                        self.p(&format!("{pre}/b")),
                    );
                    let vals: Vec<f64> = per_node
                        .iter()
                        .flatten()
                        .map(|e| {
                            let proj = vm(e, &w_rel);
                            let act: Vec<f64> = proj.iter().zip(&b[0]).map(|(x, y)| (x + y).tanh()).collect();
                            act.iter().zip(&q).map(|(a, qr)| a * qr[0]).sum::<f64>()
                        })
                        .collect();
                    if vals.is_empty() {
                        0.0
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    }
                })
                .collect();
            for i in 0..n {
                let present: Vec<usize> = (0..rels.len()).filter(|&k| emb[k][i].is_some()).collect();
                if present.is_empty() {
                    continue;
                }
                let beta = softmax(&present.iter().map(|&k| scores[k]).collect::<Vec<_>>());
                let mut v = vec![0.0; cfg.hidden];
                for (b, &k) in beta.iter().zip(&present) {
                    for (o, x) in v.iter_mut().zip(emb[k][i].as_ref().unwrap()) {
                        *o += b * x;
                    }
                }
                out[t.index()][i] = v;
            }
        }
        out
    }

    pub fn encode(&self) -> [Mat; 3] {
        let mut h = self.inputs();
        for l in 0..self.model.config().layers {
            h = self.layer(l, &h);
        }
        h
    }

    fn ffn(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let add = |v: Vec<f64>, b: &Mat| v.iter().zip(&b[0]).map(|(a, c)| a + c).collect::<Vec<f64>>();
        let h = relu(add(
            vm(x, &self.p(&format!("{prefix}/W1"))),
            &self.p(&format!("{prefix}/b1")),
        ));
        add(
            vm(&h, &self.p(&format!("{prefix}/W2"))),
            &self.p(&format!("{prefix}/b2")),
        )
    }

    /// Set embedding of the rows `x`.
    pub fn encode_set(&self, x: &Mat) -> Vec<f64> {
        let cfg = self.model.config();
        let d = cfg.hidden;
        let dh = d / cfg.settf_heads;
        let q = mm(x, &self.p("settf/W_Q"));
        let k = mm(x, &self.p("settf/W_K"));
        let v = mm(x, &self.p("settf/W_V"));
        let skip = mm(x, &self.p("settf/W_M"));
        let n = x.len();
        let mut rows: Mat = Vec::new();
        for a in 0..n {
            let mut att = vec![0.0; d];
            for m in 0..cfg.settf_heads {
                let r = m * dh..(m + 1) * dh;
                let logits: Vec<f64> = (0..n)
                    .map(|b| dot(&q[a][r.clone()], &k[b][r.clone()]) / (d as f64).sqrt())
                    .collect();
                let w = softmax(&logits);
                for b in 0..n {
                    for c in r.clone() {
                        att[c] += w[b] * v[b][c];
                    }
                }
            }
            let pre: Vec<f64> = skip[a].iter().zip(&att).map(|(s, t)| s + t).collect();
            let y = self.ffn("settf/mab_ffn", &pre);
            rows.push(if cfg.set_pool_first {
                y
            } else {
                self.ffn("settf/out_ffn", &y)
            });
        }
        let mut pooled = vec![0.0; d];
        for c in 0..d {
            let col = rows.iter().map(|r| r[c]);
            pooled[c] = match cfg.pooling {
                Pooling::Mean => col.sum::<f64>() / n as f64,
                Pooling::Sum => col.sum(),
                Pooling::Max => col.fold(f64::NEG_INFINITY, f64::max),
            };
        }
        if cfg.set_pool_first {
            self.ffn("settf/out_ffn", &pooled)
        } else {
            pooled
        }
    }

    /// Final embeddings including the ingredient-set branch when enabled.
    pub fn forward(&self) -> [Mat; 3] {
        let mut h = self.encode();
        if self.model.config().use_set_transformer {
            let h0 = self.inputs();
            let ing = &h0[NodeType::Ingredient.index()];
            let w_o = self.p("settf/W_O");
            for r in 0..self.graph.count(NodeType::Recipe) {
                let set: Mat = neighbours(self.graph, NodeType::Recipe, r, RelationType::RecipeIngredient)
                    .into_iter()
                    .map(|(i, _)| ing[i].clone())
                    .collect();
                let hs = if set.is_empty() {
                    vec![0.0; self.model.config().hidden]
                } else {
                    self.encode_set(&set)
                };
                let sum: Vec<f64> = h[1][r].iter().zip(&hs).map(|(a, b)| a + b).collect();
                h[1][r] = vm(&sum, &w_o);
            }
        }
        h
    }
}
