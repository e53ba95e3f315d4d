//! Set transformer over each recipe's ingredient set.
//!
//! Two routes compute the same function: [`SetTransformer::encode_set`] runs
//! dense attention on one set, and [`SetTransformer::encode_recipes`] runs all
//! recipes at once over the flattened (member, member) pairs.

use std::sync::Arc;

use rand::Rng;

use crate::config::{Pooling, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::params::{xavier_uniform, ParamId, ParamStore, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// Two-layer ReLU feed-forward block with biases.
#[derive(Clone, Debug)]
pub struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: store.insert(format!("{prefix}/W1"), xavier_uniform(rng, dims[0], dims[1]))?,
            b1: store.insert(format!("{prefix}/b1"), Tensor::zeros(&[1, dims[1]]))?,
            w2: store.insert(format!("{prefix}/W2"), xavier_uniform(rng, dims[1], dims[2]))?,
            b2: store.insert(format!("{prefix}/b2"), Tensor::zeros(&[1, dims[2]]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, pv.var(self.w1))?;
        let h = tape.add_row(h, pv.var(self.b1))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, pv.var(self.w2))?;
        tape.add_row(o, pv.var(self.b2))
    }
}

/// Scaled dot-product attention `softmax(Q K^T / scale) V`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    if tape.shape(q).last() != tape.shape(k).last() {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let a = tape.softmax_scaled(logits, scale)?;
    tape.matmul(a, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetSpec {
    pub dim: usize,
    pub heads: usize,
    pub pooling: Pooling,
    /// Pool before the output FFN; otherwise the FFN runs per row first.
    pub pool_first: bool,
}

impl From<&TrainConfig> for SetSpec {
    fn from(c: &TrainConfig) -> Self {
        Self {
            dim: c.hidden,
            heads: c.settf_heads,
            pooling: c.pooling,
            pool_first: c.set_pool_first,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SetTransformer {
    heads: usize,
    d_in: usize,
    d_out: usize,
    pooling: Pooling,
    pool_first: bool,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_m: ParamId,
    mab_ffn: Ffn,
    out_ffn: Ffn,
    w_o: ParamId,
}

impl SetTransformer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, spec: &SetSpec, rng: &mut R) -> Result<Self> {
        let (d, heads) = (spec.dim, spec.heads);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("settf_heads: {heads} does not divide {d}")));
        }
        let mut mat = |name: &str, r, c, rng: &mut R| store.insert(format!("settf/{name}"), xavier_uniform(rng, r, c));
        let w_q = mat("W_Q", d, d, rng)?;
        let w_k = mat("W_K", d, d, rng)?;
        let w_v = mat("W_V", d, d, rng)?;
        let w_m = mat("W_M", d, d, rng)?;
        let w_o = mat("W_O", d, d, rng)?;
        let mab_ffn = Ffn::init(store, "settf/mab_ffn", [d, d, d], rng)?;
        let out_ffn = Ffn::init(store, "settf/out_ffn", [d, d, d], rng)?;
        Ok(Self {
            heads,
            d_in: d,
            d_out: d,
            pooling: spec.pooling,
            pool_first: spec.pool_first,
            w_q,
            w_k,
            w_v,
            w_m,
            mab_ffn,
            out_ffn,
            w_o,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn scale(&self) -> f64 {
        (self.d_in as f64).sqrt()
    }

    /// Multi-head self-attention block on one set: `FFN(X W_M + MHA(X, X))`.
    pub fn sab(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let q = tape.matmul(x, pv.var(self.w_q))?;
        let k = tape.matmul(x, pv.var(self.w_k))?;
        let v = tape.matmul(x, pv.var(self.w_v))?;
        let dh = self.d_out / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qh = tape.slice_cols(q, m * dh, dh)?;
            let kh = tape.slice_cols(k, m * dh, dh)?;
            let vh = tape.slice_cols(v, m * dh, dh)?;
            heads.push(attention(tape, qh, kh, vh, self.scale())?);
        }
        let att = tape.concat_cols(&heads)?;
        let skip = tape.matmul(x, pv.var(self.w_m))?;
        let pre = tape.add(skip, att)?;
        self.mab_ffn.forward(tape, pv, pre)
    }

    /// Embedding of one non-empty set `x` (`n x d`) as a `1 x d` row.
    pub fn encode_set(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        if n == 0 {
            return Err(Error::contract("cannot encode an empty ingredient set"));
        }
        let mut y = self.sab(tape, pv, x)?;
        if !self.pool_first {
            y = self.out_ffn.forward(tape, pv, y)?;
        }
        let pooled = match self.pooling {
            Pooling::Mean => tape.mean_rows(y)?,
            Pooling::Sum => tape.segment_sum(y, vec![0; n], 1)?,
            Pooling::Max => tape.segment_max(y, &vec![0; n], 1)?,
        };
        if self.pool_first {
            self.out_ffn.forward(tape, pv, pooled)
        } else {
            Ok(pooled)
        }
    }

    /// Set embeddings for every recipe in `sets` (a recipe -> ingredient CSR)
    /// from ingredient embeddings `x`. Recipes without ingredients get zero rows.
    pub fn encode_recipes(&self, tape: &mut Tape, pv: &ParamVars, x: Var, sets: &Csr) -> Result<Var> {
        let n_sets = sets.nodes();
        let members: Arc<[usize]> = sets.src.clone();
        let owner: Arc<[usize]> = sets.dst.clone();
        let s = members.len();
        let mut counts = vec![0usize; n_sets];
        owner.iter().for_each(|&r| counts[r] += 1);
        if s == 0 {
            return Ok(tape.constant(Tensor::zeros(&[n_sets, self.d_out])));
        }
        // Every ordered (query, key) pair of entries inside the same set.
        let mut start = 0;
        let (mut pq, mut pk) = (Vec::new(), Vec::new());
        for &c in &counts {
            for a in start..start + c {
                for b in start..start + c {
                    pq.push(a);
                    pk.push(b);
                }
            }
            start += c;
        }
        let pq: Arc<[usize]> = pq.into();
        let key_member: Arc<[usize]> = pk.iter().map(|&b| members[b]).collect();
        let query_member: Arc<[usize]> = pq.iter().map(|&a| members[a]).collect();

        let q = tape.matmul(x, pv.var(self.w_q))?;
        let k = tape.matmul(x, pv.var(self.w_k))?;
        let v = tape.matmul(x, pv.var(self.w_v))?;
        let dh = self.d_out / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qh = tape.slice_cols(q, m * dh, dh)?;
            let kh = tape.slice_cols(k, m * dh, dh)?;
            let vh = tape.slice_cols(v, m * dh, dh)?;
            let qa = tape.gather_rows(qh, query_member.clone())?;
            let kb = tape.gather_rows(kh, key_member.clone())?;
            let logits = tape.row_dot(qa, kb)?;
            let logits = tape.scale(logits, 1.0 / self.scale());
            let alpha = tape.segment_softmax(logits, pq.clone(), s)?;
            heads.push(tape.edge_weighted_sum(vh, alpha, key_member.clone(), pq.clone(), s)?);
        }
        let att = tape.concat_cols(&heads)?;
        let xm = tape.gather_rows(x, members.clone())?;
        let skip = tape.matmul(xm, pv.var(self.w_m))?;
        let pre = tape.add(skip, att)?;
        let mut y = self.mab_ffn.forward(tape, pv, pre)?;
        if !self.pool_first {
            y = self.out_ffn.forward(tape, pv, y)?;
        }
        let pooled = match self.pooling {
            Pooling::Sum => tape.segment_sum(y, owner.clone(), n_sets)?,
            Pooling::Max => tape.segment_max(y, &owner, n_sets)?,
            Pooling::Mean => {
                let sum = tape.segment_sum(y, owner.clone(), n_sets)?;
                let inv = counts
                    .iter()
                    .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
                    .collect();
                let inv = tape.constant(Tensor::column(inv));
                tape.mul_col(sum, inv)?
            }
        };
        let out = if self.pool_first {
            self.out_ffn.forward(tape, pv, pooled)?
        } else {
            pooled
        };
        let present = counts.iter().map(|&c| (c > 0) as u8 as f64).collect();
        let present = tape.constant(Tensor::column(present));
        tape.mul_col(out, present)
    }

    /// Final recipe embedding `(h_graph + h_set) W_O`.
    pub fn fuse(&self, tape: &mut Tape, pv: &ParamVars, h_graph: Var, h_set: Var) -> Result<Var> {
        let s = tape.add(h_graph, h_set)?;
        tape.matmul(s, pv.var(self.w_o))
    }
}
