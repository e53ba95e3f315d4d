//! Score predictors, the ranking and contrastive losses, and Adam.

use rand::Rng;

use crate::config::{PredictorKind, Similarity, TrainConfig};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::settf::Ffn;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Predictor {
    kind: PredictorKind,
    mlp: Option<Ffn>,
}

impl Predictor {
    /// The MLP variant registers `pred/mlp/*` as `concat(h_u, h_r) -> hidden -> ReLU -> 1`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: PredictorKind,
        dim: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = match kind {
            PredictorKind::Mlp => Some(Ffn::init(store, "pred/mlp", [2 * dim, mlp_hidden, 1], rng)?),
            _ => None,
        };
        Ok(Self { kind, mlp })
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    /// Row-wise scores of aligned `B x d` user and recipe embeddings, as `B x 1`.
    pub fn score(&self, tape: &mut Tape, pv: &ParamVars, users: Var, recipes: Var) -> Result<Var> {
        match self.kind {
            PredictorKind::InnerProduct => tape.row_dot(users, recipes),
            PredictorKind::Cosine => {
                let u = tape.row_normalize(users)?;
                let r = tape.row_normalize(recipes)?;
                tape.row_dot(u, r)
            }
            PredictorKind::Mlp => {
                let mlp = self.mlp.as_ref().expect("mlp predictor has weights");
                let x = tape.concat_cols(&[users, recipes])?;
                mlp.forward(tape, pv, x)
            }
        }
    }
}

/// Parameter-free score of two vectors. Cosine with a zero vector is 0.
pub fn score_vectors(kind: PredictorKind, u: &[f64], r: &[f64]) -> Result<f64> {
    if u.len() != r.len() {
        return Err(Error::shape("score", &[u.len()], &[r.len()]));
    }
    let dot: f64 = u.iter().zip(r).map(|(a, b)| a * b).sum();
    match kind {
        PredictorKind::InnerProduct => Ok(dot),
        PredictorKind::Cosine => {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 || nr == 0.0 {
                log::debug!("cosine score with a zero vector guarded to 0");
                Ok(0.0)
            } else {
                Ok(dot / (nu * nr))
            }
        }
        PredictorKind::Mlp => Err(Error::contract("the mlp predictor needs its parameters")),
    }
}

/// Pairwise hinge `sum max(0, 1 - s_pos + s_neg)` over aligned `B x 1` scores.
pub fn rec_loss(tape: &mut Tape, s_pos: Var, s_neg: Var) -> Result<Var> {
    let gap = tape.sub(s_neg, s_pos)?;
    let margin = tape.add_scalar(gap, 1.0);
    let hinge = tape.relu(margin);
    Ok(tape.sum(hinge))
}

/// InfoNCE between two views of the same `B` nodes (row `i` of each is node `i`).
/// The denominator runs over every node of the batch, the positive included.
pub fn contrastive_loss(tape: &mut Tape, h1: Var, h2: Var, tau: f64, sim: Similarity) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be > 0, got {tau}")));
    }
    if tape.shape(h1) != tape.shape(h2) {
        return Err(Error::shape("contrastive_loss", tape.shape(h1), tape.shape(h2)));
    }
    let b = tape.shape(h1)[0];
    if b == 0 {
        return Err(Error::contract("contrastive batch is empty"));
    }
    if b == 1 {
        log::debug!("contrastive batch with a single node: term is 0");
    }
    let (a, c) = match sim {
        Similarity::Cosine => (tape.row_normalize(h1)?, tape.row_normalize(h2)?),
        Similarity::InnerProduct => (h1, h2),
    };
    let ct = tape.transpose(c)?;
    let s = tape.matmul(a, ct)?;
    let s = tape.scale(s, 1.0 / tau);
    let logp = tape.log_softmax(s)?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = tape.pick_per_row(logp, &diag)?;
    let total = tape.sum(pos);
    Ok(tape.scale(total, -1.0))
}

/// `rec + lambda * con`.
pub fn joint_loss(tape: &mut Tape, rec: Var, con: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda}")));
    }
    match con {
        Some(c) if lambda > 0.0 => {
            let w = tape.scale(c, lambda);
            tape.add(rec, w)
        }
        _ => Ok(rec),
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: &TrainConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr: config.lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `grads` is in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract("gradient list does not match the parameter store"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[k].data();
            let p = store.value_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors named `adam/m/<param>` and `adam/v/<param>`.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (k, (name, _)) in store.iter().enumerate() {
            out.push((format!("adam/m/{name}"), self.m[k].clone()));
            out.push((format!("adam/v/{name}"), self.v[k].clone()));
        }
        out
    }

    pub fn restore(&mut self, store: &ParamStore, steps: u64, find: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (k, (name, t)) in store.iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("adam/{kind}/{name}");
                let value = find(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if value.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("`{key}` has the wrong shape")));
                }
                *slot = value;
            }
        }
        self.t = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(vec![2.0, 0.2]));
        let n = tape.constant(Tensor::column(vec![0.5, 0.5]));
        let l = rec_loss(&mut tape, p, n).unwrap();
        assert!((tape.value(l).item() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn vector_scores() {
        assert_eq!(
            score_vectors(PredictorKind::InnerProduct, &[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            11.0
        );
        let v = [0.3, -2.0, 5.0];
        assert!((score_vectors(PredictorKind::Cosine, &v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score_vectors(PredictorKind::Cosine, &[0.0; 3], &v).unwrap(), 0.0);
        assert!(score_vectors(PredictorKind::InnerProduct, &[1.0], &v).is_err());
    }

    #[test]
    fn zero_lambda_is_rec_exactly() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::scalar(0.75));
        let c = tape.constant(Tensor::scalar(9.0));
        let l = joint_loss(&mut tape, r, Some(c), 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.75);
        let l = joint_loss(&mut tape, r, Some(c), 0.1).unwrap();
        assert!((tape.value(l).item() - 1.65).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_first_step_is_noop() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap())
            .unwrap();
        let before = store.clone();
        let mut adam = Adam::new(&TrainConfig::default(), &store);
        adam.step(&mut store, &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(store, before);
    }
}
