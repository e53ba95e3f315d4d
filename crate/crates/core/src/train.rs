//! Epoch loop, checkpoints and resume.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::augment::{augment, GraphView};
use crate::graph::split::{sample_training_negative, InteractionSplit};
use crate::graph::HeteroGraph;
use crate::model::RecipeRec;
use crate::objectives::{contrastive_loss, joint_loss, rec_loss, Adam};
use crate::params::{Checkpoint, ParamVars};
use crate::rng::{derive_seed, stream, Stream};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub rec: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: Vec<BatchLoss>,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Training state over a fixed training graph and split.
pub struct Trainer<'g> {
    graph: &'g HeteroGraph,
    split: &'g InteractionSplit,
    model: RecipeRec,
    adam: Adam,
    epoch: usize,
}

impl<'g> Trainer<'g> {
    /// `graph` must already exclude the test interactions.
    pub fn new(graph: &'g HeteroGraph, split: &'g InteractionSplit, config: &TrainConfig) -> Result<Self> {
        let model = RecipeRec::new(graph, config)?;
        let adam = Adam::new(config, model.store());
        Ok(Self {
            graph,
            split,
            model,
            adam,
            epoch: 0,
        })
    }

    /// Restores parameters, optimizer moments and the epoch counter.
    pub fn resume(
        graph: &'g HeteroGraph,
        split: &'g InteractionSplit,
        config: &TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(graph, split, config)?;
        let meta = CheckpointMeta::of(ckpt)?;
        if ckpt.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.seed, config.seed
            )));
        }
        t.model.load_params(&ckpt.with_prefix("param/"))?;
        t.adam
            .restore(t.model.store(), meta.adam_steps, |k| ckpt.get(k).cloned())?;
        t.epoch = meta.epoch;
        Ok(t)
    }

    pub fn model(&self) -> &RecipeRec {
        &self.model
    }

    pub fn into_model(self) -> RecipeRec {
        self.model
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = self.model.store();
        let mut tensors: Vec<_> = store.iter().map(|(n, t)| (format!("param/{n}"), t.clone())).collect();
        tensors.extend(self.adam.state(store));
        let meta = CheckpointMeta {
            epoch: self.epoch,
            adam_steps: self.adam.steps(),
            config: self.model.config().clone(),
        };
        Checkpoint {
            seed: self.model.config().seed,
            meta: serde_json::to_value(meta).expect("meta serialises"),
            tensors,
        }
    }

    /// One pass over the training interactions.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let cfg = self.model.config().clone();
        let e = self.epoch as u64;
        let root = cfg.seed;

        let views = if cfg.lambda > 0.0 || cfg.rec_on_views {
            let a = augment(
                self.graph,
                cfg.node_drop,
                cfg.edge_drop,
                derive_seed(root, Stream::Augment, 2 * e),
            )?;
            let b = augment(
                self.graph,
                cfg.node_drop,
                cfg.edge_drop,
                derive_seed(root, Stream::Augment, 2 * e + 1),
            )?;
            Some((a, b))
        } else {
            None
        };

        let mut neg_rng = stream(root, Stream::Negatives, e);
        let mut triplets = Vec::with_capacity(self.split.train.len());
        for &(u, p) in &self.split.train {
            triplets.push((u, p, sample_training_negative(self.split, u, &mut neg_rng)?));
        }
        triplets.shuffle(&mut stream(root, Stream::Batches, e));

        let clean = self.graph.full_view();
        let mut batches = Vec::new();
        for batch in triplets.chunks(cfg.batch_size) {
            let loss = self.step(batch, &clean, views.as_ref())?;
            batches.push(loss);
        }
        self.epoch += 1;
        let mean_loss = if batches.is_empty() {
            0.0
        } else {
            batches.iter().map(|b| b.total).sum::<f64>() / batches.len() as f64
        };
        Ok(EpochStats {
            epoch: self.epoch,
            batches,
            mean_loss,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn step(
        &mut self,
        batch: &[(usize, usize, usize)],
        clean: &GraphView<'_>,
        views: Option<&(GraphView<'_>, GraphView<'_>)>,
    ) -> Result<BatchLoss> {
        let mut tape = Tape::new();
        let pv = self.model.store().bind(&mut tape);
        let obj = joint_objective(&self.model, &mut tape, &pv, batch, clean, views)?;
        let (rec, con, total) = (obj.rec, obj.con, obj.total);
        let loss = BatchLoss {
            rec: tape.value(rec).item(),
            con: con.map_or(0.0, |c| tape.value(c).item()),
            total: tape.value(total).item(),
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at epoch {}; parameter norms: {}",
                loss.total,
                self.epoch,
                self.param_norms()
            )));
        }
        tape.backward(total)?;
        let grads = pv.grads(&tape);
        self.adam.step(self.model.store_mut(), &grads)?;
        Ok(loss)
    }

    fn param_norms(&self) -> String {
        self.model
            .store()
            .iter()
            .map(|(n, t)| format!("{n}={:.4e}", t.norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Loss terms of one batch, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub rec: Var,
    pub con: Option<Var>,
    pub total: Var,
}

/// The training objective for `batch` of `(user, positive, negative)` triplets:
/// hinge ranking loss on the clean graph (or the first view when
/// `rec_on_views`), plus `lambda` times InfoNCE between the two views over the
/// batch's users and positive recipes.
pub fn joint_objective(
    model: &RecipeRec,
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &[(usize, usize, usize)],
    clean: &GraphView<'_>,
    views: Option<&(GraphView<'_>, GraphView<'_>)>,
) -> Result<Objective> {
    let cfg = model.config();
    let rec_view = match (cfg.rec_on_views, views) {
        (true, Some((a, _))) => a,
        _ => clean,
    };
    let f = model.forward(tape, pv, rec_view)?;
    let (users, recipes) = (f.emb[0], f.emb[1]);
    let us: Vec<usize> = batch.iter().map(|t| t.0).collect();
    let ps: Vec<usize> = batch.iter().map(|t| t.1).collect();
    let ns: Vec<usize> = batch.iter().map(|t| t.2).collect();
    let hu = tape.gather_rows(users, us)?;
    let hp = tape.gather_rows(recipes, ps)?;
    let hn = tape.gather_rows(recipes, ns)?;
    let sp = model.predictor().score(tape, pv, hu, hp)?;
    let sn = model.predictor().score(tape, pv, hu, hn)?;
    let rec = rec_loss(tape, sp, sn)?;

    let con = match views {
        Some((a, b)) if cfg.lambda > 0.0 => {
            let fa = model.forward(tape, pv, a)?;
            let fb = model.forward(tape, pv, b)?;
            let user_ids: BTreeSet<usize> = batch.iter().map(|t| t.0).collect();
            let recipe_ids: BTreeSet<usize> = batch.iter().map(|t| t.1).collect();
            let mut terms: Vec<Var> = Vec::new();
            for (k, ids) in [(0, user_ids), (1, recipe_ids)] {
                let ids: Vec<usize> = ids.into_iter().collect();
                let h1 = tape.gather_rows(fa.emb[k], ids.clone())?;
                let h2 = tape.gather_rows(fb.emb[k], ids)?;
                terms.push(contrastive_loss(tape, h1, h2, cfg.tau, cfg.contrastive_sim)?);
            }
            Some(tape.add(terms[0], terms[1])?)
        }
        _ => None,
    };
    let total = joint_loss(tape, rec, con, cfg.lambda)?;
    Ok(Objective { rec, con, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub adam_steps: u64,
    pub config: TrainConfig,
}

impl CheckpointMeta {
    pub fn of(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))
    }
}
