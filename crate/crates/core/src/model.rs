//! The full recommender: graph encoder, ingredient-set branch and score predictor.

use crate::config::{PredictorKind, TrainConfig};
use crate::encoder::{EncoderOutput, EncoderSpec, HeteroEncoder};
use crate::error::{Error, Result};
use crate::graph::{GraphView, HeteroGraph, NodeType, RelationType, Slot};
use crate::objectives::{score_vectors, Predictor};
use crate::params::{ParamStore, ParamVars};
use crate::rng::{stream, Stream};
use crate::settf::{SetSpec, SetTransformer};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Forward {
    /// Final embeddings indexed by [`NodeType::index`]; recipes include the set branch.
    pub emb: [Var; 3],
    pub encoder: EncoderOutput,
    pub set: Option<Var>,
}

/// Detached final embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub user: Tensor,
    pub recipe: Tensor,
    pub ingredient: Tensor,
}

impl Embeddings {
    pub fn of(&self, t: NodeType) -> &Tensor {
        match t {
            NodeType::User => &self.user,
            NodeType::Recipe => &self.recipe,
            NodeType::Ingredient => &self.ingredient,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecipeRec {
    config: TrainConfig,
    store: ParamStore,
    encoder: HeteroEncoder,
    settf: Option<SetTransformer>,
    predictor: Predictor,
}

impl RecipeRec {
    /// Fresh parameters drawn from the `init` stream of `config.seed`.
    pub fn new(graph: &HeteroGraph, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let encoder = HeteroEncoder::init(&mut store, graph, EncoderSpec::from(config), &mut rng)?;
        let settf = if config.use_set_transformer {
            Some(SetTransformer::init(&mut store, &SetSpec::from(config), &mut rng)?)
        } else {
            None
        };
        let predictor = Predictor::init(&mut store, config.predictor, config.hidden, config.mlp_hidden, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            settf,
            predictor,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &HeteroEncoder {
        &self.encoder
    }

    pub fn set_transformer(&self) -> Option<&SetTransformer> {
        self.settf.as_ref()
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    /// Replaces every parameter with the matching tensor from `named`.
    /// Missing names and shape mismatches are errors.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let have: std::collections::HashSet<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((missing, _)) = self.store.iter().find(|(n, _)| !have.contains(n)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{missing}`")));
        }
        self.store.load_from(named)
    }

    /// Full forward over `view`.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, view: &GraphView<'_>) -> Result<Forward> {
        let enc = self.encoder.encode(tape, pv, view)?;
        let mut emb = enc.output;
        let mut set = None;
        if let Some(st) = &self.settf {
            let sets = view
                .adjacency()
                .slot(Slot::new(NodeType::Recipe, RelationType::RecipeIngredient));
            let h_set = st.encode_recipes(tape, pv, enc.input[NodeType::Ingredient.index()], sets)?;
            let r = NodeType::Recipe.index();
            emb[r] = st.fuse(tape, pv, emb[r], h_set)?;
            set = Some(h_set);
        }
        Ok(Forward { emb, encoder: enc, set })
    }

    /// Final embeddings of `view`, detached from any tape.
    pub fn embeddings(&self, view: &GraphView<'_>) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let pv = self.store.bind(&mut tape);
        let f = self.forward(&mut tape, &pv, view)?;
        Ok(Embeddings {
            user: tape.value(f.emb[0]).clone(),
            recipe: tape.value(f.emb[1]).clone(),
            ingredient: tape.value(f.emb[2]).clone(),
        })
    }

    /// Scores for `(user, recipe)` pairs from detached embeddings.
    pub fn score_pairs(&self, emb: &Embeddings, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let (nu, nr) = (emb.user.rows(), emb.recipe.rows());
        if let Some(&(u, r)) = pairs.iter().find(|&&(u, r)| u >= nu || r >= nr) {
            return Err(Error::contract(format!("no embedding for pair ({u}, {r})")));
        }
        let kind = self.predictor.kind();
        if kind != PredictorKind::Mlp {
            return pairs
                .iter()
                .map(|&(u, r)| score_vectors(kind, emb.user.row(u), emb.recipe.row(r)))
                .collect();
        }
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(4096) {
            let mut tape = Tape::new();
            let pv = self.store.bind(&mut tape);
            let us: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let rs: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let hu = tape.constant(emb.user.select_rows(&us));
            let hr = tape.constant(emb.recipe.select_rows(&rs));
            let s = self.predictor.score(&mut tape, &pv, hu, hr)?;
            out.extend_from_slice(tape.value(s).data());
        }
        Ok(out)
    }
}
