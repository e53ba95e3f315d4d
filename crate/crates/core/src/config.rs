//! Training configuration.
//!
//! Every knob lives here and is serialised verbatim into run manifests.
//! Unknown keys are rejected so a typo cannot silently change an experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    InnerProduct,
    Cosine,
    Mlp,
}

impl PredictorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inner_product" => Ok(Self::InnerProduct),
            "cosine" => Ok(Self::Cosine),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!(
                "predictor: unknown kind `{other}` (inner_product | cosine | mlp)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Sum,
    Max,
}

/// How per-relation embeddings are fused into one node embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationFusion {
    /// Learned relation-level attention.
    Attention,
    /// Uniform average over the node's non-empty relations.
    Mean,
}

/// Which nodes the relation-score mean runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScope {
    /// Nodes with neighbours in the encoded (possibly augmented) view.
    View,
    /// Nodes with neighbours in the un-augmented graph.
    Graph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    InnerProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub tau: f64,
    pub lambda: f64,
    pub node_drop: f64,
    pub edge_drop: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub predictor: PredictorKind,
    /// Hidden width of the MLP score predictor.
    pub mlp_hidden: usize,
    pub leaky_slope: f64,
    pub pooling: Pooling,
    pub use_set_transformer: bool,
    pub settf_heads: usize,
    pub relation_fusion: RelationFusion,
    pub relation_score_scope: ScoreScope,
    /// Pool set-transformer rows before the output FFN (otherwise after).
    pub set_pool_first: bool,
    /// Scale the `W_h (h_i * h_j)` interaction term by the attention weight.
    pub interaction_weighted: bool,
    /// Add `ln(1 + w)` of the edge weight to attention logits.
    pub edge_weight_bias: bool,
    pub contrastive_sim: Similarity,
    /// Compute the ranking loss on the first augmented view instead of the clean graph.
    pub rec_on_views: bool,
    /// Width of the trainable user input vectors when no user feature file exists.
    pub user_dim: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every N epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Evaluate every N epochs into the metric trace (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            heads: 4,
            hidden: 128,
            layers: 2,
            tau: 0.07,
            lambda: 0.1,
            node_drop: 0.1,
            edge_drop: 0.1,
            batch_size: 1024,
            epochs: 100,
            predictor: PredictorKind::InnerProduct,
            mlp_hidden: 128,
            leaky_slope: 0.2,
            pooling: Pooling::Mean,
            use_set_transformer: true,
            settf_heads: 4,
            relation_fusion: RelationFusion::Attention,
            relation_score_scope: ScoreScope::View,
            set_pool_first: true,
            interaction_weighted: true,
            edge_weight_bias: false,
            contrastive_sim: Similarity::Cosine,
            rec_on_views: false,
            user_dim: 128,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// All schema violations, each prefixed with its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        need(self.lr >= 0.0 && self.lr.is_finite(), "lr: must be a finite value >= 0");
        need(self.heads >= 1, "heads: must be >= 1");
        need(self.hidden >= 1, "hidden: must be >= 1");
        need(
            self.heads == 0 || self.hidden % self.heads == 0,
            "heads: must divide hidden",
        );
        need(self.layers >= 1, "layers: must be >= 1");
        need(self.tau > 0.0, "tau: must be > 0");
        need(self.lambda >= 0.0, "lambda: must be >= 0");
        need((0.0..1.0).contains(&self.node_drop), "node_drop: must be in [0, 1)");
        need((0.0..1.0).contains(&self.edge_drop), "edge_drop: must be in [0, 1)");
        need(self.batch_size >= 1, "batch_size: must be >= 1");
        need(self.mlp_hidden >= 1, "mlp_hidden: must be >= 1");
        need(self.leaky_slope.is_finite(), "leaky_slope: must be finite");
        need(self.settf_heads >= 1, "settf_heads: must be >= 1");
        need(
            self.settf_heads == 0 || self.hidden % self.settf_heads == 0,
            "settf_heads: must divide hidden",
        );
        need(self.user_dim >= 1, "user_dim: must be >= 1");
        need((0.0..1.0).contains(&self.adam_beta1), "adam_beta1: must be in [0, 1)");
        need((0.0..1.0).contains(&self.adam_beta2), "adam_beta2: must be in [0, 1)");
        need(self.adam_eps > 0.0, "adam_eps: must be > 0");
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 0.005);
        assert_eq!(c.heads, 4);
        assert_eq!(c.hidden, 128);
        assert_eq!(c.tau, 0.07);
        assert_eq!(c.lambda, 0.1);
        assert_eq!((c.node_drop, c.edge_drop), (0.1, 0.1));
        assert_eq!(c.batch_size, 1024);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.predictor, PredictorKind::InnerProduct);
        assert_eq!(c.leaky_slope, 0.2);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = TrainConfig::from_json(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn violations_name_fields() {
        let err = TrainConfig::from_json(r#"{"tau": 0.0, "heads": 3}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("tau:") && err.contains("heads:"), "{err}");
    }

    #[test]
    fn partial_json_fills_defaults_and_round_trips() {
        let c = TrainConfig::from_json(r#"{"epochs": 3, "predictor": "cosine"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.hidden, 128);
        let again = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
    }
}
