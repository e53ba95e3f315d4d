pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod run;
pub mod selfcheck;
pub mod settf;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use graph::{HeteroGraph, NodeType, RelationType};
pub use model::RecipeRec;
pub use tensor::{Activation, Tape, Tensor, Var};
