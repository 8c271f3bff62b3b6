//! Minimal differentiable network toolkit: a dense matrix type, a tape-based
//! reverse-mode autodiff graph, parameters with Adam, and the layers shared by
//! the encoders and decoders.

pub mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod params;

pub use graph::{sigmoid, Gradients, Graph, Segments, StatUpdate, Var};
pub use layers::{apply_stat_updates, CbnLayer, CbnResBlock, Linear, Mode, ResBlock};
pub use matrix::Matrix;
pub use params::{
    load_checkpoint, read_checkpoint_metadata, save_checkpoint, AdamConfig, ParamId, ParamStore,
};
