//! A dependency-graph recurrent encoder, a multi-hop knowledge-graph
//! reasoner and a sketch/copy decoder for task-oriented dialogue, trained with a
//! small tape-based reverse-mode differentiation core.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod dialogue_graph;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
