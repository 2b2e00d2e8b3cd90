//! Core library for the uglad learning-path recommender: a small f64
//! autodiff engine, data ingestion and synthesis, learner simulators, the
//! uncertainty-aware encoder / diffusion decoder model, training, and the
//! evaluation bench.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Param, ParamSet, Tensor};
