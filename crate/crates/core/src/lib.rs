//! Weakly-recurrent sequence-to-sequence models: layer-normalized gated
//! scans, per-layer MLP attention, highway connections, an LSTM baseline,
//! and the training, decoding and persistence machinery around them.

pub mod autodiff;
pub mod error;
pub mod tensor;

pub use autodiff::{Direction, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub mod gradcheck;
pub mod params;
pub mod units;
#[cfg(any(test, feature = "oracles"))]
pub mod reference;
pub mod data;
pub mod model;
pub mod checkpoint;
pub mod training;
pub mod inference;
pub mod bench;
pub mod ablation;
