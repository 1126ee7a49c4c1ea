//! Multi-mapping sequence-to-sequence conversation model with posterior
//! mapping selection.
//!
//! The crate is organized in layers: a dense-tensor reverse-mode
//! differentiation engine ([`graph`]), vocabulary and corpus handling
//! ([`vocab`], [`data`]), the model components (bidirectional GRU encoders,
//! the bank of mapping modules, Gumbel-Softmax posterior selection, and an
//! attention decoder), the training objectives and optimizer, and the
//! evaluation metrics and diagnostics ([`evalx`]).

pub mod data;
pub mod decoder;
pub mod error;
pub mod evalx;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod multimap;
pub mod objectives;
pub mod recurrent;
pub mod rng;
pub mod scalar;
pub mod selector;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use model::{ModelDims, ModelParams};
pub use scalar::{FloatWidth, Scalar};
pub use tensor::Tensor;
pub use trainer::TrainConfig;
pub use vocab::Vocab;
