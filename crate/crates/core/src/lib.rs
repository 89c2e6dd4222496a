//! Language-guided temporal moment retrieval.
//!
//! Given clip features for a video and a sentence query, the model scores
//! every `(start, end)` cell of a 2D proposal map and retrieves the best
//! matching moment. The sentence conditions the network twice: early, by
//! elementwise modulation of the per-cell visual layers, and late, as
//! channel attention on the localizer's feature maps.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod moment;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
