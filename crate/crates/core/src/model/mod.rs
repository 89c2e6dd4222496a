//! The language-guided network and its parameter store.

mod check;
mod config;
pub mod layers;
mod lgn;
mod params;
mod retrieval;

pub use check::{grad_check_config, model_grad_check};
pub use config::{LateNorm, ModelConfig, Variant};
pub use lgn::{param_shapes, ForwardTrace, LgnModel, ModelInput, EARLY_B, EARLY_W, EMBEDDING, LATE_B, LATE_W};
pub use params::{BoundParams, ParamStore, Parameter};
pub use retrieval::{rank_proposals, ranked_cells, retrieve};
