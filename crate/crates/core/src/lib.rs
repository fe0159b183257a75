#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::large_enum_variant,
    clippy::type_complexity
)]

pub mod error;
pub mod evalsuite;
pub mod inference;
pub mod kv;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scan;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use model::{layer_pattern, ArchitecturePattern, LayerKind, Model, ModelConfig};
