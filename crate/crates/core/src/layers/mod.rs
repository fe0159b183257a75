//! The three layer species: selective SSM (Mamba), sliding-window attention,
//! and SwiGLU MLP. Each has a full-sequence tape forward, a tensor-level
//! convenience forward, and a single-token streaming step.

pub(crate) mod attention;
mod mamba;
mod mlp;
pub(crate) mod rope;
mod swa;

use rand::Rng;

use crate::numerics::Tensor;

pub use attention::{AttnGeometry, KvCache, KvPrefix};
pub use mamba::{mamba_forward, mamba_on_tape, mamba_step, MambaDims, MambaParams, MambaState, MambaVars, DELTA_MAX, DELTA_MIN};
pub use mlp::{mlp_forward, mlp_on_tape, mlp_step, MlpParams, MlpVars};
pub use rope::rope_apply;
pub use swa::{swa_forward, swa_on_tape, swa_step, SwaParams, SwaVars};


/// Uniform in `±scale·√(1/fan_in)`.
pub(crate) fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, scale: f64) -> Tensor {
    let bound = scale * (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
