use rand::Rng;

use crate::error::Result;
use crate::layers::init_uniform;
use crate::numerics::ops::{silu_scalar, vecmat};
use crate::numerics::{Tape, Tensor, Var};

/// SwiGLU: `(SiLU(X·W_gate) ⊙ (X·W_up))·W_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl MlpParams {
    pub fn init(rng: &mut impl Rng, d_model: usize, d_hidden: usize, out_scale: f64) -> Self {
        MlpParams {
            w_gate: init_uniform(rng, &[d_model, d_hidden], d_model, 1.0),
            w_up: init_uniform(rng, &[d_model, d_hidden], d_model, 1.0),
            w_down: init_uniform(rng, &[d_hidden, d_model], d_hidden, out_scale),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 3] {
        [("w_gate", &self.w_gate), ("w_up", &self.w_up), ("w_down", &self.w_down)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w_gate: tape.param(&self.w_gate),
            w_up: tape.param(&self.w_up),
            w_down: tape.param(&self.w_down),
        }
    }

    pub fn d_hidden(&self) -> usize {
        self.w_up.shape()[1]
    }
}

impl MlpVars {
    pub fn all(&self) -> [Var; 3] {
        [self.w_gate, self.w_up, self.w_down]
    }
}

pub fn mlp_on_tape(tape: &mut Tape, x: Var, p: &MlpVars) -> Result<Var> {
    let gate = tape.matmul(x, p.w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(x, p.w_up)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, p.w_down)
}

pub fn mlp_forward(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape);
    let out = mlp_on_tape(&mut tape, xv, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn mlp_step(x: &[f64], p: &MlpParams) -> Vec<f64> {
    let dp = p.d_hidden();
    let dm = x.len();
    let mut gate = vec![0.0; dp];
    let mut up = vec![0.0; dp];
    vecmat(x, p.w_gate.data(), dp, &mut gate);
    vecmat(x, p.w_up.data(), dp, &mut up);
    for (g, u) in gate.iter_mut().zip(&up) {
        *g = silu_scalar(*g) * u;
    }
    let mut out = vec![0.0; dm];
    vecmat(&gate, p.w_down.data(), dm, &mut out);
    out
}
