use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::attention::{attend_row, attention_on_tape, AttnGeometry, KvCache, KvPrefix};
use crate::layers::rope::{inv_freqs, rope_on_tape, rotate_row};
use crate::layers::init_uniform;
use crate::numerics::ops::vecmat;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SwaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub geom: AttnGeometry,
}

#[derive(Clone, Copy, Debug)]
pub struct SwaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl SwaParams {
    pub fn init(rng: &mut impl Rng, d_model: usize, geom: AttnGeometry, out_scale: f64) -> Self {
        let (qw, kw) = (geom.q_width(), geom.kv_width());
        SwaParams {
            w_q: init_uniform(rng, &[d_model, qw], d_model, 1.0),
            w_k: init_uniform(rng, &[d_model, kw], d_model, 1.0),
            w_v: init_uniform(rng, &[d_model, kw], d_model, 1.0),
            w_o: init_uniform(rng, &[qw, d_model], qw, out_scale),
            geom,
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> SwaVars {
        SwaVars {
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
            w_o: tape.param(&self.w_o),
        }
    }
}

impl SwaVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// Sliding-window attention over `B` stacked sequences. Row `i` of each
/// sequence sits at absolute position `pos_offset + i`, or continues after
/// the contents of `cache` (single sequence), which is then advanced.
#[allow(clippy::too_many_arguments)]
pub fn swa_on_tape(
    tape: &mut Tape,
    x: Var,
    p: &SwaVars,
    geom: &AttnGeometry,
    seq_len: usize,
    pos_offset: usize,
    cache: Option<&mut KvCache>,
    entropy: Option<&mut Vec<f64>>,
) -> Result<Var> {
    let mut q = tape.matmul(x, p.w_q)?;
    let mut k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let offset = cache.as_deref().map_or(pos_offset, KvCache::next_pos);
    if geom.rope_enabled {
        q = rope_on_tape(tape, q, geom.head_dim, seq_len, offset, geom.rope_base)?;
        k = rope_on_tape(tape, k, geom.head_dim, seq_len, offset, geom.rope_base)?;
    }
    let (pk, pv) = cache.as_deref().map(KvCache::ordered).unwrap_or_default();
    let prefix = KvPrefix {
        keys: &pk,
        values: &pv,
    };
    let attn = attention_on_tape(tape, q, k, v, geom, seq_len, prefix, entropy)?;
    if let Some(c) = cache {
        let kw = geom.kv_width();
        let (kd, vd) = (tape.value(k).data(), tape.value(v).data());
        for (kr, vr) in kd.chunks(kw).zip(vd.chunks(kw)) {
            c.push(kr, vr);
        }
    }
    tape.matmul(attn, p.w_o)
}

pub fn swa_forward(x: &Tensor, p: &SwaParams, pos_offset: usize) -> Result<Tensor> {
    let (n, _) = x.rows_cols();
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape);
    let out = swa_on_tape(&mut tape, xv, &vars, &p.geom, n.max(1), pos_offset, None, None)?;
    Ok(tape.value(out).clone())
}

/// One-token attention step: rotates at `cache.next_pos()`, appends the new
/// key/value (evicting beyond the window) and attends over the cache.
pub fn swa_step(x: &[f64], p: &SwaParams, cache: &mut KvCache) -> Result<Vec<f64>> {
    let g = &p.geom;
    let dm = p.w_q.shape()[0];
    if x.len() != dm || cache.capacity() != g.window {
        return Err(Error::contract("swa_step input or cache does not match the layer"));
    }
    let (qw, kw) = (g.q_width(), g.kv_width());
    let mut q = vec![0.0; qw];
    let mut k = vec![0.0; kw];
    let mut v = vec![0.0; kw];
    vecmat(x, p.w_q.data(), qw, &mut q);
    vecmat(x, p.w_k.data(), kw, &mut k);
    vecmat(x, p.w_v.data(), kw, &mut v);
    if g.rope_enabled {
        let freqs = inv_freqs(g.head_dim, g.rope_base);
        let pos = cache.next_pos();
        rotate_row(&mut q, g.head_dim, pos, &freqs, false);
        rotate_row(&mut k, g.head_dim, pos, &freqs, false);
    }
    cache.push(&k, &v);
    let (keys, vals): (Vec<&[f64]>, Vec<&[f64]>) = cache.rows().unzip();
    let mut attn = vec![0.0; qw];
    attend_row(g, &q, &keys, &vals, &mut attn, None, None);
    let mut out = vec![0.0; dm];
    vecmat(&attn, p.w_o.data(), dm, &mut out);
    Ok(out)
}
