use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::init_uniform;
use crate::numerics::ops::{inverse_softplus, silu_scalar, softplus_scalar, vecmat};
use crate::numerics::{Tape, Tensor, Var};
use crate::scan::{s6_on_tape, ScanMode};

/// Range the selective gate is initialised into.
pub const DELTA_MIN: f64 = 0.001;
pub const DELTA_MAX: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_rank: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaParams {
    pub w_in: Tensor,
    pub w_conv: Tensor,
    pub w_r: Tensor,
    pub w_q: Tensor,
    pub b: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub a: Tensor,
    pub d: Tensor,
    pub w_g: Tensor,
    pub w_out: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MambaVars {
    pub w_in: Var,
    pub w_conv: Var,
    pub w_r: Var,
    pub w_q: Var,
    pub b: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub a: Var,
    pub d: Var,
    pub w_g: Var,
    pub w_out: Var,
}

impl MambaParams {
    /// `A[i][j] = ln(j+1)`, `D = 1`, `W_q = 0` and `b = softplus⁻¹(δ)` with
    /// `δ` log-uniform in `[DELTA_MIN, DELTA_MAX]` per channel, so the gate
    /// equals `softplus(b)` at step zero.
    pub fn init(rng: &mut impl Rng, dims: &MambaDims, out_scale: f64) -> Self {
        let MambaDims {
            d_model: dm,
            d_inner: de,
            d_rank: dr,
            d_state: ds,
            conv_kernel: k,
        } = *dims;
        let a_data = (0..de)
            .flat_map(|_| (1..=ds).map(|j| (j as f64).ln()))
            .collect();
        let (lo, hi) = (DELTA_MIN.ln(), DELTA_MAX.ln());
        let b_data = (0..de)
            .map(|_| inverse_softplus(rng.gen_range(lo..=hi).exp()))
            .collect();
        MambaParams {
            w_in: init_uniform(rng, &[dm, de], dm, 1.0),
            w_conv: init_uniform(rng, &[k, de], k, 1.0),
            w_r: init_uniform(rng, &[de, dr], de, 1.0),
            w_q: Tensor::zeros(&[dr, de]),
            b: Tensor::from_parts(vec![de], b_data),
            w_b: init_uniform(rng, &[de, ds], de, 1.0),
            w_c: init_uniform(rng, &[de, ds], de, 1.0),
            a: Tensor::from_parts(vec![de, ds], a_data),
            d: Tensor::full(&[de], 1.0),
            w_g: init_uniform(rng, &[dm, de], dm, 1.0),
            w_out: init_uniform(rng, &[de, dm], de, out_scale),
        }
    }

    pub fn dims(&self) -> MambaDims {
        MambaDims {
            d_model: self.w_in.shape()[0],
            d_inner: self.w_in.shape()[1],
            d_rank: self.w_r.shape()[1],
            d_state: self.a.shape()[1],
            conv_kernel: self.w_conv.shape()[0],
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 11] {
        [
            ("w_in", &self.w_in),
            ("w_conv", &self.w_conv),
            ("w_r", &self.w_r),
            ("w_q", &self.w_q),
            ("b", &self.b),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("a", &self.a),
            ("d", &self.d),
            ("w_g", &self.w_g),
            ("w_out", &self.w_out),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 11] {
        [
            ("w_in", &mut self.w_in),
            ("w_conv", &mut self.w_conv),
            ("w_r", &mut self.w_r),
            ("w_q", &mut self.w_q),
            ("b", &mut self.b),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("a", &mut self.a),
            ("d", &mut self.d),
            ("w_g", &mut self.w_g),
            ("w_out", &mut self.w_out),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> MambaVars {
        MambaVars {
            w_in: tape.param(&self.w_in),
            w_conv: tape.param(&self.w_conv),
            w_r: tape.param(&self.w_r),
            w_q: tape.param(&self.w_q),
            b: tape.param(&self.b),
            w_b: tape.param(&self.w_b),
            w_c: tape.param(&self.w_c),
            a: tape.param(&self.a),
            d: tape.param(&self.d),
            w_g: tape.param(&self.w_g),
            w_out: tape.param(&self.w_out),
        }
    }
}

impl MambaVars {
    pub fn all(&self) -> [Var; 11] {
        [
            self.w_in, self.w_conv, self.w_r, self.w_q, self.b, self.w_b, self.w_c, self.a,
            self.d, self.w_g, self.w_out,
        ]
    }
}

/// Per-stream recurrent state: `Z` and the last `k−1` rows of `X·W_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaState {
    pub z: Vec<f64>,
    conv: Vec<f64>,
    filled: usize,
    dims: MambaDims,
}

impl MambaState {
    pub fn new(dims: &MambaDims) -> Self {
        MambaState {
            z: vec![0.0; dims.d_inner * dims.d_state],
            conv: vec![0.0; dims.conv_kernel.saturating_sub(1) * dims.d_inner],
            filled: 0,
            dims: *dims,
        }
    }

    /// Buffered convolution rows, oldest first.
    pub fn conv_rows(&self) -> &[f64] {
        &self.conv[..self.filled * self.dims.d_inner]
    }

    pub fn conv_len(&self) -> usize {
        self.filled
    }

    fn push_conv_row(&mut self, row: &[f64]) {
        let de = self.dims.d_inner;
        let cap = self.dims.conv_kernel.saturating_sub(1);
        if cap == 0 {
            return;
        }
        if self.filled < cap {
            self.conv[self.filled * de..(self.filled + 1) * de].copy_from_slice(row);
            self.filled += 1;
        } else {
            self.conv.copy_within(de.., 0);
            self.conv[(cap - 1) * de..].copy_from_slice(row);
        }
    }

    pub fn footprint_bytes(&self) -> usize {
        (self.z.capacity() + self.conv.capacity()) * std::mem::size_of::<f64>()
            + std::mem::size_of::<usize>()
    }

    fn check(&self, dims: &MambaDims) -> Result<()> {
        if self.dims != *dims {
            return Err(Error::contract(format!(
                "Mamba state built for {:?} used with {:?}",
                self.dims, dims
            )));
        }
        Ok(())
    }
}

/// Full-sequence Mamba layer over `B` stacked sequences of `seq_len` rows.
///
/// With `state` (single sequence) the convolution and scan continue from
/// it and it is advanced in place. `delta_sink` receives the selective gate.
#[allow(clippy::too_many_arguments)]
pub fn mamba_on_tape(
    tape: &mut Tape,
    x: Var,
    p: &MambaVars,
    dims: &MambaDims,
    seq_len: usize,
    mode: ScanMode,
    state: Option<&mut MambaState>,
    delta_sink: Option<&mut Vec<f64>>,
) -> Result<Var> {
    if let Some(s) = state.as_deref() {
        s.check(dims)?;
    }
    let h = tape.matmul(x, p.w_in)?;
    let history = state.as_deref().map(MambaState::conv_rows);
    let hc = tape.conv1d_causal(h, p.w_conv, seq_len, history)?;
    let u = tape.silu(hc);
    let r = tape.matmul(u, p.w_r)?;
    let q = tape.matmul(r, p.w_q)?;
    let q = tape.add_row(q, p.b)?;
    let delta = tape.softplus(q);
    if let Some(sink) = delta_sink {
        *sink = tape.value(delta).data().to_vec();
    }
    let bm = tape.matmul(u, p.w_b)?;
    let cm = tape.matmul(u, p.w_c)?;
    let z0 = state.as_deref().map(|s| s.z.as_slice());
    let (y, finals) = s6_on_tape(tape, [u, delta, p.a, bm, cm, p.d], seq_len, mode, z0)?;
    if let Some(s) = state {
        s.z.clone_from(&finals[0]);
        let de = dims.d_inner;
        let hv = tape.value(h).data();
        let rows = hv.len() / de;
        let keep = dims.conv_kernel.saturating_sub(1).min(rows);
        for r in rows - keep..rows {
            s.push_conv_row(&hv[r * de..(r + 1) * de]);
        }
    }
    let g = tape.matmul(x, p.w_g)?;
    let g = tape.silu(g);
    let yg = tape.mul(y, g)?;
    tape.matmul(yg, p.w_out)
}

/// `O = (Y ⊙ SiLU(X·W_g))·W_out` for one sequence from a zero state.
pub fn mamba_forward(x: &Tensor, p: &MambaParams, mode: ScanMode) -> Result<Tensor> {
    let dims = p.dims();
    let (n, dm) = x.rows_cols();
    if dm != dims.d_model {
        return Err(Error::Dimension {
            op: "mamba_forward",
            lhs: x.shape().to_vec(),
            rhs: p.w_in.shape().to_vec(),
        });
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape);
    let out = mamba_on_tape(&mut tape, xv, &vars, &dims, n.max(1), mode, None, None)?;
    Ok(tape.value(out).clone())
}

/// One-token Mamba update; advances `state` in place and returns the output row.
pub fn mamba_step(x: &[f64], p: &MambaParams, state: &mut MambaState) -> Result<Vec<f64>> {
    let dims = p.dims();
    state.check(&dims)?;
    let MambaDims {
        d_model: dm,
        d_inner: de,
        d_rank: dr,
        d_state: ds,
        conv_kernel: k,
    } = dims;
    if x.len() != dm {
        return Err(Error::Dimension {
            op: "mamba_step",
            lhs: vec![x.len()],
            rhs: vec![dm],
        });
    }
    let mut h = vec![0.0; de];
    vecmat(x, p.w_in.data(), de, &mut h);
    let w = p.w_conv.data();
    let hist = state.conv_rows();
    let filled = state.conv_len();
    let mut u = vec![0.0; de];
    for j in 0..k {
        // offset back from the current row
        let back = k - 1 - j;
        let row: &[f64] = if back == 0 {
            &h
        } else if back <= filled {
            let r = filled - back;
            &hist[r * de..(r + 1) * de]
        } else {
            continue;
        };
        for ((o, &wv), &xv) in u.iter_mut().zip(&w[j * de..(j + 1) * de]).zip(row) {
            *o += wv * xv;
        }
    }
    u.iter_mut().for_each(|v| *v = silu_scalar(*v));
    let mut r = vec![0.0; dr];
    vecmat(&u, p.w_r.data(), dr, &mut r);
    let mut delta = vec![0.0; de];
    vecmat(&r, p.w_q.data(), de, &mut delta);
    for (dl, b) in delta.iter_mut().zip(p.b.data()) {
        *dl = softplus_scalar(*dl + b);
    }
    let mut bm = vec![0.0; ds];
    let mut cm = vec![0.0; ds];
    vecmat(&u, p.w_b.data(), ds, &mut bm);
    vecmat(&u, p.w_c.data(), ds, &mut cm);
    let a = p.a.data();
    let mut y = vec![0.0; de];
    for i in 0..de {
        let dl = delta[i];
        let du = dl * u[i];
        let zi = &mut state.z[i * ds..(i + 1) * ds];
        let mut acc = 0.0;
        for j in 0..ds {
            let decay = (-dl * a[i * ds + j].exp()).exp();
            zi[j] = decay * zi[j] + du * bm[j];
            acc += zi[j] * cm[j];
        }
        y[i] = acc + p.d.data()[i] * u[i];
    }
    state.push_conv_row(&h);
    let mut g = vec![0.0; de];
    vecmat(x, p.w_g.data(), de, &mut g);
    for (gv, yv) in g.iter_mut().zip(&y) {
        *gv = silu_scalar(*gv) * yv;
    }
    let mut out = vec![0.0; dm];
    vecmat(&g, p.w_out.data(), dm, &mut out);
    Ok(out)
}
