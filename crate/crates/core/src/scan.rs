//! Selective state-space recurrence.
//!
//! ```text
//! a_t = exp(-Δ_t ⊙ exp(A))             (Δ_t broadcast over the state axis)
//! Z_t = a_t ⊙ Z_{t-1} + Δ_t ⊙ (B_t ⊗ U_t)
//! Y_t = Z_t · C_t + D ⊙ U_t
//! ```
//!
//! Two forward realizations are provided: a plain sequential loop and a
//! chunked associative scan built on [`combine`]. They agree to rounding;
//! with a single chunk they agree bit-for-bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Borrowed inputs for one sequence.
///
/// Row-major layouts: `u`, `delta` are `n×d_e`; `a` is `d_e×d_s`; `b`, `c`
/// are `n×d_s`; `d` is `d_e`; `z0` (optional, zero when absent) is `d_e×d_s`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
    pub z0: Option<&'a [f64]>,
    pub d_inner: usize,
    pub d_state: usize,
}

impl<'a> ScanInputs<'a> {
    /// Borrows from tensors, checking every extent against `u` and `a`.
    pub fn from_tensors(
        u: &'a Tensor,
        delta: &'a Tensor,
        a: &'a Tensor,
        b: &'a Tensor,
        c: &'a Tensor,
        d: &'a Tensor,
        z0: Option<&'a Tensor>,
    ) -> Result<Self> {
        let (n, d_e) = u.rows_cols();
        let (a_rows, d_s) = a.rows_cols();
        let expect = |t: &Tensor, shape: [usize; 2], op| {
            if t.rows_cols() != (shape[0], shape[1]) {
                Err(Error::Dimension {
                    op,
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            } else {
                Ok(())
            }
        };
        expect(delta, [n, d_e], "scan delta")?;
        expect(a, [d_e, d_s], "scan A")?;
        expect(b, [n, d_s], "scan B")?;
        expect(c, [n, d_s], "scan C")?;
        if d.numel() != d_e || a_rows != d_e {
            return Err(Error::Dimension {
                op: "scan D",
                lhs: d.shape().to_vec(),
                rhs: vec![d_e],
            });
        }
        if let Some(z) = z0 {
            expect(z, [d_e, d_s], "scan Z0")?;
        }
        Ok(ScanInputs {
            u: u.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            c: c.data(),
            d: d.data(),
            z0: z0.map(Tensor::data),
            d_inner: d_e,
            d_state: d_s,
        })
    }

    pub fn len(&self) -> usize {
        self.u.len() / self.d_inner
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn state_len(&self) -> usize {
        self.d_inner * self.d_state
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let (de, ds) = (self.d_inner, self.d_state);
        let ok = self.u.len() == n * de
            && self.delta.len() == n * de
            && self.a.len() == de * ds
            && self.b.len() == n * ds
            && self.c.len() == n * ds
            && self.d.len() == de
            && self.z0.is_none_or(|z| z.len() == de * ds);
        if ok {
            Ok(())
        } else {
            Err(Error::contract("scan input extents are inconsistent"))
        }
    }

    fn check_delta(&self) -> Result<()> {
        match self.delta.iter().position(|&v| !(v > 0.0)) {
            Some(i) => Err(Error::contract(format!(
                "scan gate must be positive; element {i} is {}",
                self.delta[i]
            ))),
            None => Ok(()),
        }
    }

    fn exp_a(&self) -> Vec<f64> {
        self.a.iter().map(|v| v.exp()).collect()
    }
}

/// Scan result. `trace` holds `Z_0..Z_n` (`(n+1)×d_e×d_s`) when requested; the
/// backward pass requires it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutputs {
    pub y: Vec<f64>,
    pub zn: Vec<f64>,
    pub trace: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub z0: Vec<f64>,
}

impl ScanGrads {
    fn zeros(n: usize, de: usize, ds: usize) -> Self {
        ScanGrads {
            u: vec![0.0; n * de],
            delta: vec![0.0; n * de],
            a: vec![0.0; de * ds],
            b: vec![0.0; n * ds],
            c: vec![0.0; n * ds],
            d: vec![0.0; de],
            z0: vec![0.0; de * ds],
        }
    }
}

/// Forward realization used by the layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    Chunked(usize),
}

/// `(a₁,b₁)∘(a₂,b₂) = (a₂a₁, a₂b₁+b₂)`: applying step 1 then step 2 to a state.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

pub fn s6_sequential(inp: &ScanInputs, keep_trace: bool) -> Result<ScanOutputs> {
    inp.check()?;
    inp.check_delta()?;
    Ok(sequential_kernel(inp, keep_trace))
}

/// Sequential scan without the gate positivity check (boundary probes only).
pub fn s6_sequential_unchecked(inp: &ScanInputs, keep_trace: bool) -> Result<ScanOutputs> {
    inp.check()?;
    Ok(sequential_kernel(inp, keep_trace))
}

pub fn s6_parallel(inp: &ScanInputs, chunk: usize, keep_trace: bool) -> Result<ScanOutputs> {
    if chunk < 1 {
        return Err(Error::contract("scan chunk must be at least 1"));
    }
    inp.check()?;
    inp.check_delta()?;
    Ok(chunked_kernel(inp, chunk, keep_trace))
}

/// Runs the configured realization; the gate is trusted (it comes from softplus).
pub(crate) fn s6_forward(inp: &ScanInputs, mode: ScanMode, keep_trace: bool) -> ScanOutputs {
    debug_assert!(inp.check().is_ok());
    match mode {
        ScanMode::Sequential => sequential_kernel(inp, keep_trace),
        ScanMode::Chunked(c) => chunked_kernel(inp, c.max(1), keep_trace),
    }
}

#[inline]
fn output_row(z: &[f64], c_t: &[f64], u_t: &[f64], d: &[f64], ds: usize, y_t: &mut [f64]) {
    for (i, y) in y_t.iter_mut().enumerate() {
        let zi = &z[i * ds..(i + 1) * ds];
        let mut acc = 0.0;
        for (zv, cv) in zi.iter().zip(c_t) {
            acc += zv * cv;
        }
        *y = acc + d[i] * u_t[i];
    }
}

fn sequential_kernel(inp: &ScanInputs, keep_trace: bool) -> ScanOutputs {
    let n = inp.len();
    let (de, ds) = (inp.d_inner, inp.d_state);
    let sl = inp.state_len();
    let ea = inp.exp_a();
    let mut z = inp.z0.map_or_else(|| vec![0.0; sl], <[f64]>::to_vec);
    let mut trace = keep_trace.then(|| {
        let mut t = Vec::with_capacity((n + 1) * sl);
        t.extend_from_slice(&z);
        t
    });
    let mut y = vec![0.0; n * de];
    for t in 0..n {
        let u_t = &inp.u[t * de..(t + 1) * de];
        let dl_t = &inp.delta[t * de..(t + 1) * de];
        let b_t = &inp.b[t * ds..(t + 1) * ds];
        let c_t = &inp.c[t * ds..(t + 1) * ds];
        for i in 0..de {
            let dl = dl_t[i];
            let du = dl * u_t[i];
            let zi = &mut z[i * ds..(i + 1) * ds];
            let eai = &ea[i * ds..(i + 1) * ds];
            for j in 0..ds {
                let a = (-dl * eai[j]).exp();
                zi[j] = a * zi[j] + du * b_t[j];
            }
        }
        output_row(&z, c_t, u_t, inp.d, ds, &mut y[t * de..(t + 1) * de]);
        if let Some(tr) = trace.as_mut() {
            tr.extend_from_slice(&z);
        }
    }
    ScanOutputs { y, zn: z, trace }
}

/// Chunked scan: per-chunk local prefixes of the `(decay, injection)` pairs
/// (independent across chunks), a sequential carry of chunk-final states,
/// then per-chunk application of the carry. The first chunk starts from
/// `Z_0` directly.
fn chunked_kernel(inp: &ScanInputs, chunk: usize, keep_trace: bool) -> ScanOutputs {
    let n = inp.len();
    let (de, ds) = (inp.d_inner, inp.d_state);
    let sl = inp.state_len();
    let ea = inp.exp_a();
    let z0 = inp.z0.map_or_else(|| vec![0.0; sl], <[f64]>::to_vec);
    if n == 0 {
        return ScanOutputs {
            y: vec![],
            trace: keep_trace.then(|| z0.clone()),
            zn: z0,
        };
    }
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();

    // Phase 1: local prefix of each chunk. Chunk 0 folds Z_0 in as its
    // starting injection; later chunks start from the identity (1, 0).
    let locals: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, &s)| {
            let e = (s + chunk).min(n);
            let len = e - s;
            let mut acum = vec![0.0; len * sl];
            let mut bcum = vec![0.0; len * sl];
            let mut a_run = vec![1.0; sl];
            let mut b_run = if ci == 0 { z0.clone() } else { vec![0.0; sl] };
            for (lt, t) in (s..e).enumerate() {
                let u_t = &inp.u[t * de..(t + 1) * de];
                let dl_t = &inp.delta[t * de..(t + 1) * de];
                let b_t = &inp.b[t * ds..(t + 1) * ds];
                for i in 0..de {
                    let dl = dl_t[i];
                    let du = dl * u_t[i];
                    for j in 0..ds {
                        let idx = i * ds + j;
                        let a = (-dl * ea[idx]).exp();
                        let (na, nb) = combine((a_run[idx], b_run[idx]), (a, du * b_t[j]));
                        a_run[idx] = na;
                        b_run[idx] = nb;
                    }
                }
                acum[lt * sl..(lt + 1) * sl].copy_from_slice(&a_run);
                bcum[lt * sl..(lt + 1) * sl].copy_from_slice(&b_run);
            }
            (acum, bcum)
        })
        .collect();

    // Phase 2: carry chunk-final states forward.
    let mut carries: Vec<Vec<f64>> = Vec::with_capacity(starts.len());
    let mut carry = z0.clone();
    for (ci, (acum, bcum)) in locals.iter().enumerate() {
        carries.push(carry.clone());
        let last = acum.len() / sl - 1;
        let a_end = &acum[last * sl..];
        let b_end = &bcum[last * sl..];
        if ci == 0 {
            carry.copy_from_slice(b_end);
        } else {
            for idx in 0..sl {
                carry[idx] = combine((1.0, carry[idx]), (a_end[idx], b_end[idx])).1;
            }
        }
    }

    // Phase 3: states and outputs.
    let per_chunk: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, &s)| {
            let (acum, bcum) = &locals[ci];
            let len = acum.len() / sl;
            let mut y = vec![0.0; len * de];
            let mut states = if ci == 0 { bcum.clone() } else { vec![0.0; len * sl] };
            if ci > 0 {
                let cz = &carries[ci];
                for lt in 0..len {
                    let row = lt * sl;
                    for idx in 0..sl {
                        states[row + idx] =
                            combine((1.0, cz[idx]), (acum[row + idx], bcum[row + idx])).1;
                    }
                }
            }
            for lt in 0..len {
                let t = s + lt;
                output_row(
                    &states[lt * sl..(lt + 1) * sl],
                    &inp.c[t * ds..(t + 1) * ds],
                    &inp.u[t * de..(t + 1) * de],
                    inp.d,
                    ds,
                    &mut y[lt * de..(lt + 1) * de],
                );
            }
            (y, states)
        })
        .collect();

    let mut y = Vec::with_capacity(n * de);
    let mut trace = keep_trace.then(|| {
        let mut t = Vec::with_capacity((n + 1) * sl);
        t.extend_from_slice(&z0);
        t
    });
    for (yc, states) in &per_chunk {
        y.extend_from_slice(yc);
        if let Some(tr) = trace.as_mut() {
            tr.extend_from_slice(states);
        }
    }
    let (_, last_states) = per_chunk.last().unwrap();
    let zn = last_states[last_states.len() - sl..].to_vec();
    ScanOutputs { y, zn, trace }
}

/// Reverse-time adjoint of the recurrence. Decays are recomputed from
/// `(Δ, A)`; the stored state trace supplies `Z_{t-1}`.
pub fn s6_backward(
    inp: &ScanInputs,
    out: &ScanOutputs,
    dy: &[f64],
    dzn: Option<&[f64]>,
) -> Result<ScanGrads> {
    inp.check()?;
    let trace = out
        .trace
        .as_deref()
        .ok_or_else(|| Error::contract("scan backward needs the forward state trace"))?;
    let n = inp.len();
    let (de, ds) = (inp.d_inner, inp.d_state);
    if trace.len() != (n + 1) * de * ds || dy.len() != n * de {
        return Err(Error::contract("scan backward extents disagree with the forward pass"));
    }
    let mut g = ScanGrads::zeros(n, de, ds);
    backward_kernel(inp, trace, dy, dzn, &mut g);
    Ok(g)
}

pub(crate) fn backward_kernel(
    inp: &ScanInputs,
    trace: &[f64],
    dy: &[f64],
    dzn: Option<&[f64]>,
    g: &mut ScanGrads,
) {
    let n = inp.len();
    let (de, ds) = (inp.d_inner, inp.d_state);
    let sl = de * ds;
    let ea = inp.exp_a();
    let mut lam = dzn.map_or_else(|| vec![0.0; sl], <[f64]>::to_vec);
    for t in (0..n).rev() {
        let z_t = &trace[(t + 1) * sl..(t + 2) * sl];
        let z_prev = &trace[t * sl..(t + 1) * sl];
        let u_t = &inp.u[t * de..(t + 1) * de];
        let dl_t = &inp.delta[t * de..(t + 1) * de];
        let b_t = &inp.b[t * ds..(t + 1) * ds];
        let c_t = &inp.c[t * ds..(t + 1) * ds];
        let dy_t = &dy[t * de..(t + 1) * de];
        let dc_t = &mut g.c[t * ds..(t + 1) * ds];
        // output equation
        for i in 0..de {
            let dyv = dy_t[i];
            g.d[i] += dyv * u_t[i];
            g.u[t * de + i] += dyv * inp.d[i];
            let zi = &z_t[i * ds..(i + 1) * ds];
            let li = &mut lam[i * ds..(i + 1) * ds];
            for j in 0..ds {
                dc_t[j] += dyv * zi[j];
                li[j] += dyv * c_t[j];
            }
        }
        // state equation
        let db_t = &mut g.b[t * ds..(t + 1) * ds];
        for i in 0..de {
            let dl = dl_t[i];
            let uv = u_t[i];
            let mut d_delta = 0.0;
            let mut d_u = 0.0;
            for j in 0..ds {
                let idx = i * ds + j;
                let e = ea[idx];
                let a = (-dl * e).exp();
                let l = lam[idx];
                let da = l * z_prev[idx] * a;
                d_delta += -da * e + l * b_t[j] * uv;
                g.a[idx] += -da * dl * e;
                db_t[j] += l * dl * uv;
                d_u += l * dl * b_t[j];
                lam[idx] = a * l;
            }
            g.delta[t * de + i] += d_delta;
            g.u[t * de + i] += d_u;
        }
    }
    for (o, l) in g.z0.iter_mut().zip(&lam) {
        *o += l;
    }
}

struct ScanTapeOp {
    seq_len: usize,
    d_inner: usize,
    d_state: usize,
    traces: Vec<Vec<f64>>,
}

/// Tape node for the scan over `B` stacked sequences of `seq_len` rows.
///
/// Inputs: `u`, `delta` (`(B·n)×d_e`), `a` (`d_e×d_s`), `b`, `c`
/// (`(B·n)×d_s`), `d` (`d_e`). `z0` (single sequence only) seeds the state
/// and disables differentiation. Returns the output and each sequence's
/// final state.
#[allow(clippy::too_many_arguments)]
pub fn s6_on_tape(
    tape: &mut crate::numerics::Tape,
    [u, delta, a, b, c, d]: [crate::numerics::Var; 6],
    seq_len: usize,
    mode: ScanMode,
    z0: Option<&[f64]>,
) -> Result<(crate::numerics::Var, Vec<Vec<f64>>)> {
    let (rows, de) = tape.value(u).rows_cols();
    let (_, ds) = tape.value(a).rows_cols();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::contract("scan rows are not a multiple of the sequence length"));
    }
    if z0.is_some() && rows != seq_len {
        return Err(Error::contract("scan initial state requires a single sequence"));
    }
    let nseq = rows / seq_len;
    let keep = tape.grad_enabled() && z0.is_none();
    let (tu, tdl, ta, tb, tc, td) = (
        tape.value(u),
        tape.value(delta),
        tape.value(a),
        tape.value(b),
        tape.value(c),
        tape.value(d),
    );
    for (t, cols, name) in [(tdl, de, "scan delta"), (tb, ds, "scan B"), (tc, ds, "scan C")] {
        if t.rows_cols() != (rows, cols) {
            return Err(Error::Dimension {
                op: name,
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
    }
    if ta.rows_cols().0 != de || td.numel() != de {
        return Err(Error::Dimension {
            op: "scan A/D",
            lhs: ta.shape().to_vec(),
            rhs: vec![de, ds],
        });
    }
    let outs: Vec<ScanOutputs> = (0..nseq)
        .into_par_iter()
        .map(|s| {
            let r0 = s * seq_len;
            let view = ScanInputs {
                u: &tu.data()[r0 * de..(r0 + seq_len) * de],
                delta: &tdl.data()[r0 * de..(r0 + seq_len) * de],
                a: ta.data(),
                b: &tb.data()[r0 * ds..(r0 + seq_len) * ds],
                c: &tc.data()[r0 * ds..(r0 + seq_len) * ds],
                d: td.data(),
                z0,
                d_inner: de,
                d_state: ds,
            };
            s6_forward(&view, mode, keep)
        })
        .collect();
    let mut y = Vec::with_capacity(rows * de);
    let mut finals = Vec::with_capacity(nseq);
    let mut traces = Vec::new();
    for o in outs {
        y.extend_from_slice(&o.y);
        finals.push(o.zn);
        if let Some(t) = o.trace {
            traces.push(t);
        }
    }
    let out = Tensor::from_parts(vec![rows, de], y);
    let op = ScanTapeOp {
        seq_len,
        d_inner: de,
        d_state: ds,
        traces,
    };
    let inputs = [u, delta, a, b, c, d];
    let var = if keep {
        tape.custom(&inputs, out, Box::new(op))
    } else {
        tape.constant(out)
    };
    Ok((var, finals))
}

impl crate::numerics::CustomOp for ScanTapeOp {
    fn name(&self) -> &'static str {
        "s6_scan"
    }

    fn backward(&self, inputs: &[&Tensor], dout: &[f64], dinputs: &mut [Option<Vec<f64>>]) {
        let (n, de, ds) = (self.seq_len, self.d_inner, self.d_state);
        let [u, delta, a, b, c, d] = inputs else {
            unreachable!("scan op has six inputs")
        };
        let per_seq: Vec<ScanGrads> = self
            .traces
            .par_iter()
            .enumerate()
            .map(|(s, trace)| {
                let r0 = s * n;
                let view = ScanInputs {
                    u: &u.data()[r0 * de..(r0 + n) * de],
                    delta: &delta.data()[r0 * de..(r0 + n) * de],
                    a: a.data(),
                    b: &b.data()[r0 * ds..(r0 + n) * ds],
                    c: &c.data()[r0 * ds..(r0 + n) * ds],
                    d: d.data(),
                    z0: None,
                    d_inner: de,
                    d_state: ds,
                };
                let mut g = ScanGrads::zeros(n, de, ds);
                backward_kernel(&view, trace, &dout[r0 * de..(r0 + n) * de], None, &mut g);
                g
            })
            .collect();
        let add = |dst: &mut Option<Vec<f64>>, offset: usize, src: &[f64]| {
            if let Some(dst) = dst {
                for (o, v) in dst[offset..offset + src.len()].iter_mut().zip(src) {
                    *o += v;
                }
            }
        };
        for (s, g) in per_seq.iter().enumerate() {
            let r0 = s * n;
            add(&mut dinputs[0], r0 * de, &g.u);
            add(&mut dinputs[1], r0 * de, &g.delta);
            add(&mut dinputs[2], 0, &g.a);
            add(&mut dinputs[3], r0 * ds, &g.b);
            add(&mut dinputs[4], r0 * ds, &g.c);
            add(&mut dinputs[5], 0, &g.d);
        }
    }
}
