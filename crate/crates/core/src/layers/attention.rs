//! Causal sliding-window attention with grouped key/value heads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnGeometry {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub rope_base: f64,
    pub rope_enabled: bool,
}

impl AttnGeometry {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_q_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            errs.push("attention head counts and head_dim must be positive".to_string());
        } else if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            errs.push(format!(
                "n_q_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.window == 0 {
            errs.push("window must be positive".to_string());
        }
        if self.rope_enabled && !self.head_dim.is_multiple_of(2) {
            errs.push(format!("rope needs an even head_dim, got {}", self.head_dim));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Key/value head serving a query head.
    pub fn kv_head(&self, q_head: usize) -> usize {
        q_head / (self.n_q_heads / self.n_kv_heads)
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Attends one query row over `keys`/`values` rows (`kv_width` each, in
/// position order), writing `q_width` outputs. Returns per-head probabilities
/// into `probs` (head-major, `keys.len()/kv_width` per head) when given.
pub(crate) fn attend_row(
    g: &AttnGeometry,
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    out: &mut [f64],
    mut probs: Option<&mut Vec<f64>>,
    mut entropy: Option<&mut [f64]>,
) {
    let hd = g.head_dim;
    let scale = g.scale();
    let mut scores = vec![0.0; keys.len()];
    for h in 0..g.n_q_heads {
        let kvh = g.kv_head(h);
        let qh = &q[h * hd..(h + 1) * hd];
        let mut max = f64::NEG_INFINITY;
        for (s, k) in scores.iter_mut().zip(keys) {
            let kh = &k[kvh * hd..(kvh + 1) * hd];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.fill(0.0);
        let mut ent = 0.0;
        for (s, v) in scores.iter_mut().zip(values) {
            *s *= inv;
            let p = *s;
            if p > 0.0 {
                ent -= p * p.ln();
            }
            let vh = &v[kvh * hd..(kvh + 1) * hd];
            for (o, x) in oh.iter_mut().zip(vh) {
                *o += p * x;
            }
        }
        if let Some(e) = entropy.as_deref_mut() {
            e[h] = ent;
        }
        if let Some(p) = probs.as_deref_mut() {
            p.extend_from_slice(&scores);
        }
    }
}

/// Read-only view of cached keys/values that precede a chunk.
#[derive(Clone, Copy, Debug, Default)]
pub struct KvPrefix<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
}

/// One sequence: row `i` attends to the last `min(window, m+i+1)` entries of
/// `prefix ++ chunk[..=i]`. `entropy` receives `n×n_q_heads` row entropies.
fn kv_row(buf: &[f64], j: usize, kw: usize) -> &[f64] {
    &buf[j * kw..(j + 1) * kw]
}

#[allow(clippy::too_many_arguments)]
fn attend_seq(
    g: &AttnGeometry,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    prefix: KvPrefix,
    out: &mut [f64],
    mut probs: Option<&mut Vec<f64>>,
    mut entropy: Option<&mut [f64]>,
) {
    let (qw, kw) = (g.q_width(), g.kv_width());
    let n = q.len() / qw;
    let m = prefix.keys.len() / kw;
    let mut keys: Vec<&[f64]> = Vec::with_capacity(g.window);
    let mut vals: Vec<&[f64]> = Vec::with_capacity(g.window);
    for i in 0..n {
        let total = m + i + 1;
        let start = total.saturating_sub(g.window);
        keys.clear();
        vals.clear();
        for j in start..total {
            if j < m {
                keys.push(kv_row(prefix.keys, j, kw));
                vals.push(kv_row(prefix.values, j, kw));
            } else {
                keys.push(kv_row(k, j - m, kw));
                vals.push(kv_row(v, j - m, kw));
            }
        }
        let ent = entropy
            .as_deref_mut()
            .map(|e| &mut e[i * g.n_q_heads..(i + 1) * g.n_q_heads]);
        attend_row(
            g,
            &q[i * qw..(i + 1) * qw],
            &keys,
            &vals,
            &mut out[i * qw..(i + 1) * qw],
            probs.as_deref_mut(),
            ent,
        );
    }
}

struct AttnOp {
    geom: AttnGeometry,
    seq_len: usize,
    probs: Vec<Vec<f64>>,
}

impl CustomOp for AttnOp {
    fn name(&self) -> &'static str {
        "sliding_attention"
    }

    fn backward(&self, inputs: &[&Tensor], dout: &[f64], dinputs: &mut [Option<Vec<f64>>]) {
        let g = &self.geom;
        let (qw, kw, hd, n) = (g.q_width(), g.kv_width(), g.head_dim, self.seq_len);
        let scale = g.scale();
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let per_seq: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = self
            .probs
            .par_iter()
            .enumerate()
            .map(|(s, probs)| {
                let (qs, ks, vs) = (
                    &q[s * n * qw..(s + 1) * n * qw],
                    &k[s * n * kw..(s + 1) * n * kw],
                    &v[s * n * kw..(s + 1) * n * kw],
                );
                let gs = &dout[s * n * qw..(s + 1) * n * qw];
                let mut dq = vec![0.0; n * qw];
                let mut dk = vec![0.0; n * kw];
                let mut dv = vec![0.0; n * kw];
                let mut off = 0;
                let mut dp = Vec::with_capacity(g.window);
                for i in 0..n {
                    let start = (i + 1).saturating_sub(g.window);
                    let cnt = i + 1 - start;
                    for h in 0..g.n_q_heads {
                        let kvh = g.kv_head(h);
                        let p = &probs[off..off + cnt];
                        off += cnt;
                        let go = &gs[i * qw + h * hd..i * qw + (h + 1) * hd];
                        dp.clear();
                        let mut dot = 0.0;
                        for (jj, &pj) in p.iter().enumerate() {
                            let j = start + jj;
                            let vh = &vs[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                            let d: f64 = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                            dp.push(d);
                            dot += pj * d;
                            let dvh = &mut dv[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                            for (o, x) in dvh.iter_mut().zip(go) {
                                *o += pj * x;
                            }
                        }
                        let qh = &qs[i * qw + h * hd..i * qw + (h + 1) * hd];
                        for (jj, &pj) in p.iter().enumerate() {
                            let j = start + jj;
                            let ds = pj * (dp[jj] - dot) * scale;
                            let kh = &ks[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                            let dqh = &mut dq[i * qw + h * hd..i * qw + (h + 1) * hd];
                            for (o, x) in dqh.iter_mut().zip(kh) {
                                *o += ds * x;
                            }
                            let dkh = &mut dk[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                            for (o, x) in dkh.iter_mut().zip(qh) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                (dq, dk, dv)
            })
            .collect();
        for (s, (dq, dk, dv)) in per_seq.into_iter().enumerate() {
            for (slot, src, w) in [(0, dq, qw), (1, dk, kw), (2, dv, kw)] {
                if let Some(dst) = dinputs[slot].as_mut() {
                    for (o, x) in dst[s * n * w..(s + 1) * n * w].iter_mut().zip(src) {
                        *o += x;
                    }
                }
            }
        }
    }
}

/// Sliding attention on the tape over `B` stacked sequences. With a
/// non-empty `prefix` (single sequence) the result is a constant.
/// `entropy`, when given, receives per-row, per-head attention entropies.
pub(crate) fn attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    geom: &AttnGeometry,
    seq_len: usize,
    prefix: KvPrefix,
    entropy: Option<&mut Vec<f64>>,
) -> Result<Var> {
    let (tq, tk, tv) = (tape.value(q), tape.value(k), tape.value(v));
    let (rows, qw) = tq.rows_cols();
    if qw != geom.q_width()
        || tk.rows_cols() != (rows, geom.kv_width())
        || tv.rows_cols() != (rows, geom.kv_width())
        || seq_len == 0
        || rows % seq_len != 0
    {
        return Err(Error::Dimension {
            op: "attention",
            lhs: tq.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        });
    }
    let nseq = rows / seq_len;
    let has_prefix = !prefix.keys.is_empty();
    if has_prefix && nseq != 1 {
        return Err(Error::contract("attention prefix requires a single sequence"));
    }
    let keep = tape.grad_enabled() && !has_prefix;
    let (kw, nq) = (geom.kv_width(), geom.n_q_heads);
    let want_entropy = entropy.is_some();
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..nseq)
        .into_par_iter()
        .map(|s| {
            let mut out = vec![0.0; seq_len * qw];
            let mut probs = Vec::new();
            let mut ent = if want_entropy { vec![0.0; seq_len * nq] } else { Vec::new() };
            attend_seq(
                geom,
                &tq.data()[s * seq_len * qw..(s + 1) * seq_len * qw],
                &tk.data()[s * seq_len * kw..(s + 1) * seq_len * kw],
                &tv.data()[s * seq_len * kw..(s + 1) * seq_len * kw],
                prefix,
                &mut out,
                keep.then_some(&mut probs),
                want_entropy.then_some(ent.as_mut_slice()),
            );
            (out, probs, ent)
        })
        .collect();
    let mut data = Vec::with_capacity(rows * qw);
    let mut all_probs = Vec::with_capacity(nseq);
    let mut all_ent = Vec::new();
    for (o, p, e) in results {
        data.extend_from_slice(&o);
        all_probs.push(p);
        all_ent.extend_from_slice(&e);
    }
    if let Some(sink) = entropy {
        *sink = all_ent;
    }
    let out = Tensor::new(&[rows, qw], data)?;
    Ok(if keep {
        tape.custom(
            &[q, k, v],
            out,
            Box::new(AttnOp {
                geom: *geom,
                seq_len,
                probs: all_probs,
            }),
        )
    } else {
        tape.constant(out)
    })
}

/// Fixed-capacity ring of post-rotation key/value rows; `next_pos` is the
/// absolute position the next inserted row will occupy.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    width: usize,
    capacity: usize,
    head: usize,
    len: usize,
    next_pos: usize,
}

impl KvCache {
    pub fn new(geom: &AttnGeometry) -> Self {
        let width = geom.kv_width();
        KvCache {
            keys: vec![0.0; geom.window * width],
            values: vec![0.0; geom.window * width],
            width,
            capacity: geom.window,
            head: 0,
            len: 0,
            next_pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    /// Appends one row, evicting the oldest when full.
    pub fn push(&mut self, key: &[f64], value: &[f64]) {
        let w = self.width;
        let slot = (self.head + self.len) % self.capacity;
        self.keys[slot * w..(slot + 1) * w].copy_from_slice(key);
        self.values[slot * w..(slot + 1) * w].copy_from_slice(value);
        if self.len == self.capacity {
            self.head = (self.head + 1) % self.capacity;
        } else {
            self.len += 1;
        }
        self.next_pos += 1;
    }

    /// Rows oldest first.
    pub fn rows(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        let w = self.width;
        (0..self.len).map(move |i| {
            let slot = (self.head + i) % self.capacity;
            (
                &self.keys[slot * w..(slot + 1) * w],
                &self.values[slot * w..(slot + 1) * w],
            )
        })
    }

    /// Contiguous copies of the cached keys and values, oldest first.
    pub fn ordered(&self) -> (Vec<f64>, Vec<f64>) {
        let mut k = Vec::with_capacity(self.len * self.width);
        let mut v = Vec::with_capacity(self.len * self.width);
        for (kr, vr) in self.rows() {
            k.extend_from_slice(kr);
            v.extend_from_slice(vr);
        }
        (k, v)
    }

    /// Bytes held by the ring, independent of how many rows were pushed.
    pub fn footprint_bytes(&self) -> usize {
        (self.keys.capacity() + self.values.capacity()) * std::mem::size_of::<f64>()
            + 4 * std::mem::size_of::<usize>()
    }
}
