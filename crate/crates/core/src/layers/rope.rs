use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

pub(crate) fn inv_freqs(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-((2 * i) as f64) / head_dim as f64))
        .collect()
}

/// Rotates every head of one `heads·head_dim` row in place.
pub(crate) fn rotate_row(row: &mut [f64], head_dim: usize, pos: usize, freqs: &[f64], inverse: bool) {
    let sign = if inverse { -1.0 } else { 1.0 };
    for head in row.chunks_mut(head_dim) {
        for (i, &f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let s = sign * s;
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Rotary embedding of `x[heads×n×head_dim]`: the pair `(2i, 2i+1)` of the
/// row at `positions[t]` turns by `positions[t] · base^(−2i/head_dim)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let [heads, n, hd] = x.shape() else {
        return Err(Error::contract("rope expects a [heads, n, head_dim] tensor"));
    };
    let (heads, n, hd) = (*heads, *n, *hd);
    if hd % 2 != 0 {
        return Err(Error::contract(format!("rope needs an even head_dim, got {hd}")));
    }
    if positions.len() != n {
        return Err(Error::Dimension {
            op: "rope positions",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let freqs = inv_freqs(hd, base);
    let mut data = x.data().to_vec();
    for h in 0..heads {
        for (t, &p) in positions.iter().enumerate() {
            let off = (h * n + t) * hd;
            rotate_row(&mut data[off..off + hd], hd, p, &freqs, false);
        }
    }
    Tensor::new(x.shape(), data)
}

struct RopeOp {
    head_dim: usize,
    seq_len: usize,
    pos_offset: usize,
    freqs: Vec<f64>,
}

impl CustomOp for RopeOp {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, inputs: &[&Tensor], dout: &[f64], dinputs: &mut [Option<Vec<f64>>]) {
        let Some(dx) = dinputs[0].as_mut() else { return };
        let width = inputs[0].rows_cols().1;
        for (r, (o, g)) in dx.chunks_mut(width).zip(dout.chunks(width)).enumerate() {
            let mut row = g.to_vec();
            let pos = self.pos_offset + r % self.seq_len;
            rotate_row(&mut row, self.head_dim, pos, &self.freqs, true);
            for (a, b) in o.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}

/// Rotary embedding on the tape for rows laid out `[(B·seq_len) × heads·head_dim]`;
/// row `r` sits at absolute position `pos_offset + r mod seq_len`.
pub(crate) fn rope_on_tape(
    tape: &mut Tape,
    x: Var,
    head_dim: usize,
    seq_len: usize,
    pos_offset: usize,
    base: f64,
) -> Result<Var> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::contract(format!("rope needs an even head_dim, got {head_dim}")));
    }
    let freqs = inv_freqs(head_dim, base);
    let t = tape.value(x);
    let width = t.rows_cols().1;
    let mut data = t.data().to_vec();
    for (r, row) in data.chunks_mut(width).enumerate() {
        rotate_row(row, head_dim, pos_offset + r % seq_len, &freqs, false);
    }
    let out = Tensor::new(t.shape(), data)?;
    Ok(tape.custom(
        &[x],
        out,
        Box::new(RopeOp {
            head_dim,
            seq_len,
            pos_offset,
            freqs,
        }),
    ))
}
