//! Plain (tape-free) numeric kernels shared by the autodiff tape and the
//! streaming step functions.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `C = alpha * op(A) * op(B) + beta * C` for row-major operands, where
/// `op(X)` optionally transposes. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rows_cols();
    let (k2, n) = b.rows_cols();
    if k != k2 || b.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    let mut shape = a.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last = n,
        None => shape.push(n),
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Row vector times matrix: `x[k] · w[k×n]`, summed in index order.
pub fn vecmat(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * n);
    out[..n].fill(0.0);
    for (p, &xp) in x.iter().enumerate() {
        let row = &w[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xp * wv;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(e^y - 1)`, the inverse of softplus for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    map(x, silu_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    map(x, softplus_scalar)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

/// In-place max-subtracted softmax over each `cols`-wide row.
pub fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.rows_cols();
    if cols == 0 {
        return Err(Error::contract("softmax over an empty last extent"));
    }
    let mut data = x.data().to_vec();
    softmax_rows_in_place(&mut data, cols);
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// RMSNorm of each `d`-wide row; returns the per-row inverse RMS for backward.
pub fn rmsnorm_rows(x: &[f64], gamma: &[f64], eps: f64, out: &mut [f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let denom = (ms + eps).sqrt();
        let r = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gamma) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    inv
}

pub fn rmsnorm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = x.rows_cols();
    if gamma.numel() != d {
        return Err(Error::Dimension {
            op: "rmsnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps < 0.0 {
        return Err(Error::contract("rmsnorm eps must be non-negative"));
    }
    let mut out = vec![0.0; x.numel()];
    rmsnorm_rows(x.data(), gamma.data(), eps, &mut out);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn rmsnorm_backward(
    x: &[f64],
    gamma: &[f64],
    inv: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
) {
    let d = gamma.len();
    if let Some(dx) = dx {
        for (((row, dyr), dxr), &r) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).zip(inv) {
            let dot: f64 = row
                .iter()
                .zip(dyr)
                .zip(gamma)
                .map(|((&xv, &g), &gv)| xv * g * gv)
                .sum();
            let coef = r * r * r * dot / d as f64;
            for (((o, &xv), &g), &gv) in dxr.iter_mut().zip(row).zip(dyr).zip(gamma) {
                *o += r * g * gv - xv * coef;
            }
        }
    }
    if let Some(dg) = dgamma {
        for ((row, dyr), &r) in x.chunks(d).zip(dy.chunks(d)).zip(inv) {
            for ((o, &xv), &g) in dg.iter_mut().zip(row).zip(dyr) {
                *o += g * xv * r;
            }
        }
    }
}

/// Causal depthwise convolution of one sequence `h[n×d]` with kernel
/// `w[k×d]`. `history` holds up to `k-1` rows that precede `h` (oldest first);
/// missing rows are zero.
pub fn conv1d_causal_seq(h: &[f64], w: &[f64], d: usize, history: &[f64], out: &mut [f64]) {
    let k = w.len() / d;
    let n = h.len() / d;
    let hist_rows = history.len() / d;
    debug_assert!(hist_rows < k.max(1));
    for t in 0..n {
        let orow = &mut out[t * d..(t + 1) * d];
        orow.fill(0.0);
        for j in 0..k {
            // row index t - (k-1) + j relative to the start of `h`
            let src = t as isize - (k as isize - 1) + j as isize;
            let row: &[f64] = if src >= 0 {
                &h[src as usize * d..(src as usize + 1) * d]
            } else {
                let hidx = hist_rows as isize + src;
                if hidx < 0 {
                    continue;
                }
                &history[hidx as usize * d..(hidx as usize + 1) * d]
            };
            let wrow = &w[j * d..(j + 1) * d];
            for ((o, &wv), &x) in orow.iter_mut().zip(wrow).zip(row) {
                *o += wv * x;
            }
        }
    }
}

pub fn depthwise_conv1d_causal(h: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, d) = h.rows_cols();
    let (k, dw) = w.rows_cols();
    if d != dw || k == 0 {
        return Err(Error::Dimension {
            op: "depthwise_conv1d_causal",
            lhs: h.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * d];
    conv1d_causal_seq(h.data(), w.data(), d, &[], &mut out);
    Ok(Tensor::from_parts(h.shape().to_vec(), out))
}

/// Backward of [`conv1d_causal_seq`] without history.
pub(crate) fn conv1d_causal_backward_seq(
    h: &[f64],
    w: &[f64],
    d: usize,
    dout: &[f64],
    mut dh: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let k = w.len() / d;
    let n = h.len() / d;
    for t in 0..n {
        let g = &dout[t * d..(t + 1) * d];
        for j in 0..k {
            let src = t as isize - (k as isize - 1) + j as isize;
            if src < 0 {
                continue;
            }
            let s = src as usize;
            if let Some(dh) = dh.as_deref_mut() {
                let wrow = &w[j * d..(j + 1) * d];
                for ((o, &wv), &gv) in dh[s * d..(s + 1) * d].iter_mut().zip(wrow).zip(g) {
                    *o += wv * gv;
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let hrow = &h[s * d..(s + 1) * d];
                for ((o, &x), &gv) in dw[j * d..(j + 1) * d].iter_mut().zip(hrow).zip(g) {
                    *o += x * gv;
                }
            }
        }
    }
}

/// Softmax cross entropy per row; returns `(weighted mean NLL, probabilities)`.
///
/// Positions with zero weight contribute nothing. Without weights every
/// position counts once.
pub fn cross_entropy_rows(
    logits: &[f64],
    vocab: usize,
    targets: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if logits.len() != n * vocab {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: vec![logits.len() / vocab.max(1), vocab],
            rhs: vec![n],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: bad,
            bound: vocab,
        });
    }
    let mut probs = logits.to_vec();
    softmax_rows_in_place(&mut probs, vocab);
    let mut total = 0.0;
    let mut wsum = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        total += w * row_nll(row, t);
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(Error::contract("cross_entropy with zero total weight"));
    }
    Ok((total / wsum, probs))
}

/// `logsumexp(row) - row[target]`.
pub fn row_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (_, v) = logits.rows_cols();
    cross_entropy_rows(logits.data(), v, targets, None).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap().data(), a.data());
        let r = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_gemm_matches_explicit() {
        // A is 3x2 stored, used as A^T (2x3); B is 3x4.
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, true, &b, false, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[p * 2 + i] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(20.0) - 19.99999996).abs() < 1e-8);
        let neg = silu_scalar(-20.0);
        assert!((neg + 4.122307e-8).abs() < 1e-13, "{neg}");
    }

    #[test]
    fn softplus_values() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_scalar(100.0) - 100.0).abs() < 1e-12);
        let b = inverse_softplus(0.05);
        assert!((b + 2.9707).abs() < 1e-4, "{b}");
        assert!((softplus_scalar(b) - 0.05).abs() < 1e-15);
        assert!(softplus_scalar(800.0).is_finite());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_lastdim(&t1(&[0.0; 4])).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax_lastdim(&t1(&[1000.0, 0.0])).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1].is_finite());
        let l = softmax_lastdim(&t1(&[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (got, want) in l.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let g = t1(&[1.0, 1.0]);
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(rmsnorm(&z, &g, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = rmsnorm(&x, &g, 0.0).unwrap();
        assert!((y.data()[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.data()[1] - 1.131_370_849_898_476).abs() < 1e-12);
        let x7 = Tensor::from_rows(&[vec![21.0, 28.0]]).unwrap();
        assert!(rmsnorm(&x7, &g, 0.0).unwrap().max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn conv_examples() {
        let h = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = Tensor::full(&[1, 2], 1.0);
        assert_eq!(depthwise_conv1d_causal(&h, &ones).unwrap().data(), h.data());
        let imp = Tensor::new(&[4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let w = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            depthwise_conv1d_causal(&imp, &w).unwrap().data(),
            &[4.0, 3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn conv_history_equals_prefix() {
        let d = 2;
        let h: Vec<f64> = (0..12).map(|v| (v as f64 * 0.7).cos()).collect();
        let w: Vec<f64> = (0..8).map(|v| v as f64 * 0.1 - 0.3).collect();
        let mut full = vec![0.0; 12];
        conv1d_causal_seq(&h, &w, d, &[], &mut full);
        // continue from row 2 with the preceding 2 rows as history
        let mut tail = vec![0.0; 8];
        conv1d_causal_seq(&h[4..], &w, d, &h[0..4], &mut tail);
        assert_eq!(&full[4..], &tail[..]);
    }

    #[test]
    fn cross_entropy_examples() {
        let uni = Tensor::zeros(&[3, 256]);
        let l = cross_entropy(&uni, &[0, 5, 255]).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
        let mut hot = vec![0.0; 4];
        hot[2] = 1000.0;
        let hot = Tensor::new(&[1, 4], hot).unwrap();
        assert!(cross_entropy(&hot, &[2]).unwrap().abs() < 1e-12);
        let two = Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap();
        assert!((cross_entropy(&two, &[0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&two, &[2]),
            Err(Error::Index { index: 2, .. })
        ));
    }
}
