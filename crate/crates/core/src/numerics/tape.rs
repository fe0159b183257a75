//! Reverse-mode autodiff over a linear record of executed operations.
//!
//! Each call on [`Tape`] evaluates eagerly and appends a node. `backward`
//! replays the nodes in exact reverse order, so gradient accumulation order
//! (and therefore every bit of the result) is fixed for a given program.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for operations implemented outside this module (the
/// selective scan and sliding attention). `dinputs[i]` is `Some` exactly for
/// inputs that need a gradient and arrives zero-filled.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], dout: &[f64], dinputs: &mut [Option<Vec<f64>>]);
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Silu(Var),
    Softplus(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv: Vec<f64>,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    Conv {
        h: Var,
        w: Var,
        seq_len: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that records values only; parameters never require gradients.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf; it takes part in differentiation when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.grad = None;
        v.requires_grad = self.grad_enabled;
        self.leaf(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.dim_err(name, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    /// `x[r×d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, d) = tx.rows_cols();
        if tb.numel() != d || tb.shape().len() != 1 {
            return Err(self.dim_err("add_row", x, bias));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = ops::silu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = ops::softplus(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Softplus(x), ng)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gamma));
        let (_, d) = tx.rows_cols();
        if tg.numel() != d {
            return Err(self.dim_err("rmsnorm", x, gamma));
        }
        let mut out = vec![0.0; tx.numel()];
        let inv = ops::rmsnorm_rows(tx.data(), tg.data(), eps, &mut out);
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gamma);
        Ok(self.push(out, Op::RmsNorm { x, gamma, inv }, ng))
    }

    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.rows_cols();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: tok,
                    bound: v,
                });
            }
            data.extend_from_slice(t.row(tok));
        }
        let out = Tensor::from_parts(vec![tokens.len(), d], data);
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            ng,
        ))
    }

    /// Causal depthwise convolution over `h[(B·seq_len)×d]` treated as `B`
    /// independent sequences. `history` (single sequence only) supplies the
    /// rows preceding `h`; it is a constant.
    pub fn conv1d_causal(&mut self, h: Var, w: Var, seq_len: usize, history: Option<&[f64]>) -> Result<Var> {
        let (th, tw) = (self.value(h), self.value(w));
        let (rows, d) = th.rows_cols();
        let (_, dw) = tw.rows_cols();
        if d != dw || seq_len == 0 || rows % seq_len != 0 {
            return Err(self.dim_err("conv1d_causal", h, w));
        }
        if history.is_some() && rows != seq_len {
            return Err(Error::contract("conv history requires a single sequence"));
        }
        let mut out = vec![0.0; rows * d];
        let hist = history.unwrap_or(&[]);
        for (hs, os) in th.data().chunks(seq_len * d).zip(out.chunks_mut(seq_len * d)) {
            ops::conv1d_causal_seq(hs, tw.data(), d, hist, os);
        }
        let out = Tensor::from_parts(th.shape().to_vec(), out);
        let ng = (self.needs(h) || self.needs(w)) && history.is_none();
        Ok(self.push(out, Op::Conv { h, w, seq_len }, ng))
    }

    /// Weighted mean next-token NLL of `logits[n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let t = self.value(logits);
        let (_, v) = t.rows_cols();
        let (loss, probs) = ops::cross_entropy_rows(t.data(), v, targets, weights)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
            },
            ng,
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Populates gradients of every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let n = node.value.numel();
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let n = nodes[v.0].value.numel();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.rows_cols();
                let (_, n) = tb.rows_cols();
                acc(*a, &mut |buf| ops::gemm(m, n, k, g, false, tb.data(), true, 1.0, buf));
                acc(*b, &mut |buf| ops::gemm(k, m, n, ta.data(), true, g, false, 1.0, buf));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((o, d), y) in buf.iter_mut().zip(g).zip(tb.data()) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, d), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                let d = val(*bias).numel();
                acc(*bias, &mut |buf| {
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d * c)),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Silu(x) => {
                let tx = val(*x);
                acc(*x, &mut |buf| {
                    for ((o, d), &v) in buf.iter_mut().zip(g).zip(tx.data()) {
                        *o += d * ops::silu_grad_scalar(v);
                    }
                });
            }
            Op::Softplus(x) => {
                let tx = val(*x);
                acc(*x, &mut |buf| {
                    for ((o, d), &v) in buf.iter_mut().zip(g).zip(tx.data()) {
                        *o += d * ops::sigmoid(v);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let (_, c) = nodes[i].value.rows_cols();
                acc(*x, &mut |buf| {
                    for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gamma, inv } => {
                let (tx, tg) = (val(*x), val(*gamma));
                acc(*x, &mut |buf| ops::rmsnorm_backward(tx.data(), tg.data(), inv, g, Some(buf), None));
                acc(*gamma, &mut |buf| ops::rmsnorm_backward(tx.data(), tg.data(), inv, g, None, Some(buf)));
            }
            Op::Embedding { table, tokens } => {
                let d = val(*table).rows_cols().1;
                acc(*table, &mut |buf| {
                    for (r, &tok) in tokens.iter().enumerate() {
                        for (o, v) in buf[tok * d..(tok + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Conv { h, w, seq_len } => {
                let (th, tw) = (val(*h), val(*w));
                let d = th.rows_cols().1;
                let span = seq_len * d;
                acc(*h, &mut |buf| {
                    for ((hs, gs), bs) in th.data().chunks(span).zip(g.chunks(span)).zip(buf.chunks_mut(span)) {
                        ops::conv1d_causal_backward_seq(hs, tw.data(), d, gs, Some(bs), None);
                    }
                });
                acc(*w, &mut |buf| {
                    for (hs, gs) in th.data().chunks(span).zip(g.chunks(span)) {
                        ops::conv1d_causal_backward_seq(hs, tw.data(), d, gs, None, Some(buf));
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = val(*logits).rows_cols().1;
                let wsum: f64 = weights.as_ref().map_or(targets.len() as f64, |w| w.iter().sum());
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[r]);
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w / wsum;
                        let row = &mut buf[r * v..(r + 1) * v];
                        for (o, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let mut dins: Vec<Option<Vec<f64>>> = inputs
                    .iter()
                    .map(|&v| nodes[v.0].needs_grad.then(|| vec![0.0; nodes[v.0].value.numel()]))
                    .collect();
                op.backward(&vals, g, &mut dins);
                for (&v, din) in inputs.iter().zip(dins) {
                    if let Some(din) = din {
                        acc(v, &mut |buf| buf.iter_mut().zip(&din).for_each(|(o, d)| *o += d));
                    }
                }
            }
        }
    }
}
