//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a [`Node`]; [`Var`] is a cheap handle
//! into the tape. The tape is single-threaded (it uses `RefCell`), but
//! independent tapes can live on different threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f32),
    AddConst(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Gather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    Column(usize, usize),
    Sum(usize),
    Mean(usize),
    Pick(usize, Vec<usize>),
    LnFloor(usize, f32),
    Abs(usize),
    AttnProbs {
        q: usize,
        k: usize,
        heads: usize,
        key_bias: Option<usize>,
        causal: bool,
    },
    AttnApply {
        probs: usize,
        v: usize,
    },
    LastRowMass {
        probs: usize,
        weights: Option<usize>,
        n_visual: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddConst(a) | Reshape(a) | Gelu(a) | SoftmaxRows(a) | LogSoftmaxRows(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Gather(t, _) => vec![*t],
            ConcatRows(parts) => parts.clone(),
            SliceRows(a, _) | Column(a, _) | Sum(a) | Mean(a) | Pick(a, _) | LnFloor(a, _) | Abs(a) => {
                vec![*a]
            }
            AttnProbs { q, k, key_bias, .. } => {
                let mut p = vec![*q, *k];
                p.extend(key_bias);
                p
            }
            AttnApply { probs, v } => vec![*probs, *v],
            LastRowMass { probs, weights, .. } => {
                let mut p = vec![*probs];
                p.extend(weights);
                p
            }
        }
    }
}

/// One recorded value with its producing operation.
#[derive(Debug)]
pub struct Node {
    value: Rc<Tensor>,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn parents(&self) -> Vec<usize> {
        self.op.parents()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = op.parents().iter().any(|&p| self.requires(p));
        self.push(value, op, rg)
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar root. Gradients accumulate into leaves
    /// that were created with [`Tape::param`]; calling twice doubles them.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let n_nodes = root.id + 1;
        let root_len = self.value_of(root.id).len();
        if root_len != 1 {
            return Err(Error::invalid_input(format!(
                "backward needs a scalar root, got {root_len} values"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n_nodes];
        {
            let v = self.value_of(root.id);
            grads[root.id] = Some(Tensor::full(v.shape(), 1.0));
        }
        let nodes = self.nodes.borrow();
        for id in (0..n_nodes).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f32])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(slot.data_mut());
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, gd));
            accumulate(grads, nodes, *b, |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, gd));
            accumulate(grads, nodes, *b, |d| {
                for (x, y) in d.iter_mut().zip(gd) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * av[i];
                }
            });
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, gd));
            let c = val(*b).len();
            accumulate(grads, nodes, *b, |d| {
                for row in gd.chunks(c) {
                    add_into(d, row);
                }
            });
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, |d| tensor::axpy(*s, gd, d)),
        Op::AddConst(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, |d| add_into(d, gd)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            accumulate(grads, nodes, *a, |d| tensor::matmul_bt_acc(gd, bv.data(), d, m, n, k));
            accumulate(grads, nodes, *b, |d| tensor::matmul_at_acc(av.data(), gd, d, m, k, n));
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * gelu_grad(x[i]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let (rows, c) = xv.rows_cols();
            let gain_v = val(*gain).data();
            let xd = xv.data();
            let mut dx = vec![0.0f32; xd.len()];
            let mut dgain = vec![0.0f32; c];
            let mut dbias = vec![0.0f32; c];
            for r in 0..rows {
                let xr = &xd[r * c..(r + 1) * c];
                let gr = &gd[r * c..(r + 1) * c];
                let mut sum_dy = 0.0f32;
                let mut sum_dy_xhat = 0.0f32;
                for j in 0..c {
                    let xhat = (xr[j] - mean[r]) * rstd[r];
                    let dy = gr[j] * gain_v[j];
                    dgain[j] += gr[j] * xhat;
                    dbias[j] += gr[j];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                let inv_c = 1.0 / c as f32;
                for j in 0..c {
                    let xhat = (xr[j] - mean[r]) * rstd[r];
                    let dy = gr[j] * gain_v[j];
                    dx[r * c + j] = rstd[r] * (dy - inv_c * sum_dy - xhat * inv_c * sum_dy_xhat);
                }
            }
            accumulate(grads, nodes, *x, |d| add_into(d, &dx));
            accumulate(grads, nodes, *gain, |d| add_into(d, &dgain));
            accumulate(grads, nodes, *bias, |d| add_into(d, &dbias));
        }
        Op::SoftmaxRows(a) => {
            let (_, c) = out.rows_cols();
            let y = out.data();
            accumulate(grads, nodes, *a, |d| {
                for (r, (yr, gr)) in y.chunks(c).zip(gd.chunks(c)).enumerate() {
                    let s = tensor::dot(yr, gr);
                    for j in 0..c {
                        d[r * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let (_, c) = out.rows_cols();
            let y = out.data();
            accumulate(grads, nodes, *a, |d| {
                for (r, (yr, gr)) in y.chunks(c).zip(gd.chunks(c)).enumerate() {
                    let s: f32 = gr.iter().sum();
                    for j in 0..c {
                        d[r * c + j] += gr[j] - yr[j].exp() * s;
                    }
                }
            });
        }
        Op::Gather(t, ids) => {
            let (_, c) = val(*t).rows_cols();
            accumulate(grads, nodes, *t, |d| {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut d[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                accumulate(grads, nodes, p, |d| add_into(d, &gd[offset..offset + len]));
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            let (_, c) = val(*a).rows_cols();
            let off = start * c;
            accumulate(grads, nodes, *a, |d| add_into(&mut d[off..off + gd.len()], gd));
        }
        Op::Column(a, col) => {
            let (_, c) = val(*a).rows_cols();
            accumulate(grads, nodes, *a, |d| {
                for (r, gv) in gd.iter().enumerate() {
                    d[r * c + col] += gv;
                }
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += gd[0])),
        Op::Mean(a) => {
            let n = val(*a).len() as f32;
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += gd[0] / n));
        }
        Op::Pick(a, idx) => accumulate(grads, nodes, *a, |d| {
            for (gv, &i) in gd.iter().zip(idx) {
                d[i] += gv;
            }
        }),
        Op::LnFloor(a, floor) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    if x[i] > *floor {
                        d[i] += gd[i] / x[i];
                    }
                }
            });
        }
        Op::Abs(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * x[i].signum() * (x[i] != 0.0) as u8 as f32;
                }
            });
        }
        Op::AttnProbs {
            q,
            k,
            heads,
            key_bias,
            causal,
        } => {
            let (qv, kv) = (val(*q), val(*k));
            let (n, dm) = qv.rows_cols();
            let dh = dm / heads;
            let scale = 1.0 / (dh as f32).sqrt();
            let p = out.data();
            // dS = P * (dP - rowsum(dP * P))
            let mut ds = vec![0.0f32; p.len()];
            for h in 0..*heads {
                for i in 0..n {
                    let base = (h * n + i) * n;
                    let lim = if *causal { i + 1 } else { n };
                    let pr = &p[base..base + lim];
                    let gr = &gd[base..base + lim];
                    let s = tensor::dot(pr, gr);
                    for j in 0..lim {
                        ds[base + j] = pr[j] * (gr[j] - s);
                    }
                }
            }
            if let Some(b) = key_bias {
                accumulate(grads, nodes, *b, |d| {
                    for h in 0..*heads {
                        for i in 0..n {
                            let base = (h * n + i) * n;
                            for j in 0..n {
                                d[j] += ds[base + j];
                            }
                        }
                    }
                });
            }
            let (qd, kd) = (qv.data(), kv.data());
            accumulate(grads, nodes, *q, |d| {
                for h in 0..*heads {
                    for i in 0..n {
                        let base = (h * n + i) * n;
                        let dq = &mut d[i * dm + h * dh..i * dm + (h + 1) * dh];
                        for j in 0..n {
                            let w = ds[base + j] * scale;
                            if w != 0.0 {
                                tensor::axpy(w, &kd[j * dm + h * dh..j * dm + (h + 1) * dh], dq);
                            }
                        }
                    }
                }
            });
            accumulate(grads, nodes, *k, |d| {
                for h in 0..*heads {
                    for i in 0..n {
                        let base = (h * n + i) * n;
                        let qr = &qd[i * dm + h * dh..i * dm + (h + 1) * dh];
                        for j in 0..n {
                            let w = ds[base + j] * scale;
                            if w != 0.0 {
                                tensor::axpy(w, qr, &mut d[j * dm + h * dh..j * dm + (h + 1) * dh]);
                            }
                        }
                    }
                }
            });
        }
        Op::AttnApply { probs, v } => {
            let (pv, vv) = (val(*probs), val(*v));
            let heads = pv.shape()[0];
            let n = pv.shape()[1];
            let (_, dm) = vv.rows_cols();
            let dh = dm / heads;
            let (pd, vd) = (pv.data(), vv.data());
            accumulate(grads, nodes, *probs, |d| {
                for h in 0..heads {
                    for i in 0..n {
                        let go = &gd[i * dm + h * dh..i * dm + (h + 1) * dh];
                        for j in 0..n {
                            d[(h * n + i) * n + j] +=
                                tensor::dot(go, &vd[j * dm + h * dh..j * dm + (h + 1) * dh]);
                        }
                    }
                }
            });
            accumulate(grads, nodes, *v, |d| {
                for h in 0..heads {
                    for i in 0..n {
                        let go = &gd[i * dm + h * dh..i * dm + (h + 1) * dh];
                        for j in 0..n {
                            let w = pd[(h * n + i) * n + j];
                            if w != 0.0 {
                                tensor::axpy(w, go, &mut d[j * dm + h * dh..j * dm + (h + 1) * dh]);
                            }
                        }
                    }
                }
            });
        }
        Op::LastRowMass {
            probs,
            weights,
            n_visual,
        } => {
            let pv = val(*probs);
            let heads = pv.shape()[0];
            let n = pv.shape()[1];
            let pd = pv.data();
            let wv = weights.map(|w| val(w).data().to_vec());
            let inv_h = 1.0 / heads as f32;
            accumulate(grads, nodes, *probs, |d| {
                for h in 0..heads {
                    let base = (h * n + n - 1) * n;
                    for j in 0..*n_visual {
                        let w = wv.as_ref().map_or(1.0, |w| w[j]);
                        d[base + j] += gd[0] * inv_h * w;
                    }
                }
            });
            if let Some(w) = weights {
                accumulate(grads, nodes, *w, |d| {
                    for h in 0..heads {
                        let base = (h * n + n - 1) * n;
                        for j in 0..*n_visual {
                            d[j] += gd[0] * inv_h * pd[base + j];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn binary(self, other: Var<'t>, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what);
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.tape.record(Tensor::from_parts(a.shape().to_vec(), data), op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        let (_, c) = a.rows_cols();
        assert_eq!(b.len(), c, "add_bias: width mismatch");
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(c) {
            add_into(row, b.data());
        }
        self.tape.record(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddBias(self.id, bias.id),
        )
    }

    pub fn scale(self, s: f32) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        self.tape
            .record(Tensor::from_parts(a.shape().to_vec(), data), Op::Scale(self.id, s))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Var<'t> {
        let a = self.value();
        same_shape(&a, c, "add_const");
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        self.tape
            .record(Tensor::from_parts(a.shape().to_vec(), data), Op::AddConst(self.id))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let a = self.value();
        assert_eq!(shape.iter().product::<usize>(), a.len(), "reshape: size mismatch");
        self.tape
            .record(Tensor::from_parts(shape, a.data().to_vec()), Op::Reshape(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul needs matrices");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = vec![0.0f32; m * n];
        tensor::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        self.tape
            .record(Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id))
    }

    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        self.tape
            .record(Tensor::from_parts(a.shape().to_vec(), data), Op::Gelu(self.id))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let (rows, c) = x.rows_cols();
        let mut out = vec![0.0f32; x.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mu = xr.iter().sum::<f32>() / c as f32;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[r * c + j] = (xr[j] - mu) * rs * g.data()[j] + b.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.tape.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let (_, c) = a.rows_cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(c) {
            tensor::softmax_in_place(row);
        }
        self.tape
            .record(Tensor::from_parts(a.shape().to_vec(), data), Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let (_, c) = a.rows_cols();
        let data: Vec<f32> = a.data().chunks(c).flat_map(tensor::log_softmax_slice).collect();
        self.tape.record(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::LogSoftmaxRows(self.id),
        )
    }

    /// Rows of `self` (a table) selected by `ids`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let t = self.value();
        let (_, c) = t.rows_cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        self.tape.record(
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::Gather(self.id, ids.to_vec()),
        )
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let c = parts[0].value().rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            let (r, pc) = v.rows_cols();
            assert_eq!(pc, c, "concat_rows: width mismatch");
            rows += r;
            data.extend_from_slice(v.data());
        }
        tape.record(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let a = self.value();
        let (_, c) = a.rows_cols();
        let data = a.data()[start * c..end * c].to_vec();
        self.tape.record(
            Tensor::from_parts(vec![end - start, c], data),
            Op::SliceRows(self.id, start),
        )
    }

    /// Column `col` of a matrix, as a vector.
    pub fn column(self, col: usize) -> Var<'t> {
        let a = self.value();
        let (_, c) = a.rows_cols();
        let data: Vec<f32> = a.data().chunks(c).map(|r| r[col]).collect();
        self.tape
            .record(Tensor::vector(data), Op::Column(self.id, col))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let s = a.sum() / a.len() as f32;
        self.tape.record(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Elements at flat indices, as a vector.
    pub fn pick(self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        let data = idx.iter().map(|&i| a.data()[i]).collect();
        self.tape
            .record(Tensor::vector(data), Op::Pick(self.id, idx.to_vec()))
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn ln_floor(self, floor: f32) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(floor).ln()).collect();
        self.tape
            .record(Tensor::from_parts(a.shape().to_vec(), data), Op::LnFloor(self.id, floor))
    }

    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.abs()).collect();
        self.tape
            .record(Tensor::from_parts(a.shape().to_vec(), data), Op::Abs(self.id))
    }

    /// Causal multi-head attention probabilities `H×n×n` from `q`, `k`
    /// (`n × heads·d_head`). `key_bias`, when given, is a length-`n` vector
    /// added to the logit of every query toward each key position.
    pub fn attn_probs(self, k: Var<'t>, heads: usize, key_bias: Option<Var<'t>>) -> Var<'t> {
        self.attention(k, heads, key_bias, true)
    }

    /// Attention probabilities without the causal restriction.
    pub fn attn_probs_full(self, k: Var<'t>, heads: usize, key_bias: Option<Var<'t>>) -> Var<'t> {
        self.attention(k, heads, key_bias, false)
    }

    fn attention(self, k: Var<'t>, heads: usize, key_bias: Option<Var<'t>>, causal: bool) -> Var<'t> {
        let (qv, kv) = (self.value(), k.value());
        let (n, dm) = qv.rows_cols();
        assert_eq!(kv.rows_cols(), (n, dm), "attn_probs: q/k shape mismatch");
        let dh = dm / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let bias = key_bias.map(|b| b.value());
        if let Some(b) = &bias {
            assert_eq!(b.len(), n, "attn_probs: key bias length");
        }
        let mut p = vec![0.0f32; heads * n * n];
        let (qd, kd) = (qv.data(), kv.data());
        for h in 0..heads {
            for i in 0..n {
                let qr = &qd[i * dm + h * dh..i * dm + (h + 1) * dh];
                let lim = if causal { i + 1 } else { n };
                let row = &mut p[(h * n + i) * n..(h * n + i) * n + lim];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = tensor::dot(qr, &kd[j * dm + h * dh..j * dm + (h + 1) * dh]) * scale;
                    if let Some(b) = &bias {
                        *r += b.data()[j];
                    }
                }
                tensor::softmax_in_place(row);
            }
        }
        self.tape.record(
            Tensor::from_parts(vec![heads, n, n], p),
            Op::AttnProbs {
                q: self.id,
                k: k.id,
                heads,
                key_bias: key_bias.map(|b| b.id),
                causal,
            },
        )
    }

    /// Applies `H×n×n` attention probabilities (`self`) to values `n × H·d_head`.
    pub fn attn_apply(self, v: Var<'t>) -> Var<'t> {
        let (pv, vv) = (self.value(), v.value());
        let heads = pv.shape()[0];
        let n = pv.shape()[1];
        let (_, dm) = vv.rows_cols();
        let dh = dm / heads;
        let mut out = vec![0.0f32; n * dm];
        let (pd, vd) = (pv.data(), vv.data());
        for h in 0..heads {
            for i in 0..n {
                let o = &mut out[i * dm + h * dh..i * dm + (h + 1) * dh];
                for j in 0..n {
                    let w = pd[(h * n + i) * n + j];
                    if w != 0.0 {
                        tensor::axpy(w, &vd[j * dm + h * dh..j * dm + (h + 1) * dh], o);
                    }
                }
            }
        }
        self.tape.record(
            Tensor::from_parts(vec![n, dm], out),
            Op::AttnApply {
                probs: self.id,
                v: v.id,
            },
        )
    }

    /// Head-averaged attention mass from the last position to the first
    /// `n_visual` positions, each weighted by `weights[j]` when given.
    pub fn last_row_mass(self, weights: Option<Var<'t>>, n_visual: usize) -> Var<'t> {
        let pv = self.value();
        let heads = pv.shape()[0];
        let n = pv.shape()[1];
        let w = weights.map(|w| w.value());
        let mut total = 0.0f32;
        for h in 0..heads {
            let base = (h * n + n - 1) * n;
            for j in 0..n_visual {
                let wj = w.as_ref().map_or(1.0, |w| w.data()[j]);
                total += wj * pv.data()[base + j];
            }
        }
        self.tape.record(
            Tensor::scalar(total / heads as f32),
            Op::LastRowMass {
                probs: self.id,
                weights: weights.map(|w| w.id),
                n_visual,
            },
        )
    }
}

/// Standard Gumbel noise with the given shape.
pub fn gumbel_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gumbel()).collect())
}

/// Row-wise `softmax((logits + noise) / tau)` with caller-supplied noise.
pub fn gumbel_softmax_with_noise<'t>(logits: Var<'t>, tau: f32, noise: &Tensor) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid_config(format!("gumbel temperature must be positive, got {tau}")));
    }
    Ok(logits.add_const(noise).scale(1.0 / tau).softmax_rows())
}

/// Gumbel-Softmax relaxation of a row-wise categorical, noise drawn from `rng`.
pub fn gumbel_softmax<'t>(logits: Var<'t>, tau: f32, rng: &mut Rng) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid_config(format!("gumbel temperature must be positive, got {tau}")));
    }
    let noise = gumbel_noise(&logits.shape(), rng);
    gumbel_softmax_with_noise(logits, tau, &noise)
}

/// Compares reverse-mode gradients of a scalar function against sixth-order
/// central finite differences (stencil `±h`, `±2h`, `±3h`).
///
/// The error reported for each parameter tensor is
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`; the maximum
/// over tensors is returned. `f` must be deterministic.
pub fn gradcheck<F>(f: F, params: &[Tensor], h: f32) -> Result<f32>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| v.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = ps.iter().map(|p| t.constant(p.clone())).collect();
        Ok(f(&t, &vs)?.item() as f64)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            let mut at = |offset: f32| -> Result<f64> {
                work[pi].data_mut()[e] = orig + offset;
                eval(&work)
            };
            let mut diff = |k: f32| -> Result<f64> { Ok(at(k * h)? - at(-k * h)?) };
            let (d1, d2, d3) = (diff(1.0)?, diff(2.0)?, diff(3.0)?);
            work[pi].data_mut()[e] = orig;
            let numeric = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h as f64);
            let a = grad.data()[e] as f64;
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-8);

        worst = worst.max(diff_sq.sqrt() / denom);
    }
    Ok(worst as f32)
}
