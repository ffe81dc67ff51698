//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! records once in reverse and returns a [`Gradients`] table.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{numel, strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(UnaryKind, usize),
    Reduce {
        src: usize,
        /// Output flat index for every input element.
        map: Vec<usize>,
        count: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    MatMul(usize, usize),
    Bmm(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    BroadcastTo(usize),
    Gather {
        src: usize,
        index: Vec<Vec<usize>>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    PairwiseSqDists(usize),
    RowScale(usize, usize),
    ColScale(usize, usize),
    DiagEmbed(usize),
    Trace(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner operation recorder. Not `Sync`; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every recorded value that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()])
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

    /// Records a leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push_raw(value, Op::Leaf, requires_grad);
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a copy of a parameter, honouring its `requires_grad` flag.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        let mut v = value.clone();
        v.zero_grad();
        let rg = v.requires_grad();
        self.leaf(v, rg)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Tensor, op: Op, needs_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        nodes.len() - 1
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.needs_grad(i));
        let id = self.push_raw(value, op, needs_grad);
        Ok(Var { tape: self, id })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Reduces a gradient to a scalar operand's shape when it was broadcast.
fn fit(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = g.len();
            let ai = |i: usize| if av.numel() == 1 { av.data()[0] } else { av.data()[i] };
            let bi = |i: usize| if bv.numel() == 1 { bv.data()[0] } else { bv.data()[i] };
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (g.to_vec(), g.to_vec()),
                BinaryKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                BinaryKind::Mul => (
                    (0..n).map(|i| g[i] * bi(i)).collect(),
                    (0..n).map(|i| g[i] * ai(i)).collect(),
                ),
                BinaryKind::Div => (
                    (0..n).map(|i| g[i] / bi(i)).collect(),
                    (0..n).map(|i| -g[i] * ai(i) / (bi(i) * bi(i))).collect(),
                ),
            };
            acc(grads, nodes, *a, fit(&ga, av.numel()));
            acc(grads, nodes, *b, fit(&gb, bv.numel()));
        }
        Op::AddBroadcast(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            let inner = val(*b).numel();
            let mut gb = vec![0.0; inner];
            for chunk in g.chunks(inner) {
                gb.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
            }
            acc(grads, nodes, *b, gb);
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, g.iter().map(|x| x * c).collect()),
        Op::AddScalar(a) => acc(grads, nodes, *a, g.to_vec()),
        Op::Unary(kind, a) => {
            let x = val(*a).data();
            let y = out.data();
            let ga: Vec<f64> = match kind {
                UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryKind::Sqrt => g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect(),
                UnaryKind::Gelu => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect(),
            };
            acc(grads, nodes, *a, ga);
        }
        Op::Reduce {
            src,
            map,
            count,
            kind,
            argmax,
        } => {
            let ga: Vec<f64> = match kind {
                ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
                ReduceKind::Mean => {
                    let inv = 1.0 / *count as f64;
                    map.iter().map(|&o| g[o] * inv).collect()
                }
                ReduceKind::Max => {
                    let mut ga = vec![0.0; map.len()];
                    for (o, &i) in argmax.iter().enumerate() {
                        ga[i] += g[o];
                    }
                    ga
                }
            };
            acc(grads, nodes, *src, ga);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].needs_grad {
                let mut ga = vec![0.0; m * k];
                gemm_nt(g, bv.data(), &mut ga, m, n, k);
                acc(grads, nodes, *a, ga);
            }
            if nodes[*b].needs_grad {
                let mut gb = vec![0.0; k * n];
                gemm_tn(av.data(), g, &mut gb, m, k, n);
                acc(grads, nodes, *b, gb);
            }
        }
        Op::Bmm(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if nodes[*a].needs_grad {
                let mut ga = vec![0.0; batch * m * k];
                for t in 0..batch {
                    gemm_nt(
                        &g[t * m * n..(t + 1) * m * n],
                        &bv.data()[t * k * n..(t + 1) * k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                acc(grads, nodes, *a, ga);
            }
            if nodes[*b].needs_grad {
                let mut gb = vec![0.0; batch * k * n];
                for t in 0..batch {
                    gemm_tn(
                        &av.data()[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(grads, nodes, *b, gb);
            }
        }
        Op::Reshape(a) => acc(grads, nodes, *a, g.to_vec()),
        Op::Permute(a, perm) => {
            let (ga, _) = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
            acc(grads, nodes, *a, ga);
        }
        Op::Narrow { src, axis, start } => {
            let sshape = val(*src).shape();
            let (outer, ext, inner) = kernels::split_axis(sshape, *axis);
            let len = out.shape()[*axis];
            let mut ga = vec![0.0; numel(sshape)];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                let srcoff = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[srcoff..srcoff + len * inner]);
            }
            acc(grads, nodes, *src, ga);
        }
        Op::Concat { srcs, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &s in srcs {
                let ext = val(s).shape()[*axis];
                let mut gs = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let from = (o * total + offset) * inner;
                    gs.extend_from_slice(&g[from..from + ext * inner]);
                }
                acc(grads, nodes, s, gs);
                offset += ext;
            }
        }
        Op::BroadcastTo(a) => {
            let inner = val(*a).numel();
            let mut ga = vec![0.0; inner];
            for chunk in g.chunks(inner) {
                ga.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
            }
            acc(grads, nodes, *a, ga);
        }
        Op::Gather { src, index } => {
            let sshape = val(*src).shape();
            let (p, d) = (sshape[1], sshape[2]);
            let t = out.shape()[1];
            let mut ga = vec![0.0; numel(sshape)];
            for (b, idx) in index.iter().enumerate() {
                for (j, &i) in idx.iter().enumerate() {
                    let dst = (b * p + i) * d;
                    let from = (b * t + j) * d;
                    ga[dst..dst + d]
                        .iter_mut()
                        .zip(&g[from..from + d])
                        .for_each(|(s, x)| *s += x);
                }
            }
            acc(grads, nodes, *src, ga);
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            acc(grads, nodes, *a, ga);
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                let total: f64 = gr.iter().sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gv - yv.exp() * total;
                }
            }
            acc(grads, nodes, *a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = *out.shape().last().unwrap();
            let gv = val(*gain).data();
            let mut ggain = vec![0.0; n];
            let mut gbias = vec![0.0; n];
            let mut gx = vec![0.0; xhat.len()];
            let nf = n as f64;
            for (r, ((gr, xr), dst)) in g
                .chunks(n)
                .zip(xhat.chunks(n))
                .zip(gx.chunks_mut(n))
                .enumerate()
            {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..n {
                    ggain[j] += gr[j] * xr[j];
                    gbias[j] += gr[j];
                    let d = gr[j] * gv[j];
                    sum_d += d;
                    sum_dx += d * xr[j];
                }
                let s = rstd[r] / nf;
                for j in 0..n {
                    let d = gr[j] * gv[j];
                    dst[j] = s * (nf * d - sum_d - xr[j] * sum_dx);
                }
            }
            acc(grads, nodes, *x, gx);
            acc(grads, nodes, *gain, ggain);
            acc(grads, nodes, *bias, gbias);
        }
        Op::PairwiseSqDists(a) => {
            let z = val(*a);
            let (b, d) = (z.shape()[0], z.shape()[1]);
            let zd = z.data();
            let mut gz = vec![0.0; b * d];
            for i in 0..b {
                for j in 0..b {
                    if i == j {
                        continue;
                    }
                    let w = 2.0 * (g[i * b + j] + g[j * b + i]);
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        gz[i * d + c] += w * (zd[i * d + c] - zd[j * d + c]);
                    }
                }
            }
            acc(grads, nodes, *a, gz);
        }
        Op::RowScale(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let cols = xv.shape()[1];
            let gx: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * sv.data()[i / cols])
                .collect();
            let gs: Vec<f64> = g
                .chunks(cols)
                .zip(xv.data().chunks(cols))
                .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                .collect();
            acc(grads, nodes, *x, gx);
            acc(grads, nodes, *s, gs);
        }
        Op::ColScale(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let cols = xv.shape()[1];
            let gx: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * sv.data()[i % cols])
                .collect();
            let mut gs = vec![0.0; cols];
            for (gr, xr) in g.chunks(cols).zip(xv.data().chunks(cols)) {
                for j in 0..cols {
                    gs[j] += gr[j] * xr[j];
                }
            }
            acc(grads, nodes, *x, gx);
            acc(grads, nodes, *s, gs);
        }
        Op::DiagEmbed(a) => {
            let n = val(*a).numel();
            acc(grads, nodes, *a, (0..n).map(|i| g[i * n + i]).collect());
        }
        Op::Trace(a) => {
            let n = val(*a).shape()[0];
            let mut ga = vec![0.0; n * n];
            for i in 0..n {
                ga[i * n + i] = g[0];
            }
            acc(grads, nodes, *a, ga);
        }
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(dim_err(op, a.shape(), b.shape()))
    }
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    // A [1]-shaped operand also counts when it is the trailing extent.
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn check_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands recorded on different tapes".into()))
        }
    }

    /// Same value as a gradient-free leaf.
    pub fn detach(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    // ── Elementwise ───────────────────────────────────────────────────

    fn binary(&self, other: &Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = same_or_scalar(name, &a, &b)?;
        let n = numel(&shape);
        let ai = |i: usize| if a.numel() == 1 { a.data()[0] } else { a.data()[i] };
        let bi = |i: usize| if b.numel() == 1 { b.data()[0] } else { b.data()[i] };
        let data: Vec<f64> = match kind {
            BinaryKind::Add => (0..n).map(|i| ai(i) + bi(i)).collect(),
            BinaryKind::Sub => (0..n).map(|i| ai(i) - bi(i)).collect(),
            BinaryKind::Mul => (0..n).map(|i| ai(i) * bi(i)).collect(),
            BinaryKind::Div => {
                if (0..b.numel()).any(|i| b.data()[i] == 0.0) {
                    return Err(TensorError::Domain {
                        op: name,
                        detail: "division by zero".into(),
                    });
                }
                (0..n).map(|i| ai(i) / bi(i)).collect()
            }
        };
        self.tape.push(
            name,
            Tensor::new(shape, data)?,
            Op::Binary(kind, self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    /// `self + other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn add_broadcast(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if !is_suffix(a.shape(), b.shape()) {
            return Err(dim_err("add_broadcast", a.shape(), b.shape()));
        }
        let inner = b.numel();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % inner])
            .collect();
        self.tape.push(
            "add_broadcast",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddBroadcast(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.tape.push(
            "scale",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Scale(self.id, c),
            &[self.id],
        )
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + c).collect();
        self.tape.push(
            "add_scalar",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddScalar(self.id),
            &[self.id],
        )
    }

    fn unary(&self, kind: UnaryKind) -> Result<Var<'t>> {
        let a = self.value();
        let (name, data): (&'static str, Vec<f64>) = match kind {
            UnaryKind::Exp => ("exp", a.data().iter().map(|x| x.exp()).collect()),
            UnaryKind::Log => {
                if let Some(bad) = a.data().iter().find(|&&x| x <= 0.0) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("argument {bad} is not strictly positive"),
                    });
                }
                ("log", a.data().iter().map(|x| x.ln()).collect())
            }
            UnaryKind::Sqrt => {
                if let Some(bad) = a.data().iter().find(|&&x| x < 0.0) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        detail: format!("argument {bad} is negative"),
                    });
                }
                ("sqrt", a.data().iter().map(|x| x.sqrt()).collect())
            }
            UnaryKind::Gelu => ("gelu", a.data().iter().map(|&x| kernels::gelu(x)).collect()),
        };
        self.tape.push(
            name,
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Unary(kind, self.id),
            &[self.id],
        )
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    // ── Reductions ────────────────────────────────────────────────────

    /// Reduces over `axes`, removing them from the shape (a full reduction
    /// yields shape `[1]`).
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        let rank = shape.len();
        if axes.iter().any(|&ax| ax >= rank) {
            return Err(TensorError::Contract(format!(
                "reduction axes {axes:?} invalid for rank {rank}"
            )));
        }
        let keep: Vec<usize> = (0..rank).filter(|ax| !axes.contains(ax)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&ax| shape[ax]).collect()
        };
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        if count == 0 {
            return Err(TensorError::Degenerate {
                op: "reduce",
                detail: "empty reduction extent".into(),
            });
        }
        let in_strides = strides(shape);
        let out_strides = strides(&out_shape);
        let map: Vec<usize> = (0..a.numel())
            .map(|flat| {
                keep.iter()
                    .enumerate()
                    .map(|(k, &ax)| ((flat / in_strides[ax]) % shape[ax]) * out_strides[k])
                    .sum()
            })
            .collect();
        let n_out = numel(&out_shape);
        let mut argmax = Vec::new();
        let data = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut out = vec![0.0; n_out];
                for (x, &o) in a.data().iter().zip(&map) {
                    out[o] += x;
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / count as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                out
            }
            ReduceKind::Max => {
                let mut out = vec![f64::NEG_INFINITY; n_out];
                argmax = vec![0; n_out];
                for (i, (&x, &o)) in a.data().iter().zip(&map).enumerate() {
                    if x > out[o] {
                        out[o] = x;
                        argmax[o] = i;
                    }
                }
                out
            }
        };
        self.tape.push(
            "reduce",
            Tensor::new(out_shape, data)?,
            Op::Reduce {
                src: self.id,
                map,
                count,
                kind,
                argmax,
            },
            &[self.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(ReduceKind::Sum, &axes)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(ReduceKind::Mean, &axes)
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    pub fn max_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, axes)
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        self.tape.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Batched matmul: [N×M×K] · [N×K×P] → [N×M×P].
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(dim_err("bmm", a.shape(), b.shape()));
        }
        let (batch, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm_nn(
                &a.data()[t * m * k..(t + 1) * m * k],
                &b.data()[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.tape.push(
            "bmm",
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// `x · weight + bias` over the last axis; `weight` is `[in×out]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let wshape = weight.shape();
        let last = *shape.last().unwrap();
        if wshape.len() != 2 || wshape[0] != last {
            return Err(dim_err("linear", &shape, &wshape));
        }
        let rows = numel(&shape) / last;
        let flat = self.reshape(&[rows, last])?;
        let y = flat.matmul(weight)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = wshape[1];
        let y = y.reshape(&out_shape)?;
        match bias {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }

    pub fn trace(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(dim_err("trace", a.shape(), &[]));
        }
        let n = a.shape()[0];
        let t: f64 = (0..n).map(|i| a.data()[i * n + i]).sum();
        self.tape.push("trace", Tensor::scalar(t), Op::Trace(self.id), &[self.id])
    }

    /// Square matrix with `self` (a vector) on the diagonal.
    pub fn diag_embed(&self) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.numel();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n + i] = a.data()[i];
        }
        self.tape.push(
            "diag_embed",
            Tensor::new(vec![n, n], out)?,
            Op::DiagEmbed(self.id),
            &[self.id],
        )
    }

    /// out[i,j] = self[i,j] · s[i]
    pub fn row_scale(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.scale_axis(s, true)
    }

    /// out[i,j] = self[i,j] · s[j]
    pub fn col_scale(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.scale_axis(s, false)
    }

    fn scale_axis(&self, s: &Var<'t>, rows: bool) -> Result<Var<'t>> {
        self.check_tape(s)?;
        let (x, sv) = (self.value(), s.value());
        let name = if rows { "row_scale" } else { "col_scale" };
        let ext = if rows { x.shape()[0] } else { x.shape()[1] };
        if x.rank() != 2 || sv.numel() != ext {
            return Err(dim_err(name, x.shape(), sv.shape()));
        }
        let cols = x.shape()[1];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[if rows { i / cols } else { i % cols }])
            .collect();
        let op = if rows {
            Op::RowScale(self.id, s.id)
        } else {
            Op::ColScale(self.id, s.id)
        };
        self.tape.push(name, Tensor::new(x.shape().to_vec(), data)?, op, &[self.id, s.id])
    }

    /// Squared Euclidean distances between rows, `Σ_c (z_ic − z_jc)²`.
    pub fn pairwise_sq_dists(&self) -> Result<Var<'t>> {
        let z = self.value();
        if z.rank() != 2 {
            return Err(dim_err("pairwise_sq_dists", z.shape(), &[]));
        }
        let (b, d) = (z.shape()[0], z.shape()[1]);
        let zd = z.data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let s: f64 = (0..d)
                    .map(|c| {
                        let diff = zd[i * d + c] - zd[j * d + c];
                        diff * diff
                    })
                    .sum();
                out[i * b + j] = s;
                out[j * b + i] = s;
            }
        }
        self.tape.push(
            "pairwise_sq_dists",
            Tensor::new(vec![b, b], out)?,
            Op::PairwiseSqDists(self.id),
            &[self.id],
        )
    }

    // ── Shape manipulation ────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let t = a.reshape(shape)?;
        self.tape.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..a.rank()).collect::<Vec<_>>() {
            return Err(dim_err("permute", a.shape(), perm));
        }
        let (data, shape) = kernels::permute(a.data(), a.shape(), perm);
        self.tape.push(
            "permute",
            Tensor::new(shape, data)?,
            Op::Permute(self.id, perm.to_vec()),
            &[self.id],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(dim_err("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
            return Err(TensorError::Contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {:?}",
                a.shape()
            )));
        }
        let (outer, ext, inner) = kernels::split_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            data.extend_from_slice(&a.data()[from..from + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            "narrow",
            Tensor::new(shape, data)?,
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Repeats `self` over new leading axes so that its shape becomes `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if !is_suffix(shape, a.shape()) {
            return Err(dim_err("broadcast_to", a.shape(), shape));
        }
        let reps = numel(shape) / a.numel();
        let data = a.data().repeat(reps);
        self.tape.push(
            "broadcast_to",
            Tensor::new(shape.to_vec(), data)?,
            Op::BroadcastTo(self.id),
            &[self.id],
        )
    }

    /// Selects `index[b]` along axis 1 of a `[B×P×D]` tensor.
    pub fn gather_rows(&self, index: &[Vec<usize>]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 3 || index.len() != a.shape()[0] {
            return Err(dim_err("gather_rows", a.shape(), &[index.len()]));
        }
        let (p, d) = (a.shape()[1], a.shape()[2]);
        let t = index.first().map_or(0, Vec::len);
        if t == 0 || index.iter().any(|ix| ix.len() != t || ix.iter().any(|&i| i >= p)) {
            return Err(TensorError::Contract("gather_rows: ragged or out-of-range index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * t * d);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let from = (b * p + i) * d;
                data.extend_from_slice(&a.data()[from..from + d]);
            }
        }
        self.tape.push(
            "gather_rows",
            Tensor::new(vec![index.len(), t, d], data)?,
            Op::Gather {
                src: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        )
    }

    // ── Neural-network primitives ─────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let mut data = Vec::with_capacity(a.numel());
        for row in a.data().chunks(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut s = 0.0;
            for &x in row {
                let e = (x - m).exp();
                s += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= s);
        }
        self.tape.push(
            "softmax",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    /// Log-softmax over the last axis, computed with the max-shift.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let mut data = Vec::with_capacity(a.numel());
        for row in a.data().chunks(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        self.tape.push(
            "log_softmax",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::LogSoftmax(self.id),
            &[self.id],
        )
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.check_tape(gain)?;
        self.check_tape(bias)?;
        if eps <= 0.0 {
            return Err(TensorError::Domain {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.numel() != n || bv.numel() != n {
            return Err(dim_err("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.numel() / n;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        self.tape.push(
            "layer_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        )
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    for (p, v) in parts.iter().zip(&values) {
        first.check_tape(p)?;
        let s = v.shape();
        if s.len() != base.len()
            || axis >= s.len()
            || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(dim_err("concat", &base, s));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = kernels::split_axis(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let ext = v.shape()[axis];
            let from = o * ext * inner;
            data.extend_from_slice(&v.data()[from..from + ext * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(
        "concat",
        Tensor::new(shape, data)?,
        Op::Concat {
            srcs: ids.clone(),
            axis,
        },
        &ids,
    )
}
