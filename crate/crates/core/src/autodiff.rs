//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation executed through a [`Var`] appends a node to its [`Tape`].
//! Nodes are stored in execution order, so walking the tape backwards is a
//! valid reverse topological order. A tape serves exactly one forward pass
//! and is consumed by [`Tape::backward`].
//!
//! ```
//! use cdkit::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.var(&Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
//! let loss = x.mul(x).unwrap().sum(None).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), vec![2.0, 4.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Identifies an operation family, used to target fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Clamp,
    Sum,
    Mean,
    Max,
    RowL2Normalize,
    Transpose,
    ConcatRows,
    AddBias,
    BatchNorm,
    NtXent,
    Conv2d,
    AvgPool2,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::RowL2Normalize,
        OpKind::Transpose,
        OpKind::ConcatRows,
        OpKind::AddBias,
        OpKind::BatchNorm,
        OpKind::NtXent,
        OpKind::Conv2d,
        OpKind::AvgPool2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::RowL2Normalize => "row_l2_normalize",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::AddBias => "add_bias",
            OpKind::BatchNorm => "batch_norm",
            OpKind::NtXent => "nt_xent",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool2 => "avg_pool2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial layout of a batch of images stored as `[N, C*H*W]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageGeom {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Reduce {
        x: usize,
        kind: Reduce,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    RowL2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    Transpose(usize),
    ConcatRows(usize, usize),
    AddBias(usize, usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    NtXent {
        sim: usize,
        pos: Vec<usize>,
        probs: Vec<T>,
        tau: T,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ImageGeom,
        out_channels: usize,
        kernel: usize,
    },
    AvgPool2 {
        x: usize,
        geom: ImageGeom,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Reduce { kind, .. } => match kind {
                Reduce::Sum => OpKind::Sum,
                Reduce::Mean => OpKind::Mean,
                Reduce::Max => OpKind::Max,
            },
            Op::RowL2Normalize { .. } => OpKind::RowL2Normalize,
            Op::Transpose(_) => OpKind::Transpose,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::AddBias(..) => OpKind::AddBias,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::NtXent { .. } => OpKind::NtXent,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2 { .. } => OpKind::AvgPool2,
        })
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    fault: Cell<Option<OpKind>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Result of [`Tape::backward`]: one gradient buffer per node that
/// depends on a `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(self.shapes[var.id].clone(), g.clone()).ok()
    }

    /// Gradient w.r.t. `var`, zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Result<Vec<T>> {
        let n = self
            .shapes
            .get(var.id)
            .map(|s| numel(s))
            .ok_or_else(|| Error::State(format!("node {} is not on this tape", var.id)))?;
        Ok(self.grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); n]))
    }

    /// Stores the gradient of `var` into `target.grad`.
    pub fn write_into(&self, var: Var<'_, T>, target: &mut Tensor<T>) -> Result<()> {
        target.set_grad(self.wrt(var)?)
    }
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) {
    debug_assert!(
        data.iter().all(|v| !v.is_nan()),
        "{op} produced NaN from finite inputs"
    );
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            fault: Cell::new(None),
        }
    }

    /// Test hook: every backward rule of `kind` is scaled by 1.5, which a
    /// gradient check must detect.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places `t` on the tape, differentiable iff `t.requires_grad()`.
    pub fn var(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Places `t` on the tape as a differentiable leaf.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(Vec::new(), vec![v], false)
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates d`loss`/d(node) to every node. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        if !is_scalar(&nodes[loss.id].shape) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let mut contribs: Vec<(usize, Vec<T>)> = Vec::with_capacity(3);
            backward_node(&nodes, node, &g, &mut contribs);
            let scale = if fault.is_some() && node.op.kind() == fault {
                T::of(1.5)
            } else {
                T::one()
            };
            for (input, mut dg) in contribs {
                if !nodes[input].requires_grad {
                    continue;
                }
                if scale != T::one() {
                    dg.iter_mut().for_each(|v| *v = *v * scale);
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(dg).for_each(|(a, d)| *a = *a + d),
                    slot => *slot = Some(dg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Sum a gradient of shape `out` down to a broadcast operand.
fn unbroadcast<T: Scalar>(g: &[T], operand_len: usize) -> Vec<T> {
    if operand_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().copied().sum()]
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], out: &mut Vec<(usize, Vec<T>)>) {
    let val = |id: usize| nodes[id].data.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let q = nodes[*b].shape[1];
            let (av, bv) = (val(*a), val(*b));
            // dA = dC · Bᵀ
            let mut da = vec![T::zero(); m * p];
            for i in 0..m {
                for k in 0..p {
                    let mut s = T::zero();
                    for j in 0..q {
                        s = s + g[i * q + j] * bv[k * q + j];
                    }
                    da[i * p + k] = s;
                }
            }
            // dB = Aᵀ · dC
            let mut db = vec![T::zero(); p * q];
            for i in 0..m {
                for k in 0..p {
                    let aik = av[i * p + k];
                    for j in 0..q {
                        db[k * q + j] = db[k * q + j] + aik * g[i * q + j];
                    }
                }
            }
            out.push((*a, da));
            out.push((*b, db));
        }
        Op::Add(a, b) => {
            out.push((*a, unbroadcast(g, val(*a).len())));
            out.push((*b, unbroadcast(g, val(*b).len())));
        }
        Op::Sub(a, b) => {
            out.push((*a, unbroadcast(g, val(*a).len())));
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            out.push((*b, unbroadcast(&neg, val(*b).len())));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let pick = |s: &[T], i: usize| if s.len() == 1 { s[0] } else { s[i] };
            let ga: Vec<T> = g.iter().enumerate().map(|(i, &d)| d * pick(bv, i)).collect();
            let gb: Vec<T> = g.iter().enumerate().map(|(i, &d)| d * pick(av, i)).collect();
            out.push((*a, unbroadcast(&ga, av.len())));
            out.push((*b, unbroadcast(&gb, bv.len())));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let pick = |s: &[T], i: usize| if s.len() == 1 { s[0] } else { s[i] };
            let ga: Vec<T> = g.iter().enumerate().map(|(i, &d)| d / pick(bv, i)).collect();
            let gb: Vec<T> = g
                .iter()
                .enumerate()
                .map(|(i, &d)| {
                    let bi = pick(bv, i);
                    -d * pick(av, i) / (bi * bi)
                })
                .collect();
            out.push((*a, unbroadcast(&ga, av.len())));
            out.push((*b, unbroadcast(&gb, bv.len())));
        }
        Op::Neg(x) => out.push((*x, g.iter().map(|&v| -v).collect())),
        Op::Exp(x) => out.push((*x, g.iter().zip(&node.data).map(|(&d, &y)| d * y).collect())),
        Op::Log(x) => out.push((*x, g.iter().zip(val(*x)).map(|(&d, &v)| d / v).collect())),
        Op::Relu(x) => out.push((
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                .collect(),
        )),
        Op::Sigmoid(x) => out.push((
            *x,
            g.iter()
                .zip(&node.data)
                .map(|(&d, &s)| d * s * (T::one() - s))
                .collect(),
        )),
        Op::Clamp { x, lo, hi } => out.push((
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { T::zero() })
                .collect(),
        )),
        Op::Reduce {
            x,
            kind,
            axis,
            argmax,
        } => {
            let shape = &nodes[*x].shape;
            let (outer, len, inner) = reduce_layout(shape, *axis);
            let mut dx = vec![T::zero(); numel(shape)];
            let scale = match kind {
                Reduce::Mean => T::one() / T::of_usize(len),
                _ => T::one(),
            };
            for o in 0..outer {
                for i in 0..inner {
                    let gi = g[o * inner + i];
                    match kind {
                        Reduce::Max => {
                            let l = argmax[o * inner + i];
                            dx[(o * len + l) * inner + i] = gi;
                        }
                        _ => {
                            for l in 0..len {
                                dx[(o * len + l) * inner + i] = gi * scale;
                            }
                        }
                    }
                }
            }
            out.push((*x, dx));
        }
        Op::RowL2Normalize { x, norms } => {
            // y = x/‖x‖, dx = (dy − y (y·dy)) / ‖x‖
            let d = nodes[*x].shape[1];
            let y = &node.data;
            let mut dx = vec![T::zero(); y.len()];
            for (r, &n) in norms.iter().enumerate() {
                let row = r * d..(r + 1) * d;
                let dot: T = y[row.clone()]
                    .iter()
                    .zip(&g[row.clone()])
                    .map(|(&a, &b)| a * b)
                    .sum();
                for k in row {
                    dx[k] = (g[k] - y[k] * dot) / n;
                }
            }
            out.push((*x, dx));
        }
        Op::Transpose(x) => {
            let (m, n) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            out.push((*x, dx));
        }
        Op::ConcatRows(a, b) => {
            let la = val(*a).len();
            out.push((*a, g[..la].to_vec()));
            out.push((*b, g[la..].to_vec()));
        }
        Op::AddBias(x, b) => {
            let q = val(*b).len();
            let mut db = vec![T::zero(); q];
            for row in g.chunks(q) {
                db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            out.push((*x, g.to_vec()));
            out.push((*b, db));
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (n, f) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let gv = val(*gamma);
            let mut dgamma = vec![T::zero(); f];
            let mut dbeta = vec![T::zero(); f];
            for i in 0..n {
                for j in 0..f {
                    let k = i * f + j;
                    dgamma[j] = dgamma[j] + g[k] * xhat[k];
                    dbeta[j] = dbeta[j] + g[k];
                }
            }
            let mut dx = vec![T::zero(); n * f];
            if *batch_stats {
                // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = dy·γ
                let nf = T::of_usize(n);
                for j in 0..f {
                    let sum_dxhat = dbeta[j] * gv[j];
                    let sum_dxhat_xhat = dgamma[j] * gv[j];
                    for i in 0..n {
                        let k = i * f + j;
                        let dxhat = g[k] * gv[j];
                        dx[k] = inv_std[j] / nf * (nf * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                    }
                }
            } else {
                for i in 0..n {
                    for j in 0..f {
                        dx[i * f + j] = g[i * f + j] * gv[j] * inv_std[j];
                    }
                }
            }
            out.push((*x, dx));
            out.push((*gamma, dgamma));
            out.push((*beta, dbeta));
        }
        Op::NtXent {
            sim,
            pos,
            probs,
            tau,
        } => {
            // dℓᵢ/ds_ik = (p_ik − [k = pos(i)]) / τ over k ≠ i; loss is the mean.
            let m = pos.len();
            let scale = g[0] / (T::of_usize(m) * *tau);
            let mut ds = vec![T::zero(); m * m];
            for i in 0..m {
                for k in 0..m {
                    if k == i {
                        continue;
                    }
                    let ind = if k == pos[i] { T::one() } else { T::zero() };
                    ds[i * m + k] = (probs[i * m + k] - ind) * scale;
                }
            }
            out.push((*sim, ds));
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            out_channels,
            kernel,
        } => {
            let (dx, dw, db) = conv2d_backward(val(*x), val(*w), g, *geom, *out_channels, *kernel);
            out.push((*x, dx));
            out.push((*w, dw));
            out.push((*b, db));
        }
        Op::AvgPool2 { x, geom } => {
            let n = nodes[*x].shape[0];
            let (oh, ow) = (geom.height / 2, geom.width / 2);
            let mut dx = vec![T::zero(); n * geom.len()];
            let quarter = T::of(0.25);
            for s in 0..n {
                for c in 0..geom.channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gi = g[((s * geom.channels + c) * oh + oy) * ow + ox] * quarter;
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let iy = 2 * oy + dy;
                                let ix = 2 * ox + dxo;
                                dx[s * geom.len() + (c * geom.height + iy) * geom.width + ix] = gi;
                            }
                        }
                    }
                }
            }
            out.push((*x, dx));
        }
    }
}

fn reduce_layout(shape: &[usize], axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, numel(shape), 1),
        Some(a) => (
            shape[..a].iter().product(),
            shape[a],
            shape[a + 1..].iter().product(),
        ),
    }
}

fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    geom: ImageGeom,
    co: usize,
    k: usize,
) -> Vec<T> {
    let (ci, h, wd) = (geom.channels, geom.height, geom.width);
    let pad = k / 2;
    let mut out = vec![T::zero(); n * co * h * wd];
    for s in 0..n {
        let xs = &x[s * geom.len()..(s + 1) * geom.len()];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + w[((o * ci + c) * k + ky) * k + kx]
                                        * xs[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((s * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    geom: ImageGeom,
    co: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ci, h, wd) = (geom.channels, geom.height, geom.width);
    let n = x.len() / geom.len();
    let pad = k / 2;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); co];
    for s in 0..n {
        let base = s * geom.len();
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let gi = g[((s * co + o) * h + y) * wd + xx];
                    db[o] = db[o] + gi;
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = base + (c * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * k + ky) * k + kx;
                                dw[wi] = dw[wi] + gi * x[xi];
                                dx[xi] = dx[xi] + gi * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn data(&self) -> Vec<T> {
        self.tape.node(self.id).data.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let n = self.tape.node(self.id);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape consistent")
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn check_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
    }

    fn unary(self, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Var<'t, T> {
        let (shape, data) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect::<Vec<_>>())
        };
        check_finite(name, &data);
        self.tape.push(shape, data, op, self.requires_grad())
    }

    fn binary(self, rhs: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        self.check_tape(&rhs);
        let (name, op) = match kind {
            Binary::Add => ("add", Op::Add(self.id, rhs.id)),
            Binary::Sub => ("sub", Op::Sub(self.id, rhs.id)),
            Binary::Mul => ("mul", Op::Mul(self.id, rhs.id)),
            Binary::Div => ("div", Op::Div(self.id, rhs.id)),
        };
        let (shape, data) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(rhs.id);
            let shape = if a.shape == b.shape || is_scalar(&b.shape) {
                a.shape.clone()
            } else if is_scalar(&a.shape) {
                b.shape.clone()
            } else {
                return Err(Error::dim(name, &a.shape, &b.shape));
            };
            let len = numel(&shape);
            let pick = |s: &[T], i: usize| if s.len() == 1 { s[0] } else { s[i] };
            if matches!(kind, Binary::Div) && b.data.iter().any(|v| v.is_zero()) {
                return Err(Error::Domain {
                    op: "div",
                    msg: "division by zero".into(),
                });
            }
            let data: Vec<T> = (0..len)
                .map(|i| {
                    let (x, y) = (pick(&a.data, i), pick(&b.data, i));
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                        Binary::Div => x / y,
                    }
                })
                .collect();
            (shape, data)
        };
        check_finite(name, &data);
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(shape, data, op, rg))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Div)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: T) -> Var<'t, T> {
        let k = self.tape.scalar(c);
        self.mul(k).expect("scalar operand always broadcasts")
    }

    /// Adds a constant.
    pub fn shift(self, c: T) -> Var<'t, T> {
        let k = self.tape.scalar(c);
        self.add(k).expect("scalar operand always broadcasts")
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(Op::Neg(self.id), "neg", |v| -v)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), "exp", |v| v.exp())
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(v) = self
            .tape
            .node(self.id)
            .data
            .iter()
            .find(|v| !(**v > T::zero()))
        {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive argument {v}"),
            });
        }
        Ok(self.unary(Op::Log(self.id), "log", |v| v.ln()))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), "relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", |v| {
            T::one() / (T::one() + (-v).exp())
        })
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside that interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, "clamp", |v| v.max(lo).min(hi))
    }

    fn reduce(self, kind: Reduce, axis: Option<usize>) -> Result<Var<'t, T>> {
        let (shape, data, argmax) = {
            let n = self.tape.node(self.id);
            if let Some(a) = axis {
                if a >= n.shape.len() {
                    return Err(Error::Axis {
                        axis: a,
                        shape: n.shape.clone(),
                    });
                }
            }
            let (outer, len, inner) = reduce_layout(&n.shape, axis);
            if len == 0 {
                return Err(Error::Contract("reduction over an empty axis".into()));
            }
            let mut data = vec![T::zero(); outer * inner];
            let mut argmax = Vec::new();
            if matches!(kind, Reduce::Max) {
                argmax = vec![0; outer * inner];
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| n.data[(o * len + l) * inner + i];
                    data[o * inner + i] = match kind {
                        Reduce::Sum => (0..len).map(at).sum(),
                        Reduce::Mean => (0..len).map(at).sum::<T>() / T::of_usize(len),
                        Reduce::Max => {
                            let mut best = 0;
                            for l in 1..len {
                                if at(l) > at(best) {
                                    best = l;
                                }
                            }
                            argmax[o * inner + i] = best;
                            at(best)
                        }
                    };
                }
            }
            let shape = match axis {
                None => Vec::new(),
                Some(a) => {
                    let mut s = n.shape.clone();
                    s.remove(a);
                    s
                }
            };
            (shape, data, argmax)
        };
        let op = Op::Reduce {
            x: self.id,
            kind,
            axis,
            argmax,
        };
        Ok(self.tape.push(shape, data, op, self.requires_grad()))
    }

    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Mean, axis)
    }

    pub fn max(self, axis: Option<usize>) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Max, axis)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        match s.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::dim(op, &s, &[])),
        }
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&rhs);
        let (m, p) = self.matrix_dims("matmul")?;
        let (p2, q) = rhs.matrix_dims("matmul")?;
        if p != p2 {
            return Err(Error::dim("matmul", &[m, p], &[p2, q]));
        }
        let data = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(rhs.id);
            let mut c = vec![T::zero(); m * q];
            for i in 0..m {
                for k in 0..p {
                    let aik = a.data[i * p + k];
                    let brow = &b.data[k * q..(k + 1) * q];
                    let crow = &mut c[i * q..(i + 1) * q];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv = *cv + aik * bv;
                    }
                }
            }
            c
        };
        check_finite("matmul", &data);
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self
            .tape
            .push(vec![m, q], data, Op::MatMul(self.id, rhs.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (m, n) = self.matrix_dims("transpose")?;
        let data = {
            let x = self.tape.node(self.id);
            let mut t = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    t[j * m + i] = x.data[i * n + j];
                }
            }
            t
        };
        Ok(self
            .tape
            .push(vec![n, m], data, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Stacks `self` on top of `other` (both 2-D with equal column counts).
    pub fn concat_rows(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (ma, na) = self.matrix_dims("concat_rows")?;
        let (mb, nb) = other.matrix_dims("concat_rows")?;
        if na != nb {
            return Err(Error::dim("concat_rows", &[ma, na], &[mb, nb]));
        }
        let mut data = self.data();
        data.extend(other.data());
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(vec![ma + mb, na], data, Op::ConcatRows(self.id, other.id), rg))
    }

    /// Adds a length-Q vector to every row of an `[M, Q]` matrix.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&bias);
        let (m, q) = self.matrix_dims("add_bias")?;
        let bshape = bias.shape();
        if numel(&bshape) != q || bshape.len() != 1 {
            return Err(Error::dim("add_bias", &[m, q], &bshape));
        }
        let b = bias.data();
        let mut data = self.data();
        for row in data.chunks_mut(q) {
            row.iter_mut().zip(&b).for_each(|(v, &bv)| *v = *v + bv);
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self
            .tape
            .push(vec![m, q], data, Op::AddBias(self.id, bias.id), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn row_l2_normalize(self) -> Result<Var<'t, T>> {
        let (m, d) = self.matrix_dims("row_l2_normalize")?;
        let (data, norms) = {
            let x = self.tape.node(self.id);
            let mut data = x.data.clone();
            let mut norms = Vec::with_capacity(m);
            for (r, row) in data.chunks_mut(d.max(1)).enumerate().take(m) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if !(n.as_f64() >= 1e-12) {
                    return Err(Error::DegenerateRow {
                        row: r,
                        norm: n.as_f64(),
                    });
                }
                row.iter_mut().for_each(|v| *v = *v / n);
                norms.push(n);
            }
            (data, norms)
        };
        let op = Op::RowL2Normalize { x: self.id, norms };
        Ok(self.tape.push(vec![m, d], data, op, self.requires_grad()))
    }

    /// 2-D convolution, stride 1, zero "same" padding, odd square kernel.
    ///
    /// `self` is `[N, C_in*H*W]`, `weight` is `[C_out, C_in*k*k]`, `bias` is
    /// `[C_out]`; the result is `[N, C_out*H*W]`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        geom: ImageGeom,
        kernel: usize,
    ) -> Result<Var<'t, T>> {
        self.check_tape(&weight);
        self.check_tape(&bias);
        let (n, len) = self.matrix_dims("conv2d")?;
        if len != geom.len() {
            return Err(Error::dim("conv2d", &[n, len], &[geom.channels, geom.height, geom.width]));
        }
        let (co, wlen) = weight.matrix_dims("conv2d")?;
        if wlen != geom.channels * kernel * kernel || kernel % 2 == 0 {
            return Err(Error::dim("conv2d", &[co, wlen], &[geom.channels, kernel, kernel]));
        }
        if bias.shape() != [co] {
            return Err(Error::dim("conv2d", &[co], &bias.shape()));
        }
        let data = conv2d_forward(&self.data(), &weight.data(), &bias.data(), n, geom, co, kernel);
        check_finite("conv2d", &data);
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
            geom,
            out_channels: co,
            kernel,
        };
        Ok(self
            .tape
            .push(vec![n, co * geom.height * geom.width], data, op, rg))
    }

    /// 2×2 average pooling with stride 2; height and width must be even.
    pub fn avg_pool2(self, geom: ImageGeom) -> Result<Var<'t, T>> {
        let (n, len) = self.matrix_dims("avg_pool2")?;
        if len != geom.len() || geom.height % 2 != 0 || geom.width % 2 != 0 {
            return Err(Error::dim("avg_pool2", &[n, len], &[geom.channels, geom.height, geom.width]));
        }
        let (oh, ow) = (geom.height / 2, geom.width / 2);
        let x = self.data();
        let mut data = vec![T::zero(); n * geom.channels * oh * ow];
        let quarter = T::of(0.25);
        for s in 0..n {
            for c in 0..geom.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let at = |y: usize, xx: usize| {
                            x[s * geom.len() + (c * geom.height + y) * geom.width + xx]
                        };
                        let v = at(2 * oy, 2 * ox)
                            + at(2 * oy, 2 * ox + 1)
                            + at(2 * oy + 1, 2 * ox)
                            + at(2 * oy + 1, 2 * ox + 1);
                        data[((s * geom.channels + c) * oh + oy) * ow + ox] = v * quarter;
                    }
                }
            }
        }
        Ok(self.tape.push(
            vec![n, geom.channels * oh * ow],
            data,
            Op::AvgPool2 { x: self.id, geom },
            self.requires_grad(),
        ))
    }
}

/// Batch statistics observed by a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (1/N) variance used for normalization.
    pub var: Vec<T>,
}

/// Train-mode batch normalization over the rows of `x: [N, F]`.
pub fn batch_norm_train<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: T,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let (n, f) = x.matrix_dims("batch_norm")?;
    if n < 2 {
        return Err(Error::Contract(format!(
            "train-mode batch norm needs at least 2 rows, got {n}"
        )));
    }
    let xv = x.data();
    let nf = T::of_usize(n);
    let mut mean = vec![T::zero(); f];
    let mut var = vec![T::zero(); f];
    for row in xv.chunks(f) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m = *m + v);
    }
    mean.iter_mut().for_each(|m| *m = *m / nf);
    for row in xv.chunks(f) {
        for j in 0..f {
            let d = row[j] - mean[j];
            var[j] = var[j] + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / nf);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let stats = BatchStats { mean, var };
    let out = normalize_affine(x, gamma, beta, &stats.mean, inv_std, true)?;
    Ok((out, stats))
}

/// Eval-mode batch normalization with frozen statistics.
pub fn batch_norm_eval<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Var<'t, T>> {
    let inv_std = running_var
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    normalize_affine(x, gamma, beta, running_mean, inv_std, false)
}

fn normalize_affine<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    mean: &[T],
    inv_std: Vec<T>,
    batch_stats: bool,
) -> Result<Var<'t, T>> {
    x.check_tape(&gamma);
    x.check_tape(&beta);
    let (n, f) = x.matrix_dims("batch_norm")?;
    for p in [gamma, beta] {
        if p.shape() != [f] {
            return Err(Error::dim("batch_norm", &[n, f], &p.shape()));
        }
    }
    if mean.len() != f || inv_std.len() != f {
        return Err(Error::dim("batch_norm", &[f], &[mean.len()]));
    }
    let (gv, bv, xv) = (gamma.data(), beta.data(), x.data());
    let mut xhat = vec![T::zero(); n * f];
    let mut data = vec![T::zero(); n * f];
    for i in 0..n {
        for j in 0..f {
            let k = i * f + j;
            xhat[k] = (xv[k] - mean[j]) * inv_std[j];
            data[k] = gv[j] * xhat[k] + bv[j];
        }
    }
    check_finite("batch_norm", &data);
    let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let op = Op::BatchNorm {
        x: x.id,
        gamma: gamma.id,
        beta: beta.id,
        xhat,
        inv_std,
        batch_stats,
    };
    Ok(x.tape.push(vec![n, f], data, op, rg))
}

/// Mean temperature-scaled softmax cross-entropy of each anchor row of
/// `sim` against its positive column, excluding the diagonal.
pub(crate) fn nt_xent_op<'t, T: Scalar>(sim: Var<'t, T>, pos: &[usize], tau: T) -> Result<Var<'t, T>> {
    let (m, m2) = sim.matrix_dims("nt_xent")?;
    if m != m2 || m != pos.len() {
        return Err(Error::dim("nt_xent", &[m, m2], &[pos.len()]));
    }
    let s = sim.data();
    if let Some(v) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite similarity {v}")));
    }
    let mut probs = vec![T::zero(); m * m];
    let mut total = T::zero();
    for i in 0..m {
        let row = &s[i * m..(i + 1) * m];
        let mut mx = T::neg_infinity();
        for (k, &v) in row.iter().enumerate() {
            if k != i {
                mx = mx.max(v / tau);
            }
        }
        let mut z = T::zero();
        for (k, &v) in row.iter().enumerate() {
            if k != i {
                let e = (v / tau - mx).exp();
                probs[i * m + k] = e;
                z = z + e;
            }
        }
        let lse = mx + z.ln();
        for k in 0..m {
            probs[i * m + k] = probs[i * m + k] / z;
        }
        total = total + (lse - row[pos[i]] / tau);
    }
    let loss = total / T::of_usize(m);
    let op = Op::NtXent {
        sim: sim.id,
        pos: pos.to_vec(),
        probs,
        tau,
    };
    Ok(sim.tape.push(Vec::new(), vec![loss], op, sim.requires_grad()))
}
