use std::cell::RefCell;

use super::tensor::{broadcast_map, broadcast_shape, Tensor};
use super::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: usize, pad: usize },
    Softmax { input: usize, axis: usize },
    Sum { input: usize, axis: usize },
    SumAll(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one step; gradients flow back with
/// [`Tape::backward`]. Build a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    bindings: RefCell<Vec<(usize, usize)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Axis split of a shape into `outer × len × inner`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32]) {
    // a is m×k (stored k×m if transposed), b is k×n (stored n×k if transposed)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides
    // describe exactly those layouts.
    unsafe {
        matrixmultiply::sgemm(
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(format!("{name} produced a non-finite value")));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Bind a named parameter; its gradient is collected by
    /// [`ParameterSet::accumulate`].
    pub fn parameter(&self, params: &ParameterSet, name: &str) -> Result<Var<'_>> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = self.leaf(params.value_at(idx).clone());
        self.bindings.borrow_mut().push((v.id, idx));
        Ok(v)
    }

    pub(crate) fn bindings(&self) -> Vec<(usize, usize)> {
        self.bindings.borrow().clone()
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a node, if any flowed into it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    pub(crate) fn grad_by_id(&self, id: usize) -> Option<Tensor> {
        self.grads.borrow().get(id).cloned().flatten()
    }

    /// Reverse-mode sweep from a scalar. Gradients add to those of earlier
    /// calls on the same tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut g: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        g[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(gout) = g[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (pid, contrib) in local_grads(&nodes, node, &gout) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut g[pid] {
                    Some(t) => t.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            g[id] = Some(gout);
        }
        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize(nodes.len(), None);
        }
        for (id, gi) in g.into_iter().enumerate() {
            if let Some(t) = gi {
                if !nodes[id].requires_grad {
                    continue;
                }
                match &mut store[id] {
                    Some(s) => s.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(())
    }
}

/// Sum `g` (shaped like the broadcast output) back onto `shape`.
fn reduce_to(g: &Tensor, shape: &[usize], scale: impl Fn(usize) -> f32) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let map = broadcast_map(g.shape(), shape);
    let od = out.data_mut();
    for (i, (&gv, &j)) in g.data().iter().zip(&map).enumerate() {
        od[j] += gv * scale(i);
    }
    out
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &nodes[i].value;
    let y = &node.value;
    let unary = |x: usize, f: &dyn Fn(usize) -> f32| -> Vec<(usize, Tensor)> {
        let mut t = g.clone();
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= f(i));
        vec![(x, t)]
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape(), |_| 1.0)),
            (*b, reduce_to(g, val(*b).shape(), |_| 1.0)),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape(), |_| 1.0)),
            (*b, reduce_to(g, val(*b).shape(), |_| -1.0)),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ma = broadcast_map(y.shape(), av.shape());
            let mb = broadcast_map(y.shape(), bv.shape());
            vec![
                (*a, reduce_to(g, av.shape(), |i| bv.data()[mb[i]])),
                (*b, reduce_to(g, bv.shape(), |i| av.data()[ma[i]])),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ma = broadcast_map(y.shape(), av.shape());
            let mb = broadcast_map(y.shape(), bv.shape());
            vec![
                (*a, reduce_to(g, av.shape(), |i| 1.0 / bv.data()[mb[i]])),
                (
                    *b,
                    reduce_to(g, bv.shape(), |i| {
                        let d = bv.data()[mb[i]];
                        -av.data()[ma[i]] / (d * d)
                    }),
                ),
            ]
        }
        Op::Neg(x) => unary(*x, &|_| -1.0),
        Op::Exp(x) => unary(*x, &|i| y.data()[i]),
        Op::Log(x) => unary(*x, &|i| 1.0 / val(*x).data()[i]),
        Op::Relu(x) => unary(*x, &|i| if val(*x).data()[i] > 0.0 { 1.0 } else { 0.0 }),
        Op::Softplus(x) => unary(*x, &|i| sigmoid(val(*x).data()[i])),
        Op::Sigmoid(x) => unary(*x, &|i| {
            let s = y.data()[i];
            s * (1.0 - s)
        }),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut ga = Tensor::zeros(&[m, k]);
            gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut());
            let mut gb = Tensor::zeros(&[k, n]);
            gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut());
            vec![(*a, ga), (*b, gb)]
        }
        Op::Conv2d { input, kernel, pad } => {
            let (xv, kv) = (val(*input), val(*kernel));
            let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (kh, kw) = (kv.shape()[0], kv.shape()[1]);
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            let p = *pad as isize;
            let mut gx = Tensor::zeros(xv.shape());
            let mut gk = Tensor::zeros(kv.shape());
            let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
            {
                let gxd = gx.data_mut();
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = gd[(ch * oh + i) * ow + j];
                            if go == 0.0 {
                                continue;
                            }
                            for a in 0..kh {
                                let yy = i as isize + a as isize - p;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for b in 0..kw {
                                    let xx = j as isize + b as isize - p;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    gxd[(ch * h + yy as usize) * w + xx as usize] += go * kd[a * kw + b];
                                }
                            }
                        }
                    }
                }
            }
            let gkd = gk.data_mut();
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let go = gd[(ch * oh + i) * ow + j];
                        for a in 0..kh {
                            let yy = i as isize + a as isize - p;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for b in 0..kw {
                                let xx = j as isize + b as isize - p;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                gkd[a * kw + b] += go * xd[(ch * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                }
            }
            vec![(*input, gx), (*kernel, gk)]
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let mut gx = Tensor::zeros(y.shape());
            let (yd, gd) = (y.data(), g.data());
            let gxd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f32 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        gxd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![(*input, gx)]
        }
        Op::Sum { input, axis } => {
            let xs = val(*input).shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            let mut gx = Tensor::zeros(xs);
            let gxd = gx.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        gxd[(o * len + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![(*input, gx)]
        }
        Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|&id| {
                    let xs = val(id).shape();
                    let len = xs[*axis];
                    let mut gx = Tensor::zeros(xs);
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        gxd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    offset += len;
                    (id, gx)
                })
                .collect()
        }
        Op::Slice { input, axis, start } => {
            let xs = val(*input).shape();
            let (outer, total, inner) = split_axis(xs, *axis);
            let len = y.shape()[*axis];
            let mut gx = Tensor::zeros(xs);
            let gxd = gx.data_mut();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gxd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*input, gx)]
        }
        Op::Reshape(x) => vec![(*x, g.clone().reshaped(val(*x).shape()).expect("same size"))],
        Op::Transpose(x) => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let mut gx = Tensor::zeros(&[c, r]);
            let gxd = gx.data_mut();
            for i in 0..r {
                for j in 0..c {
                    gxd[j * r + i] = g.data()[i * c + j];
                }
            }
            vec![(*x, gx)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn item(&self) -> Result<f32> {
        self.tape.value_of(self.id).item()
    }

    fn check_same_tape(&self, other: &Var<'_>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::domain("variables belong to different tapes"));
        }
        Ok(())
    }

    fn binary(&self, other: Var<'t>, name: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var<'t>> {
        self.check_same_tape(&other)?;
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let data = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ma = broadcast_map(&shape, a.shape());
                let mb = broadcast_map(&shape, b.shape());
                ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect()
            };
            Tensor::new(&shape, data)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg, name)
    }

    fn unary(&self, name: &str, f: impl Fn(f32) -> f32, op: Op) -> Result<Var<'t>> {
        let value = self.tape.value_of(self.id).map(f);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg, name)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary("neg", |a| -a, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f32::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", f32::ln, Op::Log(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |a| a.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", stable_softplus, Op::Softplus(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn scale(&self, s: f32) -> Result<Var<'t>> {
        self.mul(self.tape.constant(Tensor::scalar(s)))
    }

    pub fn add_scalar(&self, s: f32) -> Result<Var<'t>> {
        self.add(self.tape.constant(Tensor::scalar(s)))
    }

    /// Same value, no gradient to the input.
    pub fn stop_gradient(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other)?;
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::Domain(format!(
                    "matmul shapes {:?} and {:?} are incompatible",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = Tensor::zeros(&[m, n]);
            gemm(m, k, n, a.data(), false, b.data(), false, c.data_mut());
            c
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, Op::MatMul(self.id, other.id), rg, "matmul")
    }

    /// Stride-1 correlation of each channel of a `[C, H, W]` input with one
    /// `[kh, kw]` kernel, zero padding `pad` on every side.
    pub fn conv2d(&self, kernel: Var<'t>, pad: usize) -> Result<Var<'t>> {
        self.check_same_tape(&kernel)?;
        let value = {
            let x = self.tape.value_of(self.id);
            let k = self.tape.value_of(kernel.id);
            if x.rank() != 3 || k.rank() != 2 {
                return Err(Error::Domain("conv2d needs a [C,H,W] input and [kh,kw] kernel".into()));
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw) = (k.shape()[0], k.shape()[1]);
            if h + 2 * pad < kh || w + 2 * pad < kw {
                return Err(Error::Domain("conv2d kernel larger than padded input".into()));
            }
            let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
            let p = pad as isize;
            let mut out = Tensor::zeros(&[c, oh, ow]);
            let (xd, kd) = (x.data(), k.data());
            let od = out.data_mut();
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0f32;
                        for a in 0..kh {
                            let yy = i as isize + a as isize - p;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let row = (ch * h + yy as usize) * w;
                            for b in 0..kw {
                                let xx = j as isize + b as isize - p;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += kd[a * kw + b] * xd[row + xx as usize];
                            }
                        }
                        od[(ch * oh + i) * ow + j] = acc;
                    }
                }
            }
            out
        };
        let rg = self.tape.requires(&[self.id, kernel.id]);
        self.tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                pad,
            },
            rg,
            "conv2d",
        )
    }

    fn check_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Domain(format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(shape)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        let value = {
            let x = self.tape.value_of(self.id);
            let (outer, len, inner) = split_axis(&shape, axis);
            let mut out = Tensor::zeros(&shape);
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let m = (0..len).map(|k| x.data()[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0f32;
                    for k in 0..len {
                        let e = (x.data()[at(k)] - m).exp();
                        od[at(k)] = e;
                        s += e;
                    }
                    for k in 0..len {
                        od[at(k)] /= s;
                    }
                }
            }
            out
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Softmax { input: self.id, axis }, rg, "softmax")
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        let value = {
            let x = self.tape.value_of(self.id);
            let (outer, len, inner) = split_axis(&shape, axis);
            let mut out_shape = shape.clone();
            out_shape.remove(axis);
            let mut out = Tensor::zeros(&out_shape);
            let od = out.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        od[o * inner + i] += x.data()[(o * len + k) * inner + i];
                    }
                }
            }
            out
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Sum { input: self.id, axis }, rg, "sum")
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.check_axis(axis)?[axis];
        self.sum(axis)?.scale(1.0 / n as f32)
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            Tensor::scalar(x.data().iter().map(|&v| v as f64).sum::<f64>() as f32)
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::SumAll(self.id), rg, "sum_all")
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let n = self.tape.value_of(self.id).len();
        if n == 0 {
            return Err(Error::domain("mean of an empty tensor"));
        }
        self.sum_all()?.scale(1.0 / n as f32)
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        if !(start < end && end <= shape[axis]) {
            return Err(Error::Domain(format!(
                "slice [{start}, {end}) out of range for axis of length {}",
                shape[axis]
            )));
        }
        let value = {
            let x = self.tape.value_of(self.id);
            let (outer, total, inner) = split_axis(&shape, axis);
            let len = end - start;
            let mut out_shape = shape.clone();
            out_shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * total + start) * inner;
                data.extend_from_slice(&x.data()[src..src + len * inner]);
            }
            Tensor::new(&out_shape, data)?
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Slice { input: self.id, axis, start }, rg, "slice")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Reshape(self.id), rg, "reshape")
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            if x.rank() != 2 {
                return Err(Error::domain("transpose needs a matrix"));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = Tensor::zeros(&[c, r]);
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[j * r + i] = x.data()[i * c + j];
                }
            }
            out
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Transpose(self.id), rg, "transpose")
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = vars.first().ok_or_else(|| Error::domain("concat of nothing"))?;
    let tape = first.tape;
    let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape()).collect();
    let base = &shapes[0];
    if axis >= base.len() {
        return Err(Error::Domain(format!("axis {axis} out of range for shape {base:?}")));
    }
    for (v, s) in vars.iter().zip(&shapes) {
        first.check_same_tape(v)?;
        if s.len() != base.len() || s.iter().enumerate().any(|(i, d)| i != axis && *d != base[i]) {
            return Err(Error::Domain(format!("cannot concat {base:?} with {s:?} on axis {axis}")));
        }
    }
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let (outer, _, inner) = split_axis(&out_shape, axis);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    {
        let values: Vec<std::cell::Ref<'_, Tensor>> = vars.iter().map(|v| tape.value_of(v.id)).collect();
        for o in 0..outer {
            for (t, s) in values.iter().zip(&shapes) {
                let n = s[axis] * inner;
                data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
    }
    let value = Tensor::new(&out_shape, data)?;
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let rg = tape.requires(&ids);
    tape.push(value, Op::Concat { inputs: ids, axis }, rg, "concat")
}
