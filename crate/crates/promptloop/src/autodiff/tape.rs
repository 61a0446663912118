//! Reverse-mode autodiff on an eager operation tape.
//!
//! Values are computed when an op is recorded; `grad` replays the tape in
//! reverse, visiting each recorded op exactly once. Tapes are single-threaded
//! and meant to be rebuilt per optimization step.

use std::cell::RefCell;

use super::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor};
use crate::error::{Error, Result};

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, T),
    AddC(usize, T),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    PowF(usize, T),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Reshape(usize),
    Transpose(usize),
    Concat { axis: usize, parts: Vec<usize> },
    Slice { input: usize, axis: usize, start: usize, len: usize },
    TileRows(usize, usize),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Scale(..) => "scale",
            Op::AddC(..) => "add_const",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::PowF(..) => "powf",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::TileRows(..) => "tile_rows",
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    idx: usize,
}

// ── Broadcasting ──
// Supported elementwise pairings: identical shapes, scalar [1] on either
// side, row vector [n] against [m,n], and column [m,1] against [m,n].

#[derive(Clone, Copy, PartialEq)]
enum BKind {
    Same,
    ScalarL,
    ScalarR,
    RowL,
    RowR,
    ColL,
    ColR,
}

fn bkind(a: &[usize], b: &[usize]) -> BKind {
    if a == b {
        BKind::Same
    } else if b == [1] {
        BKind::ScalarR
    } else if a == [1] {
        BKind::ScalarL
    } else if a.len() == 2 && b.len() == 1 && b[0] == a[1] {
        BKind::RowR
    } else if b.len() == 2 && a.len() == 1 && a[0] == b[1] {
        BKind::RowL
    } else if a.len() == 2 && b.len() == 2 && b[0] == a[0] && b[1] == 1 && a[1] != 1 {
        BKind::ColR
    } else if b.len() == 2 && a.len() == 2 && a[0] == b[0] && a[1] == 1 && b[1] != 1 {
        BKind::ColL
    } else {
        panic!("incompatible shapes for elementwise op: {a:?} vs {b:?}");
    }
}

fn bin_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    match bkind(a.shape(), b.shape()) {
        BKind::Same => Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        BKind::ScalarR => {
            let s = b.data()[0];
            a.map(|x| f(x, s))
        }
        BKind::ScalarL => {
            let s = a.data()[0];
            b.map(|y| f(s, y))
        }
        BKind::RowR => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for (x, y) in a.data()[i * n..(i + 1) * n].iter().zip(b.data()) {
                    out.push(f(*x, *y));
                }
            }
            Tensor::new(a.shape(), out)
        }
        BKind::RowL => {
            let (m, n) = (b.shape()[0], b.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for (y, x) in b.data()[i * n..(i + 1) * n].iter().zip(a.data()) {
                    out.push(f(*x, *y));
                }
            }
            Tensor::new(b.shape(), out)
        }
        BKind::ColR => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let y = b.data()[i];
                for x in &a.data()[i * n..(i + 1) * n] {
                    out.push(f(*x, y));
                }
            }
            Tensor::new(a.shape(), out)
        }
        BKind::ColL => {
            let (m, n) = (b.shape()[0], b.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let x = a.data()[i];
                for y in &b.data()[i * n..(i + 1) * n] {
                    out.push(f(x, *y));
                }
            }
            Tensor::new(b.shape(), out)
        }
    }
}

/// Accumulate `src` (shaped like the op output) into `dst` (a leaf gradient
/// buffer with shape `dst_shape`), summing over broadcast axes.
fn accum_reduced<T: Real>(
    dst: &mut [T],
    dst_shape: &[usize],
    src: &[T],
    src_shape: &[usize],
    negate: bool,
) {
    let sign = if negate { -T::one() } else { T::one() };
    if dst_shape == src_shape {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += sign * s;
        }
    } else if dst_shape == [1] {
        let mut acc = T::zero();
        for &s in src {
            acc += s;
        }
        dst[0] += sign * acc;
    } else if dst_shape.len() == 1 && src_shape.len() == 2 && dst_shape[0] == src_shape[1] {
        let (m, n) = (src_shape[0], src_shape[1]);
        for i in 0..m {
            for (d, &s) in dst.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *d += sign * s;
            }
        }
    } else if dst_shape.len() == 2
        && dst_shape[1] == 1
        && src_shape.len() == 2
        && dst_shape[0] == src_shape[0]
    {
        let (m, n) = (src_shape[0], src_shape[1]);
        for i in 0..m {
            let mut acc = T::zero();
            for &s in &src[i * n..(i + 1) * n] {
                acc += s;
            }
            dst[i] += sign * acc;
        }
    } else {
        panic!("cannot reduce gradient from {src_shape:?} to {dst_shape:?}");
    }
}

/// g ⊙ broadcast(other) with g shaped like the op output.
fn grad_times_other<T: Real>(
    g: &[T],
    out_shape: &[usize],
    other: &Tensor<T>,
) -> Vec<T> {
    match bkind(out_shape, other.shape()) {
        BKind::Same => g.iter().zip(other.data()).map(|(&gv, &ov)| gv * ov).collect(),
        BKind::ScalarR => {
            let s = other.data()[0];
            g.iter().map(|&gv| gv * s).collect()
        }
        BKind::RowR => {
            let (m, n) = (out_shape[0], out_shape[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for (gv, ov) in g[i * n..(i + 1) * n].iter().zip(other.data()) {
                    out.push(*gv * *ov);
                }
            }
            out
        }
        BKind::ColR => {
            let (m, n) = (out_shape[0], out_shape[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let ov = other.data()[i];
                for gv in &g[i * n..(i + 1) * n] {
                    out.push(*gv * ov);
                }
            }
            out
        }
        // `out_shape` is the broadcast result, so `other` can only be equal
        // or smaller; the L-variants cannot occur here.
        _ => unreachable!("output shape smaller than operand"),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Record a constant or parameter tensor.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(v))
    }

    fn value_clone(&self, idx: usize) -> Tensor<T> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    /// Concatenate along `axis` (0 or 1). Rank-1 inputs concat along 0.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty());
        for p in parts {
            assert!(std::ptr::eq(p.tape, self), "concat across tapes");
        }
        let value = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            concat_forward(&ts, axis)
        };
        self.push(Op::Concat { axis, parts: parts.iter().map(|p| p.idx).collect() }, value)
    }
}

fn concat_forward<T: Real>(ts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let rank = ts[0].rank();
    if rank == 1 {
        assert_eq!(axis, 0, "rank-1 concat must use axis 0");
        let mut data = Vec::new();
        for t in ts {
            assert_eq!(t.rank(), 1);
            data.extend_from_slice(t.data());
        }
        let n = data.len();
        Tensor::new(&[n], data)
    } else if axis == 0 {
        let n = ts[0].cols();
        let mut data = Vec::new();
        let mut m = 0;
        for t in ts {
            assert_eq!(t.cols(), n, "concat axis 0 needs equal cols");
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        Tensor::new(&[m, n], data)
    } else {
        assert_eq!(axis, 1);
        let m = ts[0].rows();
        let total: usize = ts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for t in ts {
                assert_eq!(t.rows(), m, "concat axis 1 needs equal rows");
                data.extend_from_slice(t.row(i));
            }
        }
        Tensor::new(&[m, total], data)
    }
}

// the method forms of add/sub/mul/neg mirror the operator impls below and
// read better in long chains
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_clone(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    fn bin(self, o: Var<'t, T>, mk: impl Fn(usize, usize) -> Op<T>, f: impl Fn(T, T) -> T) -> Var<'t, T> {
        assert!(std::ptr::eq(self.tape, o.tape), "op across tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            bin_forward(&nodes[self.idx].value, &nodes[o.idx].value, f)
        };
        self.tape.push(mk(self.idx, o.idx), value)
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        self.bin(o, Op::Add, |x, y| x + y)
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        self.bin(o, Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        self.bin(o, Op::Mul, |x, y| x * y)
    }

    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        assert!(std::ptr::eq(self.tape, o.tape), "op across tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul(&nodes[self.idx].value, &nodes[o.idx].value)
        };
        self.tape.push(Op::MatMul(self.idx, o.idx), value)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|x| x * c);
        self.tape.push(Op::Scale(self.idx, c), value)
    }

    pub fn add_const(self, c: T) -> Var<'t, T> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|x| x + c);
        self.tape.push(Op::AddC(self.idx, c), value)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(f);
        self.tape.push(op, value)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.idx), |x| x.maxv(T::zero()))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.idx), |x| x.tanh())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.idx), |x| x.exp())
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(Op::Log(self.idx), |x| x.ln())
    }

    /// Elementwise power with constant exponent.
    pub fn powf(self, p: T) -> Var<'t, T> {
        self.unary(Op::PowF(self.idx, p), |x| x.powf(p))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.powf(T::c(0.5))
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self)
    }

    /// Softmax over the last axis (rank 1 or 2), numerically stabilized.
    pub fn softmax(self) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            let (m, n) = if t.rank() == 2 { (t.shape()[0], t.shape()[1]) } else { (1, t.len()) };
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = &t.data()[i * n..(i + 1) * n];
                let mut mx = row[0];
                for &v in row {
                    mx = mx.maxv(v);
                }
                let mut denom = T::zero();
                let start = out.len();
                for &v in row {
                    let e = (v - mx).exp();
                    out.push(e);
                    denom += e;
                }
                for v in &mut out[start..] {
                    *v = *v / denom;
                }
            }
            Tensor::new(t.shape(), out)
        };
        self.tape.push(Op::Softmax(self.idx), value)
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut acc = T::zero();
            for &v in nodes[self.idx].value.data() {
                acc += v;
            }
            Tensor::scalar(acc)
        };
        self.tape.push(Op::Sum(self.idx), value)
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            let mut acc = T::zero();
            for &v in t.data() {
                acc += v;
            }
            Tensor::scalar(acc / T::c(t.len() as f64))
        };
        self.tape.push(Op::Mean(self.idx), value)
    }

    /// Rank-2 reduction. Axis 0 gives [n]; axis 1 gives [m,1].
    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            axis_reduce(&nodes[self.idx].value, axis, false)
        };
        self.tape.push(Op::SumAxis(self.idx, axis), value)
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            axis_reduce(&nodes[self.idx].value, axis, true)
        };
        self.tape.push(Op::MeanAxis(self.idx, axis), value)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let value = self.tape.nodes.borrow()[self.idx].value.reshaped(shape);
        self.tape.push(Op::Reshape(self.idx), value)
    }

    /// Rank-2 transpose.
    pub fn transpose(self) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            assert_eq!(t.rank(), 2, "transpose needs a rank-2 var");
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t.data()[i * n + j];
                }
            }
            Tensor::new(&[n, m], out)
        };
        self.tape.push(Op::Transpose(self.idx), value)
    }

    /// Slice along `axis`; rank-1 vars slice along 0.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            slice_forward(&nodes[self.idx].value, axis, start, len)
        };
        self.tape.push(Op::Slice { input: self.idx, axis, start, len }, value)
    }

    /// Repeat a rank-1 vector as the rows of a [reps, n] matrix.
    pub fn tile_rows(self, reps: usize) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            assert_eq!(t.rank(), 1, "tile_rows needs a vector");
            let n = t.len();
            let mut data = Vec::with_capacity(reps * n);
            for _ in 0..reps {
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[reps, n], data)
        };
        self.tape.push(Op::TileRows(self.idx, reps), value)
    }

    pub fn dot(self, o: Var<'t, T>) -> Var<'t, T> {
        self.mul(o).sum()
    }

    pub fn sumsq(self) -> Var<'t, T> {
        self.square().sum()
    }
}

fn axis_reduce<T: Real>(t: &Tensor<T>, axis: usize, mean: bool) -> Tensor<T> {
    assert_eq!(t.rank(), 2, "axis reduction needs rank 2");
    let (m, n) = (t.shape()[0], t.shape()[1]);
    if axis == 0 {
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&t.data()[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        if mean {
            let d = T::c(m as f64);
            for o in &mut out {
                *o = *o / d;
            }
        }
        Tensor::new(&[n], out)
    } else {
        assert_eq!(axis, 1);
        let mut out = vec![T::zero(); m];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &t.data()[i * n..(i + 1) * n] {
                acc += v;
            }
            *o = if mean { acc / T::c(n as f64) } else { acc };
        }
        Tensor::new(&[m, 1], out)
    }
}

fn slice_forward<T: Real>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    if t.rank() == 1 {
        assert_eq!(axis, 0);
        assert!(start + len <= t.len());
        Tensor::new(&[len], t.data()[start..start + len].to_vec())
    } else {
        assert_eq!(t.rank(), 2);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        if axis == 0 {
            assert!(start + len <= m);
            Tensor::new(&[len, n], t.data()[start * n..(start + len) * n].to_vec())
        } else {
            assert_eq!(axis, 1);
            assert!(start + len <= n);
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
            }
            Tensor::new(&[m, len], data)
        }
    }
}

// ── Operator overloads ──

impl<'t, T: Real> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, o: Self) -> Self::Output {
        Var::add(self, o)
    }
}

impl<'t, T: Real> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, o: Self) -> Self::Output {
        Var::sub(self, o)
    }
}

impl<'t, T: Real> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, o: Self) -> Self::Output {
        Var::mul(self, o)
    }
}

// ── Backward pass ──

/// Gradients of a scalar loss with respect to `params`.
///
/// Repeated calls are idempotent (adjoints are rebuilt from scratch). Params
/// that do not influence the loss receive zero gradients. Any non-finite
/// value or adjoint fails with the offending op's name.
pub fn grad<T: Real>(loss: Var<'_, T>, params: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
    for p in params {
        assert!(std::ptr::eq(p.tape, loss.tape), "param from a different tape");
    }
    let nodes = loss.tape.nodes.borrow();
    let loss_shape = nodes[loss.idx].value.shape().to_vec();
    if loss_shape != [1] {
        return Err(Error::numerical("grad", format!("loss must be a scalar, got shape {loss_shape:?}")));
    }
    for (i, node) in nodes.iter().enumerate().take(loss.idx + 1) {
        if !node.value.all_finite() {
            return Err(Error::numerical(
                node.op.name(),
                format!("non-finite value in forward pass at node {i}"),
            ));
        }
    }

    let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.idx + 1];
    adj[loss.idx] = Some(vec![T::one()]);

    let get_or_zero = |adj: &mut Vec<Option<Vec<T>>>, idx: usize, len: usize| {
        adj[idx].get_or_insert_with(|| vec![T::zero(); len]);
    };

    // Reverse sweep: each node is processed exactly once, in reverse
    // recording order.
    for i in (0..=loss.idx).rev() {
        let g = match adj[i].take() {
            Some(g) => g,
            None => continue,
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                nodes[i].op.name(),
                format!("non-finite adjoint at node {i}"),
            ));
        }
        let out_shape = nodes[i].value.shape().to_vec();
        match &nodes[i].op {
            Op::Leaf => {
                adj[i] = Some(g);
                continue;
            }
            Op::Add(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape().to_vec(), nodes[*b].value.shape().to_vec());
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                accum_reduced(adj[*a].as_mut().unwrap(), &sa, &g, &out_shape, false);
                get_or_zero(&mut adj, *b, nodes[*b].value.len());
                accum_reduced(adj[*b].as_mut().unwrap(), &sb, &g, &out_shape, false);
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape().to_vec(), nodes[*b].value.shape().to_vec());
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                accum_reduced(adj[*a].as_mut().unwrap(), &sa, &g, &out_shape, false);
                get_or_zero(&mut adj, *b, nodes[*b].value.len());
                accum_reduced(adj[*b].as_mut().unwrap(), &sb, &g, &out_shape, true);
            }
            Op::Mul(a, b) => {
                let ga = grad_times_other(&g, &out_shape, &nodes[*b].value);
                let gb = grad_times_other(&g, &out_shape, &nodes[*a].value);
                let (sa, sb) = (nodes[*a].value.shape().to_vec(), nodes[*b].value.shape().to_vec());
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                accum_reduced(adj[*a].as_mut().unwrap(), &sa, &ga, &out_shape, false);
                get_or_zero(&mut adj, *b, nodes[*b].value.len());
                accum_reduced(adj[*b].as_mut().unwrap(), &sb, &gb, &out_shape, false);
            }
            Op::MatMul(a, b) => {
                let gt = Tensor::new(&out_shape, g.clone());
                let ga = matmul_nt(&gt, &nodes[*b].value);
                let gb = matmul_tn(&nodes[*a].value, &gt);
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                for (d, &s) in adj[*a].as_mut().unwrap().iter_mut().zip(ga.data()) {
                    *d += s;
                }
                get_or_zero(&mut adj, *b, nodes[*b].value.len());
                for (d, &s) in adj[*b].as_mut().unwrap().iter_mut().zip(gb.data()) {
                    *d += s;
                }
            }
            Op::Scale(a, c) => {
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                for (d, &s) in adj[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *d += *c * s;
                }
            }
            Op::AddC(a, _) => {
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                for (d, &s) in adj[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *d += s;
                }
            }
            Op::Relu(a) => {
                let x = nodes[*a].value.data();
                get_or_zero(&mut adj, *a, x.len());
                for ((d, &s), &xv) in adj[*a].as_mut().unwrap().iter_mut().zip(&g).zip(x) {
                    if xv > T::zero() {
                        *d += s;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = nodes[i].value.data();
                get_or_zero(&mut adj, *a, y.len());
                for ((d, &s), &yv) in adj[*a].as_mut().unwrap().iter_mut().zip(&g).zip(y) {
                    *d += s * (T::one() - yv * yv);
                }
            }
            Op::Exp(a) => {
                let y = nodes[i].value.data();
                get_or_zero(&mut adj, *a, y.len());
                for ((d, &s), &yv) in adj[*a].as_mut().unwrap().iter_mut().zip(&g).zip(y) {
                    *d += s * yv;
                }
            }
            Op::Log(a) => {
                let x = nodes[*a].value.data();
                get_or_zero(&mut adj, *a, x.len());
                for ((d, &s), &xv) in adj[*a].as_mut().unwrap().iter_mut().zip(&g).zip(x) {
                    *d += s / xv;
                }
            }
            Op::PowF(a, p) => {
                let x = nodes[*a].value.data();
                get_or_zero(&mut adj, *a, x.len());
                for ((d, &s), &xv) in adj[*a].as_mut().unwrap().iter_mut().zip(&g).zip(x) {
                    *d += s * *p * xv.powf(*p - T::one());
                }
            }
            Op::Softmax(a) => {
                let y = &nodes[i].value;
                let (m, n) = if y.rank() == 2 { (y.shape()[0], y.shape()[1]) } else { (1, y.len()) };
                get_or_zero(&mut adj, *a, y.len());
                let da = adj[*a].as_mut().unwrap();
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    for ((d, &gv), &yv) in da[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Sum(a) => {
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                let s = g[0];
                for d in adj[*a].as_mut().unwrap() {
                    *d += s;
                }
            }
            Op::Mean(a) => {
                let len = nodes[*a].value.len();
                get_or_zero(&mut adj, *a, len);
                let s = g[0] / T::c(len as f64);
                for d in adj[*a].as_mut().unwrap() {
                    *d += s;
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let mean = matches!(nodes[i].op, Op::MeanAxis(..));
                let (m, n) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                get_or_zero(&mut adj, *a, m * n);
                let da = adj[*a].as_mut().unwrap();
                if *axis == 0 {
                    let s = if mean { T::one() / T::c(m as f64) } else { T::one() };
                    for r in 0..m {
                        for (d, &gv) in da[r * n..(r + 1) * n].iter_mut().zip(&g) {
                            *d += gv * s;
                        }
                    }
                } else {
                    let s = if mean { T::one() / T::c(n as f64) } else { T::one() };
                    for r in 0..m {
                        let gv = g[r] * s;
                        for d in &mut da[r * n..(r + 1) * n] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                get_or_zero(&mut adj, *a, nodes[*a].value.len());
                for (d, &s) in adj[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *d += s;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = {
                    let s = nodes[*a].value.shape();
                    (s[0], s[1])
                };
                get_or_zero(&mut adj, *a, m * n);
                let da = adj[*a].as_mut().unwrap();
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Concat { axis, parts } => {
                let rank = nodes[parts[0]].value.rank();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        get_or_zero(&mut adj, p, len);
                        for (d, &s) in adj[p].as_mut().unwrap().iter_mut().zip(&g[off..off + len]) {
                            *d += s;
                        }
                        off += len;
                    }
                } else {
                    let m = nodes[parts[0]].value.rows();
                    let total: usize = nodes[i].value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.cols();
                        get_or_zero(&mut adj, p, m * n);
                        let dp = adj[p].as_mut().unwrap();
                        for r in 0..m {
                            for (d, &s) in dp[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + n])
                            {
                                *d += s;
                            }
                        }
                        off += n;
                    }
                }
            }
            Op::Slice { input, axis, start, len } => {
                let t = &nodes[*input].value;
                get_or_zero(&mut adj, *input, t.len());
                let da = adj[*input].as_mut().unwrap();
                if t.rank() == 1 {
                    for (d, &s) in da[*start..*start + *len].iter_mut().zip(&g) {
                        *d += s;
                    }
                } else {
                    let (_, n) = (t.shape()[0], t.shape()[1]);
                    if *axis == 0 {
                        for (d, &s) in da[*start * n..(*start + *len) * n].iter_mut().zip(&g) {
                            *d += s;
                        }
                    } else {
                        let m = t.shape()[0];
                        for r in 0..m {
                            for (d, &s) in da[r * n + *start..r * n + *start + *len]
                                .iter_mut()
                                .zip(&g[r * *len..(r + 1) * *len])
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::TileRows(a, reps) => {
                let n = nodes[*a].value.len();
                get_or_zero(&mut adj, *a, n);
                let da = adj[*a].as_mut().unwrap();
                for r in 0..*reps {
                    for (d, &s) in da.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += s;
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let shape = nodes[p.idx].value.shape().to_vec();
        match adj.get(p.idx).and_then(|a| a.clone()) {
            Some(g) => out.push(Tensor::new(&shape, g)),
            None => out.push(Tensor::zeros(&shape)),
        }
    }
    Ok(out)
}
