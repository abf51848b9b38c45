//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to the [`Value`]s created on
//! it. Calling [`Value::backward`] on a scalar walks the recording in reverse
//! and returns a [`Gradients`] map for every leaf that requires a gradient.
//!
//! The op set is deliberately small: elementwise arithmetic (with scalar
//! broadcasting), `exp`/`log`/`tanh`/`sigmoid`, total `sum`, `matmul`,
//! row-wise `softmax`/`log_softmax`, `clip_value`, `select` (gather),
//! `minimum`, and [`Value::flip_grad`], which is the identity in the forward
//! pass and multiplies the incoming gradient by `-1` in the backward pass.
//!
//! ```
//! use latent_grpo::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let a = tape.scalar(3.0, true);
//! let b = tape.scalar(4.0, true);
//! let y = a.mul(&b).unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(&a).unwrap(), vec![4.0]);
//! assert_eq!(grads.wrt(&b).unwrap(), vec![3.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major array with an explicit shape. A scalar has shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Last-axis length (the softmax axis).
    fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sum,
    MatMul,
    Softmax,
    LogSoftmax,
    ClipValue,
    Select,
    Minimum,
    FlipGrad,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(OpKind, usize, usize),
    Unary(OpKind, usize),
    Clip { input: usize, lo: f64, hi: f64 },
    Select { input: usize, indices: Rc<[usize]> },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Recording of operations; rebuilt for every forward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Handle to an array recorded on a [`Tape`].
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.tape.inner.nodes.borrow();
        let n = &nodes[self.id];
        f.debug_struct("Value")
            .field("id", &self.id)
            .field("shape", &n.value.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Value {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Value { tape: self.clone(), id: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Value {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Array) -> Value {
        self.leaf(value, false)
    }

    pub fn scalar(&self, x: f64, requires_grad: bool) -> Value {
        self.leaf(Array::scalar(x), requires_grad)
    }

    pub fn vector(&self, data: Vec<f64>, requires_grad: bool) -> Value {
        self.leaf(Array::vector(data), requires_grad)
    }

    fn same_tape(&self, other: &Value) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::Shape("values recorded on different tapes".into()))
        }
    }
}

/// Gradient of a scalar root with respect to the leaves of its tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not require a gradient.
    /// Values that require a gradient but are unreachable get zeros.
    pub fn wrt(&self, v: &Value) -> Option<Vec<f64>> {
        if !self.requires.get(v.id).copied().unwrap_or(false) {
            return None;
        }
        Some(match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.id]],
        })
    }
}

fn broadcast_shape(kind: OpKind, a: &Array, b: &Array) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.len() == 1 {
        Ok(a.shape.clone())
    } else if a.len() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(Error::Shape(format!(
            "{kind:?}: incompatible shapes {:?} and {:?}",
            a.shape, b.shape
        )))
    }
}

#[inline]
fn at(x: &Array, i: usize) -> f64 {
    if x.data.len() == 1 {
        x.data[0]
    } else {
        x.data[i]
    }
}

fn matmul_dims(a: &Array, b: &Array) -> Result<(usize, usize, usize, Vec<usize>)> {
    if b.shape.len() != 2 {
        return Err(Error::Shape(format!("matmul: rhs must be 2-D, got {:?}", b.shape)));
    }
    let (k2, n) = (b.shape[0], b.shape[1]);
    let (m, k, out) = match a.shape.len() {
        1 => (1, a.shape[0], vec![n]),
        2 => (a.shape[0], a.shape[1], vec![a.shape[0], n]),
        _ => return Err(Error::Shape(format!("matmul: lhs must be 1-D or 2-D, got {:?}", a.shape))),
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions differ ({:?} x {:?})",
            a.shape, b.shape
        )));
    }
    Ok((m, k, n, out))
}

fn softmax_rows(x: &Array) -> Array {
    let n = x.row_len().max(1);
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Array { shape: x.shape.clone(), data: out }
}

fn log_softmax_rows(x: &Array) -> Array {
    let n = x.row_len().max(1);
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Array { shape: x.shape.clone(), data: out }
}

/// Numerically stable log-softmax of a plain slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    log_softmax_rows(&Array::vector(x.to_vec())).data
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_rows(&Array::vector(x.to_vec())).data
}

impl Value {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.nodes.borrow()[self.id].requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.nodes.borrow()[self.id].value.data.clone()
    }

    pub fn array(&self) -> Array {
        self.tape.inner.nodes.borrow()[self.id].value.clone()
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.inner.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.len(), 1, "item() on non-scalar");
        v.data[0]
    }

    fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.tape.inner.nodes.borrow()[self.id].value)
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    fn binary(&self, other: &Value, kind: OpKind) -> Result<Value> {
        self.tape.same_tape(other)?;
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            match kind {
                OpKind::MatMul => {
                    let (m, k, n, shape) = matmul_dims(a, b)?;
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &a.data[i * k..(i + 1) * k];
                        let dst = &mut out[i * n..(i + 1) * n];
                        for (p, &av) in row.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &b.data[p * n..(p + 1) * n];
                            for (d, &bv) in dst.iter_mut().zip(brow) {
                                *d += av * bv;
                            }
                        }
                    }
                    Array { shape, data: out }
                }
                _ => {
                    let shape = broadcast_shape(kind, a, b)?;
                    let n = a.len().max(b.len());
                    let mut out = Vec::with_capacity(n);
                    for i in 0..n {
                        let (x, y) = (at(a, i), at(b, i));
                        out.push(match kind {
                            OpKind::Add => x + y,
                            OpKind::Sub => x - y,
                            OpKind::Mul => x * y,
                            OpKind::Div => {
                                if y == 0.0 {
                                    return Err(Error::Domain("div: division by zero".into()));
                                }
                                x / y
                            }
                            OpKind::Minimum => {
                                if y < x {
                                    y
                                } else {
                                    x
                                }
                            }
                            _ => unreachable!("not a binary op: {kind:?}"),
                        });
                    }
                    Array { shape, data: out }
                }
            }
        };
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(value, Op::Binary(kind, self.id, other.id), rg))
    }

    fn unary(&self, kind: OpKind) -> Result<Value> {
        let value = self.with_value(|a| -> Result<Array> {
            Ok(match kind {
                OpKind::Neg => map(a, |x| -x),
                OpKind::Exp => map(a, f64::exp),
                OpKind::Log => {
                    if let Some(bad) = a.data.iter().find(|&&x| !(x > 0.0)) {
                        return Err(Error::Domain(format!("log of non-positive value {bad}")));
                    }
                    map(a, f64::ln)
                }
                OpKind::Tanh => map(a, f64::tanh),
                OpKind::Sigmoid => map(a, |x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                }),
                OpKind::Sum => Array::scalar(a.data.iter().sum()),
                OpKind::Softmax => softmax_rows(a),
                OpKind::LogSoftmax => log_softmax_rows(a),
                OpKind::FlipGrad => a.clone(),
                _ => unreachable!("not a unary op: {kind:?}"),
            })
        })?;
        Ok(self.tape.push(value, Op::Unary(kind, self.id), self.rg()))
    }

    pub fn add(&self, o: &Value) -> Result<Value> {
        self.binary(o, OpKind::Add)
    }
    pub fn sub(&self, o: &Value) -> Result<Value> {
        self.binary(o, OpKind::Sub)
    }
    pub fn mul(&self, o: &Value) -> Result<Value> {
        self.binary(o, OpKind::Mul)
    }
    pub fn div(&self, o: &Value) -> Result<Value> {
        self.binary(o, OpKind::Div)
    }
    pub fn matmul(&self, o: &Value) -> Result<Value> {
        self.binary(o, OpKind::MatMul)
    }
    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, o: &Value) -> Result<Value> {
        self.binary(o, OpKind::Minimum)
    }
    pub fn neg(&self) -> Result<Value> {
        self.unary(OpKind::Neg)
    }
    pub fn exp(&self) -> Result<Value> {
        self.unary(OpKind::Exp)
    }
    pub fn log(&self) -> Result<Value> {
        self.unary(OpKind::Log)
    }
    pub fn tanh(&self) -> Result<Value> {
        self.unary(OpKind::Tanh)
    }
    pub fn sigmoid(&self) -> Result<Value> {
        self.unary(OpKind::Sigmoid)
    }
    pub fn sum(&self) -> Result<Value> {
        self.unary(OpKind::Sum)
    }
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Value> {
        self.unary(OpKind::Softmax)
    }
    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Value> {
        self.unary(OpKind::LogSoftmax)
    }
    /// Identity forward; the backward pass negates the incoming gradient.
    pub fn flip_grad(&self) -> Result<Value> {
        self.unary(OpKind::FlipGrad)
    }

    /// Clamp into `[lo, hi]`. Unit gradient inside the closed interval,
    /// zero outside.
    pub fn clip_value(&self, lo: f64, hi: f64) -> Result<Value> {
        if lo > hi {
            return Err(Error::Domain(format!("clip_value: lo {lo} > hi {hi}")));
        }
        let value = self.with_value(|a| map(a, |x| x.clamp(lo, hi)));
        Ok(self.tape.push(value, Op::Clip { input: self.id, lo, hi }, self.rg()))
    }

    /// Gather flat elements by index into a 1-D value.
    pub fn select(&self, indices: &[usize]) -> Result<Value> {
        let value = self.with_value(|a| -> Result<Array> {
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                out.push(*a.data.get(i).ok_or_else(|| {
                    Error::Shape(format!("select: index {i} out of range for {} elements", a.len()))
                })?);
            }
            Ok(Array::vector(out))
        })?;
        Ok(self.tape.push(
            value,
            Op::Select { input: self.id, indices: indices.into() },
            self.rg(),
        ))
    }

    /// Row `r` of a 2-D value as a 1-D value.
    pub fn row(&self, r: usize) -> Result<Value> {
        let shape = self.shape();
        if shape.len() != 2 || r >= shape[0] {
            return Err(Error::Shape(format!("row {r} of shape {shape:?}")));
        }
        let n = shape[1];
        let idx: Vec<usize> = (r * n..(r + 1) * n).collect();
        self.select(&idx)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Value> {
        let k = self.tape.scalar(c, false);
        self.add(&k)
    }

    pub fn scale(&self, c: f64) -> Result<Value> {
        let k = self.tape.scalar(c, false);
        self.mul(&k)
    }

    /// Reverse-mode gradient of this scalar with respect to every leaf.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.inner.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        if root.requires_grad {
            grads[self.id] = Some(vec![1.0]);
        }
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (ra, rb) = (nodes[*a].requires_grad, nodes[*b].requires_grad);
                    backward_binary(*kind, av, bv, &g, ra, rb, *a, *b, &mut grads);
                }
                Op::Unary(kind, a) => {
                    if nodes[*a].requires_grad {
                        let x = &nodes[*a].value;
                        let y = &node.value;
                        let ga = backward_unary(*kind, x, y, &g);
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Clip { input, lo, hi } => {
                    if nodes[*input].requires_grad {
                        let x = &nodes[*input].value;
                        let ga = x
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&xv, &gv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *input, ga);
                    }
                }
                Op::Select { input, indices } => {
                    if nodes[*input].requires_grad {
                        let mut ga = vec![0.0; nodes[*input].value.len()];
                        for (&i, &gv) in indices.iter().zip(&g) {
                            ga[i] += gv;
                        }
                        accumulate(&mut grads, *input, ga);
                    }
                }
            }
            // interior nodes keep no gradient; leaves were handled above
        }
        Ok(Gradients {
            grads,
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: nodes.iter().map(|n| n.value.len()).collect(),
        })
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x)).collect() }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Reduce a broadcast gradient back to the operand's element count.
fn unbroadcast(g: Vec<f64>, n: usize) -> Vec<f64> {
    if g.len() == n {
        g
    } else {
        vec![g.iter().sum()]
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_binary(
    kind: OpKind,
    a: &Array,
    b: &Array,
    g: &[f64],
    ra: bool,
    rb: bool,
    ia: usize,
    ib: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    if kind == OpKind::MatMul {
        let (m, k, n, _) = matmul_dims(a, b).expect("validated in forward");
        if ra {
            // dA = G · Bᵀ
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &b.data[p * n..(p + 1) * n];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            accumulate(grads, ia, ga);
        }
        if rb {
            // dB = Aᵀ · G
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a.data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let dst = &mut gb[p * n..(p + 1) * n];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
            accumulate(grads, ib, gb);
        }
        return;
    }
    let n = g.len();
    if ra {
        let ga: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(a, i), at(b, i));
                match kind {
                    OpKind::Add | OpKind::Sub => g[i],
                    OpKind::Mul => g[i] * y,
                    OpKind::Div => g[i] / y,
                    OpKind::Minimum => {
                        if y < x {
                            0.0
                        } else {
                            g[i]
                        }
                    }
                    _ => unreachable!(),
                }
            })
            .collect();
        accumulate(grads, ia, unbroadcast(ga, a.len()));
    }
    if rb {
        let gb: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(a, i), at(b, i));
                match kind {
                    OpKind::Add => g[i],
                    OpKind::Sub => -g[i],
                    OpKind::Mul => g[i] * x,
                    OpKind::Div => -g[i] * x / (y * y),
                    OpKind::Minimum => {
                        if y < x {
                            g[i]
                        } else {
                            0.0
                        }
                    }
                    _ => unreachable!(),
                }
            })
            .collect();
        accumulate(grads, ib, unbroadcast(gb, b.len()));
    }
}

fn backward_unary(kind: OpKind, x: &Array, y: &Array, g: &[f64]) -> Vec<f64> {
    match kind {
        OpKind::Neg => g.iter().map(|v| -v).collect(),
        OpKind::FlipGrad => g.iter().map(|v| -v).collect(),
        OpKind::Exp => g.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect(),
        OpKind::Log => g.iter().zip(&x.data).map(|(gv, xv)| gv / xv).collect(),
        OpKind::Tanh => g.iter().zip(&y.data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
        OpKind::Sigmoid => g.iter().zip(&y.data).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
        OpKind::Sum => vec![g[0]; x.len()],
        OpKind::Softmax => {
            let n = y.row_len().max(1);
            let mut out = vec![0.0; y.len()];
            for ((o, yr), gr) in out.chunks_mut(n).zip(y.data.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = yv * (gv - dot);
                }
            }
            out
        }
        OpKind::LogSoftmax => {
            let n = y.row_len().max(1);
            let mut out = vec![0.0; y.len()];
            for ((o, yr), gr) in out.chunks_mut(n).zip(y.data.chunks(n)).zip(g.chunks(n)) {
                let gs: f64 = gr.iter().sum();
                for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = gv - yv.exp() * gs;
                }
            }
            out
        }
        _ => unreachable!("not a unary op: {kind:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_grad_is_identity_forward_and_negates_backward() {
        let tape = Tape::new();
        let x = tape.scalar(2.5, true);
        let y = x.flip_grad().unwrap();
        assert_eq!(y.item(), 2.5);
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), vec![-1.0]);
    }

    #[test]
    fn exp_of_log_has_unit_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(0.37, true);
        let y = x.log().unwrap().exp().unwrap();
        let g = y.backward().unwrap().wrt(&x).unwrap()[0];
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let a = tape.scalar(3.0, true);
        let b = tape.scalar(4.0, true);
        let g = a.mul(&b).unwrap().backward().unwrap();
        assert_eq!(g.wrt(&a).unwrap(), vec![4.0]);
        assert_eq!(g.wrt(&b).unwrap(), vec![3.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let tape = Tape::new();
        let z = tape.vector(vec![0.3, -1.2, 2.0, 0.0], true);
        let g = z.softmax().unwrap().sum().unwrap().backward().unwrap();
        for v in g.wrt(&z).unwrap() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn flip_minus_identity() {
        let tape = Tape::new();
        let a = tape.scalar(1.0, true);
        let r = a.flip_grad().unwrap().sub(&a).unwrap();
        assert_eq!(r.item(), 0.0);
        assert_eq!(r.backward().unwrap().wrt(&a).unwrap(), vec![-2.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::new();
        let a = tape.scalar(2.0, true);
        let y = a.mul(&a).unwrap().add(&a).unwrap();
        assert_eq!(y.backward().unwrap().wrt(&a).unwrap(), vec![5.0]);
    }

    #[test]
    fn constants_receive_no_gradient_and_unreachable_leaves_are_zero() {
        let tape = Tape::new();
        let a = tape.scalar(2.0, true);
        let c = tape.scalar(5.0, false);
        let unused = tape.vector(vec![1.0, 2.0], true);
        let g = a.mul(&c).unwrap().backward().unwrap();
        assert!(g.wrt(&c).is_none());
        assert_eq!(g.wrt(&unused).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn errors_are_structured() {
        let tape = Tape::new();
        let a = tape.vector(vec![1.0, 2.0], true);
        let b = tape.vector(vec![1.0, 2.0, 3.0], true);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        let z = tape.vector(vec![1.0, 0.0], true);
        assert!(matches!(z.log(), Err(Error::Domain(_))));
        let neg = tape.scalar(-1.0, true);
        assert!(matches!(neg.log(), Err(Error::Domain(_))));
        assert!(matches!(a.backward(), Err(Error::Shape(_))));
        let m = tape.leaf(Array::zeros(&[2, 3]), true);
        let w = tape.leaf(Array::zeros(&[2, 3]), true);
        assert!(matches!(m.matmul(&w), Err(Error::Shape(_))));
    }

    #[test]
    fn clip_boundary_counts_as_inside() {
        let tape = Tape::new();
        let x = tape.vector(vec![-2.0, -1.5, 0.0, 3.0, 4.0], true);
        let g = x.clip_value(-1.5, 3.0).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_vector_by_matrix() {
        let tape = Tape::new();
        let x = tape.vector(vec![1.0, 2.0], true);
        let w = tape.leaf(Array::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let y = x.matmul(&w).unwrap();
        assert_eq!(y.data(), vec![9.0, 12.0, 15.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), vec![6.0, 15.0]);
        assert_eq!(g.wrt(&w).unwrap(), vec![1., 1., 1., 2., 2., 2.]);
    }
}
