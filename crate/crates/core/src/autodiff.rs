//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation on a
//! [`Var`] evaluates eagerly, checks its output for NaN/Inf, and (when any
//! input requires a gradient) records a backward closure. Node ids are
//! assigned in creation order, which is already a topological order, so
//! [`Graph::backward`] simply walks ids in reverse.
//!
//! Broadcasting is limited to leading dimensions: one operand's shape must
//! be a suffix of the other's.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{axis_split, strides, Tensor};

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient accumulators handed to backward closures.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    sizes: &'a [usize],
    requires: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Zero-initialised accumulator for node `id`, or `None` if it needs no gradient.
    fn slot(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.requires[id] {
            return None;
        }
        let size = self.sizes[id];
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); size]))
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { g: self, id }
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
        });
        nodes.len() - 1
    }

    fn push<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[usize],
        backward: F,
    ) -> Result<Var<'_, T>>
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + 'static,
    {
        self.push_rc(op, Rc::new(value), parents, backward)
    }

    /// Like `push`, for outputs the backward closure also holds on to.
    fn push_rc<F>(
        &self,
        op: &'static str,
        value: Rc<Tensor<T>>,
        parents: &[usize],
        backward: F,
    ) -> Result<Var<'_, T>>
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(self.var(nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(self.push_leaf(value, false))
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.var(self.push_leaf(value, requires_grad))
    }

    /// Binds a stored parameter into this graph; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return self.var(node);
        }
        let p = store.get(id);
        let node = self.push_leaf(p.value.clone(), !p.frozen);
        self.params.borrow_mut().insert(id, node);
        self.var(node)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Index {
                what: "concat axis",
                index: axis,
                len: base.len(),
            });
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|v| v.value()).collect();
        for v in &values[1..] {
            let s = v.shape();
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let bw_ids = ids.clone();
        self.push("concat", Tensor::new(&shape, out)?, &ids, move |g, sink| {
            let mut start = 0;
            for (&id, &e) in bw_ids.iter().zip(&extents) {
                if let Some(d) = sink.slot(id) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + start * inner
                            ..o * total * inner + (start + e) * inner];
                        for (a, b) in d[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                            *a += *b;
                        }
                    }
                }
                start += e;
            }
        })
    }

    /// `sum_i weights[i] * terms[i]` for same-shaped terms and a length-n weight vector.
    pub fn weighted_sum<'g>(
        &'g self,
        terms: &[Var<'g, T>],
        weights: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let w = weights.value();
        if terms.is_empty() || w.numel() != terms.len() {
            return Err(Error::shape("weighted_sum", &[terms.len()], w.shape()));
        }
        let values: Vec<Rc<Tensor<T>>> = terms.iter().map(|t| t.value()).collect();
        let shape = values[0].shape().to_vec();
        for v in &values[1..] {
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, v.shape()));
            }
        }
        let mut out = vec![T::zero(); values[0].numel()];
        for (v, &wi) in values.iter().zip(w.data()) {
            for (o, &x) in out.iter_mut().zip(v.data()) {
                *o += wi * x;
            }
        }
        let mut ids: Vec<usize> = terms.iter().map(|t| t.id).collect();
        let term_ids = ids.clone();
        let wid = weights.id;
        ids.push(wid);
        self.push(
            "weighted_sum",
            Tensor::new(&shape, out)?,
            &ids,
            move |g, sink| {
                for (i, (&id, v)) in term_ids.iter().zip(&values).enumerate() {
                    if let Some(d) = sink.slot(id) {
                        let wi = w.data()[i];
                        for (a, &gg) in d.iter_mut().zip(g) {
                            *a += wi * gg;
                        }
                    }
                    if let Some(dw) = sink.slot(wid) {
                        dw[i] += g
                            .iter()
                            .zip(v.data())
                            .fold(T::zero(), |acc, (&gg, &x)| acc + gg * x);
                    }
                }
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.sweep(loss, false)
    }

    /// Reverse sweep that also keeps the gradient of every intermediate node.
    pub fn backward_retain(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.sweep(loss, true)
    }

    fn sweep(&self, loss: Var<'_, T>, retain: bool) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.numel()).collect();
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if requires[loss.id] {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &nodes[id].backward {
                let mut sink = GradSink {
                    grads: &mut grads,
                    sizes: &sizes,
                    requires: &requires,
                };
                bw(&g, &mut sink);
                if !retain {
                    continue;
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut params: Vec<(ParamId, usize)> =
            self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, zeros if the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.node(var.id)
    }

    fn node(&self, id: usize) -> Tensor<T> {
        match &self.grads[id] {
            Some(g) => Tensor::new(&self.shapes[id], g.clone()).expect("grad matches node shape"),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    /// Gradient of a bound parameter, or `None` if it was never bound in the graph.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|&(_, node)| self.node(node))
    }

    /// Adds `scale * grad` of every bound parameter into `acc` (indexed by [`ParamId`]).
    pub fn accumulate_into(&self, acc: &mut [Tensor<T>], scale: T) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (a, &x) in acc[pid.0].data_mut().iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
        }
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    permute_into(data, shape, axes, &mut out);
    out
}

/// Adds the permuted `data` into `dst`.
fn permute_into<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize], dst: &mut [T]) {
    let rank = shape.len();
    if data.is_empty() {
        return;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    for row in dst.chunks_exact_mut(inner) {
        if inner_step == 1 {
            for (d, &v) in row.iter_mut().zip(&data[off..off + inner]) {
                *d += v;
            }
        } else {
            for (j, d) in row.iter_mut().enumerate() {
                *d += data[off + j * inner_step];
            }
        }
        // advance the odometer over all but the last output axis
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    /// First element; intended for scalar losses.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// Copy of the value cut off from the graph.
    pub fn detach(&self) -> Var<'g, T> {
        self.g.constant((*self.value()).clone())
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static, // (x, y) -> dy/dx
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = Rc::new(x.map(&f));
        let yv = y.clone();
        let ix = self.id;
        self.g.push_rc(op, y, &[ix], move |g, sink| {
            if let Some(d) = sink.slot(ix) {
                for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(x.data()).zip(yv.data()) {
                    *d += g * df(x, y);
                }
            }
        })
    }

    pub fn exp(&self) -> Result<Var<'g, T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Var<'g, T>> {
        self.unary("log", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Result<Var<'g, T>> {
        self.gated_swish("swish", None)
    }

    /// `x * sigmoid(beta * x)` with a learnable scalar `beta` (shape `[1]`).
    pub fn eswish(&self, beta: Var<'g, T>) -> Result<Var<'g, T>> {
        let bv = beta.value();
        if bv.numel() != 1 {
            return Err(Error::shape("eswish", &self.shape(), bv.shape()));
        }
        self.gated_swish("eswish", Some(beta))
    }

    fn gated_swish(&self, op: &'static str, beta: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let b = beta.map_or(T::one(), |v| v.value().data()[0]);
        let x = self.value();
        let s: Vec<T> = x.data().iter().map(|&v| sigmoid(b * v)).collect();
        let out: Vec<T> = x.data().iter().zip(&s).map(|(&v, &s)| v * s).collect();
        let ix = self.id;
        let ib = beta.map(|v| v.id);
        let parents: Vec<usize> = std::iter::once(ix).chain(ib).collect();
        self.g.push(
            op,
            Tensor::new(x.shape(), out)?,
            &parents,
            move |g, sink| {
                let x = x.data();
                if let Some(d) = sink.slot(ix) {
                    for (((d, &g), &v), &s) in d.iter_mut().zip(g).zip(x).zip(&s) {
                        *d += g * (s + v * b * s * (T::one() - s));
                    }
                }
                if let Some(db) = ib.and_then(|ib| sink.slot(ib)) {
                    let mut acc = T::zero();
                    for ((&g, &v), &s) in g.iter().zip(x).zip(&s) {
                        acc += g * v * v * s * (T::one() - s);
                    }
                    db[0] += acc;
                }
            },
        )
    }

    pub fn scale(&self, c: T) -> Result<Var<'g, T>> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Var<'g, T>> {
        self.scale(-T::one())
    }

    fn binary(
        &self,
        op: &'static str,
        other: &Var<'g, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let shape = suffix_broadcast(op, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let mut out = Vec::with_capacity(n);
        if na == n && nb == n {
            out.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        } else if na == n {
            for ca in a.data().chunks_exact(nb.max(1)) {
                out.extend(ca.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for cb in b.data().chunks_exact(na.max(1)) {
                out.extend(a.data().iter().zip(cb).map(|(&x, &y)| f(x, y)));
            }
        }
        let (ia, ib) = (self.id, other.id);
        self.g
            .push(op, Tensor::new(&shape, out)?, &[ia, ib], move |g, sink| {
                // the broadcast operand repeats every `period` elements of the output
                let period = na.min(nb).max(1);
                let (a, b) = (a.data(), b.data());
                let pairs = |c: usize| -> (std::ops::Range<usize>, std::ops::Range<usize>) {
                    let r = c * period..(c + 1) * period;
                    let ra = if na == n { r.clone() } else { 0..period };
                    let rb = if nb == n { r } else { 0..period };
                    (ra, rb)
                };
                for (slot, dfn, full) in
                    [(ia, &da as &dyn Fn(T, T) -> T, na == n), (ib, &db, nb == n)]
                {
                    let Some(d) = sink.slot(slot) else { continue };
                    for (c, gc) in g.chunks_exact(period).enumerate() {
                        let (ra, rb) = pairs(c);
                        let dc = if full {
                            &mut d[c * period..(c + 1) * period]
                        } else {
                            &mut d[..]
                        };
                        for (((d, &g), &x), &y) in dc.iter_mut().zip(gc).zip(&a[ra]).zip(&b[rb]) {
                            *d += g * dfn(x, y);
                        }
                    }
                }
            })
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary("add", other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(
            "sub",
            other,
            |a, b| a - b,
            |_, _| T::one(),
            |_, _| -T::one(),
        )
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary("mul", other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let ix = self.id;
        self.g
            .push("sum", Tensor::scalar(x.sum()), &[ix], move |g, sink| {
                if let Some(d) = sink.slot(ix) {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            })
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let n = T::of(self.value().numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "axis",
                index: axis,
                len: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ix = self.id;
        self.g.push(
            "sum_axis",
            Tensor::new(&out_shape, out)?,
            &[ix],
            move |g, sink| {
                if let Some(d) = sink.slot(ix) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                d[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            },
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        let ix = self.id;
        self.g.push("reshape", out, &[ix], move |g, sink| {
            if let Some(d) = sink.slot(ix) {
                for (a, &b) in d.iter_mut().zip(g) {
                    *a += b;
                }
            }
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(x.data(), &shape, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let ix = self.id;
        let g_shape = out_shape.clone();
        self.g.push(
            "permute",
            Tensor::new(&out_shape, out)?,
            &[ix],
            move |g, sink| {
                if let Some(d) = sink.slot(ix) {
                    permute_into(g, &g_shape, &inverse, d);
                }
            },
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::Index {
                what: "transpose axis",
                index: a.max(b),
                len: rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "slice axis",
                index: axis,
                len: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::Index {
                what: "slice end",
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &x.data()[(o * n + start) * inner..(o * n + start + len) * inner],
            );
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let ix = self.id;
        self.g.push(
            "slice",
            Tensor::new(&out_shape, out)?,
            &[ix],
            move |g, sink| {
                if let Some(d) = sink.slot(ix) {
                    for o in 0..outer {
                        let dst = &mut d[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (a, &b) in dst
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *a += b;
                        }
                    }
                }
            },
        )
    }

    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_ex(other, false, false)
    }

    /// `self * other^T` over the last two axes.
    pub fn matmul_nt(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_ex(other, false, true)
    }

    fn matmul_ex(&self, other: &Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = suffix_broadcast("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .map_err(|_| Error::shape("matmul", &sa, &sb))?;
        let na: usize = sa[..sa.len() - 2].iter().product();
        let nb: usize = sb[..sb.len() - 2].iter().product();
        let nout: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let plan = MatmulPlan {
            m,
            k,
            n,
            ta,
            tb,
            na,
            nb,
            nout,
        };
        let mut out = vec![T::zero(); nout * m * n];
        plan.forward(a.data(), b.data(), &mut out);
        let (ia, ib) = (self.id, other.id);
        self.g.push(
            "matmul",
            Tensor::new(&out_shape, out)?,
            &[ia, ib],
            move |g, sink| {
                if let Some(da) = sink.slot(ia) {
                    plan.grad_lhs(g, b.data(), da);
                }
                if let Some(db) = sink.slot(ib) {
                    plan.grad_rhs(g, a.data(), db);
                }
            },
        )
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                len: shape.len(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut y = vec![T::zero(); x.numel()];
        if inner == 1 {
            for (xr, yr) in x.data().chunks_exact(n).zip(y.chunks_exact_mut(n)) {
                let mx = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for (y, &v) in yr.iter_mut().zip(xr) {
                    *y = (v - mx).exp();
                    s += *y;
                }
                let r = T::one() / s;
                yr.iter_mut().for_each(|y| *y *= r);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mx = (0..n).fold(T::neg_infinity(), |m, j| m.max(x.data()[at(j)]));
                    let mut s = T::zero();
                    for j in 0..n {
                        let e = (x.data()[at(j)] - mx).exp();
                        y[at(j)] = e;
                        s += e;
                    }
                    for j in 0..n {
                        y[at(j)] = y[at(j)] / s;
                    }
                }
            }
        }
        let y = Rc::new(Tensor::new(&shape, y)?);
        let yv = y.clone();
        let ix = self.id;
        self.g.push_rc("softmax", y, &[ix], move |g, sink| {
            if let Some(d) = sink.slot(ix) {
                let y = yv.data();
                if inner == 1 {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..n).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..n {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        })
    }

    /// RMS normalisation over the last axis with a learned gain.
    pub fn rms_norm(&self, gain: &Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let gv = gain.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if gv.shape() != [d] {
            return Err(Error::shape("rms_norm", &shape, gv.shape()));
        }
        let rows = x.numel() / d.max(1);
        let dn = T::of(d as f64);
        let mut inv = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let ir = T::one() / (ms + eps).sqrt();
            inv[r] = ir;
            for c in 0..d {
                out[r * d + c] = row[c] * ir * gv.data()[c];
            }
        }
        let (ix, ig) = (self.id, gain.id);
        self.g.push(
            "rms_norm",
            Tensor::new(&shape, out)?,
            &[ix, ig],
            move |g, sink| {
                if let Some(dx) = sink.slot(ix) {
                    for r in 0..rows {
                        let row = &x.data()[r * d..(r + 1) * d];
                        let ir = inv[r];
                        let dot = (0..d).fold(T::zero(), |acc, c| {
                            acc + g[r * d + c] * gv.data()[c] * row[c]
                        });
                        let k = ir * ir * ir / dn * dot;
                        for c in 0..d {
                            dx[r * d + c] += g[r * d + c] * gv.data()[c] * ir - row[c] * k;
                        }
                    }
                }
                if let Some(dg) = sink.slot(ig) {
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * x.data()[r * d + c] * inv[r];
                        }
                    }
                }
            },
        )
    }

    /// Mean token cross-entropy of logits `[.., V]` against one target per row,
    /// via log-sum-exp.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g, T>> {
        let z = self.value();
        let shape = z.shape().to_vec();
        let v = *shape.last().unwrap_or(&0);
        let rows = z.numel().checked_div(v).unwrap_or(0);
        if targets.len() != rows || rows == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some((pos, &id)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
            return Err(Error::Vocab { id, pos, vocab: v });
        }
        let mut probs = vec![T::zero(); z.numel()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z.data()[r * v..(r + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for c in 0..v {
                let e = (row[c] - mx).exp();
                probs[r * v + c] = e;
                s += e;
            }
            for c in 0..v {
                probs[r * v + c] /= s;
            }
            total += mx + s.ln() - row[targets[r]];
        }
        let scale = T::one() / T::of(rows as f64);
        let targets = targets.to_vec();
        let iz = self.id;
        self.g.push(
            "cross_entropy",
            Tensor::scalar(total * scale),
            &[iz],
            move |g, sink| {
                if let Some(d) = sink.slot(iz) {
                    let k = g[0] * scale;
                    for r in 0..rows {
                        for c in 0..v {
                            d[r * v + c] += k * probs[r * v + c];
                        }
                        d[r * v + targets[r]] -= k;
                    }
                }
            },
        )
    }

    /// Row gather from an embedding table `[V, d]`; `self` is the table.
    pub fn embedding(&self, ids: &[usize], shape: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        let ts = table.shape().to_vec();
        if ts.len() != 2 || ids.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("embedding", &ts, shape));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::Vocab { id, pos, vocab });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let ids = ids.to_vec();
        let it = self.id;
        self.g.push(
            "embedding",
            Tensor::new(&out_shape, out)?,
            &[it],
            move |g, sink| {
                if let Some(dt) = sink.slot(it) {
                    for (p, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[p * d + c];
                        }
                    }
                }
            },
        )
    }

    /// Depthwise 1-D convolution over `[B, L, C]` with kernel `[k, C]`, left-padded
    /// with `k - 1` zeros so that output `l` only sees inputs `l-k+1 ..= l`.
    pub fn causal_depthwise_conv(&self, kernel: &Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let kv = kernel.value();
        let (xs, ks) = (x.shape().to_vec(), kv.shape().to_vec());
        if xs.len() != 3 || ks.len() != 2 || ks[1] != xs[2] || ks[0] == 0 {
            return Err(Error::shape("causal_depthwise_conv", &xs, &ks));
        }
        let (b, l, c, k) = (xs[0], xs[1], xs[2], ks[0]);
        let mut out = vec![T::zero(); x.numel()];
        for bi in 0..b {
            for t in 0..l {
                let o = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
                for j in 0..k {
                    // padded position t + j maps to input t + j - (k - 1)
                    let Some(src) = (t + j).checked_sub(k - 1) else {
                        continue;
                    };
                    let xi = &x.data()[(bi * l + src) * c..(bi * l + src + 1) * c];
                    let kj = &kv.data()[j * c..(j + 1) * c];
                    for ch in 0..c {
                        o[ch] += xi[ch] * kj[ch];
                    }
                }
            }
        }
        let (ix, ik) = (self.id, kernel.id);
        self.g.push(
            "causal_depthwise_conv",
            Tensor::new(&xs, out)?,
            &[ix, ik],
            move |g, sink| {
                if let Some(dx) = sink.slot(ix) {
                    for bi in 0..b {
                        for t in 0..l {
                            for j in 0..k {
                                let Some(src) = (t + j).checked_sub(k - 1) else {
                                    continue;
                                };
                                for ch in 0..c {
                                    dx[(bi * l + src) * c + ch] +=
                                        g[(bi * l + t) * c + ch] * kv.data()[j * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(dk) = sink.slot(ik) {
                    for bi in 0..b {
                        for t in 0..l {
                            for j in 0..k {
                                let Some(src) = (t + j).checked_sub(k - 1) else {
                                    continue;
                                };
                                for ch in 0..c {
                                    dk[j * c + ch] += g[(bi * l + t) * c + ch]
                                        * x.data()[(bi * l + src) * c + ch];
                                }
                            }
                        }
                    }
                }
            },
        )
    }
}

/// Batched product layout shared by the forward and both backward products.
#[derive(Clone, Copy)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    na: usize,
    nb: usize,
    nout: usize,
}

impl MatmulPlan {
    /// Whether all of `a`'s batch can be folded into rows of one product.
    fn folds(&self) -> bool {
        self.nb == 1 && !self.ta && self.na == self.nout
    }

    fn a_view(&self, batch: usize) -> MatView {
        let off = batch * self.m * self.k;
        if self.ta {
            MatView::row_major(off, self.m).transposed()
        } else {
            MatView::row_major(off, self.k)
        }
    }

    fn b_view(&self, batch: usize) -> MatView {
        let off = batch * self.k * self.n;
        if self.tb {
            MatView::row_major(off, self.k).transposed()
        } else {
            MatView::row_major(off, self.n)
        }
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        if self.folds() {
            gemm(
                self.na * self.m,
                self.k,
                self.n,
                a,
                self.a_view(0),
                b,
                self.b_view(0),
                out,
                MatView::row_major(0, self.n),
                false,
            );
            return;
        }
        for i in 0..self.nout {
            let cv = MatView::row_major(i * self.m * self.n, self.n);
            gemm(
                self.m,
                self.k,
                self.n,
                a,
                self.a_view(i % self.na),
                b,
                self.b_view(i % self.nb),
                out,
                cv,
                false,
            );
        }
    }

    /// d(op(A)) = dC * op(B)^T, written through A's storage layout.
    fn grad_lhs<T: Scalar>(&self, g: &[T], b: &[T], da: &mut [T]) {
        if self.folds() {
            let gv = MatView::row_major(0, self.n);
            gemm(
                self.na * self.m,
                self.n,
                self.k,
                g,
                gv,
                b,
                self.b_view(0).transposed(),
                da,
                self.a_view(0),
                true,
            );
            return;
        }
        for i in 0..self.nout {
            let gv = MatView::row_major(i * self.m * self.n, self.n);
            gemm(
                self.m,
                self.n,
                self.k,
                g,
                gv,
                b,
                self.b_view(i % self.nb).transposed(),
                da,
                self.a_view(i % self.na),
                true,
            );
        }
    }

    /// d(op(B)) = op(A)^T * dC, written through B's storage layout.
    fn grad_rhs<T: Scalar>(&self, g: &[T], a: &[T], db: &mut [T]) {
        if self.folds() {
            let gv = MatView::row_major(0, self.n);
            gemm(
                self.k,
                self.na * self.m,
                self.n,
                a,
                self.a_view(0).transposed(),
                g,
                gv,
                db,
                self.b_view(0),
                true,
            );
            return;
        }
        for i in 0..self.nout {
            let gv = MatView::row_major(i * self.m * self.n, self.n);
            gemm(
                self.k,
                self.m,
                self.n,
                a,
                self.a_view(i % self.na).transposed(),
                g,
                gv,
                db,
                self.b_view(i % self.nb),
                true,
            );
        }
    }
}
