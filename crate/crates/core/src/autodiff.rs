//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the tape is already topologically
//! sorted; [`Tape::backward`] walks it once from the loss down to the first
//! node and leaves `dLoss/dLeaf` for every leaf that requires a gradient.
//!
//! ```
//! use strmatch::autodiff::Tape;
//! use strmatch::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
//! let loss = x.mul(x).unwrap().sum_all();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Results produced only from constants are recorded without a backward
//! rule, so inference on a tape costs no more than plain evaluation.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{gemm_acc, softmax_rows, softmax_rows_backward, transpose2};
use crate::tensor::{strides, Real, Tensor};

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<F: Real> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product. `needs[i]` says whether input `i` wants a
    /// gradient; entries for the others may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

enum Op<F: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    Softmax(usize),
    LayerNorm(usize, Vec<F>),
    Silu(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    SumAll(usize),
    SumAxis(usize, usize),
    Pool2x(usize, usize, usize),
    Upsample2x(usize, usize, usize),
    Concat(Vec<usize>),
    Cosine(usize, usize),
    Custom(Vec<usize>, Box<dyn CustomOp<F>>),
}

struct Node<F: Real> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation recorder. Confined to one thread.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<Tensor<F>>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(Rc::new(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push(&self, value: Rc<Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
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

    fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a result computed outside the built-in op set.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, F>],
        output: Tensor<F>,
        op: Box<dyn CustomOp<F>>,
    ) -> Var<'t, F> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(Rc::new(output), Op::Custom(ids, op), rg)
    }

    /// Flattens and concatenates `parts` into one vector.
    pub fn concat_flat<'t>(&'t self, parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let n = data.len();
        let rg = parts.iter().any(|v| v.requires_grad());
        let ids = parts.iter().map(|v| v.id).collect();
        Ok(self.push(
            Rc::new(Tensor::from_parts(vec![n], data)),
            Op::Concat(ids),
            rg,
        ))
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(lv.shape(), F::one()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                let contributions = backward_node(&nodes, node, &g)?;
                for (pid, pg) in contributions {
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += *b;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn backward_node<F: Real>(
    nodes: &[Node<F>],
    node: &Node<F>,
    g: &Tensor<F>,
) -> Result<Vec<(usize, Tensor<F>)>> {
    let val = |i: usize| nodes[i].value.as_ref();
    let need = |i: usize| nodes[i].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(node.op, Op::Sub(..));
            if need(*a) {
                out.push((*a, reduce_to(g, val(*a).shape())));
            }
            if need(*b) {
                let mut gb = reduce_to(g, val(*b).shape());
                if neg {
                    gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                out.push((*b, gb));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            {
                let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                for_each_bcast(g.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                    gad[ia] += gd[o] * bd[ib];
                    gbd[ib] += gd[o] * ad[ia];
                });
            }
            if need(*a) {
                out.push((*a, ga));
            }
            if need(*b) {
                out.push((*b, gb));
            }
        }
        Op::Scale(a, c) => out.push((*a, g.scale(*c))),
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), g, need(*a), need(*b));
            if let Some(ga) = ga {
                out.push((*a, ga));
            }
            if let Some(gb) = gb {
                out.push((*b, gb));
            }
        }
        Op::Softmax(a) => {
            let y = node.value.as_ref();
            let k = *y.shape().last().unwrap_or(&1);
            let mut dx = Tensor::zeros(y.shape());
            softmax_rows_backward(k, y.data(), g.data(), dx.data_mut());
            out.push((*a, dx));
        }
        Op::LayerNorm(a, inv_std) => {
            let y = node.value.as_ref();
            let k = *y.shape().last().unwrap_or(&1);
            let kf = F::of(k as f64);
            let mut dx = Tensor::zeros(y.shape());
            for (r, ((yr, gr), xr)) in y
                .data()
                .chunks_exact(k)
                .zip(g.data().chunks_exact(k))
                .zip(dx.data_mut().chunks_exact_mut(k))
                .enumerate()
            {
                let mut mg = F::zero();
                let mut mgy = F::zero();
                for (&yv, &gv) in yr.iter().zip(gr) {
                    mg += gv;
                    mgy += gv * yv;
                }
                mg /= kf;
                mgy /= kf;
                let s = inv_std[r];
                for ((x, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
                    *x = s * (gv - mg - yv * mgy);
                }
            }
            out.push((*a, dx));
        }
        Op::Silu(a) => {
            let x = val(*a);
            let dx = Tensor::from_parts(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| {
                        let s = F::one() / (F::one() + (-xv).exp());
                        gv * s * (F::one() + xv * (F::one() - s))
                    })
                    .collect(),
            );
            out.push((*a, dx));
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            out.push((*a, g.permute(&inv)?));
        }
        Op::Reshape(a) => out.push((*a, g.reshape(val(*a).shape())?)),
        Op::SumAll(a) => out.push((*a, Tensor::full(val(*a).shape(), g.item()))),
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    dx.extend_from_slice(row);
                }
            }
            out.push((*a, Tensor::from_parts(shape.to_vec(), dx)));
        }
        Op::Pool2x(a, h, w) => {
            let shape = val(*a).shape();
            out.push((*a, upsample2x_raw(g, *h / 2, *w / 2, F::of(0.25))));
            debug_assert_eq!(out.last().unwrap().1.shape(), shape);
        }
        Op::Upsample2x(a, h, w) => {
            out.push((*a, pool2x_raw(g, *h * 2, *w * 2, F::one())));
        }
        Op::Concat(ids) => {
            let mut off = 0;
            for &id in ids {
                let v = val(id);
                let n = v.len();
                if need(id) {
                    out.push((
                        id,
                        Tensor::from_parts(v.shape().to_vec(), g.data()[off..off + n].to_vec()),
                    ));
                }
                off += n;
            }
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let dot = av.dot(bv);
            let na = av.norm();
            let nb = bv.norm();
            let gs = g.item();
            // L = -dot/(na nb)
            if need(*a) {
                let c1 = -gs / (na * nb);
                let c2 = gs * dot / (na * na * na * nb);
                out.push((*a, bv.zip_map(av, |bb, aa| c1 * bb + c2 * aa)?));
            }
            if need(*b) {
                let c1 = -gs / (na * nb);
                let c2 = gs * dot / (nb * nb * nb * na);
                out.push((*b, av.zip_map(bv, |aa, bb| c1 * aa + c2 * bb)?));
            }
        }
        Op::Custom(ids, op) => {
            let inputs: Vec<&Tensor<F>> = ids.iter().map(|&i| val(i)).collect();
            let needs: Vec<bool> = ids.iter().map(|&i| need(i)).collect();
            let grads = op.backward(&inputs, &node.value, g, &needs)?;
            for ((&id, gi), n) in ids.iter().zip(grads).zip(needs) {
                if let (Some(gi), true) = (gi, n) {
                    if gi.shape() != val(id).shape() {
                        return Err(Error::Contract(format!(
                            "{} backward produced shape {:?} for input {:?}",
                            op.name(),
                            gi.shape(),
                            val(id).shape()
                        )));
                    }
                    out.push((id, gi));
                }
            }
        }
    }
    Ok(out)
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value as a fresh constant leaf: nothing flows back through it.
    pub fn detach(&self) -> Var<'t, F> {
        self.tape.push(self.value(), Op::Leaf, false)
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        self.tape.push(Rc::new(value), op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t, F>, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Rc::new(value), op, rg)
    }

    fn elementwise(
        &self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let n: usize = shape.iter().product();
        let mut data = vec![F::zero(); n];
        let (ad, bd) = (a.data(), b.data());
        for_each_bcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
            data[o] = f(ad[ia], bd[ib]);
        });
        Ok(Tensor::from_parts(shape, data))
    }

    /// Broadcasting sum.
    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.elementwise(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.elementwise(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.elementwise(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    /// Batched matrix product `[..., m, k] × [..., k, r]`.
    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let v = matmul_forward(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn softmax_last(&self) -> Var<'t, F> {
        let x = self.value();
        let k = *x.shape().last().unwrap_or(&1);
        let mut y = Tensor::zeros(x.shape());
        softmax_rows(k, x.data(), y.data_mut());
        self.unary(y, Op::Softmax(self.id))
    }

    /// Zero-mean unit-variance normalisation over the last axis (no affine part).
    pub fn layer_norm_last(&self, eps: F) -> Var<'t, F> {
        let x = self.value();
        let k = *x.shape().last().unwrap_or(&1);
        let kf = F::of(k as f64);
        let mut y = Tensor::zeros(x.shape());
        let mut inv = Vec::with_capacity(x.len() / k);
        for (xr, yr) in x.data().chunks_exact(k).zip(y.data_mut().chunks_exact_mut(k)) {
            let mut mean = F::zero();
            for &v in xr {
                mean += v;
            }
            mean /= kf;
            let mut var = F::zero();
            for &v in xr {
                var += (v - mean) * (v - mean);
            }
            var /= kf;
            let s = F::one() / (var + eps).sqrt();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * s;
            }
            inv.push(s);
        }
        self.unary(y, Op::LayerNorm(self.id, inv))
    }

    pub fn silu(&self) -> Var<'t, F> {
        let y = self.value().map(|v| v / (F::one() + (-v).exp()));
        self.unary(y, Op::Silu(self.id))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, F>> {
        let y = self.value().permute(perm)?;
        Ok(self.unary(y, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let y = self.value().reshape(shape)?;
        Ok(self.unary(y, Op::Reshape(self.id)))
    }

    pub fn sum_all(&self) -> Var<'t, F> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'t, F> {
        let n = self.value().len();
        self.sum_all().scale(F::one() / F::of(n as f64))
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::Contract(format!(
                "sum_axis({axis}) on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (d, &v) in dst.iter_mut().zip(&x.data()[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(self.unary(Tensor::from_parts(out_shape, data), Op::SumAxis(self.id, axis)))
    }

    /// 2×2 average pooling of `[B, h·w, C]` laid out as `[B, h, w, C]`.
    pub fn avg_pool2x(&self, h: usize, w: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        check_grid(&x, h, w, "avg_pool2x")?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::Config(format!("cannot pool odd grid {h}x{w}")));
        }
        let y = pool2x_raw(&x, h, w, F::of(0.25));
        Ok(self.unary(y, Op::Pool2x(self.id, h, w)))
    }

    /// Nearest-neighbour 2× upsampling of `[B, h·w, C]`.
    pub fn upsample2x(&self, h: usize, w: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        check_grid(&x, h, w, "upsample2x")?;
        let y = upsample2x_raw(&x, h, w, F::one());
        Ok(self.unary(y, Op::Upsample2x(self.id, h, w)))
    }

    /// Negative cosine similarity `−⟨a,b⟩ / (‖a‖‖b‖)` over all elements.
    pub fn cosine_loss(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("cosine_loss", a.shape(), b.shape()));
        }
        let na = a.norm();
        let nb = b.norm();
        if na == F::zero() || nb == F::zero() {
            return Err(Error::Degenerate(
                "cosine similarity is undefined for a zero vector".into(),
            ));
        }
        let v = -a.dot(&b) / (na * nb);
        Ok(self.binary(other, Tensor::scalar(v), Op::Cosine(self.id, other.id)))
    }
}

fn check_grid<F: Real>(x: &Tensor<F>, h: usize, w: usize, op: &'static str) -> Result<()> {
    if x.rank() != 3 || x.shape()[1] != h * w {
        return Err(Error::shape(op, x.shape(), &[0, h * w, 0]));
    }
    Ok(())
}

fn pool2x_raw<F: Real>(x: &Tensor<F>, h: usize, w: usize, weight: F) -> Tensor<F> {
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![F::zero(); b * ho * wo * c];
    let xd = x.data();
    for bi in 0..b {
        for yo in 0..ho {
            for xo in 0..wo {
                let dst = ((bi * ho + yo) * wo + xo) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((bi * h + 2 * yo + dy) * w + 2 * xo + dx) * c;
                    for ch in 0..c {
                        y[dst + ch] += weight * xd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![b, ho * wo, c], y)
}

fn upsample2x_raw<F: Real>(x: &Tensor<F>, h: usize, w: usize, weight: F) -> Tensor<F> {
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let (ho, wo) = (h * 2, w * 2);
    let mut y = vec![F::zero(); b * ho * wo * c];
    let xd = x.data();
    for bi in 0..b {
        for yo in 0..ho {
            for xo in 0..wo {
                let dst = ((bi * ho + yo) * wo + xo) * c;
                let src = ((bi * h + yo / 2) * w + xo / 2) * c;
                for ch in 0..c {
                    y[dst + ch] = weight * xd[src + ch];
                }
            }
        }
    }
    Tensor::from_parts(vec![b, ho * wo, c], y)
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for d in 0..r {
        let da = if d + a.len() >= r { a[d + a.len() - r] } else { 1 };
        let db = if d + b.len() >= r { b[d + b.len() - r] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < off || shape[d - off] == 1 {
                0
            } else {
                st[d - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_bcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let la: usize = a.iter().product();
    let lb: usize = b.iter().product();
    if a == out && out.ends_with(b) {
        (0..n).for_each(|i| f(i, i, i % lb));
        return;
    }
    if b == out && out.ends_with(a) {
        (0..n).for_each(|i| f(i, i % la, i));
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` over the axes along which `shape` was broadcast.
fn reduce_to<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    {
        let od = out.data_mut();
        let gd = g.data();
        for_each_bcast(g.shape(), shape, g.shape(), |o, i, _| od[i] += gd[o]);
    }
    out
}

struct MatmulPlan {
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    m: usize,
    k: usize,
    r: usize,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, r) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    // a 2-D right operand folds every leading axis of `a` into the rows
    if rb == 2 {
        return Ok(MatmulPlan {
            batch: vec![],
            a_batch_strides: vec![],
            b_batch_strides: vec![],
            m: a[..ra - 1].iter().product(),
            k,
            r,
        });
    }
    let batch = broadcast_shape(&a[..ra - 2], &b[..rb - 2]).ok_or_else(|| Error::shape("matmul", a, b))?;
    Ok(MatmulPlan {
        a_batch_strides: bcast_strides(&a[..ra - 2], &batch),
        b_batch_strides: bcast_strides(&b[..rb - 2], &batch),
        batch,
        m,
        k,
        r,
    })
}

impl MatmulPlan {
    /// (out batch index, a matrix index, b matrix index) triples.
    fn pairs(&self) -> Vec<(usize, usize, usize)> {
        let n: usize = self.batch.iter().product();
        let mut out = Vec::with_capacity(n);
        let r = self.batch.len();
        let mut idx = vec![0usize; r];
        for o in 0..n {
            let ia = (0..r).map(|d| idx[d] * self.a_batch_strides[d]).sum();
            let ib = (0..r).map(|d| idx[d] * self.b_batch_strides[d]).sum();
            out.push((o, ia, ib));
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < self.batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    fn out_shape(&self, a: &[usize]) -> Vec<usize> {
        if self.batch.is_empty() {
            let mut s = a[..a.len() - 1].to_vec();
            s.push(self.r);
            s
        } else {
            let mut s = self.batch.clone();
            s.extend([self.m, self.r]);
            s
        }
    }
}

pub(crate) fn matmul_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let plan = plan_matmul(a.shape(), b.shape())?;
    let (m, k, r) = (plan.m, plan.k, plan.r);
    let out_shape = plan.out_shape(a.shape());
    let mut c = vec![F::zero(); out_shape.iter().product()];
    for (o, ia, ib) in plan.pairs() {
        gemm_acc(
            m,
            k,
            r,
            &a.data()[ia * m * k..],
            &b.data()[ib * k * r..],
            &mut c[o * m * r..(o + 1) * m * r],
        );
    }
    Ok(Tensor::from_parts(out_shape, c))
}

fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &Tensor<F>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let plan = plan_matmul(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, r) = (plan.m, plan.k, plan.r);
    let pairs = plan.pairs();
    let ga = need_a.then(|| {
        // dA = dC · Bᵀ
        let nb = b.len() / (k * r);
        let mut bt = vec![F::zero(); b.len()];
        for i in 0..nb {
            transpose2(k, r, &b.data()[i * k * r..(i + 1) * k * r], &mut bt[i * k * r..(i + 1) * k * r]);
        }
        let mut ga = vec![F::zero(); a.len()];
        for &(o, ia, ib) in &pairs {
            gemm_acc(
                m,
                r,
                k,
                &g.data()[o * m * r..],
                &bt[ib * k * r..],
                &mut ga[ia * m * k..(ia + 1) * m * k],
            );
        }
        Tensor::from_parts(a.shape().to_vec(), ga)
    });
    let gb = need_b.then(|| {
        // dB = Aᵀ · dC
        let na = a.len() / (m * k);
        let mut at = vec![F::zero(); a.len()];
        for i in 0..na {
            transpose2(m, k, &a.data()[i * m * k..(i + 1) * m * k], &mut at[i * m * k..(i + 1) * m * k]);
        }
        let mut gb = vec![F::zero(); b.len()];
        for &(o, ia, ib) in &pairs {
            gemm_acc(
                k,
                m,
                r,
                &at[ia * m * k..],
                &g.data()[o * m * r..],
                &mut gb[ib * k * r..(ib + 1) * k * r],
            );
        }
        Tensor::from_parts(b.shape().to_vec(), gb)
    });
    (ga, gb)
}

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    step: F,
) -> Result<Tensor<F>> {
    finite_diff_grad_at(&mut f, x, step, 0..x.len())
}

/// Central differences restricted to the flat indices in `indices`;
/// other entries of the result are zero.
pub fn finite_diff_grad_at<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    step: F,
    indices: impl IntoIterator<Item = usize>,
) -> Result<Tensor<F>> {
    if step <= F::zero() {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    let two = F::of(2.0);
    for i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (two * step);
    }
    Ok(grad)
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` where
/// `floor = floor_frac · max|b|`; `b` is the reference.
pub fn max_rel_error<F: Real>(a: &Tensor<F>, b: &Tensor<F>, floor_frac: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("max_rel_error", a.shape(), b.shape()));
    }
    let floor = (floor_frac * b.max_abs().as_f64()).max(f64::MIN_POSITIVE);
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max))
}

/// Detached-from-tape convenience: evaluates `a · b` without recording.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    matmul_forward(a, b)
}

/// Row-wise softmax over the last axis, without recording.
pub fn softmax_last<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let k = *x.shape().last().unwrap_or(&1);
    let mut y = Tensor::zeros(x.shape());
    softmax_rows(k, x.data(), y.data_mut());
    y
}

/// `−⟨a,b⟩/(‖a‖‖b‖)` without recording.
pub fn cosine_loss<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    let tape = Tape::new();
    let l = tape.constant(a.clone()).cosine_loss(tape.constant(b.clone()))?;
    Ok(l.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        Tensor::from_fn(&[m, r], |idx| {
            let (i, j) = (idx / r, idx % r);
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_batch_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[2, 3, 4], &mut rng);
        let b = Tensor::<f64>::randn(&[1, 4, 5], &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let b2 = b.reshape(&[4, 5]).unwrap();
        for bi in 0..2 {
            let ab = Tensor::from_fn(&[3, 4], |i| a.data()[bi * 12 + i]);
            let want = naive_matmul(&ab, &b2);
            for i in 0..15 {
                assert!((c.data()[bi * 15 + i] - want.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_last(&t(&[2], &[0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_last(&t(&[2], &[2f64.ln(), 0.0]));
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let y = softmax_last(&t(&[2], &[1000.0, 0.0]));
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
    }

    #[test]
    fn cosine_examples() {
        let v = t(&[3], &[1., -2., 0.5]);
        assert!((cosine_loss(&v, &v).unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine_loss(&v, &v.scale(-1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_loss(&t(&[2], &[1., 0.]), &t(&[2], &[0., 1.])).unwrap(), 0.0);
        let z = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(cosine_loss(&z, &z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let l = x.sum_all();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_grad_vanishes_at_parallel() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[0.3, -1.0, 2.0, 0.1]), true);
        let l = x.cosine_loss(x.detach()).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = x.mul(x.detach()).unwrap().sum_all();
        tape.backward(y).unwrap();
        // d/dx (x · c) = c
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn finite_diff_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let g = finite_diff_grad(|v| Ok(v.dot(v)), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| Ok(3.0), &x, 1e-5).unwrap();
        assert_eq!(g, Tensor::zeros(&[2]));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }
}
