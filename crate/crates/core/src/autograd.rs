//! Dynamic reverse-mode differentiation tape.
//!
//! Every forward pass records onto a fresh [`Tape`]; each primitive pushes one
//! node holding its value and the information its backward rule needs.
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because a node's inputs always exist
//! before it is pushed.
//!
//! ```
//! use ssmflow::autograd::Tape;
//! use ssmflow::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;
pub use crate::tensor::kernels::Unary;
use crate::tensor::kernels::{self, AxisGroups, Conv2dGeom, ResizePlan, ScanDims, ScanInputs};
use crate::tensor::{Result, Tensor, TensorError};

type Id = usize;

enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddBias(Id, Id),
    ScaleRows(Id, Id),
    Scale(Id, T),
    AddScalar(Id),
    MatMul(Id, Id),
    Transpose(Id),
    Reshape(Id),
    Unary(Id, Unary),
    Softmax(Id, AxisGroups),
    Reverse(Id, Vec<usize>),
    Concat(Vec<(Id, usize)>),
    Slice { x: Id, start: usize, width: usize },
    Sum(Id),
    Conv1dCausal { x: Id, k: Id, b: Id },
    Conv2d { x: Id, k: Id, b: Option<Id>, geom: Conv2dGeom },
    SelectiveScan(Box<ScanNode<T>>),
    LayerNorm { x: Id, g: Id, b: Id, inv_std: Vec<T> },
    Lookup { cost: Id, flow: Id, h: usize, w: usize, radius: usize },
    Resize(Id, ResizePlan),
}

struct ScanNode<T> {
    x: Id,
    delta: Id,
    a: Id,
    b: Id,
    c: Id,
    skip: Option<Id>,
    dims: ScanDims,
    states: Vec<T>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it was unreachable.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(var.shape(), vec![T::zero(); var.value().len()]),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires_grad(&self, id: Id) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a shared tensor without copying it.
    pub fn leaf_shared(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_rc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Reverse pass from a rank-0 loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.rank() != 0 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |target: Id, contrib: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: Id| -> &Tensor<T> { &nodes[i].value };
            let like = |i: Id, data: Vec<T>| Tensor::from_parts(nodes[i].value.shape().to_vec(), data);
            let gd = g.data();

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    acc(*a, like(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                    acc(*b, like(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
                Op::AddBias(x, b) => {
                    let width = val(*b).len();
                    let mut db = vec![T::zero(); width];
                    for row in gd.chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*x, g.clone());
                    acc(*b, like(*b, db));
                }
                Op::ScaleRows(x, w) => {
                    let width = val(*x).last_dim();
                    let (vx, vw) = (val(*x).data(), val(*w).data());
                    let mut dx = vec![T::zero(); vx.len()];
                    let mut dw = vec![T::zero(); vw.len()];
                    for (r, (gr, xr)) in gd.chunks(width).zip(vx.chunks(width)).enumerate() {
                        for c in 0..width {
                            dx[r * width + c] = gr[c] * vw[r];
                            dw[r] += gr[c] * xr[c];
                        }
                    }
                    acc(*x, like(*x, dx));
                    acc(*w, like(*w, dw));
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(*x, g.map(|v| v * s));
                }
                Op::AddScalar(x) => acc(*x, g.clone()),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if nodes[*a].requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, T::one(), gd, n, 1, vb.data(), 1, n, T::zero(), &mut da, k, 1);
                        acc(*a, like(*a, da));
                    }
                    if nodes[*b].requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, T::one(), va.data(), 1, k, gd, n, 1, T::zero(), &mut db, n, 1);
                        acc(*b, like(*b, db));
                    }
                }
                Op::Transpose(x) => {
                    let t = g.transpose2d().expect("rank-2 gradient");
                    acc(*x, t);
                }
                Op::Reshape(x) => acc(*x, like(*x, g.into_data())),
                Op::Unary(x, kind) => {
                    let vx = val(*x).data();
                    acc(*x, like(*x, gd.iter().zip(vx).map(|(&g, &v)| g * kind.derivative(v)).collect()));
                }
                Op::Softmax(x, groups) => {
                    let dx = kernels::softmax_backward(node.value.data(), gd, groups);
                    acc(*x, like(*x, dx));
                }
                Op::Reverse(x, perm) => {
                    acc(*x, like(*x, perm.iter().map(|&p| gd[p]).collect()));
                }
                Op::Concat(parts) => {
                    let total = node.value.last_dim();
                    let rows = gd.len() / total;
                    let mut offset = 0;
                    for &(p, width) in parts {
                        let mut d = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + width]);
                        }
                        acc(p, like(p, d));
                        offset += width;
                    }
                }
                Op::Slice { x, start, width } => {
                    let total = val(*x).last_dim();
                    let rows = gd.len() / width;
                    let mut d = vec![T::zero(); rows * total];
                    for r in 0..rows {
                        d[r * total + start..r * total + start + width]
                            .copy_from_slice(&gd[r * width..(r + 1) * width]);
                    }
                    acc(*x, like(*x, d));
                }
                Op::Sum(x) => {
                    let s = gd[0];
                    acc(*x, like(*x, vec![s; val(*x).len()]));
                }
                Op::Conv1dCausal { x, k, b } => {
                    let vx = val(*x);
                    let (len, dim) = (vx.shape()[0], vx.shape()[1]);
                    let width = val(*k).shape()[1];
                    let (dx, dk, db) = kernels::conv1d_causal_backward(vx.data(), val(*k).data(), gd, len, dim, width);
                    acc(*x, like(*x, dx));
                    acc(*k, like(*k, dk));
                    acc(*b, like(*b, db));
                }
                Op::Conv2d { x, k, b, geom } => {
                    let (dx, dk, db) = geom.backward(val(*x).data(), val(*k).data(), gd);
                    acc(*x, like(*x, dx));
                    acc(*k, like(*k, dk));
                    if let Some(b) = b {
                        acc(*b, like(*b, db));
                    }
                }
                Op::SelectiveScan(s) => {
                    let inp = ScanInputs {
                        x: val(s.x).data(),
                        delta: val(s.delta).data(),
                        a: val(s.a).data(),
                        b: val(s.b).data(),
                        c: val(s.c).data(),
                        skip: s.skip.map(|d| val(d).data()),
                    };
                    let gr = kernels::selective_scan_backward(s.dims, &inp, &s.states, gd);
                    acc(s.x, like(s.x, gr.dx));
                    acc(s.delta, like(s.delta, gr.ddelta));
                    acc(s.a, like(s.a, gr.da));
                    acc(s.b, like(s.b, gr.db));
                    acc(s.c, like(s.c, gr.dc));
                    if let Some(d) = s.skip {
                        acc(d, like(d, gr.dskip));
                    }
                }
                Op::LayerNorm { x, g: gamma, b, inv_std } => {
                    let width = val(*x).last_dim();
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(val(*x).data(), val(*gamma).data(), inv_std, gd, width);
                    acc(*x, like(*x, dx));
                    acc(*gamma, like(*gamma, dg));
                    acc(*b, like(*b, db));
                }
                Op::Lookup { cost, flow, h, w, radius } => {
                    let (dc, df) = kernels::lookup_backward(val(*cost).data(), val(*flow).data(), gd, *h, *w, *radius);
                    acc(*cost, like(*cost, dc));
                    acc(*flow, like(*flow, df));
                }
                Op::Resize(x, plan) => acc(*x, like(*x, plan.backward(gd))),
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_tape<T>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "variables recorded on different tapes");
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn rg(&self, others: &[Id]) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].requires_grad || others.iter().any(|&o| nodes[o].requires_grad)
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, inputs: &[Id]) -> Var<'t, T> {
        let rg = self.rg(inputs);
        self.tape.push(value, op, rg)
    }

    /// A new leaf with this value and no history.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf_shared(self.value(), false)
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        mk: fn(Id, Id) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &rhs);
        let out = self.value().zip_map(&rhs.value(), op, f)?;
        Ok(self.emit(out, mk(self.id, rhs.id), &[rhs.id]))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a rank-1 `bias` along the last axis.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &bias);
        let (x, b) = (self.value(), bias.value());
        if b.rank() != 1 || x.last_dim() != b.len() || x.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let width = b.len();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(width) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(self.emit(Tensor::from_parts(x.shape().to_vec(), out), Op::AddBias(self.id, bias.id), &[bias.id]))
    }

    /// Multiplies each last-axis row of `self` by the matching entry of `weights`
    /// (shape = `self.shape()` without its last axis).
    pub fn scale_rows(self, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &weights);
        let (x, w) = (self.value(), weights.value());
        if x.rank() == 0 || w.shape() != &x.shape()[..x.rank() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let width = x.last_dim();
        let out: Vec<T> =
            x.data().chunks(width).zip(w.data()).flat_map(|(row, &s)| row.iter().map(move |&v| v * s)).collect();
        Ok(self.emit(Tensor::from_parts(x.shape().to_vec(), out), Op::ScaleRows(self.id, weights.id), &[weights.id]))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.emit(out, Op::Scale(self.id, s), &[])
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        self.emit(out, Op::AddScalar(self.id), &[])
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &rhs);
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.emit(out, Op::MatMul(self.id, rhs.id), &[rhs.id]))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose2d()?;
        Ok(self.emit(out, Op::Transpose(self.id), &[]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.emit(out, Op::Reshape(self.id), &[]))
    }

    pub fn unary(self, kind: Unary) -> Var<'t, T> {
        let out = self.value().map(|v| kind.apply(v));
        self.emit(out, Op::Unary(self.id, kind), &[])
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(Unary::Silu)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(Unary::Abs)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    /// Max-stabilized softmax jointly over `axes`.
    pub fn softmax(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let groups = kernels::axis_groups(x.shape(), axes)?;
        let out = Tensor::from_parts(x.shape().to_vec(), kernels::softmax_forward(x.data(), &groups));
        Ok(self.emit(out, Op::Softmax(self.id, groups), &[]))
    }

    pub fn reverse(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::InvalidAxis { axis, rank: x.rank() });
        }
        let perm = kernels::reverse_permutation(x.shape(), axis);
        let out = Tensor::from_parts(x.shape().to_vec(), perm.iter().map(|&p| x.data()[p]).collect());
        Ok(self.emit(out, Op::Reverse(self.id, perm), &[]))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for (p, v) in parts.iter().zip(&values) {
            same_tape(&first, p);
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].len() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat(parts.iter().map(|p| p.id).zip(widths).collect());
        Ok(first.emit(Tensor::from_parts(shape, out), op, &ids))
    }

    /// Columns `start..start+width` of the last axis.
    pub fn slice_last(self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let total = x.last_dim();
        if x.rank() == 0 || width == 0 || start + width > total {
            return Err(TensorError::InvalidArgument(format!(
                "slice {start}..{} out of range for last extent {total}",
                start + width
            )));
        }
        let rows = x.len() / total;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * total + start..r * total + start + width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(self.emit(Tensor::from_parts(shape, out), Op::Slice { x: self.id, start, width }, &[]))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.emit(Tensor::scalar(s), Op::Sum(self.id), &[])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize_lossy(self.value().len());
        self.sum().scale(T::one() / n)
    }

    /// Depthwise causal convolution over `[L, D]` with kernel `[D, k]`.
    /// Output `t` reads inputs `t-k+1..=t` (zero padded on the left).
    pub fn conv1d_causal(self, kernel: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &kernel);
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        if x.rank() != 2 || k.rank() != 2 || k.shape()[0] != x.shape()[1] || b.shape() != [x.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_causal",
                left: x.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        let (len, dim, width) = (x.shape()[0], x.shape()[1], k.shape()[1]);
        let out = kernels::conv1d_causal_forward(x.data(), k.data(), b.data(), len, dim, width);
        Ok(self.emit(
            Tensor::from_parts(vec![len, dim], out),
            Op::Conv1dCausal { x: self.id, k: kernel.id, b: bias.id },
            &[kernel.id, bias.id],
        ))
    }

    /// 2-D cross-correlation of `[H, W, Cin]` with `[kh, kw, Cin, Cout]`.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        same_tape(&self, &kernel);
        let (x, k) = (self.value(), kernel.value());
        let geom = Conv2dGeom::new(x.shape(), k.shape(), stride, pad)?;
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [geom.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: k.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        let out = geom.forward(x.data(), k.data(), bv.as_ref().map(|b| b.data()));
        let mut inputs = vec![kernel.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.emit(
            Tensor::from_parts(vec![geom.ho, geom.wo, geom.cout], out),
            Op::Conv2d { x: self.id, k: kernel.id, b: bias.map(|b| b.id), geom },
            &inputs,
        ))
    }

    /// Selective state-space scan with zero-order-hold discretization.
    ///
    /// `self` is the input `x: [L, E]`; `delta: [L, E]` (positive), `a: [E, N]`
    /// (negative), `b, c: [L, N]`, optional feedthrough `skip: [E]`.
    pub fn selective_scan(
        self,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
        skip: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let (xv, dv, av, bv, cv) = (self.value(), delta.value(), a.value(), b.value(), c.value());
        let bad = |right: &Tensor<T>| TensorError::ShapeMismatch {
            op: "selective_scan",
            left: xv.shape().to_vec(),
            right: right.shape().to_vec(),
        };
        if xv.rank() != 2 {
            return Err(bad(&xv));
        }
        let (len, e_dim) = (xv.shape()[0], xv.shape()[1]);
        if dv.shape() != xv.shape() {
            return Err(bad(&dv));
        }
        if av.rank() != 2 || av.shape()[0] != e_dim {
            return Err(bad(&av));
        }
        let n_dim = av.shape()[1];
        if bv.shape() != [len, n_dim] {
            return Err(bad(&bv));
        }
        if cv.shape() != [len, n_dim] {
            return Err(bad(&cv));
        }
        let sv = skip.map(|s| s.value());
        if let Some(s) = &sv {
            if s.shape() != [e_dim] {
                return Err(bad(s));
            }
        }
        let dims = ScanDims { len, channels: e_dim, state: n_dim };
        let inp = ScanInputs {
            x: xv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            skip: sv.as_ref().map(|s| s.data()),
        };
        let (y, states) = kernels::selective_scan_forward(dims, &inp);
        let mut inputs = vec![delta.id, a.id, b.id, c.id];
        inputs.extend(skip.map(|s| s.id));
        let node =
            ScanNode { x: self.id, delta: delta.id, a: a.id, b: b.id, c: c.id, skip: skip.map(|s| s.id), dims, states };
        Ok(self.emit(Tensor::from_parts(vec![len, e_dim], y), Op::SelectiveScan(Box::new(node)), &inputs))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let width = x.last_dim();
        if x.rank() == 0 || g.shape() != [width] || b.shape() != [width] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (y, inv_std) = kernels::layer_norm_forward(x.data(), g.data(), b.data(), width, eps);
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::LayerNorm { x: self.id, g: gamma.id, b: beta.id, inv_std },
            &[gamma.id, beta.id],
        ))
    }

    /// Bilinear local lookup into a cost volume; see [`crate::pulse::lookup_cost`].
    pub fn cost_lookup(self, flow: Var<'t, T>, radius: usize) -> Result<Var<'t, T>> {
        let (cost, fl) = (self.value(), flow.value());
        let s = cost.shape();
        if s.len() != 4 || s[0] != s[2] || s[1] != s[3] || fl.shape() != [s[0], s[1], 2] {
            return Err(TensorError::ShapeMismatch { op: "cost_lookup", left: s.to_vec(), right: fl.shape().to_vec() });
        }
        let (h, w) = (s[0], s[1]);
        let side = 2 * radius + 1;
        let out = kernels::lookup_forward(cost.data(), fl.data(), h, w, radius);
        Ok(self.emit(
            Tensor::from_parts(vec![h, w, side * side], out),
            Op::Lookup { cost: self.id, flow: flow.id, h, w, radius },
            &[flow.id],
        ))
    }

    /// Bilinear resize of `[H, W, C]` to `[out_h, out_w, C]` (half-pixel centers).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 3 || out_h == 0 || out_w == 0 {
            return Err(TensorError::Rank { op: "resize_bilinear", expected: 3, shape: x.shape().to_vec() });
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let plan = ResizePlan::new(h, w, out_h, out_w, c);
        let out = plan.forward(x.data());
        Ok(self.emit(Tensor::from_parts(vec![out_h, out_w, c], out), Op::Resize(self.id, plan), &[]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_ones_and_square_gives_double() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., -2., 3., 0.5]), true);
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 3.]), true);
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., -4., 6.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x + x) → grad 3
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = x.add(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.constant(t(&[2], &[5., 6.]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[5., 6.]);
    }

    #[test]
    fn softmax_hand_values_and_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = x.softmax(&[0]).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = x.softmax(&[0]).unwrap().value();
        for (v, e) in y.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!(matches!(x.softmax(&[]), Err(TensorError::EmptyAxes)));
    }

    #[test]
    fn activation_values_at_zero() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[1]).unwrap());
        assert_eq!(z.silu().value().data()[0], 0.0);
        assert_eq!(z.gelu().value().data()[0], 0.0);
        assert!((z.softplus().value().data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn reverse_values_and_involution() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        assert_eq!(x.reverse(0).unwrap().value().data(), &[3., 2., 1.]);
        let m = tape.constant(Tensor::from_fn(&[3, 4, 2], |i| i as f64).unwrap());
        for axis in 0..3 {
            let rr = m.reverse(axis).unwrap().reverse(axis).unwrap();
            assert_eq!(*rr.value(), *m.value());
        }
    }

    #[test]
    fn conv1d_identity_impulse_and_causality() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[6, 2], |i| (i as f64 * 0.7).sin()).unwrap());
        let ident = tape.constant(t(&[2, 3], &[0., 0., 1., 0., 0., 1.]));
        let zero_b = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert_eq!(*x.conv1d_causal(ident, zero_b).unwrap().value(), *x.value());

        let mut imp = vec![0.0; 8];
        imp[0] = 1.0;
        let xi = tape.constant(t(&[4, 2], &imp));
        let k = tape.constant(t(&[2, 3], &[0.1, 0.2, 0.3, 1., 2., 3.]));
        let y = xi.conv1d_causal(k, zero_b).unwrap().value();
        // channel 0 traces the reversed kernel, then zero
        assert_eq!([y.get(&[0, 0]), y.get(&[1, 0]), y.get(&[2, 0]), y.get(&[3, 0])], [0.3, 0.2, 0.1, 0.0]);

        let base = Tensor::from_fn(&[8, 2], |i| (i as f64).cos()).unwrap();
        let y0 = tape.constant(base.clone()).conv1d_causal(k, zero_b).unwrap().value();
        let mut pert = base.clone();
        pert.data_mut()[5 * 2 + 1] += 10.0;
        let y1 = tape.constant(pert).conv1d_causal(k, zero_b).unwrap().value();
        assert_eq!(&y0.data()[..10], &y1.data()[..10]);
        assert_ne!(y0.data()[11], y1.data()[11]);
    }

    #[test]
    fn conv2d_identity_ones_and_stride() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 4, 3], |i| i as f64 * 0.1).unwrap());
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let ident = tape.constant(t(&[1, 1, 3, 3], &k));
        assert_eq!(*x.conv2d(ident, None, 1, 0).unwrap().value(), *x.value());

        let ones = tape.constant(Tensor::ones(&[6, 6, 1]).unwrap());
        let k = tape.constant(Tensor::ones(&[3, 3, 1, 1]).unwrap());
        let y = ones.conv2d(k, None, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[6, 6, 1]);
        assert_eq!(y.get(&[2, 3, 0]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);

        let x8 = tape.constant(Tensor::ones(&[8, 8, 1]).unwrap());
        let k2 = tape.constant(Tensor::ones(&[2, 2, 1, 1]).unwrap());
        assert_eq!(x8.conv2d(k2, None, 2, 0).unwrap().shape(), vec![4, 4, 1]);

        let tiny = tape.constant(Tensor::ones(&[2, 2, 1]).unwrap());
        assert!(matches!(tiny.conv2d(k, None, 1, 0), Err(TensorError::NonPositiveExtent { .. })));
    }

    #[test]
    fn reverse_gradient_is_reversed_upstream() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1., 2., 3., 4.]), true);
        let w = tape.constant(t(&[4], &[10., 20., 30., 40.]));
        let loss = x.reverse(0).unwrap().mul(w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[40., 30., 20., 10.]);
    }
}
