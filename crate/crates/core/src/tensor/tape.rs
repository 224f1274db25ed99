//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in creation order, so node ids are already a topological
//! order of the graph: [`Tape::backward`] walks ids downward from the loss and
//! visits each node once. Leaf gradients are accumulated on the tape and survive
//! across backward calls until [`Tape::zero_grad`].

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Silu,
    Matmul,
    Transpose,
    Reshape,
    AddBias,
    MulRows,
    Softmax,
    Sum,
    SumAxis,
    Conv2d,
    Narrow,
    Concat,
    GatherRows,
    ScatterRows,
    Pick,
    RmsNorm,
    CrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::AddBias => "add_bias",
            OpKind::MulRows => "mul_rows",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum_axis",
            OpKind::Conv2d => "conv2d",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
            OpKind::Pick => "pick",
            OpKind::RmsNorm => "rms_norm",
            OpKind::CrossEntropy => "cross_entropy",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use OpKind::*;
        let all = [
            Add, Sub, Mul, Scale, AddScalar, Relu, Sigmoid, Silu, Matmul, Transpose, Reshape,
            AddBias, MulRows, Softmax, Sum, SumAxis, Conv2d, Narrow, Concat, GatherRows,
            ScatterRows, Pick, RmsNorm, CrossEntropy,
        ];
        all.into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown op `{s}`")))
    }
}

/// Gradient rule: given the output gradient and which parents need a gradient,
/// returns one optional gradient per parent.
type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: OpKind,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<Backward>,
}

/// Recording of one computation graph. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<BTreeMap<usize, Tensor>>,
    fault: Cell<Option<OpKind>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    /// A trainable input: gradients accumulate into it on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(OpKind::Leaf, value, Vec::new(), true, None)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(OpKind::Constant, value, Vec::new(), false, None)
    }

    /// Test hook: corrupts the backward rule of every `op` node on this tape by
    /// scaling the gradients it emits by 1.5.
    #[doc(hidden)]
    pub fn inject_fault(&self, op: OpKind) {
        self.fault.set(Some(op));
    }

    fn push(
        &self,
        op: OpKind,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<Backward>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    fn record<'t>(
        &'t self,
        op: OpKind,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(op, value, ids, requires_grad, Some(Box::new(backward)))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                root.value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(Tensor::ones(root.value.shape().clone()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = &node.backward else {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        leaf_grads.insert(id, grad);
                    }
                }
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let grads = rule(&grad, &needs);
            debug_assert_eq!(grads.len(), node.parents.len(), "{} backward arity", node.op);
            for ((&parent, g), need) in node.parents.iter().zip(grads).zip(&needs) {
                let (Some(mut g), true) = (g, *need) else {
                    continue;
                };
                if fault == Some(node.op) {
                    g = g.scale(1.5);
                }
                match &mut pending[parent] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&var.id).cloned()
    }

    /// Accumulated gradient of a leaf, or zeros of its shape.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var)
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        const OP: &str = "concat";
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
            .shape();
        if axis >= first.rank() {
            return Err(Error::AxisOutOfRange {
                op: OP,
                axis,
                rank: first.rank(),
            });
        }
        let shapes: Vec<Shape> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            if s.rank() != first.rank() {
                return Err(Error::RankMismatch {
                    op: OP,
                    expected: first.rank(),
                    got: s.rank(),
                });
            }
            for (ax, (&a, &b)) in first.dims().iter().zip(s.dims()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        axis: ax,
                        expected: a,
                        got: b,
                    });
                }
            }
        }
        let (outer, _, inner) = first.split_at_axis(axis);
        let widths: Vec<usize> = shapes.iter().map(|s| s.dim(axis)).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = total;
        let value = Tensor::from_vec(dims, data)?;
        let out_shapes = shapes.clone();
        Ok(self.record(OpKind::Concat, value, parts, move |g, needs| {
            let mut offset = 0;
            out_shapes
                .iter()
                .zip(needs)
                .map(|(s, &need)| {
                    let w = s.dim(axis);
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut d = Vec::with_capacity(s.numel());
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g.data()[base..base + w * inner]);
                        }
                        Tensor::from_vec(s.clone(), d).expect("concat grad shape")
                    })
                })
                .collect()
        }))
    }
}

fn check_same_shape(op: &'static str, a: &Shape, b: &Shape) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(Error::RankMismatch {
            op,
            expected: a.rank(),
            got: b.rank(),
        });
    }
    for (axis, (&x, &y)) in a.dims().iter().zip(b.dims()).enumerate() {
        if x != y {
            return Err(Error::ShapeMismatch {
                op,
                axis,
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

fn check_rank(op: &'static str, s: &Shape, rank: usize) -> Result<()> {
    if s.rank() != rank {
        return Err(Error::RankMismatch {
            op,
            expected: rank,
            got: s.rank(),
        });
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        op: OpKind,
        value: Tensor,
        rule: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        self.tape
            .record(op, value, &[self], move |g, _| vec![Some(rule(g))])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", a.shape(), b.shape())?;
        let value = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape.record(OpKind::Add, value, &[self, other], |g, needs| {
            needs.iter().map(|&n| n.then(|| g.clone())).collect()
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", a.shape(), b.shape())?;
        let value = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.record(OpKind::Sub, value, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-1.0))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", a.shape(), b.shape())?;
        let value = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.record(OpKind::Mul, value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.value().scale(s);
        self.unary(OpKind::Scale, value, move |g| g.scale(s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        self.unary(OpKind::AddScalar, value, |g| g.clone())
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| v.max(0.0));
        self.unary(OpKind::Relu, value, move |g| {
            g.zip_map(&x, |g, v| if v > 0.0 { g } else { 0.0 })
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let saved = y.clone();
        self.unary(OpKind::Sigmoid, (*y).clone(), move |g| {
            g.zip_map(&saved, |g, s| g * s * (1.0 - s))
        })
    }

    /// `z * sigmoid(z)`.
    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(|z| z * sigmoid(z));
        self.unary(OpKind::Silu, value, move |g| {
            g.zip_map(&x, |g, z| {
                let s = sigmoid(z);
                g * s * (1.0 + z * (1.0 - s))
            })
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "matmul";
        let (a, b) = (self.value(), other.value());
        check_rank(OP, a.shape(), 2)?;
        check_rank(OP, b.shape(), 2)?;
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        if b.dims()[0] != k {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 0,
                expected: k,
                got: b.dims()[0],
            });
        }
        let value = Tensor::from_vec([m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.record(OpKind::Matmul, value, &[self, other], move |g, needs| {
            let da = needs[0].then(|| {
                let bt = kernels::transpose(b.data(), k, n);
                Tensor::from_vec([m, k], kernels::matmul(g.data(), &bt, m, n, k)).unwrap()
            });
            let db = needs[1].then(|| {
                let at = kernels::transpose(a.data(), m, k);
                Tensor::from_vec([k, n], kernels::matmul(&at, g.data(), k, m, n)).unwrap()
            });
            vec![da, db]
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        check_rank("transpose", a.shape(), 2)?;
        let (r, c) = (a.dims()[0], a.dims()[1]);
        let value = Tensor::from_vec([c, r], kernels::transpose(a.data(), r, c))?;
        Ok(self.unary(OpKind::Transpose, value, move |g| {
            Tensor::from_vec([r, c], kernels::transpose(g.data(), c, r)).unwrap()
        }))
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Var<'t>> {
        let orig = self.shape();
        let value = self.value().reshape(shape)?;
        Ok(self.unary(OpKind::Reshape, value, move |g| g.reshape(orig.clone()).unwrap()))
    }

    /// Adds `bias[n]` to every length-`n` slice along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "add_bias";
        let (x, b) = (self.value(), bias.value());
        check_rank(OP, b.shape(), 1)?;
        let n = b.numel();
        let last = x.dims().last().copied().unwrap_or(1);
        if x.shape().rank() == 0 || last != n {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: x.shape().rank().saturating_sub(1),
                expected: n,
                got: last,
            });
        }
        let mut value = (*x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        Ok(self.tape.record(OpKind::AddBias, value, &[self, bias], move |g, needs| {
            let db = needs[1].then(|| {
                let mut d = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    d[i % n] += v;
                }
                Tensor::from_vec([n], d).unwrap()
            });
            vec![needs[0].then(|| g.clone()), db]
        }))
    }

    /// Scales row `i` of a matrix `[m, n]` by `s[i]` (`s` of shape `[m]`).
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "mul_rows";
        let (x, sv) = (self.value(), s.value());
        check_rank(OP, x.shape(), 2)?;
        check_rank(OP, sv.shape(), 1)?;
        let (m, n) = (x.dims()[0], x.dims()[1]);
        if sv.numel() != m {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 0,
                expected: m,
                got: sv.numel(),
            });
        }
        let mut value = (*x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= sv.data()[i / n];
        }
        Ok(self.tape.record(OpKind::MulRows, value, &[self, s], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut d = g.clone();
                for (i, v) in d.data_mut().iter_mut().enumerate() {
                    *v *= sv.data()[i / n];
                }
                d
            });
            let ds = needs[1].then(|| {
                let mut d = vec![0.0; m];
                for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                    d[i / n] += gv * xv;
                }
                Tensor::from_vec([m], d).unwrap()
            });
            vec![dx, ds]
        }))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().clone();
        if axis >= shape.rank() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.rank(),
            });
        }
        let (outer, n, inner) = shape.split_at_axis(axis);
        let y = Rc::new(Tensor::from_vec(
            shape.clone(),
            kernels::softmax(x.data(), outer, n, inner),
        )?);
        let saved = y.clone();
        Ok(self.unary(OpKind::Softmax, (*y).clone(), move |g| {
            let (yd, gd) = (saved.data(), g.data());
            let mut d = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                    for j in 0..n {
                        d[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            Tensor::from_vec(shape.clone(), d).unwrap()
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let shape = self.shape();
        let value = Tensor::scalar(self.value().sum());
        self.unary(OpKind::Sum, value, move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().clone();
        if axis >= shape.rank() {
            return Err(Error::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: shape.rank(),
            });
        }
        let (outer, n, inner) = shape.split_at_axis(axis);
        let mut d = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    d[o * inner + i] += x.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut dims = shape.dims().to_vec();
        dims.remove(axis);
        let value = Tensor::from_vec(dims, d)?;
        Ok(self.unary(OpKind::SumAxis, value, move |g| {
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        d[(o * n + j) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            Tensor::from_vec(shape.clone(), d).unwrap()
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().dims().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let s = self.shape();
        check_rank("global_avg_pool", &s, 4)?;
        let d = s.dims();
        self.reshape([d[0], d[1], d[2] * d[3]])?.mean_axis(2)
    }

    /// Grouped 2-D cross-correlation.
    ///
    /// `self: [B, C_in, H, W]`, `w: [C_out, C_in/groups, K, K]`, `bias: [C_out]`.
    pub fn conv2d(
        self,
        w: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        const OP: &str = "conv2d";
        let (x, wv) = (self.value(), w.value());
        let geo = ConvGeometry::new(OP, x.dims(), wv.dims(), stride, padding, groups)?;
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                check_rank(OP, bv.shape(), 1)?;
                if bv.numel() != geo.c_out {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        axis: 0,
                        expected: geo.c_out,
                        got: bv.numel(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geo, x.data(), wv.data(), bv.as_deref().map(Tensor::data));
        let value = Tensor::from_vec(geo.out_dims(), out)?;
        let mut parents = vec![self, w];
        parents.extend(bias);
        let (x_shape, w_shape) = (x.shape().clone(), wv.shape().clone());
        Ok(self.tape.record(OpKind::Conv2d, value, &parents, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| {
                    let d = kernels::conv2d_backward_input(&geo, wv.data(), g.data());
                    Tensor::from_vec(x_shape.clone(), d).unwrap()
                }),
                needs[1].then(|| {
                    let d = kernels::conv2d_backward_weight(&geo, x.data(), g.data(), w_shape.numel());
                    Tensor::from_vec(w_shape.clone(), d).unwrap()
                }),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    Tensor::from_vec([geo.c_out], kernels::conv2d_backward_bias(&geo, g.data())).unwrap()
                }));
            }
            grads
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        const OP: &str = "narrow";
        let x = self.value();
        let shape = x.shape().clone();
        if axis >= shape.rank() {
            return Err(Error::AxisOutOfRange {
                op: OP,
                axis,
                rank: shape.rank(),
            });
        }
        let (outer, n, inner) = shape.split_at_axis(axis);
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis,
                expected: n,
                got: start + len,
            });
        }
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            d.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut dims = shape.dims().to_vec();
        dims[axis] = len;
        let value = Tensor::from_vec(dims, d)?;
        Ok(self.unary(OpKind::Narrow, value, move |g| {
            let mut d = vec![0.0; shape.numel()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::from_vec(shape.clone(), d).unwrap()
        }))
    }

    /// Rows `indices` of a matrix `[n, d]`; indices may repeat.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        const OP: &str = "gather_rows";
        let x = self.value();
        check_rank(OP, x.shape(), 2)?;
        let (n, d) = (x.dims()[0], x.dims()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 0,
                expected: n,
                got: bad + 1,
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_vec([indices.len(), d], out)?;
        let idx = indices.to_vec();
        Ok(self.unary(OpKind::GatherRows, value, move |g| {
            let mut dx = vec![0.0; n * d];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    dx[i * d + c] += g.data()[r * d + c];
                }
            }
            Tensor::from_vec([n, d], dx).unwrap()
        }))
    }

    /// Places row `r` of `self: [len, d]` at row `indices[r]` of a zero matrix
    /// `[rows, d]`, summing on collisions.
    pub fn scatter_rows(self, indices: &[usize], rows: usize) -> Result<Var<'t>> {
        const OP: &str = "scatter_rows";
        let x = self.value();
        check_rank(OP, x.shape(), 2)?;
        let (len, d) = (x.dims()[0], x.dims()[1]);
        if indices.len() != len {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 0,
                expected: len,
                got: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 0,
                expected: rows,
                got: bad + 1,
            });
        }
        let mut out = vec![0.0; rows * d];
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += x.data()[r * d + c];
            }
        }
        let value = Tensor::from_vec([rows, d], out)?;
        let idx = indices.to_vec();
        Ok(self.unary(OpKind::ScatterRows, value, move |g| {
            let mut dx = Vec::with_capacity(len * d);
            for &i in &idx {
                dx.extend_from_slice(&g.data()[i * d..(i + 1) * d]);
            }
            Tensor::from_vec([len, d], dx).unwrap()
        }))
    }

    /// Entries `(row, col)` of a matrix, as a vector.
    pub fn pick(self, coords: &[(usize, usize)]) -> Result<Var<'t>> {
        const OP: &str = "pick";
        let x = self.value();
        check_rank(OP, x.shape(), 2)?;
        let (n, d) = (x.dims()[0], x.dims()[1]);
        for &(r, c) in coords {
            if r >= n || c >= d {
                return Err(Error::InvalidArgument(format!(
                    "pick: ({r}, {c}) out of bounds for {}",
                    x.shape()
                )));
            }
        }
        let value = Tensor::from_vec(
            [coords.len()],
            coords.iter().map(|&(r, c)| x.data()[r * d + c]).collect(),
        )?;
        let coords = coords.to_vec();
        Ok(self.unary(OpKind::Pick, value, move |g| {
            let mut dx = vec![0.0; n * d];
            for (k, &(r, c)) in coords.iter().enumerate() {
                dx[r * d + c] += g.data()[k];
            }
            Tensor::from_vec([n, d], dx).unwrap()
        }))
    }

    /// Row-wise RMS normalisation of `[T, d]` with a learned gain `w: [d]`.
    pub fn rms_norm(self, w: Var<'t>, eps: f64) -> Result<Var<'t>> {
        const OP: &str = "rms_norm";
        let (x, wv) = (self.value(), w.value());
        check_rank(OP, x.shape(), 2)?;
        let (t, d) = (x.dims()[0], x.dims()[1]);
        if wv.numel() != d || wv.shape().rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 1,
                expected: d,
                got: wv.numel(),
            });
        }
        let inv_rms: Vec<f64> = (0..t)
            .map(|r| {
                let row = &x.data()[r * d..(r + 1) * d];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                1.0 / (ms + eps).sqrt()
            })
            .collect();
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..d {
                out[r * d + c] = x.data()[r * d + c] * inv_rms[r] * wv.data()[c];
            }
        }
        let value = Tensor::from_vec([t, d], out)?;
        Ok(self.tape.record(OpKind::RmsNorm, value, &[self, w], move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; t * d];
                for r in 0..t {
                    let inv = inv_rms[r];
                    let row = &x.data()[r * d..(r + 1) * d];
                    let dot: f64 = (0..d).map(|c| gd[r * d + c] * wv.data()[c] * row[c]).sum();
                    for c in 0..d {
                        let u = gd[r * d + c] * wv.data()[c];
                        dx[r * d + c] = u * inv - row[c] * dot * inv.powi(3) / d as f64;
                    }
                }
                Tensor::from_vec([t, d], dx).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; d];
                for r in 0..t {
                    for c in 0..d {
                        dw[c] += gd[r * d + c] * x.data()[r * d + c] * inv_rms[r];
                    }
                }
                Tensor::from_vec([d], dw).unwrap()
            });
            vec![dx, dw]
        }))
    }

    /// Mean cross-entropy of logits `[N, C]` against label-smoothed targets:
    /// the target distribution is `(1 - eps) * onehot + eps / C`.
    pub fn cross_entropy_with_label_smoothing(self, targets: &[usize], eps: f64) -> Result<Var<'t>> {
        const OP: &str = "cross_entropy";
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {eps} outside [0, 1)"
            )));
        }
        let x = self.value();
        check_rank(OP, x.shape(), 2)?;
        let (n, c) = (x.dims()[0], x.dims()[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 0,
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let probs = kernels::softmax(x.data(), n, c, 1);
        let off = eps / c as f64;
        let on = 1.0 - eps + off;
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &x.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                let q = if j == target { on } else { off };
                if q != 0.0 {
                    loss -= q * (v - lse);
                }
            }
        }
        let value = Tensor::scalar(loss / n.max(1) as f64);
        let targets = targets.to_vec();
        Ok(self.unary(OpKind::CrossEntropy, value, move |g| {
            let scale = g.item() / n.max(1) as f64;
            let mut d = probs.clone();
            for (r, &target) in targets.iter().enumerate() {
                for j in 0..c {
                    let q = if j == target { on } else { off };
                    d[r * c + j] = (d[r * c + j] - q) * scale;
                }
            }
            Tensor::from_vec([n, c], d).unwrap()
        }))
    }
}
