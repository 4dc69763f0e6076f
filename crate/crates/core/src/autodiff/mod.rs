//! Reverse-mode automatic differentiation over [`Grid`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! creation order. Operands always precede their results, so walking the
//! records backwards visits them in reverse topological order.

pub mod kernels;

use std::cell::{Ref, RefCell};
use std::fmt;

pub use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::grid::{broadcast_shape, Grid};

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Scale(Id, f64),
    AddScalar(Id),
    Exp(Id),
    Log(Id),
    Sigmoid(Id),
    Relu(Id),
    Softplus(Id),
    Sum(Id),
    Mean(Id),
    Broadcast(Id),
    SumTo(Id),
    Reshape(Id),
    Conv2d { x: Id, w: Id, geom: ConvGeom },
    ConvTranspose2d { x: Id, w: Id, geom: ConvGeom },
    MaxPool { x: Id, argmax: Vec<usize> },
    Upsample2x(Id),
    Concat(Id, Id),
    Affine { x: Id, w: Id, b: Id },
}

struct Node {
    value: Grid,
    op: Op,
}

/// Operation record for one forward computation.
///
/// Confined to one thread; independent tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
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

    /// Records a leaf (parameter, input, or constant).
    pub fn leaf(&self, value: Grid) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Grid::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Grid, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Ref<'_, Grid> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Propagates `d loss / d node` back to every node on the tape.
    ///
    /// `loss` must hold exactly one element.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::UnknownLeaf(loss.id));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got {:?}",
                    nodes[loss.id].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Grid>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Grid::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: Id| &nodes[i].value;
            let mut contributions: Vec<(Id, Grid)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.map(|v| -v)));
                }
                Op::Mul(a, b) => {
                    contributions.push((*a, g.zip_map(val(*b), |g, y| g * y)?));
                    contributions.push((*b, g.zip_map(val(*a), |g, x| g * x)?));
                }
                Op::Div(a, b) => {
                    let gb = g.zip_map(val(*b), |g, y| g / y)?;
                    let db = gb.zip_map(&node.value, |gy, q| -gy * q)?;
                    contributions.push((*a, gb));
                    contributions.push((*b, db));
                }
                Op::Neg(a) => contributions.push((*a, g.map(|v| -v))),
                Op::Scale(a, c) => contributions.push((*a, g.map(|v| v * c))),
                Op::AddScalar(a) => contributions.push((*a, g.clone())),
                Op::Exp(a) => contributions.push((*a, g.zip_map(&node.value, |g, y| g * y)?)),
                Op::Log(a) => contributions.push((*a, g.zip_map(val(*a), |g, x| g / x)?)),
                Op::Sigmoid(a) => {
                    contributions.push((*a, g.zip_map(&node.value, |g, s| g * s * (1.0 - s))?))
                }
                Op::Relu(a) => contributions.push((
                    *a,
                    g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?,
                )),
                Op::Softplus(a) => {
                    contributions.push((*a, g.zip_map(val(*a), |g, x| g * sigmoid(x))?))
                }
                Op::Sum(a) => contributions.push((*a, Grid::full(val(*a).shape(), g.item()))),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    contributions.push((*a, Grid::full(val(*a).shape(), g.item() / n)));
                }
                Op::Broadcast(a) => contributions.push((*a, kernels::sum_to(&g, val(*a).shape())?)),
                Op::SumTo(a) => {
                    contributions.push((*a, kernels::broadcast_to(&g, val(*a).shape())?))
                }
                Op::Reshape(a) => contributions.push((*a, g.reshape(val(*a).shape())?)),
                Op::Conv2d { x, w, geom } => {
                    let xs = val(*x).shape();
                    let k = val(*w).shape()[2];
                    contributions.push((
                        *x,
                        kernels::conv2d_input_adjoint(&g, val(*w), *geom, (xs[2], xs[3]))?,
                    ));
                    contributions.push((*w, kernels::conv2d_kernel_grad(val(*x), &g, *geom, k)?));
                }
                Op::ConvTranspose2d { x, w, geom } => {
                    let k = val(*w).shape()[2];
                    contributions.push((*x, kernels::conv2d(&g, val(*w), *geom)?));
                    contributions.push((*w, kernels::conv2d_kernel_grad(&g, val(*x), *geom, k)?));
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Grid::zeros(val(*x).shape());
                    let gd = gx.data_mut();
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        gd[src] += gv;
                    }
                    contributions.push((*x, gx));
                }
                Op::Upsample2x(a) => contributions.push((*a, kernels::upsample2x_adjoint(&g)?)),
                Op::Concat(a, b) => {
                    let ca = val(*a).shape()[1];
                    let (ga, gb) = kernels::split_channels(&g, ca)?;
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, i) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let gd = g.data();
                    let mut gx = vec![0.0; n * i];
                    let mut gw = vec![0.0; o * i];
                    let mut gb = vec![0.0; o];
                    for ni in 0..n {
                        for oi in 0..o {
                            let go = gd[ni * o + oi];
                            gb[oi] += go;
                            for ii in 0..i {
                                gx[ni * i + ii] += go * wv.data()[oi * i + ii];
                                gw[oi * i + ii] += go * xv.data()[ni * i + ii];
                            }
                        }
                    }
                    contributions.push((*x, Grid::new(&[n, i], gx)?));
                    contributions.push((*w, Grid::new(&[o, i], gw)?));
                    contributions.push((*b, Grid::new(&[o], gb)?));
                }
            }
            for (target, contrib) in contributions {
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self as *const Tape as usize,
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Grid>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; a node the loss does not depend on gets zeros.
    pub fn wrt(&self, v: Var<'_>) -> Result<Grid> {
        if v.tape as *const Tape as usize != self.tape || v.id >= self.shapes.len() {
            return Err(Error::UnknownLeaf(v.id));
        }
        Ok(self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Grid::zeros(&self.shapes[v.id])))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn finite(op: &'static str, g: Grid) -> Result<Grid> {
    if g.all_finite() {
        Ok(g)
    } else {
        Err(Error::NonFinite(op))
    }
}

// The arithmetic methods are fallible (shape checks), so they cannot be the
// operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Grid> {
        self.tape.value(self.id)
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::UnknownLeaf(other.id))
        }
    }

    fn unary(self, op: &'static str, f: impl Fn(f64) -> f64, rec: Op) -> Result<Var<'t>> {
        let out = finite(op, self.value().map(f))?;
        Ok(self.tape.push(out, rec))
    }

    /// Broadcasts both operands to a common shape, recording broadcast
    /// nodes only where needed.
    fn align(self, other: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self, other));
        }
        let target = broadcast_shape(&sa, &sb)?;
        Ok((self.broadcast_to(&target)?, other.broadcast_to(&target)?))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rec: fn(Id, Id) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = self.align(other)?;
        let out = finite(op, a.value().zip_map(&b.value(), f)?)?;
        Ok(self.tape.push(out, rec(a.id, b.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", |v| -v, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, Op::Softplus(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = finite("sum", Grid::scalar(self.value().sum()))?;
        Ok(self.tape.push(s, Op::Sum(self.id)))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let s = finite("mean", Grid::scalar(self.value().mean()))?;
        Ok(self.tape.push(s, Op::Mean(self.id)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let out = kernels::broadcast_to(&self.value(), shape)?;
        Ok(self.tape.push(out, Op::Broadcast(self.id)))
    }

    /// Sums over axes so the result has `shape` (the adjoint of broadcasting).
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let out = kernels::sum_to(&self.value(), shape)?;
        Ok(self.tape.push(out, Op::SumTo(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Zero-padded cross-correlation with kernel `w` (O×C×k×k).
    pub fn conv2d(self, w: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        let out = finite("conv2d", kernels::conv2d(&self.value(), &w.value(), geom)?)?;
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                geom,
            },
        ))
    }

    /// Transposed convolution with kernel `w` laid out `C_in×C_out×k×k`.
    /// Output extent is `(H - 1)·stride + k - 2·pad`.
    pub fn conv_transpose2d(self, w: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        let (h, wd, k) = {
            let (x, wv) = (self.value(), w.value());
            if x.ndim() != 4 || wv.ndim() != 4 {
                return Err(Error::shape("conv_transpose2d", "expected 4-D operands"));
            }
            (x.shape()[2], x.shape()[3], wv.shape()[2])
        };
        let out_hw = match (
            kernels::conv_transpose_out_len(h, k, geom),
            kernels::conv_transpose_out_len(wd, k, geom),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv_transpose2d", "empty output")),
        };
        let out = finite(
            "conv_transpose2d",
            kernels::conv2d_input_adjoint(&self.value(), &w.value(), geom, out_hw)?,
        )?;
        Ok(self.tape.push(
            out,
            Op::ConvTranspose2d {
                x: self.id,
                w: w.id,
                geom,
            },
        ))
    }

    pub fn maxpool2x2(self) -> Result<Var<'t>> {
        let (out, argmax) = kernels::maxpool2x2(&self.value())?;
        Ok(self.tape.push(out, Op::MaxPool { x: self.id, argmax }))
    }

    pub fn upsample2x(self) -> Result<Var<'t>> {
        let out = kernels::upsample2x(&self.value())?;
        Ok(self.tape.push(out, Op::Upsample2x(self.id)))
    }

    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = kernels::concat_channels(&self.value(), &other.value())?;
        Ok(self.tape.push(out, Op::Concat(self.id, other.id)))
    }

    /// Fully connected layer: `self` is N×I, `w` is O×I, `b` has length O.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let out = finite(
            "affine",
            kernels::affine(&self.value(), &w.value(), &b.value())?,
        )?;
        Ok(self.tape.push(
            out,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// Adds a per-channel bias of length C to an N×C×H×W grid.
    pub fn add_channel_bias(self, b: Var<'t>) -> Result<Var<'t>> {
        let c = b.value().len();
        self.add(b.reshape(&[1, c, 1, 1])?)
    }
}
