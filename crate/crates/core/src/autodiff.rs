//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! Every differentiable primitive pushes one node onto a [`Tape`] during the
//! forward pass. [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a valid reverse topological order because a node can only
//! reference nodes created before it.
//!
//! ```
//! use vimf::autodiff::{self as ad, Tape};
//! use vimf::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]), true);
//! let loss = ad::sum(&ad::mul(&x, &x).unwrap());
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::fft;
use crate::ssm::{self, Discretization};
use crate::tensor::{self, Conv2dGeom, Tensor};

type NodeId = usize;

/// Recorded primitive. Inputs are node ids; forward values needed for the
/// vector-Jacobian product are either re-read from the input nodes or saved
/// in the variant.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MulByScalarVar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ReverseRows(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Silu(NodeId),
    EluPlusOne(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    DivRows(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: Conv2dGeom,
    },
    Conv1dCausal {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
    },
    Patchify {
        x: NodeId,
        patch: usize,
    },
    Amplitude2d {
        x: NodeId,
        batch: usize,
        h: usize,
        w: usize,
    },
    SelectiveScan {
        inputs: ScanInputs,
        mode: Discretization,
        states: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ScanInputs {
    u: NodeId,
    delta: NodeId,
    a: NodeId,
    b: NodeId,
    c: NodeId,
    d_skip: Option<NodeId>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Ordered record of primitive applications. Cheap to clone (shared handle).
///
/// A tape is confined to one thread; independent model evaluations use
/// independent tapes.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var {
    tape: Tape,
    id: NodeId,
    generation: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Vars created before the call become stale;
    /// backward through them fails with [`Error::TapeCleared`].
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            generation: inner.generation,
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires one are accumulated additively over all of its uses.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        if !self.same(&loss.tape) || loss.generation != inner.generation || loss.id >= inner.nodes.len() {
            return Err(Error::TapeCleared);
        }
        let nodes = &inner.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            generation: inner.generation,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape());
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn same_shape(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| &nodes[id].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |g, y| g * y).unwrap());
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |g, x| g * x).unwrap());
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.map(|v| v * c)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MulByScalarVar(a, s) => {
            let sv = val(*s).data()[0];
            accumulate(grads, nodes, *a, g.map(|v| v * sv));
            let ds: f64 = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
            accumulate(grads, nodes, *s, Tensor::scalar(ds));
        }
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, tensor::matmul_nt(g, val(*b)));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, tensor::matmul_tn(val(*a), g));
            }
        }
        Op::AddRowBias(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            let n = val(*b).len();
            let mut db = vec![0.0; n];
            for row in gd.chunks(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *b, same_shape(val(*b), db));
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose().unwrap()),
        Op::Reshape(a) => {
            let shape = val(*a).shape();
            accumulate(grads, nodes, *a, g.clone().reshape(shape).unwrap());
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let c = src.shape()[1];
            let mut d = vec![0.0; src.len()];
            d[start * c..start * c + gd.len()].copy_from_slice(gd);
            accumulate(grads, nodes, *a, same_shape(src, d));
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let (r, c) = src.dims2().unwrap();
            let w = g.shape()[1];
            let mut d = vec![0.0; src.len()];
            for i in 0..r {
                d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            accumulate(grads, nodes, *a, same_shape(src, d));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                accumulate(grads, nodes, p, same_shape(val(p), gd[offset..offset + n].to_vec()));
                offset += n;
            }
        }
        Op::ReverseRows(a) => accumulate(grads, nodes, *a, g.reverse_rows().unwrap()),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(&node.value, |g, y| g * y).unwrap()),
        Op::Softplus(a) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g * tensor::sigmoid(x)).unwrap())
        }
        Op::Silu(a) => {
            let d = g
                .zip_map(val(*a), |g, x| {
                    let s = tensor::sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .unwrap();
            accumulate(grads, nodes, *a, d);
        }
        Op::EluPlusOne(a) => {
            let d = g
                .zip_map(val(*a), |g, x| if x > 0.0 { g } else { g * x.exp() })
                .unwrap();
            accumulate(grads, nodes, *a, d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = val(*gamma).data();
            let dim = gam.len();
            let mut dx = vec![0.0; xhat.len()];
            let mut dgamma = vec![0.0; dim];
            let mut dbeta = vec![0.0; dim];
            for (r, istd) in inv_std.iter().enumerate() {
                let row = r * dim..(r + 1) * dim;
                let (gr, xr) = (&gd[row.clone()], &xhat[row.clone()]);
                let mut mean_dy = 0.0;
                let mut mean_dy_xhat = 0.0;
                for j in 0..dim {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                    let dy = gr[j] * gam[j];
                    mean_dy += dy;
                    mean_dy_xhat += dy * xr[j];
                }
                mean_dy /= dim as f64;
                mean_dy_xhat /= dim as f64;
                for j in 0..dim {
                    dx[r * dim + j] = istd * (gr[j] * gam[j] - mean_dy - xr[j] * mean_dy_xhat);
                }
            }
            accumulate(grads, nodes, *x, same_shape(val(*x), dx));
            accumulate(grads, nodes, *gamma, same_shape(val(*gamma), dgamma));
            accumulate(grads, nodes, *beta, same_shape(val(*beta), dbeta));
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), gd[0])),
        Op::SumRows(a) | Op::MeanRows(a) => {
            let src = val(*a);
            let r = src.shape()[0];
            let scale = if matches!(node.op, Op::MeanRows(_)) { 1.0 / r as f64 } else { 1.0 };
            let d: Vec<f64> = (0..r).flat_map(|_| gd.iter().map(|v| v * scale)).collect();
            accumulate(grads, nodes, *a, same_shape(src, d));
        }
        Op::DivRows(a, den) => {
            let (x, dv) = (val(*a), val(*den));
            let c = x.shape()[1];
            let mut dx = vec![0.0; x.len()];
            let mut dd = vec![0.0; dv.len()];
            for (i, &q) in dv.data().iter().enumerate() {
                for j in 0..c {
                    let k = i * c + j;
                    dx[k] = gd[k] / q;
                    dd[i] -= gd[k] * x.data()[k] / (q * q);
                }
            }
            accumulate(grads, nodes, *a, same_shape(x, dx));
            accumulate(grads, nodes, *den, same_shape(dv, dd));
        }
        Op::Conv2d { x, k, b, geom } => {
            let (gx, gk) = tensor::conv2d_backward(val(*x), val(*k), g, *geom);
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *k, gk);
            if let Some(b) = b {
                let (co, hw) = (g.shape()[0], g.shape()[1] * g.shape()[2]);
                let db = (0..co).map(|o| gd[o * hw..(o + 1) * hw].iter().sum()).collect();
                accumulate(grads, nodes, *b, same_shape(val(*b), db));
            }
        }
        Op::Conv1dCausal { x, k, b } => {
            let (gx, gk) = tensor::conv1d_depthwise_causal_backward(val(*x), val(*k), g);
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *k, gk);
            if let Some(b) = b {
                let d = val(*b).len();
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (s, v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, nodes, *b, same_shape(val(*b), db));
            }
        }
        Op::Patchify { x, patch } => {
            let src = val(*x);
            let d = unpatchify(gd, src.shape(), *patch);
            accumulate(grads, nodes, *x, same_shape(src, d));
        }
        Op::Amplitude2d { x, batch, h, w } => {
            let src = val(*x);
            let d = fft::amp2d_batched_backward(src.data(), gd, *batch, *h, *w);
            accumulate(grads, nodes, *x, same_shape(src, d));
        }
        Op::SelectiveScan { inputs, mode, states } => {
            let sg = ssm::selective_scan_backward(
                &ssm::ScanArgs {
                    u: val(inputs.u),
                    delta: val(inputs.delta),
                    a: val(inputs.a),
                    b: val(inputs.b),
                    c: val(inputs.c),
                    d_skip: inputs.d_skip.map(val),
                    mode: *mode,
                },
                states,
                g,
            );
            accumulate(grads, nodes, inputs.u, sg.u);
            accumulate(grads, nodes, inputs.delta, sg.delta);
            accumulate(grads, nodes, inputs.a, sg.a);
            accumulate(grads, nodes, inputs.b, sg.b);
            accumulate(grads, nodes, inputs.c, sg.c);
            if let (Some(id), Some(gdk)) = (inputs.d_skip, sg.d_skip) {
                accumulate(grads, nodes, id, gdk);
            }
        }
        Op::CrossEntropy { logits, label, probs } => {
            let mut d: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
            d[*label] -= gd[0];
            accumulate(grads, nodes, *logits, same_shape(val(*logits), d));
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u64,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if `v` does not influence the loss or
    /// does not require gradients.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zeros if it was never reached.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Var {
    fn node(&self) -> Ref<'_, Node> {
        let inner = self.tape.inner.borrow();
        assert_eq!(inner.generation, self.generation, "use of a Var from a cleared tape");
        Ref::map(inner, |i| &i.nodes[self.id])
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.node(), |n| &n.value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

fn record(tape: &Tape, value: Tensor, op: Op, inputs: &[&Var]) -> Var {
    let rg = inputs.iter().any(|v| v.requires_grad());
    tape.push(value, op, rg)
}

fn check_same(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    assert!(a.tape.same(&b.tape), "{op}: operands live on different tapes");
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(shape_err(op, &sa, &sb));
    }
    Ok(())
}

fn unary(a: &Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
    let v = a.value().map(f);
    record(&a.tape, v, op, &[a])
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    check_same("add", a, b)?;
    let v = a.value().zip_map(&b.value(), |x, y| x + y)?;
    Ok(record(&a.tape, v, Op::Add(a.id, b.id), &[a, b]))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    check_same("sub", a, b)?;
    let v = a.value().zip_map(&b.value(), |x, y| x - y)?;
    Ok(record(&a.tape, v, Op::Sub(a.id, b.id), &[a, b]))
}

/// Element-wise product.
pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    check_same("mul", a, b)?;
    let v = a.value().zip_map(&b.value(), |x, y| x * y)?;
    Ok(record(&a.tape, v, Op::Mul(a.id, b.id), &[a, b]))
}

pub fn scale(a: &Var, c: f64) -> Var {
    unary(a, Op::Scale(a.id, c), |x| x * c)
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    unary(a, Op::AddScalar(a.id), |x| x + c)
}

/// `s·a` for a single-element `s`.
pub fn mul_scalar_var(a: &Var, s: &Var) -> Result<Var> {
    if s.value().len() != 1 {
        return Err(shape_err("mul_scalar_var", &a.shape(), &s.shape()));
    }
    let sv = s.value().data()[0];
    let v = a.value().map(|x| x * sv);
    Ok(record(&a.tape, v, Op::MulByScalarVar(a.id, s.id), &[a, s]))
}

pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let v = tensor::matmul(&a.value(), &b.value())?;
    Ok(record(&a.tape, v, Op::MatMul(a.id, b.id), &[a, b]))
}

/// Adds `b[N]` to every row of `a[M,N]`.
pub fn add_row_bias(a: &Var, b: &Var) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb != [sa[1]] {
        return Err(shape_err("add_row_bias", &sa, &sb));
    }
    let v = {
        let (av, bv) = (a.value(), b.value());
        let n = sa[1];
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i % n]).collect();
        Tensor::new(sa.clone(), data)?
    };
    Ok(record(&a.tape, v, Op::AddRowBias(a.id, b.id), &[a, b]))
}

/// `x[L,Din] · W[Din,Dout] (+ b[Dout])`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(shape_err("linear", &sx, &sw));
    }
    let y = matmul(x, w)?;
    match b {
        Some(b) => add_row_bias(&y, b),
        None => Ok(y),
    }
}

pub fn transpose(a: &Var) -> Result<Var> {
    let v = a.value().transpose()?;
    Ok(record(&a.tape, v, Op::Transpose(a.id), &[a]))
}

pub fn reshape(a: &Var, shape: &[usize]) -> Result<Var> {
    let v = a.value().clone().reshape(shape)?;
    Ok(record(&a.tape, v, Op::Reshape(a.id), &[a]))
}

pub fn slice_rows(a: &Var, start: usize, end: usize) -> Result<Var> {
    let v = a.value().slice_rows(start, end)?;
    Ok(record(&a.tape, v, Op::SliceRows(a.id, start), &[a]))
}

pub fn slice_cols(a: &Var, start: usize, end: usize) -> Result<Var> {
    let v = a.value().slice_cols(start, end)?;
    Ok(record(&a.tape, v, Op::SliceCols(a.id, start), &[a]))
}

/// Stacks rank-2 parts with equal column counts along axis 0.
pub fn concat_rows(parts: &[&Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| shape_err("concat_rows", &[], &[]))?;
    let cols = first.shape()[1];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let s = p.shape();
        if s.len() != 2 || s[1] != cols {
            return Err(shape_err("concat_rows", &first.shape(), &s));
        }
        rows += s[0];
        data.extend_from_slice(p.value().data());
    }
    let v = Tensor::new(vec![rows, cols], data)?;
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(record(&first.tape, v, Op::ConcatRows(ids), parts))
}

/// Reverses the sequence axis (rows) of `a[L,D]`.
pub fn reverse_rows(a: &Var) -> Result<Var> {
    let v = a.value().reverse_rows()?;
    Ok(record(&a.tape, v, Op::ReverseRows(a.id), &[a]))
}

pub fn exp(a: &Var) -> Var {
    unary(a, Op::Exp(a.id), f64::exp)
}

pub fn softplus(a: &Var) -> Var {
    unary(a, Op::Softplus(a.id), tensor::softplus)
}

pub fn silu(a: &Var) -> Var {
    unary(a, Op::Silu(a.id), tensor::silu)
}

pub fn elu_plus_one(a: &Var) -> Var {
    unary(a, Op::EluPlusOne(a.id), tensor::elu_plus_one)
}

/// Standardizes each row of `x[M,D]` then applies `gamma`, `beta`.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let sx = x.shape();
    let d = *sx.last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err("layer_norm", &sx, &gamma.shape()));
    }
    let (out, xhat, inv_std) = {
        let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
        let rows = xv.len() / d;
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat.push(xh);
                out.push(xh * gv.data()[j] + bv.data()[j]);
            }
        }
        (Tensor::new(sx.clone(), out)?, xhat, inv_std)
    };
    let op = Op::LayerNorm {
        x: x.id,
        gamma: gamma.id,
        beta: beta.id,
        xhat,
        inv_std,
    };
    Ok(record(&x.tape, out, op, &[x, gamma, beta]))
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum(a: &Var) -> Var {
    let v = Tensor::scalar(a.value().sum());
    record(&a.tape, v, Op::Sum(a.id), &[a])
}

fn reduce_rows(a: &Var, mean: bool) -> Result<Var> {
    let (r, c) = a.value().dims2()?;
    let mut out = vec![0.0; c];
    for row in a.value().data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    if mean {
        out.iter_mut().for_each(|v| *v /= r as f64);
    }
    let op = if mean { Op::MeanRows(a.id) } else { Op::SumRows(a.id) };
    Ok(record(&a.tape, Tensor::new(vec![1, c], out)?, op, &[a]))
}

/// Column sums of `a[M,N]` as `[1,N]`.
pub fn sum_rows(a: &Var) -> Result<Var> {
    reduce_rows(a, false)
}

/// Column means of `a[M,N]` as `[1,N]`.
pub fn mean_rows(a: &Var) -> Result<Var> {
    reduce_rows(a, true)
}

/// Divides row `i` of `a[M,N]` by `den[M,1]`.
pub fn div_rows(a: &Var, den: &Var) -> Result<Var> {
    let (sa, sd) = (a.shape(), den.shape());
    if sa.len() != 2 || sd != [sa[0], 1] {
        return Err(shape_err("div_rows", &sa, &sd));
    }
    let v = {
        let (av, dv) = (a.value(), den.value());
        let c = sa[1];
        let data = av.data().iter().enumerate().map(|(i, x)| x / dv.data()[i / c]).collect();
        Tensor::new(sa.clone(), data)?
    };
    Ok(record(&a.tape, v, Op::DivRows(a.id, den.id), &[a, den]))
}

pub fn conv2d(x: &Var, k: &Var, b: Option<&Var>, geom: Conv2dGeom) -> Result<Var> {
    let v = tensor::conv2d(&x.value(), &k.value(), b.map(|b| b.value()).as_deref(), geom)?;
    let op = Op::Conv2d {
        x: x.id,
        k: k.id,
        b: b.map(|b| b.id),
        geom,
    };
    let mut ins = vec![x, k];
    ins.extend(b);
    Ok(record(&x.tape, v, op, &ins))
}

pub fn conv1d_depthwise_causal(x: &Var, k: &Var, b: Option<&Var>) -> Result<Var> {
    let v = tensor::conv1d_depthwise_causal(&x.value(), &k.value(), b.map(|b| b.value()).as_deref())?;
    let op = Op::Conv1dCausal {
        x: x.id,
        k: k.id,
        b: b.map(|b| b.id),
    };
    let mut ins = vec![x, k];
    ins.extend(b);
    Ok(record(&x.tape, v, op, &ins))
}

/// Splits `img[C,H,W]` into non-overlapping `P×P` patches, one row per patch
/// in row-major patch order, each flattened as `(c, i, j)`.
pub fn patchify(img: &Var, patch: usize) -> Result<Var> {
    let v = patchify_tensor(&img.value(), patch)?;
    Ok(record(&img.tape, v, Op::Patchify { x: img.id, patch }, &[img]))
}

pub(crate) fn patchify_tensor(img: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Domain {
            op: "patchify",
            msg: format!("resolution {h}x{w} not divisible by patch {p}"),
        });
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = Vec::with_capacity(img.len());
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for i in 0..p {
                    let base = (ch * h + py * p + i) * w + px * p;
                    out.extend_from_slice(&img.data()[base..base + p]);
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, c * p * p], out)
}

fn unpatchify(g: &[f64], shape: &[usize], p: usize) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ph, pw) = (h / p, w / p);
    let mut out = vec![0.0; c * h * w];
    let mut k = 0;
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for i in 0..p {
                    let base = (ch * h + py * p + i) * w + px * p;
                    out[base..base + p].copy_from_slice(&g[k..k + p]);
                    k += p;
                }
            }
        }
    }
    out
}

/// Amplitude of the 2D DFT for `batch` grids of `h×w` packed contiguously in
/// `x` (any shape with `batch·h·w` elements). Output has the shape of `x`.
pub fn amplitude2d(x: &Var, batch: usize, h: usize, w: usize) -> Result<Var> {
    let s = x.shape();
    if s.iter().product::<usize>() != batch * h * w {
        return Err(shape_err("amplitude2d", &s, &[batch, h, w]));
    }
    let data = fft::amp2d_batched(x.value().data(), batch, h, w);
    let v = Tensor::new(s, data)?;
    Ok(record(&x.tape, v, Op::Amplitude2d { x: x.id, batch, h, w }, &[x]))
}

/// Differentiable selective scan:
/// `h_t = exp(Δ_t A)⊙h_{t−1} + B̄_t x_t`, `y_t = C_t·h_t (+ D⊙x_t)`.
///
/// Shapes: `u[L,D]`, `delta[L,D]`, `a[D,N]`, `b[L,N]`, `c[L,N]`, `d_skip[D]`.
pub fn selective_scan(
    u: &Var,
    delta: &Var,
    a: &Var,
    b: &Var,
    c: &Var,
    d_skip: Option<&Var>,
    mode: Discretization,
) -> Result<Var> {
    let (y, states) = {
        let dv = d_skip.map(|d| d.value());
        let args = ssm::ScanArgs {
            u: &u.value(),
            delta: &delta.value(),
            a: &a.value(),
            b: &b.value(),
            c: &c.value(),
            d_skip: dv.as_deref(),
            mode,
        };
        args.validate()?;
        ssm::selective_scan_forward(&args)
    };
    let inputs = ScanInputs {
        u: u.id,
        delta: delta.id,
        a: a.id,
        b: b.id,
        c: c.id,
        d_skip: d_skip.map(|d| d.id),
    };
    let mut ins = vec![u, delta, a, b, c];
    ins.extend(d_skip);
    Ok(record(&u.tape, y, Op::SelectiveScan { inputs, mode, states }, &ins))
}

/// `−log softmax(logits)[label]` for `logits[1,K]` (or `[K]`).
pub fn cross_entropy(logits: &Var, label: usize) -> Result<Var> {
    let (loss, probs) = {
        let lv = logits.value();
        let k = lv.len();
        if label >= k {
            return Err(Error::Domain {
                op: "cross_entropy",
                msg: format!("label {label} out of range for {k} classes"),
            });
        }
        let m = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lv.data().iter().map(|v| (v - m).exp()).sum();
        let probs: Vec<f64> = lv.data().iter().map(|v| (v - m).exp() / z).collect();
        (m + z.ln() - lv.data()[label], probs)
    };
    let op = Op::CrossEntropy {
        logits: logits.id,
        label,
        probs,
    };
    Ok(record(&logits.tape, Tensor::scalar(loss), op, &[logits]))
}
