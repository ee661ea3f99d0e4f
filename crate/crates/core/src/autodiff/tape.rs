//! Define-by-run reverse-mode tape over dense f32 tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Recording an op appends a
//! node holding the result value plus the rule needed to push gradients back
//! to its parents; [`Tape::backward`] then walks the nodes once in reverse
//! creation order. Tapes are single-threaded (the kernels underneath may
//! parallelize internally with deterministic reductions).

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvSpec};
use super::optim::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    StopGrad(usize),
    Binary { op: BinOp, a: usize, b: usize },
    AddScalar { a: usize, s: f32 },
    MulScalar { a: usize, s: f32 },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    Abs(usize),
    Sigmoid(usize),
    Softplus(usize),
    Squareplus { a: usize, b: f32 },
    SquareplusPrime { a: usize, b: f32 },
    Clamp { a: usize, lo: f32, hi: f32 },
    Sum(usize),
    SumAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize, arg: Vec<usize> },
    CumsumExclusive { a: usize, axis: usize },
    Concat { a: usize, b: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Reshape(usize),
    Im2Col { a: usize, spec: ConvSpec },
    UpsampleNearest { a: usize, factor: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Shared handle to a recording tape. Cloning is cheap; all clones append to
/// the same graph.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node of a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, data, op, needs_grad });
        Var { tape: self.clone(), id }
    }

    /// Records a constant; gradients never flow into it.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f32>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, Op::Leaf { param: None }, false)
    }

    pub fn scalar(&self, v: f32) -> Var {
        self.push(vec![1], vec![v], Op::Leaf { param: None }, false)
    }

    /// Records a leaf whose gradient can be read back after `backward`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, true)
    }

    /// Binds parameter `idx` of `params` as a differentiable leaf; after
    /// `backward`, [`Tape::accumulate_params`] adds its gradient back into
    /// the set.
    pub fn param(&self, params: &ParamSet, idx: usize) -> Var {
        let t = params.value(idx);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(idx) },
            t.requires_grad(),
        )
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    fn with_data<R>(&self, id: usize, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.inner.borrow().nodes[id].data)
    }

    pub fn binary_checked(&self, op: BinOp, a: &Var, b: &Var) -> Result<Var> {
        debug_assert!(Rc::ptr_eq(&self.inner, &a.tape.inner) && Rc::ptr_eq(&self.inner, &b.tape.inner));
        let (ash, bsh) = (self.shape_of(a.id), self.shape_of(b.id));
        let f = match op {
            BinOp::Add => |x: f32, y: f32| x + y,
            BinOp::Sub => |x: f32, y: f32| x - y,
            BinOp::Mul => |x: f32, y: f32| x * y,
            BinOp::Div => |x: f32, y: f32| x / y,
        };
        let (data, osh) = {
            let inner = self.inner.borrow();
            kernels::binary_broadcast(
                &inner.nodes[a.id].data,
                &ash,
                &inner.nodes[b.id].data,
                &bsh,
                f,
            )?
        };
        if op == BinOp::Div && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("division produced non-finite values".into()));
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(osh, data, Op::Binary { op, a: a.id, b: b.id }, needs))
    }

    pub fn matmul_checked(&self, a: &Var, b: &Var) -> Result<Var> {
        let (ash, bsh) = (self.shape_of(a.id), self.shape_of(b.id));
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-D operands, got {ash:?} and {bsh:?}"
            )));
        }
        let (data, m, n) = {
            let inner = self.inner.borrow();
            kernels::matmul(
                &inner.nodes[a.id].data,
                (ash[0], ash[1]),
                false,
                &inner.nodes[b.id].data,
                (bsh[0], bsh[1]),
                false,
            )?
        };
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(vec![m, n], data, Op::Matmul { a: a.id, b: b.id }, needs))
    }

    fn unary(&self, a: &Var, op_of: impl Fn(usize) -> Op, f: impl Fn(f32) -> f32) -> Var {
        let shape = self.shape_of(a.id);
        let data: Vec<f32> = self.with_data(a.id, |d| d.iter().map(|&v| f(v)).collect());
        let needs = self.needs(a.id);
        self.push(shape, data, op_of(a.id), needs)
    }

    /// Runs backward from a scalar root, filling per-node gradient buffers.
    pub fn backward(&self, root: &Var) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        assert_eq!(
            inner.nodes[root.id].data.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            inner.nodes[root.id].shape
        );
        inner.grads = (0..n).map(|_| None).collect();
        inner.grads[root.id] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !inner.nodes[i].needs_grad {
                inner.grads[i] = None;
                continue;
            }
            let Some(g) = inner.grads[i].take() else { continue };
            // split borrows: read node metadata, then accumulate into parents
            let op = inner.nodes[i].op.clone();
            let out_shape = inner.nodes[i].shape.clone();
            match op {
                Op::Leaf { .. } => {
                    // keep leaf grads readable after the pass
                    inner.grads[i] = Some(g);
                }
                Op::StopGrad(_) => {}
                Op::Binary { op, a, b } => {
                    let (ash, bsh) =
                        (inner.nodes[a].shape.clone(), inner.nodes[b].shape.clone());
                    match op {
                        BinOp::Add => {
                            accumulate(&mut inner, a, kernels::reduce_to_shape(&g, &out_shape, &ash));
                            accumulate(&mut inner, b, kernels::reduce_to_shape(&g, &out_shape, &bsh));
                        }
                        BinOp::Sub => {
                            accumulate(&mut inner, a, kernels::reduce_to_shape(&g, &out_shape, &ash));
                            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                            accumulate(&mut inner, b, kernels::reduce_to_shape(&neg, &out_shape, &bsh));
                        }
                        BinOp::Mul => {
                            if inner.nodes[a].needs_grad {
                                let (gb, _) = kernels::binary_broadcast(
                                    &g,
                                    &out_shape,
                                    &inner.nodes[b].data,
                                    &bsh,
                                    |x, y| x * y,
                                )
                                .expect("forward validated broadcast");
                                accumulate(&mut inner, a, kernels::reduce_to_shape(&gb, &out_shape, &ash));
                            }
                            if inner.nodes[b].needs_grad {
                                let (ga, _) = kernels::binary_broadcast(
                                    &g,
                                    &out_shape,
                                    &inner.nodes[a].data,
                                    &ash,
                                    |x, y| x * y,
                                )
                                .expect("forward validated broadcast");
                                accumulate(&mut inner, b, kernels::reduce_to_shape(&ga, &out_shape, &bsh));
                            }
                        }
                        BinOp::Div => {
                            if inner.nodes[a].needs_grad {
                                let (da, _) = kernels::binary_broadcast(
                                    &g,
                                    &out_shape,
                                    &inner.nodes[b].data,
                                    &bsh,
                                    |x, y| x / y,
                                )
                                .expect("forward validated broadcast");
                                accumulate(&mut inner, a, kernels::reduce_to_shape(&da, &out_shape, &ash));
                            }
                            if inner.nodes[b].needs_grad {
                                // d(a/b)/db = -a / b^2, with a, b broadcast to out
                                let (ab, _) = kernels::binary_broadcast(
                                    &inner.nodes[a].data,
                                    &ash,
                                    &inner.nodes[b].data,
                                    &bsh,
                                    |x, y| -x / (y * y),
                                )
                                .expect("forward validated broadcast");
                                let db: Vec<f32> = g.iter().zip(&ab).map(|(&x, &y)| x * y).collect();
                                accumulate(&mut inner, b, kernels::reduce_to_shape(&db, &out_shape, &bsh));
                            }
                        }
                    }
                }
                Op::AddScalar { a, .. } => accumulate(&mut inner, a, g),
                Op::MulScalar { a, s } => {
                    accumulate(&mut inner, a, g.iter().map(|v| v * s).collect())
                }
                Op::Matmul { a, b } => {
                    let (ash, bsh) =
                        (inner.nodes[a].shape.clone(), inner.nodes[b].shape.clone());
                    if inner.nodes[a].needs_grad {
                        let (da, ..) = kernels::matmul(
                            &g,
                            (out_shape[0], out_shape[1]),
                            false,
                            &inner.nodes[b].data,
                            (bsh[0], bsh[1]),
                            true,
                        )
                        .expect("shapes fixed by forward");
                        accumulate(&mut inner, a, da);
                    }
                    if inner.nodes[b].needs_grad {
                        let (db, ..) = kernels::matmul(
                            &inner.nodes[a].data,
                            (ash[0], ash[1]),
                            true,
                            &g,
                            (out_shape[0], out_shape[1]),
                            false,
                        )
                        .expect("shapes fixed by forward");
                        accumulate(&mut inner, b, db);
                    }
                }
                Op::Transpose { a } => {
                    let (m, n) = (out_shape[0], out_shape[1]);
                    let mut da = vec![0.0f32; g.len()];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g[i * n + j];
                        }
                    }
                    accumulate(&mut inner, a, da);
                }
                Op::Exp(a) => {
                    let da: Vec<f32> =
                        g.iter().zip(&inner.nodes[i].data).map(|(&gv, &y)| gv * y).collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Ln(a) => {
                    let da: Vec<f32> =
                        g.iter().zip(&inner.nodes[a].data).map(|(&gv, &x)| gv / x).collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Sqrt(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[i].data)
                        .map(|(&gv, &y)| gv * 0.5 / y)
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Sin(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| gv * x.cos())
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Cos(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| -gv * x.sin())
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Relu(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Abs(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| gv * sign(x))
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[i].data)
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Softplus(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| gv * sigmoid(x))
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Squareplus { a, b } => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| gv * 0.5 * (1.0 + x / (x * x + b).sqrt()))
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::SquareplusPrime { a, b } => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| {
                            let r = x * x + b;
                            gv * 0.5 * b / (r * r.sqrt())
                        })
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Clamp { a, lo, hi } => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&inner.nodes[a].data)
                        .map(|(&gv, &x)| if x >= lo && x <= hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut inner, a, da);
                }
                Op::Sum(a) => {
                    let n = inner.nodes[a].data.len();
                    accumulate(&mut inner, a, vec![g[0]; n]);
                }
                Op::SumAxis { a, axis } => {
                    let ash = inner.nodes[a].shape.clone();
                    let (outer, len, inner_sz) = kernels::axis_split(&ash, axis);
                    let mut da = vec![0.0f32; outer * len * inner_sz];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * len + l) * inner_sz;
                            let src = o * inner_sz;
                            for k in 0..inner_sz {
                                da[dst + k] = g[src + k];
                            }
                        }
                    }
                    accumulate(&mut inner, a, da);
                }
                Op::MaxAxis { a, arg, .. } => {
                    let mut da = vec![0.0f32; inner.nodes[a].data.len()];
                    for (gi, &src) in g.iter().zip(&arg) {
                        da[src] += gi;
                    }
                    accumulate(&mut inner, a, da);
                }
                Op::CumsumExclusive { a, axis } => {
                    let ash = inner.nodes[a].shape.clone();
                    accumulate(&mut inner, a, kernels::cumsum_exclusive_backward(&g, &ash, axis));
                }
                Op::Concat { a, b, axis } => {
                    let ash = inner.nodes[a].shape.clone();
                    let bsh = inner.nodes[b].shape.clone();
                    let (outer, a_len, inner_sz) = kernels::axis_split(&ash, axis);
                    let b_len = bsh[axis];
                    let total = a_len + b_len;
                    let mut da = vec![0.0f32; ash.iter().product()];
                    let mut db = vec![0.0f32; bsh.iter().product()];
                    for o in 0..outer {
                        for l in 0..total {
                            let src = (o * total + l) * inner_sz;
                            if l < a_len {
                                let dst = (o * a_len + l) * inner_sz;
                                da[dst..dst + inner_sz].copy_from_slice(&g[src..src + inner_sz]);
                            } else {
                                let dst = (o * b_len + (l - a_len)) * inner_sz;
                                db[dst..dst + inner_sz].copy_from_slice(&g[src..src + inner_sz]);
                            }
                        }
                    }
                    accumulate(&mut inner, a, da);
                    accumulate(&mut inner, b, db);
                }
                Op::Slice { a, axis, start, len } => {
                    let ash = inner.nodes[a].shape.clone();
                    let (outer, full, inner_sz) = kernels::axis_split(&ash, axis);
                    let mut da = vec![0.0f32; ash.iter().product()];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * full + start + l) * inner_sz;
                            let src = (o * len + l) * inner_sz;
                            da[dst..dst + inner_sz].copy_from_slice(&g[src..src + inner_sz]);
                        }
                    }
                    accumulate(&mut inner, a, da);
                }
                Op::Reshape(a) => accumulate(&mut inner, a, g),
                Op::Im2Col { a, spec } => {
                    accumulate(&mut inner, a, kernels::col2im(&g, &spec));
                }
                Op::UpsampleNearest { a, factor } => {
                    let ash = inner.nodes[a].shape.clone();
                    accumulate(
                        &mut inner,
                        a,
                        kernels::upsample_nearest_backward(&g, ash[0], ash[1], ash[2], factor),
                    );
                }
            }
        }
    }

    /// Adds leaf gradients into the bound parameter set.
    pub fn accumulate_params(&self, params: &mut ParamSet) {
        let inner = self.inner.borrow();
        for (node, grad) in inner.nodes.iter().zip(&inner.grads) {
            if let (Op::Leaf { param: Some(idx) }, Some(g)) = (&node.op, grad) {
                params.value_mut(*idx).accumulate_grad(g);
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(inner: &mut TapeInner, id: usize, delta: Vec<f32>) {
    if !inner.nodes[id].needs_grad {
        return;
    }
    match &mut inner.grads[id] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi += di;
            }
        }
        slot => *slot = Some(delta),
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Snapshot of the node value.
    pub fn value(&self) -> Tensor {
        let shape = self.shape();
        let data = self.tape.with_data(self.id, |d| d.to_vec());
        Tensor::new(shape, data).expect("node invariant")
    }

    pub fn scalar_value(&self) -> f32 {
        self.tape.with_data(self.id, |d| {
            assert_eq!(d.len(), 1, "scalar_value on non-scalar");
            d[0]
        })
    }

    /// Gradient recorded for this node by the last `backward` call.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        inner.grads.get(self.id).and_then(|g| g.clone()).map(|g| {
            Tensor::new(inner.nodes[self.id].shape.clone(), g).expect("grad shape invariant")
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tape.with_data(self.id, |d| d.iter().all(|v| v.is_finite()))
    }

    fn bin(&self, other: &Var, op: BinOp) -> Var {
        self.tape.binary_checked(op, self, other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn add(&self, o: &Var) -> Var {
        self.bin(o, BinOp::Add)
    }
    pub fn sub(&self, o: &Var) -> Var {
        self.bin(o, BinOp::Sub)
    }
    pub fn mul(&self, o: &Var) -> Var {
        self.bin(o, BinOp::Mul)
    }
    pub fn div(&self, o: &Var) -> Var {
        self.bin(o, BinOp::Div)
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        let needs = self.tape.needs(self.id);
        let shape = self.shape();
        let data = self.tape.with_data(self.id, |d| d.iter().map(|&v| v + s).collect());
        self.tape.push(shape, data, Op::AddScalar { a: self.id, s }, needs)
    }

    pub fn scale(&self, s: f32) -> Var {
        let needs = self.tape.needs(self.id);
        let shape = self.shape();
        let data = self.tape.with_data(self.id, |d| d.iter().map(|&v| v * s).collect());
        self.tape.push(shape, data, Op::MulScalar { a: self.id, s }, needs)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn matmul(&self, o: &Var) -> Var {
        self.tape.matmul_checked(self, o).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn transpose(&self) -> Var {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "transpose expects 2-D");
        let (m, n) = (shape[0], shape[1]);
        let data = self.tape.with_data(self.id, |d| {
            let mut out = vec![0.0f32; d.len()];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            out
        });
        let needs = self.tape.needs(self.id);
        self.tape.push(vec![n, m], data, Op::Transpose { a: self.id }, needs)
    }

    pub fn exp(&self) -> Var {
        self.tape.unary(self, Op::Exp, f32::exp)
    }
    pub fn ln(&self) -> Var {
        self.tape.unary(self, Op::Ln, f32::ln)
    }
    pub fn sqrt(&self) -> Var {
        self.tape.unary(self, Op::Sqrt, f32::sqrt)
    }
    pub fn sin(&self) -> Var {
        self.tape.unary(self, Op::Sin, f32::sin)
    }
    pub fn cos(&self) -> Var {
        self.tape.unary(self, Op::Cos, f32::cos)
    }
    pub fn relu(&self) -> Var {
        self.tape.unary(self, Op::Relu, |x| x.max(0.0))
    }
    pub fn abs(&self) -> Var {
        self.tape.unary(self, Op::Abs, f32::abs)
    }
    pub fn sigmoid(&self) -> Var {
        self.tape.unary(self, Op::Sigmoid, sigmoid)
    }
    pub fn softplus(&self) -> Var {
        // ln(1 + e^x) with the standard overflow-safe form
        self.tape.unary(self, Op::Softplus, |x| {
            if x > 20.0 {
                x
            } else {
                x.exp().ln_1p()
            }
        })
    }

    /// Smooth relu-like activation `0.5 (x + sqrt(x^2 + b))`; its input
    /// gradient is everywhere differentiable, which keeps density-gradient
    /// normals well defined.
    pub fn squareplus(&self, b: f32) -> Var {
        let needs = self.tape.needs(self.id);
        let shape = self.shape();
        let data = self
            .tape
            .with_data(self.id, |d| d.iter().map(|&x| 0.5 * (x + (x * x + b).sqrt())).collect());
        self.tape.push(shape, data, Op::Squareplus { a: self.id, b }, needs)
    }

    /// Derivative of [`Var::squareplus`] as a forward value (used to build
    /// density input-gradients as a first-order graph).
    pub fn squareplus_prime(&self, b: f32) -> Var {
        let needs = self.tape.needs(self.id);
        let shape = self.shape();
        let data = self.tape.with_data(self.id, |d| {
            d.iter().map(|&x| 0.5 * (1.0 + x / (x * x + b).sqrt())).collect()
        });
        self.tape.push(shape, data, Op::SquareplusPrime { a: self.id, b }, needs)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var {
        let needs = self.tape.needs(self.id);
        let shape = self.shape();
        let data =
            self.tape.with_data(self.id, |d| d.iter().map(|&x| x.clamp(lo, hi)).collect());
        self.tape.push(shape, data, Op::Clamp { a: self.id, lo, hi }, needs)
    }

    pub fn sum(&self) -> Var {
        let needs = self.tape.needs(self.id);
        let total: f32 = self.tape.with_data(self.id, |d| d.iter().sum());
        self.tape.push(vec![1], vec![total], Op::Sum(self.id), needs)
    }

    pub fn mean(&self) -> Var {
        let n = self.numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Var {
        let shape = self.shape();
        assert!(axis < shape.len());
        let data = self.tape.with_data(self.id, |d| kernels::sum_axis(d, &shape, axis));
        let mut osh: Vec<usize> = shape.clone();
        osh.remove(axis);
        if osh.is_empty() {
            osh.push(1);
        }
        let needs = self.tape.needs(self.id);
        self.tape.push(osh, data, Op::SumAxis { a: self.id, axis }, needs)
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.shape()[axis] as f32;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Max over `axis`; gradient routes to the first maximum.
    pub fn max_axis(&self, axis: usize) -> Var {
        let shape = self.shape();
        let (data, arg) = self.tape.with_data(self.id, |d| kernels::max_axis(d, &shape, axis));
        let mut osh: Vec<usize> = shape.clone();
        osh.remove(axis);
        if osh.is_empty() {
            osh.push(1);
        }
        let needs = self.tape.needs(self.id);
        self.tape.push(osh, data, Op::MaxAxis { a: self.id, axis, arg }, needs)
    }

    pub fn cumsum_exclusive(&self, axis: usize) -> Var {
        let shape = self.shape();
        let data = self.tape.with_data(self.id, |d| kernels::cumsum_exclusive(d, &shape, axis));
        let needs = self.tape.needs(self.id);
        self.tape.push(shape, data, Op::CumsumExclusive { a: self.id, axis }, needs)
    }

    pub fn concat(&self, other: &Var, axis: usize) -> Var {
        let (ash, bsh) = (self.shape(), other.shape());
        assert_eq!(ash.len(), bsh.len(), "concat rank mismatch");
        for (d, (x, y)) in ash.iter().zip(&bsh).enumerate() {
            assert!(d == axis || x == y, "concat non-axis extents differ: {ash:?} vs {bsh:?}");
        }
        let (outer, a_len, inner_sz) = kernels::axis_split(&ash, axis);
        let b_len = bsh[axis];
        let mut osh = ash.clone();
        osh[axis] = a_len + b_len;
        let inner = self.tape.inner.borrow();
        let (ad, bd) = (&inner.nodes[self.id].data, &inner.nodes[other.id].data);
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            data.extend_from_slice(&ad[o * a_len * inner_sz..(o + 1) * a_len * inner_sz]);
            data.extend_from_slice(&bd[o * b_len * inner_sz..(o + 1) * b_len * inner_sz]);
        }
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad;
        drop(inner);
        self.tape.push(osh, data, Op::Concat { a: self.id, b: other.id, axis }, needs)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape();
        assert!(axis < shape.len() && start + len <= shape[axis], "slice out of range");
        let (outer, full, inner_sz) = kernels::axis_split(&shape, axis);
        let mut osh = shape.clone();
        osh[axis] = len;
        let data = self.tape.with_data(self.id, |d| {
            let mut out = Vec::with_capacity(outer * len * inner_sz);
            for o in 0..outer {
                let base = (o * full + start) * inner_sz;
                out.extend_from_slice(&d[base..base + len * inner_sz]);
            }
            out
        });
        let needs = self.tape.needs(self.id);
        self.tape.push(osh, data, Op::Slice { a: self.id, axis, start, len }, needs)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape element count mismatch");
        let data = self.tape.with_data(self.id, |d| d.to_vec());
        let needs = self.tape.needs(self.id);
        self.tape.push(shape.to_vec(), data, Op::Reshape(self.id), needs)
    }

    /// Forwards the value and blocks all gradient flow.
    pub fn stop_gradient(&self) -> Var {
        let shape = self.shape();
        let data = self.tape.with_data(self.id, |d| d.to_vec());
        self.tape.push(shape, data, Op::StopGrad(self.id), false)
    }

    /// L_p norm over all elements, p in {1, 2}.
    pub fn norm(&self, p: u32) -> Var {
        match p {
            1 => self.abs().sum(),
            // small bias keeps the sqrt differentiable at an exact zero
            2 => self.mul(self).sum().add_scalar(1e-12).sqrt(),
            _ => panic!("only p=1 and p=2 norms are supported"),
        }
    }

    /// Patch-lowering for convolution: `[H, W, C]` -> `[OH*OW, k*k*C]`.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Var {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "im2col expects [H, W, C]");
        let spec = ConvSpec {
            height: shape[0],
            width: shape[1],
            channels: shape[2],
            kernel,
            stride,
            pad,
        };
        let data = self.tape.with_data(self.id, |d| kernels::im2col(d, &spec));
        let osh = vec![spec.out_height() * spec.out_width(), spec.patch_len()];
        let needs = self.tape.needs(self.id);
        self.tape.push(osh, data, Op::Im2Col { a: self.id, spec }, needs)
    }

    pub fn upsample_nearest(&self, factor: usize) -> Var {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "upsample expects [H, W, C]");
        let data = self.tape.with_data(self.id, |d| {
            kernels::upsample_nearest(d, shape[0], shape[1], shape[2], factor)
        });
        let osh = vec![shape[0] * factor, shape[1] * factor, shape[2]];
        let needs = self.tape.needs(self.id);
        self.tape.push(osh, data, Op::UpsampleNearest { a: self.id, factor }, needs)
    }
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}
impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}
impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}
impl std::ops::Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}
