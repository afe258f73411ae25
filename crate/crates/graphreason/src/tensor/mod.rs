//! Reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node in a
//! flat list; parents always precede children, so one reverse sweep in
//! [`Tape::backward`] propagates adjoints. Gradients along multiple paths
//! to the same node accumulate by summation. A tape supports exactly one
//! backward pass; build a fresh tape per training step.
//!
//! Parameters live outside the tape in a [`params::ParamSet`] and are
//! leased onto a tape as leaf nodes, so the same weights can be bound into
//! any number of consecutive step graphs.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{CoverageWeights, GeometryError, PixelBox};
use kernels as kn;
use params::{ParamId, ParamSet};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("tensors belong to different tapes")]
    TapeMixed,
    #[error("backward was already run on this tape")]
    TapeConsumed,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: class index {index} out of range for {classes} classes")]
    ClassOutOfRange {
        op: &'static str,
        index: usize,
        classes: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(
        "coverage describes {cov_regions} regions on a {cov_h}x{cov_w} grid; \
         got {patches} patches for a {mem_h}x{mem_w} memory"
    )]
    CoverageMismatch {
        cov_regions: usize,
        cov_h: usize,
        cov_w: usize,
        patches: usize,
        mem_h: usize,
        mem_w: usize,
    },
    #[error("parameter '{0}' has no gradient; run backward before stepping")]
    MissingGradient(String),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

/// Numeric width of recorded values. `F32` keeps f64 storage but rounds
/// every op output through f32, emulating single-precision compute;
/// gradient checks are only meaningful under `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn quantize(&self, data: &mut [f64]) {
        if let Precision::F32 = self {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, mul: f64 },
    AddRowVec { x: usize, v: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    MeanSpatial { x: usize, hw: usize },
    ConcatLast { parts: Vec<usize>, widths: Vec<usize>, rows: usize },
    StackRows { parts: Vec<usize>, width: usize },
    Row { x: usize, row: usize, width: usize },
    Reshape { x: usize },
    BroadcastHw { v: usize, h: usize, w: usize },
    Conv2d {
        x: usize,
        ker: usize,
        bias: Option<usize>,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
    },
    CropResize { map: usize, bx: PixelBox, oh: usize, ow: usize },
    PasteBack {
        memory: usize,
        patches: Vec<usize>,
        boxes: Vec<PixelBox>,
        cov: Arc<CoverageWeights>,
    },
    SoftmaxXent { logits: usize, target: usize, probs: Vec<f64> },
    WeightedNll {
        logits: usize,
        labels: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        probs: Vec<f64>,
    },
    AttentionFuse {
        logits: Vec<usize>,
        atts: Vec<usize>,
        // weights[n * regions + r]
        weights: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

pub struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    precision: Precision,
}

/// Recording context for one forward/backward cycle.
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Handle to a node on a tape. Cloning is cheap; all arithmetic goes
/// through methods that record new nodes.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<TapeInner>,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
                precision,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        mut value: Vec<f64>,
        requires_grad: bool,
        op: Op,
        param: Option<ParamId>,
    ) -> Tensor {
        self.inner.precision.quantize(&mut value);
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) {
            debug_assert!(
                value.iter().all(|v| v.is_finite()),
                "op produced a non-finite value"
            );
        }
        let n = numel(&shape);
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            grad: vec![0.0; n],
            requires_grad,
            op,
            param,
        });
        Tensor {
            tape: Rc::clone(&self.inner),
            id,
        }
    }

    /// Leaf with no gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf, None))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![], vec![v], false, Op::Leaf, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], false, Op::Leaf, None)
    }

    /// Leaf that accumulates a gradient but is not tied to a parameter;
    /// read it back with [`Tensor::grad`] after backward.
    pub fn var(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf, None))
    }

    /// Lease a parameter onto this tape. Backward adds the leaf's gradient
    /// into the parameter's accumulator (zero if the root never touches it).
    pub fn param(&self, params: &ParamSet, id: ParamId) -> Tensor {
        let (shape, data) = params.snapshot(id);
        self.push(shape, data, true, Op::Leaf, Some(id))
    }

    /// Reverse sweep from a scalar root. Consumes the tape's single
    /// backward budget and parks gradients of all leased parameters into
    /// `params`.
    pub fn backward(&self, root: &Tensor, params: &mut ParamSet) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &root.tape) {
            return Err(TensorError::TapeMixed);
        }
        if self.inner.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        self.inner.consumed.set(true);
        let mut nodes = self.inner.nodes.borrow_mut();
        if numel(&nodes[root.id].shape) != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: nodes[root.id].shape.clone(),
            });
        }
        nodes[root.id].grad[0] = 1.0;
        for i in (0..=root.id).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let (parents, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(node, parents);
        }
        for node in nodes.iter() {
            if let Some(pid) = node.param {
                params.accumulate_grad(pid, &node.grad);
            }
        }
        Ok(())
    }
}

fn propagate(node: &Node, parents: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            axpy(&mut parents[*a].grad, g, 1.0);
            axpy(&mut parents[*b].grad, g, 1.0);
        }
        Op::Sub(a, b) => {
            axpy(&mut parents[*a].grad, g, 1.0);
            axpy(&mut parents[*b].grad, g, -1.0);
        }
        Op::Mul(a, b) => {
            // Need both parent values; indices are distinct from the output
            // but may equal each other (x * x).
            let (av, bv) = (parents[*a].value.clone(), parents[*b].value.clone());
            for (i, gi) in g.iter().enumerate() {
                parents[*a].grad[i] += gi * bv[i];
            }
            for (i, gi) in g.iter().enumerate() {
                parents[*b].grad[i] += gi * av[i];
            }
        }
        Op::Affine { x, mul, .. } => {
            axpy(&mut parents[*x].grad, g, *mul);
        }
        Op::AddRowVec { x, v } => {
            axpy(&mut parents[*x].grad, g, 1.0);
            let width = parents[*v].grad.len();
            for (i, gi) in g.iter().enumerate() {
                parents[*v].grad[i % width] += gi;
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let av = parents[*a].value.clone();
            let bv = parents[*b].value.clone();
            kn::matmul_grad_a(&mut parents[*a].grad, g, &bv, *m, *k, *n);
            kn::matmul_grad_b(&mut parents[*b].grad, g, &av, *m, *k, *n);
        }
        Op::Relu(x) => {
            let xv = &parents[*x].value;
            let mask: Vec<f64> = xv.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            for (i, gi) in g.iter().enumerate() {
                parents[*x].grad[i] += gi * mask[i];
            }
        }
        Op::Sigmoid(x) => {
            let yv = node.value.clone();
            for (i, gi) in g.iter().enumerate() {
                parents[*x].grad[i] += gi * yv[i] * (1.0 - yv[i]);
            }
        }
        Op::Tanh(x) => {
            let yv = node.value.clone();
            for (i, gi) in g.iter().enumerate() {
                parents[*x].grad[i] += gi * (1.0 - yv[i] * yv[i]);
            }
        }
        Op::Sum(x) => {
            let gi = g[0];
            for gv in parents[*x].grad.iter_mut() {
                *gv += gi;
            }
        }
        Op::Mean(x) => {
            let n = parents[*x].grad.len() as f64;
            let gi = g[0] / n;
            for gv in parents[*x].grad.iter_mut() {
                *gv += gi;
            }
        }
        Op::MeanSpatial { x, hw } => {
            let c = g.len();
            let scale = 1.0 / *hw as f64;
            for p in 0..*hw {
                for ci in 0..c {
                    parents[*x].grad[p * c + ci] += g[ci] * scale;
                }
            }
        }
        Op::ConcatLast { parts, widths, rows } => {
            let total: usize = widths.iter().sum();
            for r in 0..*rows {
                let mut off = 0;
                for (pi, &w) in parts.iter().zip(widths.iter()) {
                    for j in 0..w {
                        parents[*pi].grad[r * w + j] += g[r * total + off + j];
                    }
                    off += w;
                }
            }
        }
        Op::StackRows { parts, width } => {
            for (r, pi) in parts.iter().enumerate() {
                for j in 0..*width {
                    parents[*pi].grad[j] += g[r * width + j];
                }
            }
        }
        Op::Row { x, row, width } => {
            for j in 0..*width {
                parents[*x].grad[row * width + j] += g[j];
            }
        }
        Op::Reshape { x } => {
            axpy(&mut parents[*x].grad, g, 1.0);
        }
        Op::BroadcastHw { v, h, w } => {
            let c = parents[*v].grad.len();
            for p in 0..(*h * *w) {
                for ci in 0..c {
                    parents[*v].grad[ci] += g[p * c + ci];
                }
            }
        }
        Op::Conv2d { x, ker, bias, h, w, cin, kh, kw, cout } => {
            let xv = parents[*x].value.clone();
            let kv = parents[*ker].value.clone();
            let mut dx = vec![0.0; xv.len()];
            let mut dk = vec![0.0; kv.len()];
            let mut db = bias.map(|b| vec![0.0; parents[b].grad.len()]);
            kn::conv2d_backward(
                &mut dx,
                &mut dk,
                db.as_deref_mut(),
                g,
                &xv,
                &kv,
                *h,
                *w,
                *cin,
                *kh,
                *kw,
                *cout,
            );
            axpy(&mut parents[*x].grad, &dx, 1.0);
            axpy(&mut parents[*ker].grad, &dk, 1.0);
            if let (Some(b), Some(db)) = (bias, db) {
                axpy(&mut parents[*b].grad, &db, 1.0);
            }
        }
        Op::CropResize { map, bx, oh, ow } => {
            let (mh, mw, c) = rank3(&parents[*map].shape);
            let (us, vs) = kn::crop_sample_positions(bx, mh, mw, *oh, *ow);
            let dmap = &mut parents[*map].grad;
            for (i, &v) in vs.iter().enumerate() {
                let (y0, y1, fy) = kn::line_taps(v, mh);
                for (j, &u) in us.iter().enumerate() {
                    let (x0, x1, fx) = kn::line_taps(u, mw);
                    let gout = &g[(i * *ow + j) * c..][..c];
                    for ci in 0..c {
                        let gv = gout[ci];
                        if gv == 0.0 {
                            continue;
                        }
                        dmap[(y0 * mw + x0) * c + ci] += gv * (1.0 - fy) * (1.0 - fx);
                        dmap[(y0 * mw + x1) * c + ci] += gv * (1.0 - fy) * fx;
                        dmap[(y1 * mw + x0) * c + ci] += gv * fy * (1.0 - fx);
                        dmap[(y1 * mw + x1) * c + ci] += gv * fy * fx;
                    }
                }
            }
        }
        Op::PasteBack { memory, patches, boxes, cov } => {
            let (mh, mw, c) = rank3(&node.shape);
            for cell in 0..(mh * mw) {
                let mut s = 0.0;
                for r in 0..patches.len() {
                    s += cov.weights[r][cell];
                }
                let gout = &g[cell * c..][..c];
                if s == 0.0 {
                    for ci in 0..c {
                        parents[*memory].grad[cell * c + ci] += gout[ci];
                    }
                    continue;
                }
                let denom = s.max(1.0);
                let keep = 1.0 - s.min(1.0);
                let kscale = keep / denom;
                if kscale != 0.0 {
                    for ci in 0..c {
                        parents[*memory].grad[cell * c + ci] += gout[ci] * kscale;
                    }
                }
                let cy = (cell / mw) as f64 + 0.5;
                let cx = (cell % mw) as f64 + 0.5;
                for (r, pid) in patches.iter().enumerate() {
                    let gamma = cov.weights[r][cell];
                    if gamma == 0.0 {
                        continue;
                    }
                    let (ph, pw, _) = rank3(&parents[*pid].shape);
                    let (u, v) = kn::patch_position(&boxes[r], ph, pw, cx, cy);
                    let (y0, y1, fy) = kn::line_taps(v, ph);
                    let (x0, x1, fx) = kn::line_taps(u, pw);
                    let scale = gamma / denom;
                    let dpatch = &mut parents[*pid].grad;
                    for ci in 0..c {
                        let gv = gout[ci] * scale;
                        if gv == 0.0 {
                            continue;
                        }
                        dpatch[(y0 * pw + x0) * c + ci] += gv * (1.0 - fy) * (1.0 - fx);
                        dpatch[(y0 * pw + x1) * c + ci] += gv * (1.0 - fy) * fx;
                        dpatch[(y1 * pw + x0) * c + ci] += gv * fy * (1.0 - fx);
                        dpatch[(y1 * pw + x1) * c + ci] += gv * fy * fx;
                    }
                }
            }
        }
        Op::SoftmaxXent { logits, target, probs } => {
            let gl = g[0];
            for (ci, &p) in probs.iter().enumerate() {
                let ind = if ci == *target { 1.0 } else { 0.0 };
                parents[*logits].grad[ci] += gl * (p - ind);
            }
        }
        Op::WeightedNll { logits, labels, weights, probs } => {
            let gl = g[0];
            let classes = probs.len() / labels.len();
            for (r, (&y, &wr)) in labels.iter().zip(weights.iter()).enumerate() {
                for ci in 0..classes {
                    let ind = if ci == y { 1.0 } else { 0.0 };
                    parents[*logits].grad[r * classes + ci] +=
                        gl * wr * (probs[r * classes + ci] - ind);
                }
            }
        }
        Op::AttentionFuse { logits, atts, weights } => {
            let n = logits.len();
            let (regions, classes) = {
                let s = &node.shape;
                (s[0], s[1])
            };
            for r in 0..regions {
                // q_m = <dout_r, f_m[r]>, then softmax backward over the
                // score axis with scores s_m = -a_m.
                let mut q = vec![0.0; n];
                for (m, lid) in logits.iter().enumerate() {
                    let f = &parents[*lid].value[r * classes..(r + 1) * classes];
                    let gout = &g[r * classes..(r + 1) * classes];
                    q[m] = f.iter().zip(gout.iter()).map(|(a, b)| a * b).sum();
                }
                let mut qbar = 0.0;
                for m in 0..n {
                    qbar += weights[m * regions + r] * q[m];
                }
                for (m, lid) in logits.iter().enumerate() {
                    let wmr = weights[m * regions + r];
                    let gout = &g[r * classes..(r + 1) * classes];
                    for ci in 0..classes {
                        parents[*lid].grad[r * classes + ci] += wmr * gout[ci];
                    }
                    let ds = wmr * (q[m] - qbar);
                    parents[atts[m]].grad[r] -= ds;
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += a * s;
    }
}

fn rank3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    /// Accumulated adjoint of this node; populated after backward for any
    /// node on a grad-requiring path.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.requires_grad {
            Some(n.grad.clone())
        } else {
            None
        }
    }

    fn tape_handle(&self) -> Tape {
        Tape {
            inner: Rc::clone(&self.tape),
        }
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMixed)
        }
    }

    fn meta(&self) -> (Vec<usize>, bool) {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.requires_grad)
    }

    fn binary_elementwise(&self, other: &Tensor, op: &'static str) -> Result<(Vec<usize>, bool)> {
        self.same_tape(other)?;
        let (ls, lg) = self.meta();
        let (rs, rg) = other.meta();
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ls,
                rhs: rs,
            });
        }
        Ok((ls, lg || rg))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_elementwise(other, "add")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(nodes[other.id].value.iter())
                .map(|(a, b)| a + b)
                .collect()
        };
        Ok(self
            .tape_handle()
            .push(shape, v, rg, Op::Add(self.id, other.id), None))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_elementwise(other, "sub")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(nodes[other.id].value.iter())
                .map(|(a, b)| a - b)
                .collect()
        };
        Ok(self
            .tape_handle()
            .push(shape, v, rg, Op::Sub(self.id, other.id), None))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_elementwise(other, "mul")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(nodes[other.id].value.iter())
                .map(|(a, b)| a * b)
                .collect()
        };
        Ok(self
            .tape_handle()
            .push(shape, v, rg, Op::Mul(self.id, other.id), None))
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let (shape, rg) = self.meta();
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().map(|&x| mul * x + add).collect()
        };
        self.tape_handle()
            .push(shape, v, rg, Op::Affine { x: self.id, mul }, None)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    /// Broadcast-add a length-`K` vector to every row of an `R x K` matrix.
    pub fn add_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        self.same_tape(v)?;
        let (xs, xg) = self.meta();
        let (vs, vg) = v.meta();
        if xs.len() != 2 || vs.len() != 1 || xs[1] != vs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vec",
                lhs: xs,
                rhs: vs,
            });
        }
        let width = vs[0];
        let val = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let b = &nodes[v.id].value;
            x.iter()
                .enumerate()
                .map(|(i, &xv)| xv + b[i % width])
                .collect()
        };
        Ok(self.tape_handle().push(
            xs,
            val,
            xg || vg,
            Op::AddRowVec { x: self.id, v: v.id },
            None,
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (ls, lg) = self.meta();
        let (rs, rg) = other.meta();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let v = {
            let nodes = self.tape.nodes.borrow();
            kn::matmul(&nodes[self.id].value, &nodes[other.id].value, m, k, n)
        };
        Ok(self.tape_handle().push(
            vec![m, n],
            v,
            lg || rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            None,
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Tensor {
        let (shape, rg) = self.meta();
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().map(|&x| f(x)).collect()
        };
        self.tape_handle().push(shape, v, rg, op(self.id), None)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn sum(&self) -> Tensor {
        let (_, rg) = self.meta();
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().sum::<f64>()
        };
        self.tape_handle()
            .push(vec![], vec![v], rg, Op::Sum(self.id), None)
    }

    pub fn mean(&self) -> Tensor {
        let (shape, rg) = self.meta();
        let n = numel(&shape) as f64;
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().sum::<f64>() / n
        };
        self.tape_handle()
            .push(vec![], vec![v], rg, Op::Mean(self.id), None)
    }

    /// Average a rank-3 `H x W x C` map over its spatial positions.
    pub fn mean_spatial(&self) -> Result<Tensor> {
        let (shape, rg) = self.meta();
        if shape.len() != 3 {
            return Err(TensorError::BadShape {
                op: "mean_spatial",
                expected: "rank-3 HxWxC",
                shape,
            });
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = vec![0.0; c];
            for p in 0..hw {
                for ci in 0..c {
                    out[ci] += x[p * c + ci];
                }
            }
            for o in out.iter_mut() {
                *o /= hw as f64;
            }
            out
        };
        Ok(self
            .tape_handle()
            .push(vec![c], v, rg, Op::MeanSpatial { x: self.id, hw }, None))
    }

    /// Extract row `r` of an `R x K` matrix as a length-`K` vector.
    pub fn row(&self, r: usize) -> Result<Tensor> {
        let (shape, rg) = self.meta();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "row",
                expected: "rank-2 matrix",
                shape,
            });
        }
        if r >= shape[0] {
            return Err(TensorError::Invalid {
                op: "row",
                msg: format!("row {r} out of range for {} rows", shape[0]),
            });
        }
        let width = shape[1];
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value[r * width..(r + 1) * width].to_vec()
        };
        Ok(self.tape_handle().push(
            vec![width],
            v,
            rg,
            Op::Row {
                x: self.id,
                row: r,
                width,
            },
            None,
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let (shape, rg) = self.meta();
        if numel(new_shape) != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: shape,
                rhs: new_shape.to_vec(),
            });
        }
        let v = self.value();
        Ok(self
            .tape_handle()
            .push(new_shape.to_vec(), v, rg, Op::Reshape { x: self.id }, None))
    }

    /// Tile a length-`C` vector into an `h x w x C` map.
    pub fn broadcast_hw(&self, h: usize, w: usize) -> Result<Tensor> {
        let (shape, rg) = self.meta();
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "broadcast_hw",
                expected: "rank-1 vector",
                shape,
            });
        }
        let c = shape[0];
        let v = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut out = Vec::with_capacity(h * w * c);
            for _ in 0..(h * w) {
                out.extend_from_slice(src);
            }
            out
        };
        Ok(self.tape_handle().push(
            vec![h, w, c],
            v,
            rg,
            Op::BroadcastHw {
                v: self.id,
                h,
                w,
            },
            None,
        ))
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_last",
            msg: "no inputs".into(),
        })?;
        let (fs, mut rg) = first.meta();
        let lead = fs[..fs.len() - 1].to_vec();
        let mut widths = vec![fs[fs.len() - 1]];
        for p in &parts[1..] {
            first.same_tape(p)?;
            let (ps, pg) = p.meta();
            if ps[..ps.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: fs.clone(),
                    rhs: ps,
                });
            }
            widths.push(ps[ps.len() - 1]);
            rg |= pg;
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let v = {
            let nodes = first.tape.nodes.borrow();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(widths.iter()) {
                    out.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
                }
            }
            out
        };
        let mut shape = lead;
        shape.push(total);
        Ok(first.tape_handle().push(
            shape,
            v,
            rg,
            Op::ConcatLast {
                parts: parts.iter().map(|p| p.id).collect(),
                widths,
                rows,
            },
            None,
        ))
    }

    /// Stack equal-length vectors into a matrix, one row each.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "stack_rows",
            msg: "no inputs".into(),
        })?;
        let (fs, mut rg) = first.meta();
        if fs.len() != 1 {
            return Err(TensorError::BadShape {
                op: "stack_rows",
                expected: "rank-1 vectors",
                shape: fs,
            });
        }
        let width = fs[0];
        for p in &parts[1..] {
            first.same_tape(p)?;
            let (ps, pg) = p.meta();
            if ps != vec![width] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: ps,
                });
            }
            rg |= pg;
        }
        let v = {
            let nodes = first.tape.nodes.borrow();
            let mut out = Vec::with_capacity(parts.len() * width);
            for p in parts {
                out.extend_from_slice(&nodes[p.id].value);
            }
            out
        };
        Ok(first.tape_handle().push(
            vec![parts.len(), width],
            v,
            rg,
            Op::StackRows {
                parts: parts.iter().map(|p| p.id).collect(),
                width,
            },
            None,
        ))
    }

    /// Same-padded stride-1 convolution. Input `H x W x Cin`, kernel
    /// `kh x kw x Cin x Cout` with odd kh == kw, optional bias `Cout`.
    pub fn conv2d(&self, ker: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        self.same_tape(ker)?;
        let (xs, xg) = self.meta();
        let (ks, kg) = ker.meta();
        if xs.len() != 3 {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: "rank-3 HxWxCin input",
                shape: xs,
            });
        }
        if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 || ks[2] != xs[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let mut rg = xg || kg;
        if let Some(b) = bias {
            self.same_tape(b)?;
            let (bs, bg) = b.meta();
            if bs != vec![cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: bs,
                });
            }
            rg |= bg;
        }
        let v = {
            let nodes = self.tape.nodes.borrow();
            kn::conv2d(
                &nodes[self.id].value,
                h,
                w,
                cin,
                &nodes[ker.id].value,
                kh,
                kw,
                cout,
                bias.map(|b| nodes[b.id].value.as_slice()),
            )
        };
        Ok(self.tape_handle().push(
            vec![h, w, cout],
            v,
            rg,
            Op::Conv2d {
                x: self.id,
                ker: ker.id,
                bias: bias.map(|b| b.id),
                h,
                w,
                cin,
                kh,
                kw,
                cout,
            },
            None,
        ))
    }

    /// Bilinear crop of `box_` (map-pixel coordinates over `[0, W] x [0, H]`)
    /// resized to `oh x ow`. The sample grid aligns output corner pixel
    /// centers with the box corners, so the full box at the native size is
    /// an exact copy. Boxes reaching outside the map are clipped with a
    /// warning; a box entirely outside is an error.
    pub fn crop_and_resize(&self, box_: &PixelBox, oh: usize, ow: usize) -> Result<Tensor> {
        let (shape, rg) = self.meta();
        if shape.len() != 3 {
            return Err(TensorError::BadShape {
                op: "crop_and_resize",
                expected: "rank-3 HxWxC map",
                shape,
            });
        }
        if oh == 0 || ow == 0 {
            return Err(TensorError::Invalid {
                op: "crop_and_resize",
                msg: format!("output size {oh}x{ow} must be nonzero"),
            });
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let clipped = box_
            .clipped_to(w as f64, h as f64)
            .ok_or_else(|| TensorError::Invalid {
                op: "crop_and_resize",
                msg: format!("box {box_:?} lies entirely outside the {h}x{w} map"),
            })?;
        if clipped != *box_ {
            log::warn!(
                "crop_and_resize: box {:?} clipped to {:?} on a {}x{} map",
                box_,
                clipped,
                h,
                w
            );
        }
        let (us, vs) = kn::crop_sample_positions(&clipped, h, w, oh, ow);
        let v = {
            let nodes = self.tape.nodes.borrow();
            let map = &nodes[self.id].value;
            let mut out = Vec::with_capacity(oh * ow * c);
            for &sv in &vs {
                let (y0, y1, fy) = kn::line_taps(sv, h);
                for &su in &us {
                    let (x0, x1, fx) = kn::line_taps(su, w);
                    for ci in 0..c {
                        let v00 = map[(y0 * w + x0) * c + ci];
                        let v01 = map[(y0 * w + x1) * c + ci];
                        let v10 = map[(y1 * w + x0) * c + ci];
                        let v11 = map[(y1 * w + x1) * c + ci];
                        out.push(
                            (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                                + fy * ((1.0 - fx) * v10 + fx * v11),
                        );
                    }
                }
            }
            out
        };
        Ok(self.tape_handle().push(
            vec![oh, ow, c],
            v,
            rg,
            Op::CropResize {
                map: self.id,
                bx: clipped,
                oh,
                ow,
            },
            None,
        ))
    }

    /// Blend per-region patches back into a memory grid. Boxes are in the
    /// memory's own pixel frame (`[0, W] x [0, H]`, one unit per cell) and
    /// must pair up with `cov` rows. Each covered cell takes a coverage-
    /// weighted average of the patch values sampled at its center, mixed
    /// with the old content where total coverage is below 1:
    /// `(sum_r gamma_r * v_r + (1 - min(1, sum)) * old) / max(1, sum)`.
    pub fn paste_back(
        &self,
        patches: &[(PixelBox, Tensor)],
        cov: &Arc<CoverageWeights>,
    ) -> Result<Tensor> {
        let (shape, mut rg) = self.meta();
        if shape.len() != 3 {
            return Err(TensorError::BadShape {
                op: "paste_back",
                expected: "rank-3 HxWxC memory",
                shape,
            });
        }
        let (mh, mw, c) = (shape[0], shape[1], shape[2]);
        if cov.regions() != patches.len() || cov.grid_h != mh || cov.grid_w != mw {
            return Err(TensorError::CoverageMismatch {
                cov_regions: cov.regions(),
                cov_h: cov.grid_h,
                cov_w: cov.grid_w,
                patches: patches.len(),
                mem_h: mh,
                mem_w: mw,
            });
        }
        for (_, p) in patches {
            self.same_tape(p)?;
            let (ps, pg) = p.meta();
            if ps.len() != 3 || ps[2] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "paste_back",
                    lhs: shape.clone(),
                    rhs: ps,
                });
            }
            rg |= pg;
        }
        let v = {
            let nodes = self.tape.nodes.borrow();
            let mem = &nodes[self.id].value;
            let mut out = mem.clone();
            for cell in 0..(mh * mw) {
                let mut s = 0.0;
                for r in 0..patches.len() {
                    s += cov.weights[r][cell];
                }
                if s == 0.0 {
                    continue;
                }
                let denom = s.max(1.0);
                let keep = 1.0 - s.min(1.0);
                let cy = (cell / mw) as f64 + 0.5;
                let cx = (cell % mw) as f64 + 0.5;
                let mut acc = vec![0.0; c];
                for (r, (bx, p)) in patches.iter().enumerate() {
                    let gamma = cov.weights[r][cell];
                    if gamma == 0.0 {
                        continue;
                    }
                    let ps = &nodes[p.id].shape;
                    let (ph, pw) = (ps[0], ps[1]);
                    let (u, sv) = kn::patch_position(bx, ph, pw, cx, cy);
                    let (y0, y1, fy) = kn::line_taps(sv, ph);
                    let (x0, x1, fx) = kn::line_taps(u, pw);
                    let pv = &nodes[p.id].value;
                    for ci in 0..c {
                        let v00 = pv[(y0 * pw + x0) * c + ci];
                        let v01 = pv[(y0 * pw + x1) * c + ci];
                        let v10 = pv[(y1 * pw + x0) * c + ci];
                        let v11 = pv[(y1 * pw + x1) * c + ci];
                        let sample = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                            + fy * ((1.0 - fx) * v10 + fx * v11);
                        acc[ci] += gamma * sample;
                    }
                }
                for ci in 0..c {
                    out[cell * c + ci] = (acc[ci] + keep * mem[cell * c + ci]) / denom;
                }
            }
            out
        };
        Ok(self.tape_handle().push(
            shape,
            v,
            rg,
            Op::PasteBack {
                memory: self.id,
                patches: patches.iter().map(|(_, p)| p.id).collect(),
                boxes: patches.iter().map(|(b, _)| *b).collect(),
                cov: Arc::clone(cov),
            },
            None,
        ))
    }

    /// Softmax probabilities (returned detached) and cross-entropy loss for
    /// a single logits vector against a class index.
    pub fn softmax_xent(&self, target: usize) -> Result<(Tensor, Tensor)> {
        let (shape, rg) = self.meta();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(TensorError::BadShape {
                op: "softmax_xent",
                expected: "non-empty rank-1 logits",
                shape,
            });
        }
        let classes = shape[0];
        if target >= classes {
            return Err(TensorError::ClassOutOfRange {
                op: "softmax_xent",
                index: target,
                classes,
            });
        }
        let (probs, loss) = {
            let nodes = self.tape.nodes.borrow();
            let logits = &nodes[self.id].value;
            let probs = kn::softmax_row(logits);
            let loss = kn::log_sum_exp(logits) - logits[target];
            (probs, loss)
        };
        let tape = self.tape_handle();
        let probs_t = tape.constant(&[classes], probs.clone())?;
        let loss_t = tape.push(
            vec![],
            vec![loss],
            rg,
            Op::SoftmaxXent {
                logits: self.id,
                target,
                probs,
            },
            None,
        );
        Ok((probs_t, loss_t))
    }

    /// `sum_r weights[r] * (-log softmax(logits[r])[labels[r]])` over the
    /// rows of an `R x C` logits matrix. Weights are plain constants; no
    /// gradient flows into them.
    pub fn weighted_nll(&self, labels: &[usize], weights: &[f64]) -> Result<Tensor> {
        let (shape, rg) = self.meta();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "weighted_nll",
                expected: "rank-2 RxC logits",
                shape,
            });
        }
        let (rows, classes) = (shape[0], shape[1]);
        if labels.len() != rows || weights.len() != rows {
            return Err(TensorError::Invalid {
                op: "weighted_nll",
                msg: format!(
                    "{} labels / {} weights for {} rows",
                    labels.len(),
                    weights.len(),
                    rows
                ),
            });
        }
        for &y in labels {
            if y >= classes {
                return Err(TensorError::ClassOutOfRange {
                    op: "weighted_nll",
                    index: y,
                    classes,
                });
            }
        }
        let (probs, loss) = {
            let nodes = self.tape.nodes.borrow();
            let z = &nodes[self.id].value;
            let mut probs = Vec::with_capacity(rows * classes);
            let mut loss = 0.0;
            for r in 0..rows {
                let row = &z[r * classes..(r + 1) * classes];
                let lse = kn::log_sum_exp(row);
                loss += weights[r] * (lse - row[labels[r]]);
                probs.extend(kn::softmax_row(row));
            }
            (probs, loss)
        };
        Ok(self.tape_handle().push(
            vec![],
            vec![loss],
            rg,
            Op::WeightedNll {
                logits: self.id,
                labels: Rc::new(labels.to_vec()),
                weights: Rc::new(weights.to_vec()),
                probs,
            },
            None,
        ))
    }

    /// Combine prediction heads per region: weights `softmax_n(-a_n[r])`,
    /// output `sum_n w_n[r] * logits_n[r, :]`. Gradients flow into both the
    /// logits and the attention scores.
    pub fn attention_fuse(logits: &[Tensor], atts: &[Tensor]) -> Result<Tensor> {
        if logits.is_empty() || logits.len() != atts.len() {
            return Err(TensorError::Invalid {
                op: "attention_fuse",
                msg: format!("{} logit heads vs {} attention heads", logits.len(), atts.len()),
            });
        }
        let first = &logits[0];
        let (fs, mut rg) = first.meta();
        if fs.len() != 2 {
            return Err(TensorError::BadShape {
                op: "attention_fuse",
                expected: "rank-2 RxC logits",
                shape: fs,
            });
        }
        let (regions, classes) = (fs[0], fs[1]);
        for l in logits.iter().skip(1) {
            first.same_tape(l)?;
            let (ls, lg) = l.meta();
            if ls != fs {
                return Err(TensorError::ShapeMismatch {
                    op: "attention_fuse",
                    lhs: fs.clone(),
                    rhs: ls,
                });
            }
            rg |= lg;
        }
        for a in atts {
            first.same_tape(a)?;
            let (as_, ag) = a.meta();
            if as_ != vec![regions] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention_fuse",
                    lhs: vec![regions],
                    rhs: as_,
                });
            }
            rg |= ag;
        }
        let n = logits.len();
        let (weights, fused) = {
            let nodes = first.tape.nodes.borrow();
            let mut weights = vec![0.0; n * regions];
            for r in 0..regions {
                let scores: Vec<f64> = atts.iter().map(|a| -nodes[a.id].value[r]).collect();
                let w = kn::softmax_row(&scores);
                for (m, &wm) in w.iter().enumerate() {
                    weights[m * regions + r] = wm;
                }
            }
            let mut fused = vec![0.0; regions * classes];
            for (m, l) in logits.iter().enumerate() {
                let lv = &nodes[l.id].value;
                for r in 0..regions {
                    let wmr = weights[m * regions + r];
                    for ci in 0..classes {
                        fused[r * classes + ci] += wmr * lv[r * classes + ci];
                    }
                }
            }
            (weights, fused)
        };
        Ok(first.tape_handle().push(
            vec![regions, classes],
            fused,
            rg,
            Op::AttentionFuse {
                logits: logits.iter().map(|l| l.id).collect(),
                atts: atts.iter().map(|a| a.id).collect(),
                weights,
            },
            None,
        ))
    }

    /// Fusion weights (`softmax_n(-a_n[r])`) for inspection/logging, laid
    /// out `[head][region]`.
    pub fn fusion_weights(atts: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let first = atts.first().ok_or(TensorError::Invalid {
            op: "fusion_weights",
            msg: "no attention heads".into(),
        })?;
        let regions = first.meta().0[0];
        let vals: Vec<Vec<f64>> = atts.iter().map(|a| a.value()).collect();
        let mut out = vec![vec![0.0; regions]; atts.len()];
        for r in 0..regions {
            let scores: Vec<f64> = vals.iter().map(|v| -v[r]).collect();
            let w = kn::softmax_row(&scores);
            for (m, &wm) in w.iter().enumerate() {
                out[m][r] = wm;
            }
        }
        Ok(out)
    }
}
