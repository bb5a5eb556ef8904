//! The tape: recorded ops, forward values, and the reverse sweep.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

use super::ops::CameraRaysData;

/// Dense 2-D tensor of `f64`. Images are `[h*w, c]` row-major, vectors
/// `[1, n]`, scalars `[1, 1]`.
pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(pub(crate) usize);

/// Recorded operation, including everything the backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    /// Trainable input; gradients are accumulated into it.
    Leaf,
    /// Non-trainable input; the reverse sweep does not propagate into it.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Recip(Var),
    Abs(Var),
    Sin(Var, f64),
    Cos(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    SegmentSum {
        x: Var,
        seg: Arc<Vec<usize>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        h: usize,
        wd: usize,
        /// im2col matrix `[h*wd, 9*cin]`, kept for the backward pass.
        cols: Tensor,
    },
    Upsample2x {
        x: Var,
        h: usize,
        wd: usize,
    },
    AvgPool2x {
        x: Var,
        h: usize,
        wd: usize,
    },
    BilinearSample {
        grid: Var,
        h: usize,
        wd: usize,
        uv: Arc<Vec<[f64; 2]>>,
    },
    Composite {
        sigma: Var,
        color: Var,
        deltas: Arc<Vec<f64>>,
        n_samples: usize,
        background: [f64; 3],
    },
    CameraRays {
        drot: Var,
        dt: Var,
        data: Arc<CameraRaysData>,
    },
    RaysToPoints {
        origin: Var,
        dirs: Var,
        ts: Arc<Vec<f64>>,
        n_samples: usize,
    },
}

/// Introspectable op kind, used by graph-shape assertions in tests and by
/// diagnostics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Recip,
    Abs,
    Sin,
    Cos,
    Softplus,
    Sigmoid,
    LeakyRelu,
    Sum,
    Mean,
    RowSum,
    Reshape,
    ConcatCols,
    SliceCols,
    GatherRows,
    ScaleRows,
    SegmentSum,
    Linear,
    Conv3x3,
    Upsample2x,
    AvgPool2x,
    BilinearSample,
    Composite,
    CameraRays,
    RaysToPoints,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Recip(..) => OpKind::Recip,
            Op::Abs(..) => OpKind::Abs,
            Op::Sin(..) => OpKind::Sin,
            Op::Cos(..) => OpKind::Cos,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::RowSum(..) => OpKind::RowSum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::SegmentSum { .. } => OpKind::SegmentSum,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::Upsample2x { .. } => OpKind::Upsample2x,
            Op::AvgPool2x { .. } => OpKind::AvgPool2x,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::Composite { .. } => OpKind::Composite,
            Op::CameraRays { .. } => OpKind::CameraRays,
            Op::RaysToPoints { .. } => OpKind::RaysToPoints,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Recip(a)
            | Op::Abs(a)
            | Op::Sin(a, _)
            | Op::Cos(a, _)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
            Op::SliceCols { x, .. } => vec![*x],
            Op::GatherRows { x, .. } => vec![*x],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::SegmentSum { x, .. } => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv3x3 { x, w, b, .. } => vec![*x, *w, *b],
            Op::Upsample2x { x, .. } | Op::AvgPool2x { x, .. } => vec![*x],
            Op::BilinearSample { grid, .. } => vec![*grid],
            Op::Composite { sigma, color, .. } => vec![*sigma, *color],
            Op::CameraRays { drot, dt, .. } => vec![*drot, *dt],
            Op::RaysToPoints { origin, dirs, .. } => vec![*origin, *dirs],
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Tensor>,
}

/// Reverse-mode tape. Record ops forward, then run [`Tape::backward`] to
/// populate gradients for every node that influences the seeded output.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Register a non-trainable input. The reverse sweep never propagates
    /// into constants, so they cost nothing during backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the seeded output with respect to `v`. `None` if `v` did
    /// not influence the output (or backward has not run).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Take ownership of a gradient, leaving `None` behind.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Introspection: kind of the op that produced `v`.
    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Introspection: inputs of the op that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Introspection: every node that consumes `v` as an input.
    pub fn consumers(&self, v: Var) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.inputs().contains(&v))
            .map(Var)
            .collect()
    }

    /// Ancestor set of `v` (inclusive), i.e. every node that feeds it.
    pub fn ancestors(&self, v: Var) -> Vec<Var> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![v];
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            stack.extend(self.nodes[n.0].op.inputs());
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Locate the first non-finite entry anywhere in forward values, for
    /// diagnostics after a failed finiteness check.
    pub fn first_non_finite(&self) -> Option<Error> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((r, c)) = first_non_finite_entry(&node.value) {
                return Some(Error::NonFinite {
                    node: format!("node {} ({:?})", i, node.op.kind()),
                    row: r,
                    col: c,
                });
            }
        }
        None
    }

    /// Check that the forward value of `v` is finite; on failure, report the
    /// earliest offending node on the tape.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if first_non_finite_entry(&self.nodes[v.0].value).is_none() {
            return Ok(());
        }
        Err(self.first_non_finite().expect("non-finite entry located"))
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: Tensor) {
        // Constants are terminal: skipping them keeps the reverse sweep from
        // materializing gradients nobody reads.
        if matches!(self.nodes[v.0].op, Op::Constant) {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a `[1, 1]` output with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be scalar; use backward_seeded otherwise"
        );
        self.backward_seeded(vec![(root, Tensor::from_elem((1, 1), 1.0))])
    }

    /// Reverse sweep from several outputs at once, each with an explicit
    /// cotangent seed of the same shape as the output.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<()> {
        self.backward_partial(seeds, 0)?;
        self.check_leaf_grads()
    }

    /// Reverse sweep restricted to nodes at index `stop` and above. Cotangents
    /// flow down into — but not through — nodes below `stop`, which keep their
    /// accumulated gradients for a later [`Tape::backward_pending`] sweep.
    /// Together with [`Tape::truncate`] this processes ray chunks one at a
    /// time against a shared feature-generation prefix without double-counting
    /// the prefix.
    pub fn backward_partial(&mut self, seeds: Vec<(Var, Tensor)>, stop: usize) -> Result<()> {
        for (v, seed) in seeds {
            assert_eq!(
                self.nodes[v.0].value.dim(),
                seed.dim(),
                "seed shape must match output shape"
            );
            self.accumulate(v, seed);
        }
        for i in (stop..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    /// Finish a chunked reverse sweep: propagate the gradients accumulated on
    /// nodes below `stop` down to the leaves, then run the leaf finiteness
    /// check.
    pub fn backward_pending(&mut self, stop: usize) -> Result<()> {
        for i in (0..stop.min(self.nodes.len())).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        self.check_leaf_grads()
    }

    /// Drop every node at index `mark` and above, freeing their values and
    /// gradients; earlier nodes (including accumulated gradients) survive.
    /// Sound because ops never reference later nodes. `Var` handles above the
    /// mark are invalidated.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Leaf gradients are what callers consume; surface non-finite values
    /// with the node responsible rather than letting NaN poison the
    /// optimizer state.
    fn check_leaf_grads(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = &node.grad {
                if let Some((r, c)) = first_non_finite_entry(g) {
                    return Err(Error::NonFinite {
                        node: format!("gradient of leaf node {i}"),
                        row: r,
                        col: c,
                    });
                }
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let g = self.nodes[i]
            .grad
            .clone()
            .expect("caller checked grad present");
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, -g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = &g * &self.nodes[b.0].value;
                let gb = &g * &self.nodes[a.0].value;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = &self.nodes[b.0].value;
                let ga = &g / bv;
                let gb = -&(&g * &self.nodes[i].value) / bv;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                self.accumulate(a, g * s);
            }
            Op::Recip(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let ga = -&(&g * &(y * y));
                self.accumulate(a, ga);
            }
            Op::Abs(a) => {
                let a = *a;
                let sign = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, &g * &sign);
            }
            Op::Sin(a, f) => {
                let (a, f) = (*a, *f);
                let d = self.nodes[a.0].value.mapv(|x| f * (f * x).cos());
                self.accumulate(a, &g * &d);
            }
            Op::Cos(a, f) => {
                let (a, f) = (*a, *f);
                let d = self.nodes[a.0].value.mapv(|x| -f * (f * x).sin());
                self.accumulate(a, &g * &d);
            }
            Op::Softplus(a) => {
                let a = *a;
                let d = self.nodes[a.0].value.mapv(sigmoid_scalar);
                self.accumulate(a, &g * &d);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let d = y * &y.mapv(|v| 1.0 - v);
                self.accumulate(a, &g * &d);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let d = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { 1.0 } else { slope });
                self.accumulate(a, &g * &d);
            }
            Op::Sum(a) => {
                let a = *a;
                let seed = g[(0, 0)];
                let dim = self.nodes[a.0].value.dim();
                self.accumulate(a, Tensor::from_elem(dim, seed));
            }
            Op::Mean(a) => {
                let a = *a;
                let dim = self.nodes[a.0].value.dim();
                let n = (dim.0 * dim.1) as f64;
                let seed = g[(0, 0)] / n;
                self.accumulate(a, Tensor::from_elem(dim, seed));
            }
            Op::RowSum(a) => {
                let a = *a;
                let dim = self.nodes[a.0].value.dim();
                let mut ga = Tensor::zeros(dim);
                for r in 0..dim.0 {
                    let gr = g[(r, 0)];
                    for c in 0..dim.1 {
                        ga[(r, c)] = gr;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => {
                let a = *a;
                let dim = self.nodes[a.0].value.dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                let ga = Tensor::from_shape_vec(dim, flat).expect("reshape grad");
                self.accumulate(a, ga);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                    start += w;
                    self.accumulate(p, gp);
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let dim = self.nodes[x.0].value.dim();
                let mut gx = Tensor::zeros(dim);
                gx.slice_mut(ndarray::s![.., start..start + g.ncols()])
                    .assign(&g);
                self.accumulate(x, gx);
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let dim = self.nodes[x.0].value.dim();
                let mut gx = Tensor::zeros(dim);
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(src);
                    row += &g.row(r);
                }
                self.accumulate(x, gx);
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                let mut gx = g.clone();
                {
                    let sv = &self.nodes[s.0].value;
                    for (mut grow, &sc) in gx.rows_mut().into_iter().zip(sv.column(0).iter()) {
                        grow.map_inplace(|v| *v *= sc);
                    }
                }
                let gs_vec: Vec<f64> = {
                    let xv = &self.nodes[x.0].value;
                    g.rows()
                        .into_iter()
                        .zip(xv.rows())
                        .map(|(gr, xr)| gr.dot(&xr))
                        .collect()
                };
                let gs = Tensor::from_shape_vec((gs_vec.len(), 1), gs_vec).expect("scale grad");
                self.accumulate(x, gx);
                self.accumulate(s, gs);
            }
            Op::SegmentSum { x, seg } => {
                let (x, seg) = (*x, seg.clone());
                let ncols = self.nodes[x.0].value.ncols();
                let mut gx = Tensor::zeros((seg.len(), ncols));
                for (r, &s) in seg.iter().enumerate() {
                    gx.row_mut(r).assign(&g.row(s));
                }
                self.accumulate(x, gx);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gx = g.dot(&self.nodes[w.0].value);
                let gw = g.t().dot(&self.nodes[x.0].value);
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(x, gx);
                self.accumulate(w, gw);
                self.accumulate(b, gb);
            }
            Op::Conv3x3 { .. }
            | Op::Upsample2x { .. }
            | Op::AvgPool2x { .. }
            | Op::BilinearSample { .. }
            | Op::Composite { .. }
            | Op::CameraRays { .. }
            | Op::RaysToPoints { .. } => {
                self.step_backward_structured(i, g);
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // Stable log(1 + e^x): never exponentiates a large positive argument.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn first_non_finite_entry(t: &Tensor) -> Option<(usize, usize)> {
    for ((r, c), &v) in t.indexed_iter() {
        if !v.is_finite() {
            return Some((r, c));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Elementwise and reduction op recording.
// ---------------------------------------------------------------------------

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "div shape");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(Op::Div(a, b), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value + s;
        self.push(Op::AddScalar(a), v)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value * s;
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(Op::Abs(a), v)
    }

    /// `sin(freq * x)` elementwise; `freq` folds the positional-encoding
    /// frequency into the op so the input needs no pre-scaling.
    pub fn sin(&mut self, a: Var, freq: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| (freq * x).sin());
        self.push(Op::Sin(a, freq), v)
    }

    /// `cos(freq * x)` elementwise.
    pub fn cos(&mut self, a: Var, freq: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| (freq * x).cos());
        self.push(Op::Cos(a, freq), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus_scalar);
        self.push(Op::Softplus(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(Op::Sum(a), v)
    }

    /// Mean of all entries, `[1, 1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let v = Tensor::from_elem((1, 1), t.sum() / (t.len() as f64));
        self.push(Op::Mean(a), v)
    }

    /// Per-row sum: `[n, c] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::RowSum(a), v)
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.len(), rows * cols, "reshape element count");
        let flat: Vec<f64> = t.iter().copied().collect();
        let v = Tensor::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(Op::Reshape(a), v)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Tensor::zeros((rows, total));
        let mut start = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.nrows(), rows, "concat row count");
            v.slice_mut(ndarray::s![.., start..start + t.ncols()]).assign(t);
            start += t.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Column slice `[.., start..start+len]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert!(start + len <= t.ncols(), "slice out of range");
        let v = t.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start }, v)
    }

    /// Row gather: `out[r] = x[idx[r]]`. Duplicate indices are allowed; the
    /// backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let t = &self.nodes[x.0].value;
        let mut v = Tensor::zeros((idx.len(), t.ncols()));
        for (r, &src) in idx.iter().enumerate() {
            assert!(src < t.nrows(), "gather index out of range");
            v.row_mut(r).assign(&t.row(src));
        }
        self.push(Op::GatherRows { x, idx }, v)
    }

    /// Multiply each row of `x` by the matching scalar in `s` (`[n, 1]`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.dim(), (xv.nrows(), 1), "scale_rows shape");
        let mut v = xv.clone();
        for (mut row, &sc) in v.rows_mut().into_iter().zip(sv.column(0).iter()) {
            row.map_inplace(|e| *e *= sc);
        }
        self.push(Op::ScaleRows { x, s }, v)
    }

    /// Segmented sum over rows: `out[seg[r]] += x[r]`, output `[nseg, c]`.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<Vec<usize>>, nseg: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(seg.len(), t.nrows(), "segment count");
        let mut v = Tensor::zeros((nseg, t.ncols()));
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < nseg, "segment index out of range");
            let mut out = v.row_mut(s);
            out += &t.row(r);
        }
        self.push(Op::SegmentSum { x, seg }, v)
    }

    /// Affine map `y = x · wᵀ + b` with `x: [n, i]`, `w: [o, i]`, `b: [1, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ncols(), wv.ncols(), "linear in_features");
        assert_eq!(bv.dim(), (1, wv.nrows()), "linear bias shape");
        let mut v = xv.dot(&wv.t());
        v += bv;
        self.push(Op::Linear { x, w, b }, v)
    }
}
