//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! parent handles. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep. One tape serves one training step and is then dropped.
//!
//! Besides the usual arithmetic the tape has fused nodes for the ball maps
//! (exp/log at the origin, Möbius addition, squared geodesic distance) and the
//! radial calibration lens, each backed by a hand-written vector-Jacobian
//! product from [`crate::ball`] and [`crate::net::hel`].

use std::collections::BTreeMap;

use crate::ball::{self, BallConfig};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_softmax, norm, softmax};
use crate::net::hel;

/// A dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddN(Vec<Var>),
    MatVec {
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Dot(Var, Var),
    Sum(Var),
    Index(Var, usize),
    Row {
        m: Var,
        row: usize,
        cols: usize,
    },
    Concat(Vec<Var>),
    Tanh(Var),
    Artanh(Var),
    Exp(Var),
    Powf(Var, f64),
    Norm(Var),
    Softmax(Var),
    LogSoftmax(Var),
    StopGradient,
    StraightThrough {
        continuous: Var,
    },
    ExpOrigin(Var, BallConfig),
    LogOrigin(Var, BallConfig),
    MobiusAdd(Var, Var, BallConfig),
    DistSq(Var, Var, BallConfig),
    Hel {
        point: Var,
        alpha: Var,
        cfg: BallConfig,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddN(..) => "add_n",
            Op::MatVec { .. } => "matvec",
            Op::Dot(..) => "dot",
            Op::Sum(..) => "sum",
            Op::Index(..) => "index",
            Op::Row { .. } => "row",
            Op::Concat(..) => "concat",
            Op::Tanh(..) => "tanh",
            Op::Artanh(..) => "artanh",
            Op::Exp(..) => "exp",
            Op::Powf(..) => "powf",
            Op::Norm(..) => "norm",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough { .. } => "straight_through",
            Op::ExpOrigin(..) => "exp_origin",
            Op::LogOrigin(..) => "log_origin",
            Op::MobiusAdd(..) => "mobius_add",
            Op::DistSq(..) => "dist_sq",
            Op::Hel { .. } => "hel",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
    detached: Detached,
}

/// Values that the backward pass treats as constants: stop-gradient outputs,
/// straight-through offsets and discrete choices.
///
/// A tape built with [`Tape::replaying`] reuses the values recorded on a base
/// tape instead of recomputing them. The replayed forward is then a function
/// whose true derivative is what `backward` computes, which is what finite
/// differences must be compared against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detached {
    values: Vec<Vec<f64>>,
    choices: Vec<usize>,
    replay: bool,
    next_value: usize,
    next_choice: usize,
}

/// Gradients of a scalar with respect to every [`Tape::variable`] leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` when the loss does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&[f64]> {
        self.by_leaf.get(&leaf).map(Vec::as_slice)
    }

    pub fn get_or_zeros(&self, leaf: Var, len: usize) -> Vec<f64> {
        self.get(leaf)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Pending adjoints plus the slots written while processing the current node.
struct Adjoints {
    slots: Vec<Option<Vec<f64>>>,
    touched: Vec<usize>,
}

fn accumulate(adj: &mut Adjoints, slot: usize, delta: &[f64]) {
    match &mut adj.slots[slot] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        s @ None => *s = Some(delta.to_vec()),
    }
    adj.touched.push(slot);
}

fn accumulate_with(adj: &mut Adjoints, slot: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    f(adj.slots[slot].get_or_insert_with(|| vec![0.0; len]));
    adj.touched.push(slot);
}

#[cfg(any(test, feature = "fault-injection"))]
thread_local! {
    static HEL_BACKWARD_FAULT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Flips the sign of the lens backward pass on the current thread.
#[cfg(any(test, feature = "fault-injection"))]
pub fn inject_hel_backward_fault(enabled: bool) {
    HEL_BACKWARD_FAULT.with(|f| f.set(enabled));
}

fn hel_fault_sign() -> f64 {
    #[cfg(any(test, feature = "fault-injection"))]
    {
        if HEL_BACKWARD_FAULT.with(|f| f.get()) {
            return -1.0;
        }
    }
    1.0
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that replays the detached values recorded by `base`.
    pub fn replaying(base: &Tape) -> Self {
        Self {
            detached: Detached {
                values: base.detached.values.clone(),
                choices: base.detached.choices.clone(),
                replay: true,
                next_value: 0,
                next_choice: 0,
            },
            ..Self::default()
        }
    }

    fn detach(&mut self, fresh: Vec<f64>) -> Vec<f64> {
        let d = &mut self.detached;
        if d.replay {
            let v = d
                .values
                .get(d.next_value)
                .cloned()
                .expect("replay diverged from the base tape");
            d.next_value += 1;
            v
        } else {
            d.values.push(fresh.clone());
            fresh
        }
    }

    /// Records a discrete decision, or returns the recorded one when replaying.
    pub fn choose(&mut self, fresh: usize) -> usize {
        let d = &mut self.detached;
        if d.replay {
            let c = *d
                .choices
                .get(d.next_choice)
                .expect("replay diverged from the base tape");
            d.next_choice += 1;
            c
        } else {
            d.choices.push(fresh);
            fresh
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.first_non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, shape, op });
        Var(idx)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Fails with the name of the first operation that produced NaN or infinity.
    pub fn ensure_finite(&self, stage: &str) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some((idx, op)) => Err(Error::numerical(
                stage,
                format!("non-finite value produced by `{op}` (node {idx})"),
            )),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, Op::Constant)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        self.constant(Tensor::vector(data))
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, Op::Variable)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{what}: operand length mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| k * x).collect();
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::Scale(a, k))
    }

    /// `v * s` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).len(),
            1,
            "mul_scalar: scalar operand expected"
        );
        let k = self.scalar(s);
        let out = self.value(v).iter().map(|x| k * x).collect();
        let shape = self.shape(v).to_vec();
        self.push(out, shape, Op::MulScalar(v, s))
    }

    pub fn add_n(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "add_n: no terms");
        let mut acc = self.value(terms[0]).to_vec();
        for t in &terms[1..] {
            self.same_len(terms[0], *t, "add_n");
            acc.iter_mut()
                .zip(self.value(*t))
                .for_each(|(a, b)| *a += b);
        }
        let shape = self.shape(terms[0]).to_vec();
        self.push(acc, shape, Op::AddN(terms.to_vec()))
    }

    /// Matrix-vector product; `m` is `rows x cols` row-major.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let shape = self.shape(m);
        assert_eq!(shape.len(), 2, "matvec: matrix operand expected");
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(
            self.value(x).len(),
            cols,
            "matvec: inner dimension mismatch"
        );
        let out = crate::linalg::matvec(self.value(m), rows, cols, self.value(x));
        self.push(out, vec![rows], Op::MatVec { m, x, rows, cols })
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wx = self.matvec(w, x);
        self.add(wx, b)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "dot");
        let v = dot(self.value(a), self.value(b));
        self.push(vec![v], vec![1], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        self.push(vec![v], vec![1], Op::Sum(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a)[i];
        self.push(vec![v], vec![1], Op::Index(a, i))
    }

    /// Row `row` of a matrix node.
    pub fn row(&mut self, m: Var, row: usize) -> Var {
        let shape = self.shape(m);
        assert_eq!(shape.len(), 2, "row: matrix operand expected");
        let cols = shape[1];
        let v = self.value(m)[row * cols..(row + 1) * cols].to_vec();
        self.push(v, vec![cols], Op::Row { m, row, cols })
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).iter().copied())
            .collect();
        let n = v.len();
        self.push(v, vec![n], Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        let cols = self.value(rows[0]).len();
        assert!(
            rows.iter().all(|r| self.value(*r).len() == cols),
            "stack: ragged rows"
        );
        let v: Vec<f64> = rows
            .iter()
            .flat_map(|p| self.value(*p).iter().copied())
            .collect();
        self.push(v, vec![rows.len(), cols], Op::Concat(rows.to_vec()))
    }

    /// Reinterprets a stacked matrix as its transpose product `m^T x`.
    pub fn matvec_transposed(&mut self, m: Var, x: Var) -> Var {
        // Realized as a weighted sum of rows so the backward pass reuses Row/MulScalar.
        let rows = self.shape(m)[0];
        assert_eq!(
            self.value(x).len(),
            rows,
            "matvec_transposed: dimension mismatch"
        );
        let terms: Vec<Var> = (0..rows)
            .map(|r| {
                let row = self.row(m, r);
                let w = self.index(x, r);
                self.mul_scalar(row, w)
            })
            .collect();
        self.add_n(&terms)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(v, shape, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn artanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::atanh, Op::Artanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let v = norm(self.value(a));
        self.push(vec![v], vec![1], Op::Norm(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::LogSoftmax(a))
    }

    /// Identity forward; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.detach(self.value(a).to_vec());
        let shape = self.shape(a).to_vec();
        self.push(v, shape, Op::StopGradient)
    }

    /// Forward value of `quantized`, gradient routed to `continuous` unchanged.
    pub fn straight_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        if self.shape(continuous) != self.shape(quantized) {
            return Err(Error::InvalidInput(format!(
                "straight_through: shape {:?} vs {:?}",
                self.shape(continuous),
                self.shape(quantized)
            )));
        }
        let offset: Vec<f64> = self
            .value(quantized)
            .iter()
            .zip(self.value(continuous))
            .map(|(q, x)| q - x)
            .collect();
        let v = if self.detached.replay {
            let offset = self.detach(offset);
            self.value(continuous)
                .iter()
                .zip(&offset)
                .map(|(x, o)| x + o)
                .collect()
        } else {
            self.detach(offset);
            self.value(quantized).to_vec()
        };
        let shape = self.shape(quantized).to_vec();
        Ok(self.push(v, shape, Op::StraightThrough { continuous }))
    }

    pub fn exp_origin(&mut self, v: Var, cfg: &BallConfig) -> Var {
        let out = ball::exp_origin_raw(self.value(v), cfg);
        let shape = self.shape(v).to_vec();
        self.push(out, shape, Op::ExpOrigin(v, *cfg))
    }

    pub fn log_origin(&mut self, x: Var, cfg: &BallConfig) -> Var {
        let out = ball::log_origin_raw(self.value(x), cfg);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::LogOrigin(x, *cfg))
    }

    pub fn mobius_add(&mut self, x: Var, y: Var, cfg: &BallConfig) -> Var {
        self.same_len(x, y, "mobius_add");
        let out = ball::mobius_add_raw(self.value(x), self.value(y), cfg);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::MobiusAdd(x, y, *cfg))
    }

    /// Squared geodesic distance (squared Euclidean distance in flat mode).
    pub fn dist_sq(&mut self, x: Var, y: Var, cfg: &BallConfig) -> Var {
        self.same_len(x, y, "dist_sq");
        let d = ball::dist_sq_raw(self.value(x), self.value(y), cfg);
        self.push(vec![d], vec![1], Op::DistSq(x, y, *cfg))
    }

    /// Radial power-law lens with exponent taken from the scalar node `alpha`.
    pub fn hel(&mut self, point: Var, alpha: Var, cfg: &BallConfig) -> Var {
        let out = hel::hel_raw(self.value(point), self.scalar(alpha), cfg);
        let shape = self.shape(point).to_vec();
        self.push(
            out,
            shape,
            Op::Hel {
                point,
                alpha,
                cfg: *cfg,
            },
        )
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Intermediate adjoints are released as soon as their node has been
    /// processed; only leaf gradients survive in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj = Adjoints {
            slots: vec![None; loss.0 + 1],
            touched: Vec::new(),
        };
        adj.slots[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj.slots[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Variable => {
                    out.by_leaf.insert(Var(idx), g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a.0, &g);
                    accumulate(&mut adj, b.0, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, a.0, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adj, b.0, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut adj, a.0, &ga);
                    accumulate(&mut adj, b.0, &gb);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|v| k * v).collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::MulScalar(v, s) => {
                    let k = self.scalar(*s);
                    let gv: Vec<f64> = g.iter().map(|x| k * x).collect();
                    let gs = dot(&g, self.value(*v));
                    accumulate(&mut adj, v.0, &gv);
                    accumulate(&mut adj, s.0, &[gs]);
                }
                Op::AddN(terms) => {
                    for t in terms {
                        accumulate(&mut adj, t.0, &g);
                    }
                }
                Op::MatVec { m, x, rows, cols } => {
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    accumulate_with(&mut adj, m.0, rows * cols, |gm| {
                        for (i, gi) in g.iter().enumerate() {
                            let row = &mut gm[i * cols..(i + 1) * cols];
                            row.iter_mut().zip(xv).for_each(|(a, xj)| *a += gi * xj);
                        }
                    });
                    accumulate_with(&mut adj, x.0, *cols, |gx| {
                        for (i, gi) in g.iter().enumerate() {
                            let row = &mv[i * cols..(i + 1) * cols];
                            gx.iter_mut().zip(row).for_each(|(a, mij)| *a += gi * mij);
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = self.value(*b).iter().map(|y| g[0] * y).collect();
                    let gb: Vec<f64> = self.value(*a).iter().map(|x| g[0] * x).collect();
                    accumulate(&mut adj, a.0, &ga);
                    accumulate(&mut adj, b.0, &gb);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, a.0, &vec![g[0]; n]);
                }
                Op::Index(a, i) => {
                    let n = self.value(*a).len();
                    accumulate_with(&mut adj, a.0, n, |ga| ga[*i] += g[0]);
                }
                Op::Row { m, row, cols } => {
                    let n = self.value(*m).len();
                    accumulate_with(&mut adj, m.0, n, |gm| {
                        gm[row * cols..(row + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b);
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut adj, p.0, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::Artanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| g / (1.0 - x * x))
                        .collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::Powf(a, p) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    let va = self.value(*a);
                    if n > 0.0 {
                        let ga: Vec<f64> = va.iter().map(|x| g[0] * x / n).collect();
                        accumulate(&mut adj, a.0, &ga);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let ga: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi * (gi - gy)).collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let p: Vec<f64> = node.value.iter().map(|l| l.exp()).collect();
                    let ga: Vec<f64> = g.iter().zip(&p).map(|(gi, pi)| gi - pi * total).collect();
                    accumulate(&mut adj, a.0, &ga);
                }
                Op::StopGradient => {}
                Op::StraightThrough { continuous } => {
                    accumulate(&mut adj, continuous.0, &g);
                }
                Op::ExpOrigin(v, cfg) => {
                    let gv = ball::exp_origin_vjp(self.value(*v), &g, cfg);
                    accumulate(&mut adj, v.0, &gv);
                }
                Op::LogOrigin(x, cfg) => {
                    let gx = ball::log_origin_vjp(self.value(*x), &g, cfg);
                    accumulate(&mut adj, x.0, &gx);
                }
                Op::MobiusAdd(x, y, cfg) => {
                    let (gx, gy) = ball::mobius_add_vjp(self.value(*x), self.value(*y), &g, cfg);
                    accumulate(&mut adj, x.0, &gx);
                    accumulate(&mut adj, y.0, &gy);
                }
                Op::DistSq(x, y, cfg) => {
                    let (gx, gy) = ball::dist_sq_vjp(self.value(*x), self.value(*y), g[0], cfg);
                    accumulate(&mut adj, x.0, &gx);
                    accumulate(&mut adj, y.0, &gy);
                }
                Op::Hel { point, alpha, cfg } => {
                    let sign = hel_fault_sign();
                    let (gp, ga) = hel::hel_vjp(self.value(*point), self.scalar(*alpha), &g, cfg);
                    let gp: Vec<f64> = gp.into_iter().map(|v| sign * v).collect();
                    accumulate(&mut adj, point.0, &gp);
                    accumulate(&mut adj, alpha.0, &[sign * ga]);
                }
            }
            for slot in adj.touched.drain(..) {
                let bad = adj.slots[slot]
                    .as_deref()
                    .and_then(|g| g.iter().find(|v| !v.is_finite()));
                if let Some(bad) = bad {
                    return Err(Error::numerical(
                        "backward",
                        format!(
                            "backward of `{}` (node {idx}) produced gradient {bad} for node {slot}",
                            node.op.name()
                        ),
                    ));
                }
            }
        }
        Ok(out)
    }
}
