//! Dense float64 tensors and a define-by-run reverse-mode tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Values live on the tape and are
//! addressed through copyable [`Var`] handles; [`Tape::backward`] sweeps the
//! recorded operations in reverse and accumulates gradients on leaves.
//! Gradients accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`] is invoked.
//!
//! All operations work on rank-1 or rank-2 tensors. A rank-1 tensor of length
//! `n` behaves as a `1 x n` row wherever a matrix is expected.

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    Size { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {0}")]
    Domain(f64),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Size {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Param("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view; rank-1 tensors are single rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Temperature softmax of a plain slice with max-subtraction.
pub fn softmax_slice(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Temperature softmax over a tensor's flat data.
pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TensorError::Param(format!("temperature must be positive, got {tau}")));
    }
    if logits.data.iter().any(|v| v.is_nan()) {
        return Err(TensorError::Numeric("softmax_temp"));
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: softmax_slice(&logits.data, tau),
    })
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Plain matrix product `a (m x k) * b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_raw(&a.data, &b.data, m, k, n, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    /// a * b^T
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    ScaleRows(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    SoftmaxRows(usize, f64),
    CausalSoftmax(usize, f64),
    Gather(usize, Vec<usize>),
    Slice(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RowKron(usize, usize),
    MeanRows(usize),
    Sum(usize),
    CrossEntropy(usize, Vec<usize>),
    Kl(usize, usize, f64),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations for one forward/backward pass. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    floor_hits: RefCell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Registers a non-differentiable input (noise, masks).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of times a KL prior entry was clamped to its floor.
    pub fn floor_hits(&self) -> usize {
        *self.floor_hits.borrow()
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Accumulated gradient of a leaf, zeros if none has reached it.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Tensor {
            shape: node.value.shape.clone(),
            data,
        }
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape) && v.id < self.len()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !self.owns(loss) {
            return Err(TensorError::ForeignVar);
        }
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `root`.
    /// Used to chain gradients between tapes.
    pub fn backward_with_seed(&self, root: Var<'_>, seed: &[f64]) -> Result<()> {
        if !self.owns(root) {
            return Err(TensorError::ForeignVar);
        }
        let mut nodes = self.nodes.borrow_mut();
        if seed.len() != nodes[root.id].value.len() {
            return Err(TensorError::Shape {
                op: "backward seed",
                lhs: nodes[root.id].value.shape.clone(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed.to_vec());
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].op {
                Op::Leaf => {
                    let slot = nodes[id].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Const => {}
                op => {
                    let op = op.clone();
                    propagate(&nodes, id, &op, &g, &mut grads);
                }
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], id: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match *op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a].value.dims2();
            let n = nodes[b].value.cols();
            let av = &nodes[a].value.data;
            let bv = &nodes[b].value.data;
            // dA = G * B^T
            let ga = accum(grads, a, m * k);
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * bv[p * n + j];
                    }
                    ga[i * k + p] += s;
                }
            }
            // dB = A^T * G
            let gb = accum(grads, b, k * n);
            for i in 0..m {
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += a_ip * g[i * n + j];
                    }
                }
            }
        }
        Op::MatMulT(a, b) => {
            // C = A B^T, A: m x k, B: n x k
            let (m, k) = nodes[a].value.dims2();
            let n = nodes[b].value.rows();
            let av = &nodes[a].value.data;
            let bv = &nodes[b].value.data;
            let ga = accum(grads, a, m * k);
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        ga[i * k + p] += gij * bv[j * k + p];
                    }
                }
            }
            let gb = accum(grads, b, n * k);
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        gb[j * k + p] += gij * av[i * k + p];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (t, v) in accum(grads, a, g.len()).iter_mut().zip(g) {
                *t += v;
            }
            for (t, v) in accum(grads, b, g.len()).iter_mut().zip(g) {
                *t += v;
            }
        }
        Op::Sub(a, b) => {
            for (t, v) in accum(grads, a, g.len()).iter_mut().zip(g) {
                *t += v;
            }
            for (t, v) in accum(grads, b, g.len()).iter_mut().zip(g) {
                *t -= v;
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[a].value.data;
            let bv = &nodes[b].value.data;
            let ga = accum(grads, a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * bv[i];
            }
            let gb = accum(grads, b, g.len());
            for i in 0..g.len() {
                gb[i] += g[i] * av[i];
            }
        }
        Op::AddRow(a, row) => {
            let n = nodes[row].value.len();
            for (t, v) in accum(grads, a, g.len()).iter_mut().zip(g) {
                *t += v;
            }
            let gr = accum(grads, row, n);
            for (i, v) in g.iter().enumerate() {
                gr[i % n] += v;
            }
        }
        Op::ScaleRows(a, col) => {
            let (m, n) = nodes[a].value.dims2();
            let av = &nodes[a].value.data;
            let cv = &nodes[col].value.data;
            let ga = accum(grads, a, m * n);
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] += g[i * n + j] * cv[i];
                }
            }
            let gc = accum(grads, col, m);
            for i in 0..m {
                let mut s = 0.0;
                for j in 0..n {
                    s += g[i * n + j] * av[i * n + j];
                }
                gc[i] += s;
            }
        }
        Op::Affine(a, mul) => {
            for (t, v) in accum(grads, a, g.len()).iter_mut().zip(g) {
                *t += mul * v;
            }
        }
        Op::Tanh(a) => {
            let ga = accum(grads, a, g.len());
            for i in 0..g.len() {
                let y = out.data[i];
                ga[i] += g[i] * (1.0 - y * y);
            }
        }
        Op::Sigmoid(a) => {
            let ga = accum(grads, a, g.len());
            for i in 0..g.len() {
                let y = out.data[i];
                ga[i] += g[i] * y * (1.0 - y);
            }
        }
        Op::Exp(a) => {
            let ga = accum(grads, a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * out.data[i];
            }
        }
        Op::Log(a) => {
            let av = &nodes[a].value.data;
            let ga = accum(grads, a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] / av[i];
            }
        }
        Op::Relu(a) => {
            let av = &nodes[a].value.data;
            let ga = accum(grads, a, g.len());
            for i in 0..g.len() {
                if av[i] > 0.0 {
                    ga[i] += g[i];
                }
            }
        }
        Op::SoftmaxRows(a, tau) => {
            let (m, n) = out.dims2();
            let ga = accum(grads, a, m * n);
            for i in 0..m {
                let y = &out.data[i * n..(i + 1) * n];
                let gy = &g[i * n..(i + 1) * n];
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    ga[i * n + j] += y[j] * (gy[j] - dot) / tau;
                }
            }
        }
        Op::CausalSoftmax(a, scale) => {
            let (m, n) = out.dims2();
            let ga = accum(grads, a, m * n);
            for i in 0..m {
                let lim = (i + 1).min(n);
                let y = &out.data[i * n..i * n + lim];
                let gy = &g[i * n..i * n + lim];
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..lim {
                    ga[i * n + j] += y[j] * (gy[j] - dot) * scale;
                }
            }
        }
        Op::Gather(a, ref idx) => {
            let (r, c) = nodes[a].value.dims2();
            let ga = accum(grads, a, r * c);
            for (o, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    ga[src * c + j] += g[o * c + j];
                }
            }
        }
        Op::Slice(a, start) => {
            let len = nodes[a].value.len();
            let ga = accum(grads, a, len);
            for (i, v) in g.iter().enumerate() {
                ga[start + i] += v;
            }
        }
        Op::ConcatCols(ref parts) => {
            let m = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                let gp = accum(grads, p, m * c);
                for i in 0..m {
                    for j in 0..c {
                        gp[i * c + j] += g[i * total + offset + j];
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                let gp = accum(grads, p, len);
                for (t, v) in gp.iter_mut().zip(&g[offset..offset + len]) {
                    *t += v;
                }
                offset += len;
            }
        }
        Op::RowKron(a, b) => {
            let (m, ka) = nodes[a].value.dims2();
            let kb = nodes[b].value.cols();
            let av = &nodes[a].value.data;
            let bv = &nodes[b].value.data;
            let n = ka * kb;
            let ga = accum(grads, a, m * ka);
            for i in 0..m {
                for p in 0..ka {
                    let mut s = 0.0;
                    for q in 0..kb {
                        s += g[i * n + p * kb + q] * bv[i * kb + q];
                    }
                    ga[i * ka + p] += s;
                }
            }
            let gb = accum(grads, b, m * kb);
            for i in 0..m {
                for q in 0..kb {
                    let mut s = 0.0;
                    for p in 0..ka {
                        s += g[i * n + p * kb + q] * av[i * ka + p];
                    }
                    gb[i * kb + q] += s;
                }
            }
        }
        Op::MeanRows(a) => {
            let (m, n) = nodes[a].value.dims2();
            let ga = accum(grads, a, m * n);
            let inv = 1.0 / m as f64;
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] += g[j] * inv;
                }
            }
        }
        Op::Sum(a) => {
            let len = nodes[a].value.len();
            for t in accum(grads, a, len).iter_mut() {
                *t += g[0];
            }
        }
        Op::CrossEntropy(logits, ref targets) => {
            let (m, n) = nodes[logits].value.dims2();
            let lv = &nodes[logits].value.data;
            let gl = accum(grads, logits, m * n);
            for (i, &t) in targets.iter().enumerate() {
                let p = softmax_slice(&lv[i * n..(i + 1) * n], 1.0);
                for j in 0..n {
                    let ind = if j == t { 1.0 } else { 0.0 };
                    gl[i * n + j] += g[0] * (p[j] - ind);
                }
            }
        }
        Op::Kl(q, p, floor) => {
            let (m, n) = nodes[q].value.dims2();
            let qv = &nodes[q].value.data;
            let pv = &nodes[p].value.data;
            {
                let gq = accum(grads, q, m * n);
                for i in 0..m {
                    for j in 0..n {
                        let qi = qv[i * n + j];
                        if qi > 0.0 {
                            gq[i * n + j] += g[0] * ((qi / pv[j].max(floor)).ln() + 1.0);
                        }
                    }
                }
            }
            let gp = accum(grads, p, n);
            for j in 0..n {
                if pv[j] < floor {
                    continue;
                }
                let mut s = 0.0;
                for i in 0..m {
                    s += qv[i * n + j];
                }
                gp[j] -= g[0] * s / pv[j];
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims2()
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    fn with_values<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn map_unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.tape.push(value, op)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if self.dims2() != other.dims2() {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_binary(&self, other: Var<'t>, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_shape(&other, op_name)?;
        let value = self.with_values(&other, |a, b| Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        });
        Ok(self.tape.push(value, op))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&other, matmul)?;
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    /// `self * other^T`, both given row-major.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&other, |a, b| {
            let (m, k) = a.dims2();
            let (n, k2) = b.dims2();
            if k != k2 {
                return Err(TensorError::Shape {
                    op: "matmul_t",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let ar = &a.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b.data[j * k..(j + 1) * k];
                    out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
            Ok(Tensor {
                shape: vec![m, n],
                data: out,
            })
        })?;
        Ok(self.tape.push(value, Op::MatMulT(self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&row, |a, r| {
            let n = a.cols();
            if r.len() != n {
                return Err(TensorError::Shape {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: r.shape.clone(),
                });
            }
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v + r.data[i % n])
                .collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        })?;
        Ok(self.tape.push(value, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies row `i` of an `m x n` matrix by entry `i` of an `m x 1` column.
    pub fn scale_rows(&self, col: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&col, |a, c| {
            let (m, n) = a.dims2();
            if c.len() != m {
                return Err(TensorError::Shape {
                    op: "scale_rows",
                    lhs: a.shape.clone(),
                    rhs: c.shape.clone(),
                });
            }
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v * c.data[i / n])
                .collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        })?;
        Ok(self.tape.push(value, Op::ScaleRows(self.id, col.id)))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.map_unary(|v| v * factor, Op::Affine(self.id, factor))
    }

    /// `mul * x + add` elementwise.
    pub fn affine(&self, mul: f64, add: f64) -> Var<'t> {
        self.map_unary(|v| mul * v + add, Op::Affine(self.id, mul))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map_unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map_unary(
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.map_unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(&bad) = nodes[self.id].value.data.iter().find(|&&v| !(v > 0.0)) {
                return Err(TensorError::Domain(bad));
            }
        }
        Ok(self.map_unary(f64::ln, Op::Log(self.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map_unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    /// Row-wise temperature softmax.
    pub fn softmax_rows(&self, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::Param(format!("temperature must be positive, got {tau}")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if x.data.iter().any(|v| v.is_nan()) {
                return Err(TensorError::Numeric("softmax_rows"));
            }
            let (m, n) = x.dims2();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                data.extend(softmax_slice(&x.data[i * n..(i + 1) * n], tau));
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        Ok(self.tape.push(value, Op::SoftmaxRows(self.id, tau)))
    }

    /// Row-wise softmax of `scale * x` where row `i` only covers columns `0..=i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&self, scale: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (m, n) = x.dims2();
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let lim = (i + 1).min(n);
                let scaled: Vec<f64> = x.data[i * n..i * n + lim].iter().map(|v| v * scale).collect();
                data[i * n..i * n + lim].copy_from_slice(&softmax_slice(&scaled, 1.0));
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        self.tape.push(value, Op::CausalSoftmax(self.id, scale))
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (r, c) = x.dims2();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(TensorError::Index { index: i, extent: r });
                }
                data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
            }
            Tensor {
                shape: vec![idx.len(), c],
                data,
            }
        };
        Ok(self.tape.push(value, Op::Gather(self.id, idx.to_vec())))
    }

    pub fn row(&self, i: usize) -> Result<Var<'t>> {
        self.gather_rows(&[i])
    }

    /// Contiguous flat slice `[start, start+len)` viewed with `shape`.
    pub fn slice(&self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let len: usize = shape.iter().product();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if start + len > x.len() {
                return Err(TensorError::Index {
                    index: start + len,
                    extent: x.len(),
                });
            }
            Tensor::new(shape.to_vec(), x.data[start..start + len].to_vec())?
        };
        Ok(self.tape.push(value, Op::Slice(self.id, start)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.slice(0, shape)
    }

    /// Column `j` of an `m x n` matrix as an `m x 1` column.
    pub fn col(&self, j: usize) -> Result<Var<'t>> {
        let (m, n) = self.dims2();
        if j >= n {
            return Err(TensorError::Index { index: j, extent: n });
        }
        if n == 1 {
            return self.reshape(&[m, 1]);
        }
        // Column extraction as a product with a one-hot selector keeps the op set small.
        let mut sel = vec![0.0; n];
        sel[j] = 1.0;
        let sel = self.tape.constant(Tensor::new(vec![n, 1], sel)?);
        self.matmul(sel)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Param("empty concat".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let m = nodes[first.id].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rows() != m {
                    return Err(TensorError::Shape {
                        op: "concat_cols",
                        lhs: nodes[first.id].value.shape.clone(),
                        rhs: v.shape.clone(),
                    });
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(m * cols);
            for i in 0..m {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(i));
                }
            }
            Tensor {
                shape: vec![m, cols],
                data,
            }
        };
        Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Param("empty concat".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let n = nodes[first.id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.cols() != n {
                    return Err(TensorError::Shape {
                        op: "concat_rows",
                        lhs: nodes[first.id].value.shape.clone(),
                        rhs: v.shape.clone(),
                    });
                }
                rows += v.rows();
                data.extend_from_slice(&v.data);
            }
            Tensor {
                shape: vec![rows, n],
                data,
            }
        };
        Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Row-wise Kronecker product: `(m x a) (x) (m x b) -> m x (a*b)`, with the
    /// left operand's index as the most significant digit.
    pub fn row_kron(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&other, |a, b| {
            let (m, ka) = a.dims2();
            let (m2, kb) = b.dims2();
            if m != m2 {
                return Err(TensorError::Shape {
                    op: "row_kron",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut data = Vec::with_capacity(m * ka * kb);
            for i in 0..m {
                for p in 0..ka {
                    let ap = a.data[i * ka + p];
                    for q in 0..kb {
                        data.push(ap * b.data[i * kb + q]);
                    }
                }
            }
            Ok(Tensor {
                shape: vec![m, ka * kb],
                data,
            })
        })?;
        Ok(self.tape.push(value, Op::RowKron(self.id, other.id)))
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (m, n) = x.dims2();
            let mut data = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    data[j] += x.data[i * n + j];
                }
            }
            for v in &mut data {
                *v /= m as f64;
            }
            Tensor {
                shape: vec![1, n],
                data,
            }
        };
        self.tape.push(value, Op::MeanRows(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(nodes[self.id].value.data.iter().sum())
        };
        self.tape.push(value, Op::Sum(self.id))
    }

    /// Summed softmax cross-entropy of each logit row against its target column.
    pub fn cross_entropy_sum(&self, targets: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (m, n) = x.dims2();
            if targets.len() != m {
                return Err(TensorError::Shape {
                    op: "cross_entropy",
                    lhs: x.shape.clone(),
                    rhs: vec![targets.len()],
                });
            }
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if t >= n {
                    return Err(TensorError::Index { index: t, extent: n });
                }
                let row = &x.data[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Tensor::scalar(total)
        };
        Ok(self.tape.push(value, Op::CrossEntropy(self.id, targets.to_vec())))
    }

    /// Summed `KL(q_i || p)` over the rows `q_i` of `self` against a shared
    /// `1 x n` prior `p`. Entries of `p` below `floor` are clamped inside the log
    /// and receive no gradient. `0 log 0 = 0`.
    pub fn kl_rows_sum(&self, prior: Var<'t>, floor: f64) -> Result<Var<'t>> {
        let (value, hits) = self.with_values(&prior, |q, p| {
            let (m, n) = q.dims2();
            if p.len() != n {
                return Err(TensorError::Shape {
                    op: "kl",
                    lhs: q.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            let mut total = 0.0;
            let mut hits = 0;
            for i in 0..m {
                for j in 0..n {
                    let qi = q.data[i * n + j];
                    if p.data[j] < floor {
                        hits += 1;
                    }
                    if qi > 0.0 {
                        total += qi * (qi / p.data[j].max(floor)).ln();
                    }
                }
            }
            Ok((Tensor::scalar(total), hits))
        })?;
        *self.tape.floor_hits.borrow_mut() += hits;
        Ok(self.tape.push(value, Op::Kl(self.id, prior.id, floor)))
    }
}

/// Central-difference check of a tape-built scalar function of one tensor.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_diff_check`] over several input tensors at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(TensorError::Param(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if !v.is_finite() {
            return Err(TensorError::Numeric("finite_diff_check"));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !loss.item().is_finite() {
        return Err(TensorError::Numeric("finite_diff_check"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].len() {
            let orig = inputs[ti].data[i];
            inputs[ti].data[i] = orig + eps;
            let up = eval(&inputs)?;
            inputs[ti].data[i] = orig - eps;
            let down = eval(&inputs)?;
            inputs[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data[i] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let id = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&id, &m).unwrap().data(), m.data());
        let z = matmul(&t2(&[&[1.0, 2.0]]), &t2(&[&[0.0], &[0.0]])).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let c = matmul(&m, &t2(&[&[5.0], &[6.0]])).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0]));
        assert_eq!(z.tanh().item(), 0.0);
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let c = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        assert_eq!(c.scale(0.0).value().data(), &[0.0, 0.0]);
        assert!(matches!(c.log(), Err(TensorError::Domain(_))));
        let d = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(d), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_temp(&Tensor::vector(vec![0.7, 0.7, 0.7]), 1.0).unwrap();
        for &v in s.data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let s = softmax_temp(&Tensor::vector(vec![2f64.ln(), 0.0]), 1.0).unwrap();
        assert!(close(s.data()[0], 2.0 / 3.0, 1e-15));
        assert!(close(s.data()[1], 1.0 / 3.0, 1e-15));
        let s = softmax_temp(&Tensor::vector(vec![5.0, 0.0]), 0.01).unwrap();
        assert!(close(s.data()[0], 1.0, 1e-9));
        assert!(s.data()[1] < 1e-9);
        assert!(matches!(
            softmax_temp(&Tensor::vector(vec![1.0]), 0.0),
            Err(TensorError::Param(_))
        ));
        assert!(matches!(
            softmax_temp(&Tensor::vector(vec![f64::NAN]), 1.0),
            Err(TensorError::Numeric(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().data(), &[2.0, 4.0]);
        // Accumulates on a second sweep.
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert_eq!(x.grad().data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.leaf(Tensor::scalar(5.0));
        tape.backward(c).unwrap();
        assert_eq!(x.grad().data(), &[0.0, 0.0]);
        assert_eq!(c.grad().data(), &[1.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let err = finite_diff_check(|_, v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
        let x0 = Tensor::zeros(&[4]);
        let tape = Tape::new();
        let v = tape.leaf(x0.clone());
        tape.backward(v.tanh().sum()).unwrap();
        assert_eq!(v.grad().data(), &[1.0; 4]);
        let err = finite_diff_check(|_, v| Ok(v.tanh().sum()), &x0, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        let bad = finite_diff_check(|_, v| Ok(v.sum()), &x0, 1e-2);
        assert!(bad.is_err());
    }

    #[test]
    fn kl_handles_zero_mass() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let p = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let kl = q.kl_rows_sum(p, 1e-12).unwrap();
        assert!(close(kl.item(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::from_rows(&[vec![1.0, 9.0], vec![0.0, 0.0]]).unwrap());
        let a = s.causal_softmax(1.0).value();
        assert_eq!(a.data(), &[1.0, 0.0, 0.5, 0.5]);
    }
}
