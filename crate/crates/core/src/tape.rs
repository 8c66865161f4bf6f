//! Reverse-mode automatic differentiation over a linear computation tape.
//!
//! Every forward op appends a node whose inputs are strictly earlier on the
//! tape, so a single reverse sweep replays all adjoints. A tape supports one
//! backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor, NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Negate,
    Exp,
    Scale(f64),
}

impl Unary {
    /// Parses `leaky_relu:<slope>`, `negate`, `exp` or `scale:<c>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::config(format!("unary `{name}` needs a numeric argument")))
        };
        let kind = match name {
            "leaky_relu" => Unary::LeakyRelu(num(arg)?),
            "negate" => Unary::Negate,
            "exp" => Unary::Exp,
            "scale" => Unary::Scale(num(arg)?),
            other => return Err(Error::config(format!("unknown unary kind `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    fn validate(self) -> Result<()> {
        match self {
            Unary::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(Error::config(format!(
                "leaky_relu slope must lie in (0,1), got {s}"
            ))),
            Unary::Scale(c) if !c.is_finite() => {
                Err(Error::config(format!("scale factor must be finite, got {c}")))
            }
            _ => Ok(()),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Negate => -x,
            Unary::Exp => libm::exp(x),
            Unary::Scale(c) => c * x,
        }
    }
}

/// Op identity, used to name failures and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Unary,
    SoftmaxRows,
    LogSoftmaxRows,
    Sum,
    NormalizeRows,
    ConcatCols,
    ConcatRows,
    GatherRows,
    NeighborMax,
    PairwiseSqDist,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Unary => "unary",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Sum => "sum",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::NeighborMax => "neighbor_max",
            OpKind::PairwiseSqDist => "pairwise_sq_dist",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf,
            MatMul,
            Transpose,
            Add,
            Sub,
            Mul,
            AddRow,
            Unary,
            SoftmaxRows,
            LogSoftmaxRows,
            Sum,
            NormalizeRows,
            ConcatCols,
            ConcatRows,
            GatherRows,
            NeighborMax,
            PairwiseSqDist,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    /// Keeps the per-row norms for the adjoint.
    NormalizeRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Source row of the winning neighbor per output element.
    NeighborMax(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Unary(..) => OpKind::Unary,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::Sum(..) => OpKind::Sum,
            Op::NormalizeRows(..) => OpKind::NormalizeRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::NeighborMax(..) => OpKind::NeighborMax,
            Op::PairwiseSqDist(..) => OpKind::PairwiseSqDist,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Confined to one thread.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    #[cfg(any(test, feature = "fault-injection"))]
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the adjoint of every op of `kind` (scaled by 1.5) so that
    /// gradient checks can be shown to catch a wrong derivative.
    #[cfg(any(test, feature = "fault-injection"))]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) {
            assert!(
                value.is_finite(),
                "non-finite output from `{}` on finite inputs",
                op.kind().name()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check(x)?;
        self.check(row)?;
        let tx = self.value(x);
        let tr = self.value(row);
        if tx.rank() != 2 || tr.shape() != [1, tx.cols()] {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let n = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % n];
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        self.check(a)?;
        kind.validate()?;
        let out = self.value(a).map(|x| kind.apply(x));
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Unary(a, kind), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn negate(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Negate)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).softmax_rows()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).log_softmax_rows()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmaxRows(a), rg))
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let out = t.normalize_rows()?;
        let norms = (0..t.rows())
            .map(|i| libm::sqrt(t.row_slice(i).iter().map(|v| v * v).sum::<f64>()))
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::NormalizeRows(a, norms), rg))
    }

    /// Cosine similarity of every row of `a` (m×d) against every row of `b` (n×d).
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("cosine_matrix", sa, sb));
        }
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `r` of the output is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 || indices.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[indices.len()]));
        }
        let (m, n) = t.dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), n, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// For an M×c input and an N×k neighbor table (row-major, entries < M),
    /// returns the N×c channel-wise maximum over each point's neighbors.
    /// Ties go to the earliest neighbor in the table.
    pub fn neighbor_max(&mut self, a: Var, neighbors: &[usize], k: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 || k == 0 || neighbors.is_empty() || !neighbors.len().is_multiple_of(k) {
            return Err(Error::shape("neighbor_max", t.shape(), &[neighbors.len(), k]));
        }
        let (m, c) = t.dims2();
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= m) {
            return Err(Error::shape("neighbor_max", t.shape(), &[bad]));
        }
        let n = neighbors.len() / k;
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut src = vec![0usize; n * c];
        for i in 0..n {
            for &j in &neighbors[i * k..(i + 1) * k] {
                let row = t.row_slice(j);
                for ch in 0..c {
                    if row[ch] > data[i * c + ch] {
                        data[i * c + ch] = row[ch];
                        src[i * c + ch] = j;
                    }
                }
            }
        }
        let out = Tensor::matrix(n, c, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::NeighborMax(a, src), rg))
    }

    /// Squared Euclidean distance between every row of `a` (m×d) and of `b` (n×d).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(Error::shape("pairwise_sq_dist", ta.shape(), tb.shape()));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = ta
                    .row_slice(i)
                    .iter()
                    .zip(tb.row_slice(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::PairwiseSqDist(a, b), rg))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        self.check(a)?;
        let mask = dropout_mask(self.shape(a), rate, rng, training)?;
        match mask {
            None => Ok(a),
            Some(mask) => {
                let m = self.constant(mask);
                self.mul(a, m)
            }
        }
    }

    /// Populates gradients for every node that requires one and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.adjoint(idx, &g);
            grads[idx] = Some(g);
            #[allow(unused_mut)]
            for (input, mut delta) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                #[cfg(any(test, feature = "fault-injection"))]
                if self.fault == Some(self.nodes[idx].op.kind()) {
                    delta.iter_mut().for_each(|d| *d *= 1.5);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|g| {
                    Tensor::new(node.value.shape().to_vec(), g).expect("grad matches value shape")
                })
            })
            .collect();
        Ok(())
    }

    /// Input adjoints of node `idx` given its output adjoint `g`.
    fn adjoint(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                let mut res = Vec::new();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt_into(g, tb.data(), &mut da, m, n, k);
                    res.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b_into(ta.data(), g, &mut db, m, k, n);
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(a) => {
                let (m, n) = out.dims2();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g[i * n + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(tb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(ta).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddRow(x, row) => {
                let n = out.cols();
                let mut drow = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    drow[i % n] += v;
                }
                vec![(*x, g.to_vec()), (*row, drow)]
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let da = match *kind {
                    Unary::LeakyRelu(s) => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { s * g })
                        .collect(),
                    Unary::Negate => g.iter().map(|v| -v).collect(),
                    Unary::Exp => g.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
                    Unary::Scale(c) => g.iter().map(|v| c * v).collect(),
                };
                vec![(*a, da)]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let y = out.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(g, y)| g * y).sum();
                    for j in r {
                        da[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let y = out.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let total: f64 = g[r.clone()].iter().sum();
                    for j in r {
                        da[j] = g[j] - libm::exp(y[j]) * total;
                    }
                }
                vec![(*a, da)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::NormalizeRows(a, norms) => {
                let (m, n) = out.dims2();
                let y = out.data();
                let mut da = vec![0.0; m * n];
                for (i, &norm) in norms.iter().enumerate().take(m) {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(g, y)| g * y).sum();
                    let norm = norm.max(NORM_EPS);
                    for j in r {
                        da[j] = (g[j] - y[j] * dot) / norm;
                    }
                }
                vec![(*a, da)]
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    res.push((p, dp));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.value(p).len();
                    res.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
                res
            }
            Op::GatherRows(a, indices) => {
                let n = out.cols();
                let mut da = vec![0.0; self.value(*a).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[r * n + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::NeighborMax(a, src) => {
                let c = out.cols();
                let mut da = vec![0.0; self.value(*a).len()];
                for (e, &j) in src.iter().enumerate() {
                    da[j * c + e % c] += g[e];
                }
                vec![(*a, da)]
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, d) = ta.dims2();
                let n = tb.rows();
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = ta.data()[i * d + t] - tb.data()[j * d + t];
                            da[i * d + t] += gij * diff;
                            db[j * d + t] -= gij * diff;
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
        }
    }
}

/// Inverted-dropout multiplier: each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`. Returns `None` when the
/// op is the identity (eval mode or zero rate).
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Option<Tensor>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must lie in [0,1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(shape);
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    Ok(Some(mask))
}

/// Applies [`dropout_mask`] to a tensor outside any tape.
pub fn dropout<R: Rng + ?Sized>(
    a: &Tensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    Ok(match dropout_mask(a.shape(), rate, rng, training)? {
        None => a.clone(),
        Some(mask) => {
            let data = a.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
    })
}

/// Applies an elementwise transform outside any tape.
pub fn apply_unary(a: &Tensor, kind: Unary) -> Result<Tensor> {
    kind.validate()?;
    Ok(a.map(|x| kind.apply(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, -2.0, 4.0]]).unwrap());
        let z = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(Error::BackwardTwice));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        let c = tape.constant(Tensor::row(&[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn unary_examples() {
        let t = Tensor::row(&[1.0, -1.0]);
        assert_eq!(apply_unary(&t, Unary::LeakyRelu(0.01)).unwrap().data(), &[1.0, -0.01]);
        let x = Tensor::row(&[0.3, -7.0, 2.5]);
        assert_eq!(apply_unary(&x, Unary::Scale(1.0)).unwrap(), x);
        assert_eq!(apply_unary(&Tensor::row(&[0.0]), Unary::Exp).unwrap().data(), &[1.0]);
        assert!(matches!(Unary::parse("relu6"), Err(Error::Config(_))));
        assert!(matches!(Unary::parse("leaky_relu:1.5"), Err(Error::Config(_))));
        assert_eq!(Unary::parse("leaky_relu:0.2").unwrap(), Unary::LeakyRelu(0.2));
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::row(&[1.0, 2.0, 3.0]);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, &mut rng, false).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, &mut rng, true), Err(Error::Config(_))));

        let big = Tensor::ones(&[1, 100_000]);
        let a = dropout(&big, 0.5, &mut ChaCha8Rng::seed_from_u64(11), true).unwrap();
        let b = dropout(&big, 0.5, &mut ChaCha8Rng::seed_from_u64(11), true).unwrap();
        assert_eq!(a, b);
        let survivors = a.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        // Monte-Carlo oracle: binomial(1e5, 0.5) has sd ~0.0016 in fraction.
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn neighbor_max_ties_pick_first_neighbor() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0], &[1.0], &[0.0]]).unwrap());
        let y = tape.neighbor_max(x, &[1, 0, 2, 0], 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 0.0]);
    }
}
