use crate::error::{Error, Result};

use super::matrix::{gemm_nt, gemm_tn, Matrix};
use super::softmax_ce_rows;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Add,
    Mul,
}

/// Primitive kind of a node, used for introspection and op counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Sigmoid,
    Tanh,
    AddRow,
    ConcatCols,
    SliceCols,
    Row,
    StackRows,
    SoftmaxCrossEntropy,
    Sum,
    Scale,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    AddRow(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { src: NodeId, start: usize },
    Row { src: NodeId, index: usize },
    StackRows(Vec<NodeId>),
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<u32>,
        probs: Matrix,
    },
    Sum(NodeId),
    Scale(NodeId, f64),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::AddRow(..) => OpKind::AddRow,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Row { .. } => OpKind::Row,
            Op::StackRows(_) => OpKind::StackRows,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
        }
    }
}

/// Append-only reverse-mode tape over dense matrices.
///
/// Nodes are stored in construction order, which is a topological order, so
/// `backward` is a single reverse sweep. Gradients accumulate: `backward`
/// never zeroes them and refuses to run twice without [`Graph::zero_grads`].
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Matrix>,
    grads: Vec<Option<Matrix>>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    backpropagated: bool,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Accumulated gradient, `None` if nothing reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires_grad[id.0]
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.ops[id.0].kind()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.ops.iter().filter(|op| op.kind() == kind).count()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backpropagated = false;
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        NodeId(self.values.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad[id.0])
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            Elementwise::Sigmoid | Elementwise::Tanh => 1,
            Elementwise::Add | Elementwise::Mul => 2,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
        }
    }

    fn binary_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_check("add", a, b)?;
        let mut value = self.values[a.0].clone();
        value.add_assign(&self.values[b.0]);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_check("mul", a, b)?;
        let mut value = self.values[a.0].clone();
        for (x, y) in value.as_mut_slice().iter_mut().zip(self.values[b.0].as_slice()) {
            *x *= y;
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(sigmoid);
        let rg = self.requires_grad[a.0];
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(f64::tanh);
        let rg = self.requires_grad[a.0];
        self.push(value, Op::Tanh(a), rg)
    }

    /// Adds a 1×C row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[bias.0].shape());
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(Error::Shape {
                op: "add_row",
                left: sa,
                right: sb,
            });
        }
        let mut value = self.values[a.0].clone();
        let b = self.values[bias.0].as_slice();
        for r in 0..sa.0 {
            for (x, y) in value.row_mut(r).iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.any_requires(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (&self.values[a.0], &self.values[b.0]);
        if ma.rows() != mb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                left: ma.shape(),
                right: mb.shape(),
            });
        }
        let (rows, p, q) = (ma.rows(), ma.cols(), mb.cols());
        let mut value = Matrix::zeros(rows, p + q);
        for r in 0..rows {
            let out = value.row_mut(r);
            out[..p].copy_from_slice(ma.row(r));
            out[p..].copy_from_slice(mb.row(r));
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let m = &self.values[src.0];
        if start + width > m.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: m.shape(),
                right: (start, width),
            });
        }
        let mut value = Matrix::zeros(m.rows(), width);
        for r in 0..m.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&m.row(r)[start..start + width]);
        }
        let rg = self.requires_grad[src.0];
        Ok(self.push(value, Op::SliceCols { src, start }, rg))
    }

    pub fn row(&mut self, src: NodeId, index: usize) -> Result<NodeId> {
        let m = &self.values[src.0];
        if index >= m.rows() {
            return Err(Error::Shape {
                op: "row",
                left: m.shape(),
                right: (index, 0),
            });
        }
        let value = Matrix::from_vec(1, m.cols(), m.row(index).to_vec())?;
        let rg = self.requires_grad[src.0];
        Ok(self.push(value, Op::Row { src, index }, rg))
    }

    /// Stacks 1×C nodes into an N×C node.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let cols = rows.first().map_or(0, |r| self.values[r.0].cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let m = &self.values[r.0];
            if m.shape() != (1, cols) {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: (1, cols),
                    right: m.shape(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows.len(), cols, data)?;
        let rg = self.any_requires(rows);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    /// Fused row-wise softmax and cross entropy. Produces a T×1 node holding
    /// the per-frame CE; its backward rule is `softmax − onehot`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let (ce, probs) = softmax_ce_rows(&self.values[logits.0], labels)?;
        let value = Matrix::from_vec(ce.len(), 1, ce)?;
        let rg = self.requires_grad[logits.0];
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.values[a.0].as_slice().iter().sum();
        let rg = self.requires_grad[a.0];
        self.push(Matrix::filled(1, 1, total), Op::Sum(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.values[a.0].map(|x| x * factor);
        let rg = self.requires_grad[a.0];
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Accumulates ∂root/∂node into every node that requires a gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.values[root.0].shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {}x{}",
                shape.0, shape.1
            )));
        }
        if self.backpropagated {
            return Err(Error::Contract(
                "backward already ran on this graph; call zero_grads first".into(),
            ));
        }
        self.backpropagated = true;
        if !self.requires_grad[root.0] {
            return Ok(());
        }
        self.grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        let Graph {
            values,
            grads,
            ops,
            requires_grad,
            ..
        } = self;
        for i in (0..=root.0).rev() {
            if !requires_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&ops[i], i, &g, values, grads, requires_grad);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Gradient buffer of `id`, allocated on first use; `None` if `id` is frozen.
fn acc<'a>(
    grads: &'a mut [Option<Matrix>],
    values: &[Matrix],
    requires_grad: &[bool],
    id: NodeId,
) -> Option<&'a mut Matrix> {
    if !requires_grad[id.0] {
        return None;
    }
    let (r, c) = values[id.0].shape();
    Some(grads[id.0].get_or_insert_with(|| Matrix::zeros(r, c)))
}

fn propagate(
    op: &Op,
    this: usize,
    g: &Matrix,
    values: &[Matrix],
    grads: &mut [Option<Matrix>],
    requires_grad: &[bool],
) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                gemm_nt(g, &values[b.0], ga);
            }
            if let Some(gb) = acc(grads, values, requires_grad, *b) {
                gemm_tn(&values[a.0], g, gb);
            }
        }
        Op::Add(a, b) => {
            for p in [a, b] {
                if let Some(gp) = acc(grads, values, requires_grad, *p) {
                    gp.add_assign(g);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                let other = values[b.0].as_slice();
                for ((x, gi), o) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(other) {
                    *x += gi * o;
                }
            }
            if let Some(gb) = acc(grads, values, requires_grad, *b) {
                let other = values[a.0].as_slice();
                for ((x, gi), o) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(other) {
                    *x += gi * o;
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = values[this].as_slice();
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                for ((x, gi), yi) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y) {
                    *x += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Tanh(a) => {
            let y = values[this].as_slice();
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                for ((x, gi), yi) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y) {
                    *x += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = acc(grads, values, requires_grad, *bias) {
                let gb = gb.as_mut_slice();
                for r in 0..g.rows() {
                    for (x, gi) in gb.iter_mut().zip(g.row(r)) {
                        *x += gi;
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let p = values[a.0].cols();
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                for r in 0..g.rows() {
                    for (x, gi) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..p]) {
                        *x += gi;
                    }
                }
            }
            if let Some(gb) = acc(grads, values, requires_grad, *b) {
                for r in 0..g.rows() {
                    for (x, gi) in gb.row_mut(r).iter_mut().zip(&g.row(r)[p..]) {
                        *x += gi;
                    }
                }
            }
        }
        Op::SliceCols { src, start } => {
            if let Some(gs) = acc(grads, values, requires_grad, *src) {
                let w = g.cols();
                for r in 0..g.rows() {
                    for (x, gi) in gs.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *x += gi;
                    }
                }
            }
        }
        Op::Row { src, index } => {
            if let Some(gs) = acc(grads, values, requires_grad, *src) {
                for (x, gi) in gs.row_mut(*index).iter_mut().zip(g.as_slice()) {
                    *x += gi;
                }
            }
        }
        Op::StackRows(rows) => {
            for (r, id) in rows.iter().enumerate() {
                if let Some(gr) = acc(grads, values, requires_grad, *id) {
                    for (x, gi) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *x += gi;
                    }
                }
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            if let Some(gl) = acc(grads, values, requires_grad, *logits) {
                for (t, &label) in labels.iter().enumerate() {
                    let up = g.get(t, 0);
                    if up == 0.0 {
                        continue;
                    }
                    let row = gl.row_mut(t);
                    for (x, p) in row.iter_mut().zip(probs.row(t)) {
                        *x += up * p;
                    }
                    row[label as usize] -= up;
                }
            }
        }
        Op::Sum(a) => {
            let up = g.get(0, 0);
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                ga.as_mut_slice().iter_mut().for_each(|x| *x += up);
            }
        }
        Op::Scale(a, factor) => {
            if let Some(ga) = acc(grads, values, requires_grad, *a) {
                for (x, gi) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *x += gi * factor;
                }
            }
        }
    }
}
