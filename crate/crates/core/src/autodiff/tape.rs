use std::collections::HashMap;
use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability floor applied before the logarithm in [`Op::NegLogLikelihood`].
pub const NLL_PROB_FLOOR: f64 = 1e-12;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Constant,
    /// Elementwise; the right operand may be a scalar or, for a matrix left
    /// operand, a row vector. A scalar left operand broadcasts too.
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatVec,
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Dot,
    /// Softmax of a vector, or of each row of a matrix.
    Softmax,
    /// Mean of `-ln(max(p[r, label_r], NLL_PROB_FLOOR))` over the rows.
    NegLogLikelihood(Vec<usize>),
    /// Identity forward, zero backward.
    StopGrad,
    Concat,
    /// Horizontal stacking of column vectors and matrices with equal rows.
    ConcatCols,
    Slice {
        start: usize,
        len: usize,
    },
    /// L2-normalises a vector, or each row of a matrix.
    RowNormalize,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatVec => "matvec",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Dot => "dot",
            Op::Softmax => "softmax",
            Op::NegLogLikelihood(_) => "neg-log-likelihood",
            Op::StopGrad => "stop-grad",
            Op::Concat => "concat",
            Op::ConcatCols => "concat-cols",
            Op::Slice { .. } => "slice",
            Op::RowNormalize => "row-normalize",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Define-by-run reverse-mode tape.
///
/// Every operation is appended in topological order and evaluated eagerly, so
/// shape and finiteness errors surface at the node that caused them.
/// [`Tape::evaluate`] replays the recorded graph with new input bindings.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

/// Adjoints produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `id`; a zero tensor when `id` does not reach the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.adjoints.get(id.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(self.shapes.get(id.0).map_or(&[][..], |s| s)),
        }
    }

    pub fn reached(&self, id: NodeId) -> bool {
        matches!(self.adjoints.get(id.0), Some(Some(_)))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    RhsScalar,
    LhsScalar,
    RowRhs,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<(Broadcast, Vec<usize>)> {
    if a == b {
        Some((Broadcast::Same, a.to_vec()))
    } else if b.is_empty() {
        Some((Broadcast::RhsScalar, a.to_vec()))
    } else if a.is_empty() {
        Some((Broadcast::LhsScalar, b.to_vec()))
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Some((Broadcast::RowRhs, a.to_vec()))
    } else {
        None
    }
}

#[inline]
fn operand_index(kind: Broadcast, idx: usize, cols: usize) -> (usize, usize) {
    match kind {
        Broadcast::Same => (idx, idx),
        Broadcast::RhsScalar => (idx, 0),
        Broadcast::LhsScalar => (0, idx),
        Broadcast::RowRhs => (idx, idx % cols),
    }
}

fn infer_shape(op: &Op, shapes: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    let arity = |n: usize| {
        if shapes.len() == n {
            Ok(())
        } else {
            Err(format!("expected {n} inputs, got {}", shapes.len()))
        }
    };
    match op {
        Op::Input | Op::Constant => Err("leaf nodes are created with input/constant".into()),
        Op::Add | Op::Sub | Op::Mul => {
            arity(2)?;
            broadcast_kind(shapes[0], shapes[1])
                .map(|(_, s)| s)
                .ok_or_else(|| format!("cannot combine shapes {:?} and {:?}", shapes[0], shapes[1]))
        }
        Op::Scale(_) | Op::Relu | Op::Tanh | Op::Sigmoid | Op::Exp | Op::Log | Op::StopGrad => {
            arity(1)?;
            Ok(shapes[0].to_vec())
        }
        Op::MatVec => {
            arity(2)?;
            match (shapes[0], shapes[1]) {
                ([r, c], [n]) if c == n => Ok(vec![*r]),
                (a, b) => Err(format!("matvec needs [r, c] x [c], got {a:?} x {b:?}")),
            }
        }
        Op::MatMul => {
            arity(2)?;
            match (shapes[0], shapes[1]) {
                ([m, k], [k2, n]) if k == k2 => Ok(vec![*m, *n]),
                (a, b) => Err(format!("matmul needs [m, k] x [k, n], got {a:?} x {b:?}")),
            }
        }
        Op::Transpose => {
            arity(1)?;
            match shapes[0] {
                [r, c] => Ok(vec![*c, *r]),
                s => Err(format!("transpose needs a matrix, got {s:?}")),
            }
        }
        Op::Reshape(target) => {
            arity(1)?;
            let have: usize = shapes[0].iter().product();
            let want: usize = target.iter().product();
            if target.len() > 2 || have != want {
                Err(format!("cannot reshape {:?} into {target:?}", shapes[0]))
            } else {
                Ok(target.clone())
            }
        }
        Op::Sum => {
            arity(1)?;
            Ok(Vec::new())
        }
        Op::Dot => {
            arity(2)?;
            match (shapes[0], shapes[1]) {
                ([a], [b]) if a == b => Ok(Vec::new()),
                (a, b) => Err(format!("dot needs equal-length vectors, got {a:?} and {b:?}")),
            }
        }
        Op::Softmax | Op::RowNormalize => {
            arity(1)?;
            match shapes[0] {
                [n] if *n > 0 => Ok(vec![*n]),
                [r, c] if *c > 0 => Ok(vec![*r, *c]),
                s => Err(format!("{} needs a non-empty vector or matrix, got {s:?}", op.name())),
            }
        }
        Op::NegLogLikelihood(labels) => {
            arity(1)?;
            let (rows, cols) = match shapes[0] {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                s => return Err(format!("neg-log-likelihood needs probabilities, got {s:?}")),
            };
            if rows == 0 || labels.len() != rows {
                return Err(format!("{} labels for {rows} rows", labels.len()));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
                return Err(format!("label {bad} out of range for {cols} classes"));
            }
            Ok(Vec::new())
        }
        Op::Concat => {
            if shapes.is_empty() {
                return Err("concat needs at least one input".into());
            }
            let mut total = 0;
            for s in shapes {
                match s {
                    [n] => total += n,
                    s => return Err(format!("concat needs vectors, got {s:?}")),
                }
            }
            Ok(vec![total])
        }
        Op::ConcatCols => {
            if shapes.is_empty() {
                return Err("concat-cols needs at least one input".into());
            }
            let rows = shapes[0][0];
            let mut cols = 0;
            for s in shapes {
                match s {
                    [r] if *r == rows => cols += 1,
                    [r, c] if *r == rows => cols += c,
                    s => return Err(format!("concat-cols needs {rows} rows, got {s:?}")),
                }
            }
            Ok(vec![rows, cols])
        }
        Op::Slice { start, len } => {
            arity(1)?;
            match shapes[0] {
                [n] if start + len <= *n => Ok(vec![*len]),
                s => Err(format!("slice {start}..{} out of range for {s:?}", start + len)),
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn forward(op: &Op, ins: &[&Tensor], shape: &[usize]) -> Tensor {
    let unary = |f: &dyn Fn(f64) -> f64| {
        Tensor::raw(shape.to_vec(), ins[0].data().iter().map(|&x| f(x)).collect())
    };
    match op {
        Op::Input | Op::Constant => unreachable!("leaves are never recomputed"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let (kind, _) = broadcast_kind(a.shape(), b.shape()).expect("shape checked");
            let numel: usize = shape.iter().product();
            let cols = last_dim(shape);
            let (ad, bd) = (a.data(), b.data());
            let data = (0..numel)
                .map(|idx| {
                    let (ai, bi) = operand_index(kind, idx, cols);
                    match op {
                        Op::Add => ad[ai] + bd[bi],
                        Op::Sub => ad[ai] - bd[bi],
                        _ => ad[ai] * bd[bi],
                    }
                })
                .collect();
            Tensor::raw(shape.to_vec(), data)
        }
        Op::Scale(c) => unary(&|x| c * x),
        Op::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
        Op::Tanh => unary(&f64::tanh),
        Op::Sigmoid => unary(&stable_sigmoid),
        Op::Exp => unary(&f64::exp),
        Op::Log => unary(&f64::ln),
        Op::StopGrad => ins[0].clone(),
        Op::MatVec => {
            let (a, x) = (ins[0], ins[1]);
            let cols = a.cols();
            let data = a
                .data()
                .chunks(cols)
                .map(|row| row.iter().zip(x.data()).map(|(p, q)| p * q).sum())
                .collect();
            Tensor::raw(shape.to_vec(), data)
        }
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let dst = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (d, &bv) in dst.iter_mut().zip(brow) {
                        *d += aip * bv;
                    }
                }
            }
            Tensor::raw(shape.to_vec(), out)
        }
        Op::Transpose => {
            let a = ins[0];
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::raw(shape.to_vec(), out)
        }
        Op::Reshape(_) => Tensor::raw(shape.to_vec(), ins[0].data().to_vec()),
        Op::Sum => Tensor::scalar(ins[0].data().iter().sum()),
        Op::Dot => Tensor::scalar(
            ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(a, b)| a * b)
                .sum(),
        ),
        Op::Softmax => Tensor::raw(shape.to_vec(), softmax_rows(ins[0].data(), last_dim(shape))),
        Op::NegLogLikelihood(labels) => {
            let p = ins[0];
            let cols = last_dim(p.shape());
            let total: f64 = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -p.data()[r * cols + l].max(NLL_PROB_FLOOR).ln())
                .sum();
            Tensor::scalar(total / labels.len() as f64)
        }
        Op::Concat => {
            let data = ins.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::raw(shape.to_vec(), data)
        }
        Op::ConcatCols => {
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in ins {
                    let c = t.cols();
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::raw(shape.to_vec(), out)
        }
        Op::Slice { start, len } => {
            Tensor::raw(shape.to_vec(), ins[0].data()[*start..start + len].to_vec())
        }
        Op::RowNormalize => {
            let cols = last_dim(shape);
            let mut out = ins[0].data().to_vec();
            for row in out.chunks_mut(cols) {
                let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            Tensor::raw(shape.to_vec(), out)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
        });
        self.values.push(value);
        id
    }

    /// A bindable leaf; its recorded value is used unless [`Tape::evaluate`]
    /// receives a replacement.
    pub fn input(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.leaf(Op::Input, value.into())
    }

    pub fn constant(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.leaf(Op::Constant, value.into())
    }

    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let node = self.nodes.len();
        for &i in inputs {
            if i.0 >= node {
                return Err(Error::UnknownNode(i.0));
            }
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|i| &self.nodes[i.0].shape[..]).collect();
        let shape = infer_shape(&op, &shapes).map_err(|detail| Error::Shape {
            node,
            op: op.name(),
            detail,
        })?;
        let ins: Vec<&Tensor> = inputs.iter().map(|i| &self.values[i.0]).collect();
        let value = forward(&op, &ins, &shape);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        self.values.push(value);
        Ok(NodeId(node))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(factor), &[a])
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::MatVec, &[a, x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[a])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot, &[a, b])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, &[a])
    }

    pub fn neg_log_likelihood(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::NegLogLikelihood(labels.to_vec()), &[probs])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGrad, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, parts)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols, parts)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { start, len }, &[a])
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::RowNormalize, &[a])
    }

    /// Recomputes every node with `bindings` substituted for input leaves.
    ///
    /// Inputs without a binding keep their recorded value; constants never
    /// change. The tape itself is left untouched.
    pub fn evaluate(&self, bindings: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Input => match bindings.get(&NodeId(idx)) {
                    Some(v) if v.shape() != node.shape.as_slice() => {
                        return Err(Error::Shape {
                            node: idx,
                            op: "input",
                            detail: format!("bound {:?}, recorded {:?}", v.shape(), node.shape),
                        })
                    }
                    Some(v) => v.clone(),
                    None => self.values[idx].clone(),
                },
                Op::Constant => self.values[idx].clone(),
                ref op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                    forward(op, &ins, &node.shape)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        if let Some(id) = bindings.keys().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::UnknownNode(id.0));
        }
        Ok(values)
    }

    /// Replays the tape with new bindings and keeps the resulting values.
    pub fn rebind(&mut self, bindings: &HashMap<NodeId, Tensor>) -> Result<()> {
        self.values = self.evaluate(bindings)?;
        Ok(())
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out.shape.clone(),
            });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(Tensor::filled(&out.shape, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.local_gradients(idx, node, &grad);
            adjoints[idx] = Some(grad);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut adjoints[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            adjoints,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    /// Gradient of the scalar `output` with respect to each node in `wrt`.
    /// Nodes the output does not depend on receive zeros.
    pub fn gradient(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        for &id in wrt {
            self.node(id)?;
        }
        let grads = self.backward(output)?;
        Ok(wrt.iter().map(|&id| grads.get(id)).collect())
    }

    fn local_gradients(&self, idx: usize, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let val = |i: usize| &self.values[node.inputs[i].0];
        let out = &self.values[idx];
        let gd = g.data();
        let shaped = |i: usize, data: Vec<f64>| Some(Tensor::raw(self.nodes[node.inputs[i].0].shape.clone(), data));
        match &node.op {
            Op::Input | Op::Constant => Vec::new(),
            Op::StopGrad => vec![None],
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                let (kind, _) = broadcast_kind(a.shape(), b.shape()).expect("shape checked");
                let cols = last_dim(&node.shape);
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for (o, &go) in gd.iter().enumerate() {
                    let (ai, bi) = operand_index(kind, o, cols);
                    match node.op {
                        Op::Add => {
                            ga[ai] += go;
                            gb[bi] += go;
                        }
                        Op::Sub => {
                            ga[ai] += go;
                            gb[bi] -= go;
                        }
                        _ => {
                            ga[ai] += go * b.data()[bi];
                            gb[bi] += go * a.data()[ai];
                        }
                    }
                }
                vec![shaped(0, ga), shaped(1, gb)]
            }
            Op::Scale(c) => vec![shaped(0, gd.iter().map(|x| c * x).collect())],
            Op::Relu => {
                let x = val(0).data();
                vec![shaped(0, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Tanh => {
                let y = out.data();
                vec![shaped(0, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())]
            }
            Op::Sigmoid => {
                let y = out.data();
                vec![shaped(0, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::Exp => {
                let y = out.data();
                vec![shaped(0, gd.iter().zip(y).map(|(g, y)| g * y).collect())]
            }
            Op::Log => {
                let x = val(0).data();
                vec![shaped(0, gd.iter().zip(x).map(|(g, x)| g / x).collect())]
            }
            Op::MatVec => {
                let (a, x) = (val(0), val(1));
                let cols = a.cols();
                let mut ga = vec![0.0; a.len()];
                let mut gx = vec![0.0; x.len()];
                for (i, &gi) in gd.iter().enumerate() {
                    let row = &a.data()[i * cols..(i + 1) * cols];
                    let grow = &mut ga[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        grow[j] = gi * x.data()[j];
                        gx[j] += row[j] * gi;
                    }
                }
                vec![shaped(0, ga), shaped(1, gx)]
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let (ad, bd) = (a.data(), b.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let aip = ad[i * k + p];
                        if aip != 0.0 {
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += aip * gv;
                            }
                        }
                    }
                }
                vec![shaped(0, ga), shaped(1, gb)]
            }
            Op::Transpose => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = gd[i * c + j];
                    }
                }
                vec![shaped(0, ga)]
            }
            Op::Reshape(_) | Op::Sum => {
                let n = val(0).len();
                let data = if matches!(node.op, Op::Sum) {
                    vec![gd[0]; n]
                } else {
                    gd.to_vec()
                };
                vec![shaped(0, data)]
            }
            Op::Dot => {
                let (a, b) = (val(0), val(1));
                let s = gd[0];
                vec![
                    shaped(0, b.data().iter().map(|v| s * v).collect()),
                    shaped(1, a.data().iter().map(|v| s * v).collect()),
                ]
            }
            Op::Softmax => {
                let cols = last_dim(&node.shape);
                let mut gx = vec![0.0; gd.len()];
                for ((y, g), dst) in out.data().chunks(cols).zip(gd.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] = y[j] * (g[j] - inner);
                    }
                }
                vec![shaped(0, gx)]
            }
            Op::NegLogLikelihood(labels) => {
                let p = val(0);
                let cols = last_dim(p.shape());
                let n = labels.len() as f64;
                let mut gp = vec![0.0; p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let prob = p.data()[r * cols + l];
                    if prob > NLL_PROB_FLOOR {
                        gp[r * cols + l] = -gd[0] / (n * prob);
                    }
                }
                vec![shaped(0, gp)]
            }
            Op::Concat => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let n = val(i).len();
                        let part = gd[offset..offset + n].to_vec();
                        offset += n;
                        shaped(i, part)
                    })
                    .collect()
            }
            Op::ConcatCols => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let mut col_offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let c = val(i).cols();
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let start = r * cols + col_offset;
                            part.extend_from_slice(&gd[start..start + c]);
                        }
                        col_offset += c;
                        shaped(i, part)
                    })
                    .collect()
            }
            Op::Slice { start, len } => {
                let mut ga = vec![0.0; val(0).len()];
                ga[*start..start + len].copy_from_slice(gd);
                vec![shaped(0, ga)]
            }
            Op::RowNormalize => {
                let cols = last_dim(&node.shape);
                let x = val(0).data();
                let mut gx = vec![0.0; x.len()];
                for ((xr, yr), (gr, dst)) in x
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(gd.chunks(cols).zip(gx.chunks_mut(cols)))
                {
                    let norm = (xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                vec![shaped(0, gx)]
            }
        }
    }
}
