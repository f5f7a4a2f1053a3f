//! Reverse-mode automatic differentiation over small dense vectors.
//!
//! An [`ExprGraph`] is an immutable expression DAG. Leaves read named input
//! slots (vectors bound at evaluation time) or constants; every other node
//! applies one [`Op`] to earlier nodes. Evaluation allocates its own value
//! buffer, so a graph can be shared freely between threads.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("input slot {slot} ({name}) is not bound")]
    UnboundSlot { slot: usize, name: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error at node {node}: {reason}")]
    DomainError { node: NodeId, reason: String },
    #[error("malformed graph: {0}")]
    Malformed(String),
}

/// One expression node. Operands always refer to earlier nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input { slot: usize },
    Const { value: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Recip { a: NodeId },
    Neg { a: NodeId },
    /// `matrix` holds `rows * cols` entries in row-major order.
    MatVec { matrix: NodeId, rows: usize, cols: usize, x: NodeId },
    Dot { a: NodeId, b: NodeId },
    Pow { a: NodeId, exponent: f64 },
    Exp { a: NodeId },
    Log { a: NodeId },
    Relu { a: NodeId },
    Concat { parts: Vec<NodeId> },
    Gather { a: NodeId, indices: Vec<usize> },
    /// Repeats a length-1 operand `len` times.
    Broadcast { a: NodeId, len: usize },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const { .. } => vec![],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Dot { a, b } => vec![*a, *b],
            Op::Recip { a }
            | Op::Neg { a }
            | Op::Pow { a, .. }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Relu { a }
            | Op::Gather { a, .. }
            | Op::Broadcast { a, .. } => vec![*a],
            Op::MatVec { matrix, x, .. } => vec![*matrix, *x],
            Op::Concat { parts } => parts.clone(),
        }
    }

    fn remap(&self, map: &[NodeId]) -> Op {
        let m = |i: &NodeId| map[*i];
        match self {
            Op::Input { slot } => Op::Input { slot: *slot },
            Op::Const { value } => Op::Const { value: value.clone() },
            Op::Add { a, b } => Op::Add { a: m(a), b: m(b) },
            Op::Sub { a, b } => Op::Sub { a: m(a), b: m(b) },
            Op::Mul { a, b } => Op::Mul { a: m(a), b: m(b) },
            Op::Recip { a } => Op::Recip { a: m(a) },
            Op::Neg { a } => Op::Neg { a: m(a) },
            Op::MatVec { matrix, rows, cols, x } => Op::MatVec {
                matrix: m(matrix),
                rows: *rows,
                cols: *cols,
                x: m(x),
            },
            Op::Dot { a, b } => Op::Dot { a: m(a), b: m(b) },
            Op::Pow { a, exponent } => Op::Pow { a: m(a), exponent: *exponent },
            Op::Exp { a } => Op::Exp { a: m(a) },
            Op::Log { a } => Op::Log { a: m(a) },
            Op::Relu { a } => Op::Relu { a: m(a) },
            Op::Concat { parts } => Op::Concat { parts: parts.iter().map(m).collect() },
            Op::Gather { a, indices } => Op::Gather { a: m(a), indices: indices.clone() },
            Op::Broadcast { a, len } => Op::Broadcast { a: m(a), len: *len },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDecl {
    pub name: String,
    pub dim: usize,
}

/// Serialized form of a graph; shapes are re-derived on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    slots: Vec<SlotDecl>,
    nodes: Vec<Op>,
    output: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphDoc", into = "GraphDoc")]
pub struct ExprGraph {
    slots: Vec<SlotDecl>,
    nodes: Vec<Op>,
    output: NodeId,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    buffer_len: usize,
}

impl TryFrom<GraphDoc> for ExprGraph {
    type Error = GraphError;

    fn try_from(doc: GraphDoc) -> Result<Self, GraphError> {
        ExprGraph::new(doc.slots, doc.nodes, doc.output)
    }
}

impl From<ExprGraph> for GraphDoc {
    fn from(g: ExprGraph) -> Self {
        GraphDoc { slots: g.slots, nodes: g.nodes, output: g.output }
    }
}

fn infer_dim(op: &Op, id: NodeId, slots: &[SlotDecl], dims: &[usize]) -> Result<usize, GraphError> {
    for operand in op.operands() {
        if operand >= id {
            return Err(GraphError::Malformed(format!(
                "node {id} references node {operand}, which does not precede it"
            )));
        }
    }
    let mismatch = |what: String| Err(GraphError::ShapeMismatch(format!("node {id}: {what}")));
    match op {
        Op::Input { slot } => match slots.get(*slot) {
            Some(s) => Ok(s.dim),
            None => Err(GraphError::Malformed(format!("node {id} reads undeclared slot {slot}"))),
        },
        Op::Const { value } => Ok(value.len()),
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            if dims[*a] != dims[*b] {
                return mismatch(format!("elementwise operands of length {} and {}", dims[*a], dims[*b]));
            }
            Ok(dims[*a])
        }
        Op::Dot { a, b } => {
            if dims[*a] != dims[*b] {
                return mismatch(format!("dot operands of length {} and {}", dims[*a], dims[*b]));
            }
            Ok(1)
        }
        Op::Recip { a } | Op::Neg { a } | Op::Pow { a, .. } | Op::Exp { a } | Op::Log { a } | Op::Relu { a } => {
            Ok(dims[*a])
        }
        Op::MatVec { matrix, rows, cols, x } => {
            if dims[*matrix] != rows * cols {
                return mismatch(format!("matrix operand has {} entries, expected {rows}x{cols}", dims[*matrix]));
            }
            if dims[*x] != *cols {
                return mismatch(format!("vector operand has length {}, expected {cols}", dims[*x]));
            }
            Ok(*rows)
        }
        Op::Concat { parts } => Ok(parts.iter().map(|p| dims[*p]).sum()),
        Op::Gather { a, indices } => {
            if let Some(bad) = indices.iter().find(|&&i| i >= dims[*a]) {
                return mismatch(format!("gather index {bad} out of range for length {}", dims[*a]));
            }
            Ok(indices.len())
        }
        Op::Broadcast { a, len } => {
            if dims[*a] != 1 {
                return mismatch(format!("broadcast operand has length {}", dims[*a]));
            }
            Ok(*len)
        }
    }
}

fn domain(node: NodeId, reason: impl Into<String>) -> GraphError {
    GraphError::DomainError { node, reason: reason.into() }
}

/// Per-slot partial derivatives, shaped like the bound inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub slots: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn slot(&self, slot: usize) -> &[f64] {
        &self.slots[slot]
    }
}

impl ExprGraph {
    pub fn new(slots: Vec<SlotDecl>, nodes: Vec<Op>, output: NodeId) -> Result<Self, GraphError> {
        if output >= nodes.len() {
            return Err(GraphError::Malformed(format!(
                "output node {output} does not exist ({} nodes)",
                nodes.len()
            )));
        }
        let mut dims = Vec::with_capacity(nodes.len());
        let mut offsets = Vec::with_capacity(nodes.len());
        let mut buffer_len = 0;
        for (id, op) in nodes.iter().enumerate() {
            let dim = infer_dim(op, id, &slots, &dims)?;
            offsets.push(buffer_len);
            buffer_len += dim;
            dims.push(dim);
        }
        Ok(Self { slots, nodes, output, dims, offsets, buffer_len })
    }

    pub fn slots(&self) -> &[SlotDecl] {
        &self.slots
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.output]
    }

    pub fn slot_dim(&self, slot: usize) -> usize {
        self.slots[slot].dim
    }

    fn check_bindings(&self, bindings: &[&[f64]]) -> Result<(), GraphError> {
        for (i, decl) in self.slots.iter().enumerate() {
            match bindings.get(i) {
                None => return Err(GraphError::UnboundSlot { slot: i, name: decl.name.clone() }),
                Some(v) if v.len() != decl.dim => {
                    return Err(GraphError::ShapeMismatch(format!(
                        "slot {i} ({}) bound to length {}, declared {}",
                        decl.name,
                        v.len(),
                        decl.dim
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn span(&self, id: NodeId) -> std::ops::Range<usize> {
        self.offsets[id]..self.offsets[id] + self.dims[id]
    }

    fn evaluate(&self, bindings: &[&[f64]]) -> Result<Vec<f64>, GraphError> {
        self.check_bindings(bindings)?;
        let mut buf = vec![0.0; self.buffer_len];
        for (id, op) in self.nodes.iter().enumerate() {
            let out = self.offsets[id];
            let (done, rest) = buf.split_at_mut(out);
            let dst = &mut rest[..self.dims[id]];
            let val = |n: NodeId| &done[self.offsets[n]..self.offsets[n] + self.dims[n]];
            match op {
                Op::Input { slot } => dst.copy_from_slice(bindings[*slot]),
                Op::Const { value } => dst.copy_from_slice(value),
                Op::Add { a, b } => {
                    for ((d, x), y) in dst.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *d = x + y;
                    }
                }
                Op::Sub { a, b } => {
                    for ((d, x), y) in dst.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *d = x - y;
                    }
                }
                Op::Mul { a, b } => {
                    for ((d, x), y) in dst.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *d = x * y;
                    }
                }
                Op::Recip { a } => {
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        if *x == 0.0 {
                            return Err(domain(id, "reciprocal of zero"));
                        }
                        *d = 1.0 / x;
                    }
                }
                Op::Neg { a } => {
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        *d = -x;
                    }
                }
                Op::MatVec { matrix, rows, cols, x } => {
                    let m = val(*matrix);
                    let v = val(*x);
                    for r in 0..*rows {
                        dst[r] = m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum();
                    }
                }
                Op::Dot { a, b } => {
                    dst[0] = val(*a).iter().zip(val(*b)).map(|(x, y)| x * y).sum();
                }
                Op::Pow { a, exponent } => {
                    let p = *exponent;
                    let integral = p.fract() == 0.0;
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        if p < 0.0 && *x <= 0.0 {
                            return Err(domain(id, format!("negative exponent {p} on non-positive base {x}")));
                        }
                        if !integral && *x < 0.0 {
                            return Err(domain(id, format!("fractional exponent {p} on negative base {x}")));
                        }
                        *d = if integral && p.abs() < i32::MAX as f64 { x.powi(p as i32) } else { x.powf(p) };
                    }
                }
                Op::Exp { a } => {
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        *d = x.exp();
                    }
                }
                Op::Log { a } => {
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        if *x <= 0.0 {
                            return Err(domain(id, format!("log of non-positive value {x}")));
                        }
                        *d = x.ln();
                    }
                }
                Op::Relu { a } => {
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        *d = x.max(0.0);
                    }
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let src = val(*p);
                        dst[at..at + src.len()].copy_from_slice(src);
                        at += src.len();
                    }
                }
                Op::Gather { a, indices } => {
                    let src = val(*a);
                    for (d, &i) in dst.iter_mut().zip(indices) {
                        *d = src[i];
                    }
                }
                Op::Broadcast { a, .. } => {
                    let s = val(*a)[0];
                    dst.fill(s);
                }
            }
        }
        Ok(buf)
    }

    /// Evaluates the output vector.
    pub fn forward_eval(&self, bindings: &[&[f64]]) -> Result<Vec<f64>, GraphError> {
        let buf = self.evaluate(bindings)?;
        Ok(buf[self.span(self.output)].to_vec())
    }

    /// Evaluates a scalar-output graph.
    pub fn eval_scalar(&self, bindings: &[&[f64]]) -> Result<f64, GraphError> {
        if self.output_dim() != 1 {
            return Err(GraphError::ShapeMismatch(format!(
                "eval_scalar on output of length {}",
                self.output_dim()
            )));
        }
        let buf = self.evaluate(bindings)?;
        Ok(buf[self.offsets[self.output]])
    }

    /// Returns the output together with `cotangentᵀ·J` for every input slot.
    pub fn value_and_vjp(&self, bindings: &[&[f64]], cotangent: &[f64]) -> Result<(Vec<f64>, Gradient), GraphError> {
        if cotangent.len() != self.output_dim() {
            return Err(GraphError::ShapeMismatch(format!(
                "cotangent of length {} for output of length {}",
                cotangent.len(),
                self.output_dim()
            )));
        }
        let vals = self.evaluate(bindings)?;
        let mut adj = vec![0.0; self.buffer_len];
        adj[self.span(self.output)].copy_from_slice(cotangent);
        let mut grads: Vec<Vec<f64>> = self.slots.iter().map(|s| vec![0.0; s.dim]).collect();

        for id in (0..=self.output).rev() {
            let span = self.span(id);
            if adj[span.clone()].iter().all(|g| *g == 0.0) {
                continue;
            }
            let g: Vec<f64> = adj[span.clone()].to_vec();
            let val = |n: NodeId| &vals[self.offsets[n]..self.offsets[n] + self.dims[n]];
            match &self.nodes[id] {
                Op::Input { slot } => {
                    for (acc, gi) in grads[*slot].iter_mut().zip(&g) {
                        *acc += gi;
                    }
                }
                Op::Const { .. } => {}
                Op::Add { a, b } => {
                    self.accumulate(&mut adj, *a, |i| g[i]);
                    self.accumulate(&mut adj, *b, |i| g[i]);
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut adj, *a, |i| g[i]);
                    self.accumulate(&mut adj, *b, |i| -g[i]);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                    self.accumulate(&mut adj, *a, |i| g[i] * vb[i]);
                    self.accumulate(&mut adj, *b, |i| g[i] * va[i]);
                }
                Op::Recip { a } => {
                    let out = val(id).to_vec();
                    self.accumulate(&mut adj, *a, |i| -g[i] * out[i] * out[i]);
                }
                Op::Neg { a } => self.accumulate(&mut adj, *a, |i| -g[i]),
                Op::MatVec { matrix, rows, cols, x } => {
                    let (m, v) = (val(*matrix).to_vec(), val(*x).to_vec());
                    let (rows, cols) = (*rows, *cols);
                    self.accumulate(&mut adj, *matrix, |idx| g[idx / cols] * v[idx % cols]);
                    self.accumulate(&mut adj, *x, |c| (0..rows).map(|r| m[r * cols + c] * g[r]).sum());
                }
                Op::Dot { a, b } => {
                    let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                    self.accumulate(&mut adj, *a, |i| g[0] * vb[i]);
                    self.accumulate(&mut adj, *b, |i| g[0] * va[i]);
                }
                Op::Pow { a, exponent } => {
                    let p = *exponent;
                    let base = val(*a).to_vec();
                    if p > 0.0 && p < 1.0 && base.iter().any(|x| *x == 0.0) {
                        return Err(domain(id, format!("derivative of x^{p} is unbounded at 0")));
                    }
                    self.accumulate(&mut adj, *a, |i| {
                        if p == 0.0 {
                            0.0
                        } else if p == 1.0 {
                            g[i]
                        } else if p.fract() == 0.0 {
                            g[i] * p * base[i].powi(p as i32 - 1)
                        } else {
                            g[i] * p * base[i].powf(p - 1.0)
                        }
                    });
                }
                Op::Exp { a } => {
                    let out = val(id).to_vec();
                    self.accumulate(&mut adj, *a, |i| g[i] * out[i]);
                }
                Op::Log { a } => {
                    let base = val(*a).to_vec();
                    self.accumulate(&mut adj, *a, |i| g[i] / base[i]);
                }
                Op::Relu { a } => {
                    // Subgradient at exactly zero is taken as zero.
                    let base = val(*a).to_vec();
                    self.accumulate(&mut adj, *a, |i| if base[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let len = self.dims[*p];
                        let start = at;
                        self.accumulate(&mut adj, *p, |i| g[start + i]);
                        at += len;
                    }
                }
                Op::Gather { a, indices } => {
                    let off = self.offsets[*a];
                    for (gi, &i) in g.iter().zip(indices) {
                        adj[off + i] += gi;
                    }
                }
                Op::Broadcast { a, .. } => {
                    let total: f64 = g.iter().sum();
                    adj[self.offsets[*a]] += total;
                }
            }
        }
        let out = vals[self.span(self.output)].to_vec();
        Ok((out, Gradient { slots: grads }))
    }

    fn accumulate(&self, adj: &mut [f64], node: NodeId, f: impl Fn(usize) -> f64) {
        let off = self.offsets[node];
        for i in 0..self.dims[node] {
            adj[off + i] += f(i);
        }
    }

    /// `cotangentᵀ·J` for each input slot.
    pub fn reverse_vjp(&self, bindings: &[&[f64]], cotangent: &[f64]) -> Result<Gradient, GraphError> {
        self.value_and_vjp(bindings, cotangent).map(|(_, g)| g)
    }

    /// Dense Jacobian of the output with respect to one slot, one VJP per row.
    pub fn jacobian(&self, bindings: &[&[f64]], slot: usize) -> Result<DMatrix<f64>, GraphError> {
        if slot >= self.slots.len() {
            return Err(GraphError::Malformed(format!("slot {slot} does not exist")));
        }
        let n = self.output_dim();
        let m = self.slots[slot].dim;
        let mut jac = DMatrix::zeros(n, m);
        let mut e = vec![0.0; n];
        for r in 0..n {
            e.fill(0.0);
            e[r] = 1.0;
            let g = self.reverse_vjp(bindings, &e)?;
            for c in 0..m {
                jac[(r, c)] = g.slots[slot][c];
            }
        }
        Ok(jac)
    }
}

/// Central-difference Jacobian: column j is `(f(x + h·eⱼ) − f(x − h·eⱼ)) / 2h`.
pub fn finite_difference_jacobian<F, E>(mut f: F, x: &[f64], h: f64) -> Result<DMatrix<f64>, E>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        columns.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>());
    }
    let rows = columns.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows, x.len(), |r, c| columns[c][r]))
}

/// Incremental graph construction.
///
/// Shape errors are recorded on the first offending call and reported by
/// [`GraphBuilder::finish`], so construction code can chain calls freely.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    slots: Vec<SlotDecl>,
    nodes: Vec<Op>,
    dims: Vec<usize>,
    error: Option<GraphError>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a new slot and returns the node that reads it.
    pub fn input(&mut self, name: &str, dim: usize) -> NodeId {
        let slot = self.slots.len();
        self.slots.push(SlotDecl { name: name.to_string(), dim });
        self.push(Op::Input { slot })
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        let dim = match infer_dim(&op, id, &self.slots, &self.dims) {
            Ok(d) => d,
            Err(e) => {
                self.error.get_or_insert(e);
                0
            }
        };
        self.nodes.push(op);
        self.dims.push(dim);
        id
    }

    pub fn dim(&self, node: NodeId) -> usize {
        self.dims[node]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Const { value })
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(vec![value])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b })
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Recip { a })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg { a })
    }

    pub fn matvec(&mut self, matrix: NodeId, rows: usize, cols: usize, x: NodeId) -> NodeId {
        self.push(Op::MatVec { matrix, rows, cols, x })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot { a, b })
    }

    pub fn pow(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow { a, exponent })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu { a })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat { parts })
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather { a, indices })
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        self.gather(a, vec![i])
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.gather(a, (start..start + len).collect())
    }

    pub fn broadcast(&mut self, a: NodeId, len: usize) -> NodeId {
        self.push(Op::Broadcast { a, len })
    }

    /// Multiplies `a` by a length-1 node, broadcasting as needed.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let len = self.dims[a];
        let s = if len == 1 { s } else { self.broadcast(s, len) };
        self.mul(a, s)
    }

    /// Sum of all entries of `a`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ones = self.constant(vec![1.0; self.dims[a]]);
        self.dot(a, ones)
    }

    /// Copies `graph` into this builder with its input slots replaced by
    /// `inputs` (one node per slot, dimensions must match). Returns the node
    /// holding the spliced graph's output.
    pub fn splice(&mut self, graph: &ExprGraph, inputs: &[NodeId]) -> NodeId {
        if inputs.len() != graph.slots.len() {
            self.error.get_or_insert(GraphError::ShapeMismatch(format!(
                "splice supplies {} inputs for {} slots",
                inputs.len(),
                graph.slots.len()
            )));
            return 0;
        }
        for (slot, (&node, decl)) in inputs.iter().zip(&graph.slots).enumerate() {
            if self.dims[node] != decl.dim {
                self.error.get_or_insert(GraphError::ShapeMismatch(format!(
                    "splice slot {slot} ({}) expects length {}, got {}",
                    decl.name, decl.dim, self.dims[node]
                )));
                return 0;
            }
        }
        let mut map = Vec::with_capacity(graph.nodes.len());
        for op in &graph.nodes {
            let id = match op {
                Op::Input { slot } => inputs[*slot],
                other => self.push(other.remap(&map)),
            };
            map.push(id);
        }
        map[graph.output]
    }

    pub fn finish(self, output: NodeId) -> Result<ExprGraph, GraphError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        ExprGraph::new(self.slots, self.nodes, output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square() -> ExprGraph {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 1);
        let y = b.mul(x, x);
        b.finish(y).unwrap()
    }

    fn affine(a: &[f64]) -> ExprGraph {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        let y = b.input("y", 2);
        let m = b.constant(a.to_vec());
        let ax = b.matvec(m, 2, 2, x);
        let out = b.add(ax, y);
        b.finish(out).unwrap()
    }

    #[test]
    fn square_value_and_gradient() {
        let g = square();
        assert_eq!(g.forward_eval(&[&[3.0]]).unwrap(), vec![9.0]);
        assert_eq!(g.reverse_vjp(&[&[3.0]], &[1.0]).unwrap().slots[0], vec![6.0]);
    }

    #[test]
    fn affine_map_value_jacobian_and_adjoint() {
        let a = [0.1, 0.2, 0.3, 0.1];
        let g = affine(&a);
        let out = g.forward_eval(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert_relative_eq!(out[0], 1.3, epsilon = 1e-15);
        assert_relative_eq!(out[1], 1.4, epsilon = 1e-15);

        let jac = g.jacobian(&[&[1.0, 1.0], &[1.0, 1.0]], 0).unwrap();
        assert_eq!(jac, DMatrix::from_row_slice(2, 2, &a));

        let v = [0.7, -1.3];
        let grad = g.reverse_vjp(&[&[1.0, 1.0], &[1.0, 1.0]], &v).unwrap();
        let at_v = DMatrix::from_row_slice(2, 2, &a).transpose() * nalgebra::DVector::from_row_slice(&v);
        assert_relative_eq!(grad.slots[0][0], at_v[0], epsilon = 1e-15);
        assert_relative_eq!(grad.slots[0][1], at_v[1], epsilon = 1e-15);
        assert_eq!(grad.slots[1], v.to_vec());
    }

    #[test]
    fn relu_values_and_kink_convention() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let r = b.relu(x);
        let g = b.finish(r).unwrap();
        assert_eq!(g.forward_eval(&[&[-1.0, 0.0, 2.0]]).unwrap(), vec![0.0, 0.0, 2.0]);
        let grad = g.reverse_vjp(&[&[-1.0, 0.0, 2.0]], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(grad.slots[0], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn product_jacobian_by_hand() {
        // f(x) = (x1*x2, x1^2)
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        let x1 = b.index(x, 0);
        let x2 = b.index(x, 1);
        let p = b.mul(x1, x2);
        let s = b.pow(x1, 2.0);
        let out = b.concat(vec![p, s]);
        let g = b.finish(out).unwrap();
        let jac = g.jacobian(&[&[2.0, 3.0]], 0).unwrap();
        assert_eq!(jac, DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 4.0, 0.0]));
    }

    #[test]
    fn finite_difference_examples() {
        let sq = finite_difference_jacobian(|x| Ok::<_, ()>(vec![x[0] * x[0]]), &[3.0], 1e-5).unwrap();
        assert!((sq[(0, 0)] - 6.0).abs() < 1e-6);

        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let lin = finite_difference_jacobian(
            |x| Ok::<_, ()>((&a * nalgebra::DVector::from_row_slice(x)).iter().copied().collect()),
            &[0.3, -0.2, 1.1],
            1e-3,
        )
        .unwrap();
        assert!((lin - &a).abs().max() < 1e-9);

        let e = finite_difference_jacobian(|x| Ok::<_, ()>(vec![x[0].exp()]), &[0.0], 1e-5).unwrap();
        assert!((e[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unbound_and_mismatched_slots_are_errors() {
        let g = affine(&[0.0; 4]);
        assert!(matches!(g.forward_eval(&[&[1.0, 1.0]]), Err(GraphError::UnboundSlot { slot: 1, .. })));
        assert!(matches!(g.forward_eval(&[&[1.0], &[1.0, 1.0]]), Err(GraphError::ShapeMismatch(_))));
        assert!(matches!(g.reverse_vjp(&[&[1.0, 1.0], &[1.0, 1.0]], &[1.0]), Err(GraphError::ShapeMismatch(_))));
    }

    #[test]
    fn domain_errors_instead_of_nan() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 1);
        let l = b.log(x);
        let g = b.finish(l).unwrap();
        assert!(matches!(g.forward_eval(&[&[0.0]]), Err(GraphError::DomainError { .. })));

        let mut b = GraphBuilder::new();
        let x = b.input("x", 1);
        let p = b.pow(x, -2.0);
        let g = b.finish(p).unwrap();
        assert!(matches!(g.forward_eval(&[&[-1.0]]), Err(GraphError::DomainError { .. })));
        assert_relative_eq!(g.forward_eval(&[&[2.0]]).unwrap()[0], 0.25);

        let mut b = GraphBuilder::new();
        let x = b.input("x", 1);
        let r = b.recip(x);
        let g = b.finish(r).unwrap();
        assert!(matches!(g.forward_eval(&[&[0.0]]), Err(GraphError::DomainError { .. })));
    }

    #[test]
    fn malformed_graphs_are_rejected() {
        let slots = vec![SlotDecl { name: "x".into(), dim: 2 }];
        let forward_ref = vec![Op::Input { slot: 0 }, Op::Neg { a: 2 }, Op::Neg { a: 0 }];
        assert!(matches!(ExprGraph::new(slots.clone(), forward_ref, 1), Err(GraphError::Malformed(_))));
        let bad_shape = vec![Op::Input { slot: 0 }, Op::Const { value: vec![1.0] }, Op::Add { a: 0, b: 1 }];
        assert!(matches!(ExprGraph::new(slots, bad_shape, 2), Err(GraphError::ShapeMismatch(_))));
    }

    #[test]
    fn splice_composes_graphs() {
        let inner = affine(&[0.5, 0.0, 0.0, 2.0]);
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        let shift = b.constant(vec![1.0, -1.0]);
        let y = b.splice(&inner, &[x, shift]);
        let out = b.exp(y);
        let g = b.finish(out).unwrap();
        let v = g.forward_eval(&[&[2.0, 1.0]]).unwrap();
        assert_relative_eq!(v[0], (2.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(v[1], (1.0f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = affine(&[0.1, 0.2, 0.3, std::f64::consts::PI]);
        let text = serde_json::to_string(&g).unwrap();
        let back: ExprGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
    }
}
