//! Reverse-mode differentiation over a fixed operation graph.
//!
//! Nodes are appended in topological order by the builder methods; forward
//! walks them in order, backward in reverse. Batch size is whatever the
//! bound inputs carry; feature widths are fixed at build time.

use std::collections::HashMap;

use crate::diffcore::tensor::{
    affine, affine_backward_x, bce_with_logits, log_softmax_rows, relu, sigmoid, sigmoid_scalar,
    softmax_rows, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    RowSum { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId, c: f64 },
    BceWithLogits { logits: NodeId, targets: NodeId },
}

struct Node {
    op: Op,
    name: String,
    cols: usize,
    out: Tensor,
    grad: Tensor,
    bound: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, NodeId>,
    params: Vec<NodeId>,
    forwarded: bool,
    backwarded: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            by_name: HashMap::new(),
            params: Vec::new(),
            forwarded: false,
            backwarded: false,
        }
    }

    fn push(&mut self, op: Op, name: String, cols: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            name,
            cols,
            out: Tensor::zeros(1, 1),
            grad: Tensor::zeros(1, 1),
            bound: false,
        });
        id
    }

    fn auto_name(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Declare a named input with a fixed column width; rows are set by
    /// `bind` before each forward.
    pub fn input(&mut self, name: &str, cols: usize) -> NodeId {
        let id = self.push(Op::Input, name.to_string(), cols);
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let cols = value.cols();
        let id = self.push(Op::Param, name.to_string(), cols);
        self.nodes[id.0].out = value;
        self.nodes[id.0].bound = true;
        self.by_name.insert(name.to_string(), id);
        self.params.push(id);
        id
    }

    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::GraphProtocol(format!("no input named `{name}`")))?;
        self.bind_id(id, value)
    }

    pub fn bind_id(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(Error::GraphProtocol(format!(
                "`{}` is not an input node",
                node.name
            )));
        }
        if value.cols() != node.cols {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("expected {} columns, got {}", node.cols, value.cols()),
            });
        }
        node.out = value;
        node.bound = true;
        self.forwarded = false;
        Ok(())
    }

    // ── Builders ─────────────────────────────────────────────────────

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (din, dout) = (self.nodes[w.0].out.rows(), self.nodes[w.0].out.cols());
        if self.nodes[x.0].cols != din || self.nodes[b.0].cols != dout {
            return Err(Error::ShapeMismatch {
                node: self.auto_name("affine"),
                detail: format!(
                    "x cols {} vs w [{din},{dout}], b cols {}",
                    self.nodes[x.0].cols, self.nodes[b.0].cols
                ),
            });
        }
        let name = self.auto_name("affine");
        Ok(self.push(Op::Affine { x, w, b }, name, dout))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let cols = self.nodes[x.0].cols;
        let name = self.auto_name("relu");
        self.push(Op::Relu { x }, name, cols)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let cols = self.nodes[x.0].cols;
        let name = self.auto_name("sigmoid");
        self.push(Op::Sigmoid { x }, name, cols)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let cols = self.nodes[x.0].cols;
        let name = self.auto_name("softmax");
        self.push(Op::Softmax { x }, name, cols)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let cols = self.nodes[x.0].cols;
        let name = self.auto_name("log_softmax");
        self.push(Op::LogSoftmax { x }, name, cols)
    }

    fn binary(&mut self, kind: &str, a: NodeId, b: NodeId) -> Result<(String, usize)> {
        let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
        if ca != cb && ca != 1 && cb != 1 {
            return Err(Error::ShapeMismatch {
                node: self.auto_name(kind),
                detail: format!("column widths {ca} and {cb} do not broadcast"),
            });
        }
        Ok((self.auto_name(kind), ca.max(cb)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (name, cols) = self.binary("mul", a, b)?;
        Ok(self.push(Op::Mul { a, b }, name, cols))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (name, cols) = self.binary("add", a, b)?;
        Ok(self.push(Op::Add { a, b }, name, cols))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (name, cols) = self.binary("sub", a, b)?;
        Ok(self.push(Op::Sub { a, b }, name, cols))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (name, cols) = self.binary("div", a, b)?;
        Ok(self.push(Op::Div { a, b }, name, cols))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let cols = self.nodes[a.0].cols + self.nodes[b.0].cols;
        let name = self.auto_name("concat");
        self.push(Op::Concat { a, b }, name, cols)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("row_sum");
        self.push(Op::RowSum { x }, name, 1)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("sum_all");
        self.push(Op::SumAll { x }, name, 1)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let name = self.auto_name("mean_all");
        self.push(Op::MeanAll { x }, name, 1)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cols = self.nodes[x.0].cols;
        let name = self.auto_name("scale");
        self.push(Op::Scale { x, c }, name, cols)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let cols = self.nodes[x.0].cols;
        let name = self.auto_name("add_scalar");
        self.push(Op::AddScalar { x, c }, name, cols)
    }

    /// Per-element stable BCE-with-logits; targets carry no gradient.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        if self.nodes[logits.0].cols != self.nodes[targets.0].cols {
            return Err(Error::ShapeMismatch {
                node: self.auto_name("bce"),
                detail: "logit and target widths differ".into(),
            });
        }
        let cols = self.nodes[logits.0].cols;
        let name = self.auto_name("bce");
        Ok(self.push(Op::BceWithLogits { logits, targets }, name, cols))
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn rename(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].name = name.to_string();
        self.by_name.insert(name.to_string(), id);
    }

    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn grad(&self, id: NodeId) -> Result<&Tensor> {
        if !self.backwarded {
            return Err(Error::GraphProtocol(
                "gradients requested before backward".into(),
            ));
        }
        Ok(&self.nodes[id.0].grad)
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn param_tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn param_data_mut(&mut self, id: NodeId) -> &mut Vec<f64> {
        self.forwarded = false;
        &mut self.nodes[id.0].out.data
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Concatenated activation signs of every ReLU input, in node order.
    /// Used by the gradient checker to detect kink crossings.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                sig.extend(self.nodes[x.0].out.data.iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    // ── Execution ────────────────────────────────────────────────────

    pub fn forward(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            self.eval_node(idx)?;
            let node = &self.nodes[idx];
            if !node.out.is_finite() {
                return Err(Error::NonFinite {
                    node: node.name.clone(),
                    detail: "forward output contains NaN or Inf".into(),
                });
            }
        }
        self.forwarded = true;
        self.backwarded = false;
        Ok(())
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.forwarded {
            return Err(Error::GraphProtocol("backward before forward".into()));
        }
        if self.backwarded {
            return Err(Error::GraphProtocol(
                "repeated backward without re-running forward".into(),
            ));
        }
        if self.nodes[loss.0].out.numel() != 1 {
            return Err(Error::GraphProtocol(format!(
                "loss node `{}` is not scalar",
                self.nodes[loss.0].name
            )));
        }
        for node in &mut self.nodes {
            let (r, c) = (node.out.rows(), node.out.cols());
            if node.grad.rows() != r || node.grad.cols() != c {
                node.grad = Tensor::zeros(r, c);
            } else {
                node.grad.fill(0.0);
            }
        }
        self.nodes[loss.0].grad.data[0] = 1.0;
        for idx in (0..self.nodes.len()).rev() {
            self.backprop_node(idx)?;
        }
        for &p in &self.params {
            if !self.nodes[p.0].grad.is_finite() {
                return Err(Error::NonFinite {
                    node: self.nodes[p.0].name.clone(),
                    detail: "parameter gradient contains NaN or Inf".into(),
                });
            }
        }
        self.backwarded = true;
        Ok(())
    }

    fn out_shape(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id.0].out;
        (t.rows(), t.cols())
    }

    fn ensure_out(&mut self, idx: usize, rows: usize, cols: usize) {
        let node = &mut self.nodes[idx];
        if node.out.rows() != rows || node.out.cols() != cols {
            node.out = Tensor::zeros(rows, cols);
        }
    }

    fn broadcast_shape(
        &self,
        name: &str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (ra, ca) = self.out_shape(a);
        let (rb, cb) = self.out_shape(b);
        let rows_ok = ra == rb || ra == 1 || rb == 1;
        let cols_ok = ca == cb || ca == 1 || cb == 1;
        if !rows_ok || !cols_ok {
            return Err(Error::ShapeMismatch {
                node: name.to_string(),
                detail: format!("[{ra},{ca}] and [{rb},{cb}] do not broadcast"),
            });
        }
        Ok((ra, ca, rb, cb, ra.max(rb), ca.max(cb)))
    }

    fn eval_node(&mut self, idx: usize) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Input => {
                if !self.nodes[idx].bound {
                    return Err(Error::GraphProtocol(format!(
                        "input `{}` not bound before forward",
                        self.nodes[idx].name
                    )));
                }
            }
            Op::Param => {}
            Op::Affine { x, w, b } => {
                let rows = self.out_shape(x).0;
                let din = self.out_shape(w).0;
                let dout = self.out_shape(w).1;
                if self.out_shape(x).1 != din {
                    return Err(Error::ShapeMismatch {
                        node: self.nodes[idx].name.clone(),
                        detail: format!(
                            "input width {} does not match weight rows {din}",
                            self.out_shape(x).1
                        ),
                    });
                }
                self.ensure_out(idx, rows, dout);
                let (head, tail) = self.nodes.split_at_mut(idx);
                affine(&head[x.0].out, &head[w.0].out, &head[b.0].out, &mut tail[0].out);
            }
            Op::Relu { x } => {
                let (r, c) = self.out_shape(x);
                self.ensure_out(idx, r, c);
                let (head, tail) = self.nodes.split_at_mut(idx);
                relu(&head[x.0].out.data, &mut tail[0].out.data);
            }
            Op::Sigmoid { x } => {
                let (r, c) = self.out_shape(x);
                self.ensure_out(idx, r, c);
                let (head, tail) = self.nodes.split_at_mut(idx);
                sigmoid(&head[x.0].out.data, &mut tail[0].out.data);
            }
            Op::Softmax { x } => {
                let (r, c) = self.out_shape(x);
                self.ensure_out(idx, r, c);
                let (head, tail) = self.nodes.split_at_mut(idx);
                softmax_rows(&head[x.0].out, &mut tail[0].out);
            }
            Op::LogSoftmax { x } => {
                let (r, c) = self.out_shape(x);
                self.ensure_out(idx, r, c);
                let (head, tail) = self.nodes.split_at_mut(idx);
                log_softmax_rows(&head[x.0].out, &mut tail[0].out);
            }
            Op::Mul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Div { a, b } => {
                let name = self.nodes[idx].name.clone();
                let (ra, ca, rb, cb, ro, co) = self.broadcast_shape(&name, a, b)?;
                self.ensure_out(idx, ro, co);
                let (head, tail) = self.nodes.split_at_mut(idx);
                let (ta, tb) = (&head[a.0].out, &head[b.0].out);
                let out = &mut tail[0].out;
                for i in 0..ro {
                    for j in 0..co {
                        let av = ta.data[(if ra == 1 { 0 } else { i }) * ca
                            + if ca == 1 { 0 } else { j }];
                        let bv = tb.data[(if rb == 1 { 0 } else { i }) * cb
                            + if cb == 1 { 0 } else { j }];
                        out.data[i * co + j] = match op {
                            Op::Mul { .. } => av * bv,
                            Op::Add { .. } => av + bv,
                            Op::Sub { .. } => av - bv,
                            Op::Div { .. } => av / bv,
                            _ => unreachable!(),
                        };
                    }
                }
            }
            Op::Concat { a, b } => {
                let (ra, ca) = self.out_shape(a);
                let (rb, cb) = self.out_shape(b);
                if ra != rb {
                    return Err(Error::ShapeMismatch {
                        node: self.nodes[idx].name.clone(),
                        detail: format!("concat row counts differ: {ra} vs {rb}"),
                    });
                }
                self.ensure_out(idx, ra, ca + cb);
                let (head, tail) = self.nodes.split_at_mut(idx);
                let out = &mut tail[0].out;
                for i in 0..ra {
                    out.data[i * (ca + cb)..i * (ca + cb) + ca]
                        .copy_from_slice(head[a.0].out.row(i));
                    out.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                        .copy_from_slice(head[b.0].out.row(i));
                }
            }
            Op::RowSum { x } => {
                let (r, c) = self.out_shape(x);
                self.ensure_out(idx, r, 1);
                let (head, tail) = self.nodes.split_at_mut(idx);
                for i in 0..r {
                    tail[0].out.data[i] = head[x.0].out.data[i * c..(i + 1) * c].iter().sum();
                }
            }
            Op::SumAll { x } => {
                self.ensure_out(idx, 1, 1);
                let (head, tail) = self.nodes.split_at_mut(idx);
                tail[0].out.data[0] = head[x.0].out.data.iter().sum();
            }
            Op::MeanAll { x } => {
                self.ensure_out(idx, 1, 1);
                let (head, tail) = self.nodes.split_at_mut(idx);
                let n = head[x.0].out.numel() as f64;
                tail[0].out.data[0] = head[x.0].out.data.iter().sum::<f64>() / n;
            }
            Op::Scale { x, c } => {
                let (r, co) = self.out_shape(x);
                self.ensure_out(idx, r, co);
                let (head, tail) = self.nodes.split_at_mut(idx);
                for (o, &v) in tail[0].out.data.iter_mut().zip(&head[x.0].out.data) {
                    *o = c * v;
                }
            }
            Op::AddScalar { x, c } => {
                let (r, co) = self.out_shape(x);
                self.ensure_out(idx, r, co);
                let (head, tail) = self.nodes.split_at_mut(idx);
                for (o, &v) in tail[0].out.data.iter_mut().zip(&head[x.0].out.data) {
                    *o = v + c;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let (r, c) = self.out_shape(logits);
                if self.out_shape(targets) != (r, c) {
                    return Err(Error::ShapeMismatch {
                        node: self.nodes[idx].name.clone(),
                        detail: "logit and target shapes differ".into(),
                    });
                }
                self.ensure_out(idx, r, c);
                let (head, tail) = self.nodes.split_at_mut(idx);
                bce_with_logits(
                    &head[logits.0].out.data,
                    &head[targets.0].out.data,
                    &mut tail[0].out.data,
                );
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Input | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let dy = &tail[0].grad;
                // Split param/input grads out of `head` one at a time to
                // satisfy the borrow checker without cloning tensors.
                {
                    let (xs, ws) = if x.0 < w.0 {
                        let (lo, hi) = head.split_at_mut(w.0);
                        (&mut lo[x.0], &mut hi[0])
                    } else {
                        let (lo, hi) = head.split_at_mut(x.0);
                        (&mut hi[0], &mut lo[w.0])
                    };
                    affine_backward_x(dy, &ws.out, &mut xs.grad);
                    affine_backward_params_w(&xs.out, dy, &mut ws.grad);
                }
                let mut db = std::mem::replace(&mut head[b.0].grad, Tensor::zeros(1, 1));
                for i in 0..dy.rows() {
                    for (d, &g) in db.data.iter_mut().zip(dy.row(i)) {
                        *d += g;
                    }
                }
                head[b.0].grad = db;
            }
            Op::Relu { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                for ((g, &xv), &d) in head[x.0]
                    .grad
                    .data
                    .iter_mut()
                    .zip(&head[x.0].out.data)
                    .zip(&tail[0].grad.data)
                {
                    if xv > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                for ((g, &s), &d) in head[x.0]
                    .grad
                    .data
                    .iter_mut()
                    .zip(&tail[0].out.data)
                    .zip(&tail[0].grad.data)
                {
                    *g += d * s * (1.0 - s);
                }
            }
            Op::Softmax { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let (s, d) = (&tail[0].out, &tail[0].grad);
                let (r, c) = (s.rows(), s.cols());
                for i in 0..r {
                    let srow = s.row(i);
                    let drow = d.row(i);
                    let dot: f64 = srow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                    let grow = &mut head[x.0].grad.data[i * c..(i + 1) * c];
                    for j in 0..c {
                        grow[j] += srow[j] * (drow[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let (ls, d) = (&tail[0].out, &tail[0].grad);
                let (r, c) = (ls.rows(), ls.cols());
                for i in 0..r {
                    let dsum: f64 = d.row(i).iter().sum();
                    let grow = &mut head[x.0].grad.data[i * c..(i + 1) * c];
                    for j in 0..c {
                        grow[j] += d.at(i, j) - ls.at(i, j).exp() * dsum;
                    }
                }
            }
            Op::Mul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Div { a, b } => {
                let name = self.nodes[idx].name.clone();
                let (ra, ca, rb, cb, ro, co) = self.broadcast_shape(&name, a, b)?;
                for i in 0..ro {
                    for j in 0..co {
                        let ai = (if ra == 1 { 0 } else { i }) * ca + if ca == 1 { 0 } else { j };
                        let bi = (if rb == 1 { 0 } else { i }) * cb + if cb == 1 { 0 } else { j };
                        let d = self.nodes[idx].grad.data[i * co + j];
                        match op {
                            Op::Mul { .. } => {
                                let av = self.nodes[a.0].out.data[ai];
                                let bv = self.nodes[b.0].out.data[bi];
                                self.nodes[a.0].grad.data[ai] += d * bv;
                                self.nodes[b.0].grad.data[bi] += d * av;
                            }
                            Op::Add { .. } => {
                                self.nodes[a.0].grad.data[ai] += d;
                                self.nodes[b.0].grad.data[bi] += d;
                            }
                            Op::Sub { .. } => {
                                self.nodes[a.0].grad.data[ai] += d;
                                self.nodes[b.0].grad.data[bi] -= d;
                            }
                            Op::Div { .. } => {
                                let av = self.nodes[a.0].out.data[ai];
                                let bv = self.nodes[b.0].out.data[bi];
                                self.nodes[a.0].grad.data[ai] += d / bv;
                                self.nodes[b.0].grad.data[bi] -= d * av / (bv * bv);
                            }
                            _ => unreachable!(),
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = self.out_shape(a).1;
                let (head, tail) = self.nodes.split_at_mut(idx);
                let d = &tail[0].grad;
                let (r, ctot) = (d.rows(), d.cols());
                let cb = ctot - ca;
                let (ga, gb) = if a.0 < b.0 {
                    let (lo, hi) = head.split_at_mut(b.0);
                    (&mut lo[a.0].grad, &mut hi[0].grad)
                } else {
                    let (lo, hi) = head.split_at_mut(a.0);
                    (&mut hi[0].grad, &mut lo[b.0].grad)
                };
                for i in 0..r {
                    for j in 0..ca {
                        ga.data[i * ca + j] += d.data[i * ctot + j];
                    }
                    for j in 0..cb {
                        gb.data[i * cb + j] += d.data[i * ctot + ca + j];
                    }
                }
            }
            Op::RowSum { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let c = head[x.0].out.cols();
                for i in 0..head[x.0].out.rows() {
                    let d = tail[0].grad.data[i];
                    for g in &mut head[x.0].grad.data[i * c..(i + 1) * c] {
                        *g += d;
                    }
                }
            }
            Op::SumAll { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let d = tail[0].grad.data[0];
                for g in &mut head[x.0].grad.data {
                    *g += d;
                }
            }
            Op::MeanAll { x } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let d = tail[0].grad.data[0] / head[x.0].out.numel() as f64;
                for g in &mut head[x.0].grad.data {
                    *g += d;
                }
            }
            Op::Scale { x, c } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                for (g, &d) in head[x.0].grad.data.iter_mut().zip(&tail[0].grad.data) {
                    *g += c * d;
                }
            }
            Op::AddScalar { x, .. } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                for (g, &d) in head[x.0].grad.data.iter_mut().zip(&tail[0].grad.data) {
                    *g += d;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let (head, tail) = self.nodes.split_at_mut(idx);
                let (lg, tg) = if logits.0 < targets.0 {
                    let (lo, hi) = head.split_at_mut(targets.0);
                    (&mut lo[logits.0], &hi[0])
                } else {
                    let (lo, hi) = head.split_at_mut(logits.0);
                    (&mut hi[0], &lo[targets.0])
                };
                for ((g, &z), (&y, &d)) in lg
                    .grad
                    .data
                    .iter_mut()
                    .zip(&lg.out.data)
                    .zip(tg.out.data.iter().zip(&tail[0].grad.data))
                {
                    *g += d * (sigmoid_scalar(z) - y);
                }
            }
        }
        Ok(())
    }
}

/// dw += x^T @ dy, free-function form used where node borrows are split.
fn affine_backward_params_w(x: &Tensor, dy: &Tensor, dw: &mut Tensor) {
    let (n, din, dout) = (x.rows(), x.cols(), dy.cols());
    for i in 0..n {
        let xrow = &x.data[i * din..(i + 1) * din];
        let dyrow = &dy.data[i * dout..(i + 1) * dout];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let dwrow = &mut dw.data[k * dout..(k + 1) * dout];
            for (d, &g) in dwrow.iter_mut().zip(dyrow) {
                *d += xv * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_affine_identity() {
        let mut g = Graph::new();
        let x = g.input("x", 2);
        let w = g.param("w", Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.param("b", Tensor::from_rows(1, 2, vec![0.0, 0.0]).unwrap());
        let y = g.affine(x, w, b).unwrap();
        g.bind("x", Tensor::from_rows(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.output(y).data, vec![1.0, 0.0]);
    }

    #[test]
    fn backward_linear_gradient_is_input() {
        // loss = w * x with x = 3, w = 2  =>  dloss/dw = 3
        let mut g = Graph::new();
        let x = g.input("x", 1);
        let w = g.param("w", Tensor::scalar(2.0));
        let prod = g.mul(x, w).unwrap();
        let loss = g.sum_all(prod);
        g.bind("x", Tensor::scalar(3.0)).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data[0], 3.0);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let loss = g.sum_all(s);
        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(z).unwrap().data[0], 0.25);
    }

    #[test]
    fn backward_requires_forward_and_no_double_call() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::scalar(1.0));
        let loss = g.sum_all(z);
        assert!(matches!(g.backward(loss), Err(Error::GraphProtocol(_))));
        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphProtocol(_))));
        g.forward().unwrap();
        g.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::from_rows(1, 2, vec![1.0, 2.0]).unwrap());
        g.forward().unwrap();
        assert!(matches!(g.backward(z), Err(Error::GraphProtocol(_))));
    }

    #[test]
    fn unbound_input_is_an_error_naming_the_node() {
        let mut g = Graph::new();
        g.input("features", 4);
        let err = g.forward().unwrap_err();
        assert!(err.to_string().contains("features"));
    }

    #[test]
    fn non_finite_forward_names_node() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(1.0));
        let b = g.param("zero", Tensor::scalar(0.0));
        let d = g.div(a, b).unwrap();
        g.rename(d, "bad_div");
        let err = g.forward().unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(err.to_string().contains("bad_div"));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input("x", 3);
        let s = g.softmax(x);
        g.bind("x", Tensor::from_rows(2, 3, vec![1.0, -2.0, 0.3, 5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        g.forward().unwrap();
        for i in 0..2 {
            let sum: f64 = g.output(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((g.output(s).at(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }
}
