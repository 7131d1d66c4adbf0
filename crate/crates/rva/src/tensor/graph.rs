//! Tape of operations with per-op backward rules.
//!
//! A `Graph` is built during one forward pass (define-by-run) and is
//! confined to one thread. Nodes are appended in topological order, so
//! the backward pass is a single reverse sweep over the tape. There is
//! no broadcasting: every shape alignment is explicit.

use super::{Precision, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { m: NodeId, v: NodeId },
    MatMul { a: NodeId, b: NodeId },
    VecMat { v: NodeId, m: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    ScaleBy { x: NodeId, s: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Softmax { x: NodeId },
    L2Normalize { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    StackRows { rows: Vec<NodeId> },
    StackScalars { parts: Vec<NodeId> },
    Index { x: NodeId, i: usize },
    Slice { x: NodeId, start: usize, len: usize },
    EmbeddingRows { table: NodeId, indices: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<f64> },
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    /// Parameter leaves registered by name, for gradient collection.
    param_nodes: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            grads: Vec::new(),
            backward_done: false,
            param_nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.param_nodes
    }

    fn push(&mut self, op: &'static str, value: Tensor, rule: Op, needs_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: rule,
            needs_grad,
        });
        Ok(id)
    }

    fn rounded(&self, mut data: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        data
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(x))
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    /// A named parameter leaf; its gradient is collected after backward.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId> {
        let id = self.push("param", t, Op::Leaf, true)?;
        self.param_nodes.push((name.to_string(), id));
        Ok(id)
    }

    // ---- shape helpers ----------------------------------------------

    fn want_vector(&self, op: &'static str, x: NodeId) -> Result<usize> {
        let s = self.shape(x);
        if s.len() == 1 {
            Ok(s[0])
        } else {
            Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected a vector".into(),
            })
        }
    }

    fn want_matrix(&self, op: &'static str, x: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected a matrix".into(),
            })
        }
    }

    fn want_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- ops ---------------------------------------------------------

    /// [r, c] x [c] -> [r]
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.want_matrix("matvec", m)?;
        let n = self.want_vector("matvec", v)?;
        if c != n {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let md = &self.nodes[m.0].value.data;
        let vd = &self.nodes[v.0].value.data;
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &md[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                acc += row[j] * vd[j];
            }
            out[i] = acc;
        }
        let out = self.rounded(out);
        let ng = self.needs(&[m, v]);
        self.push("matvec", Tensor::vector(out), Op::MatVec { m, v }, ng)
    }

    /// [r, c] x [c, k] -> [r, k]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.want_matrix("matmul", a)?;
        let (c2, k) = self.want_matrix("matmul", b)?;
        if c != c2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for l in 0..c {
                let x = ad[i * c + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[l * k..(l + 1) * k];
                let orow = &mut out[i * k..(i + 1) * k];
                for j in 0..k {
                    orow[j] += x * brow[j];
                }
            }
        }
        let out = self.rounded(out);
        let ng = self.needs(&[a, b]);
        self.push("matmul", Tensor::new(vec![r, k], out)?, Op::MatMul { a, b }, ng)
    }

    /// [r] x [r, c] -> [c]; the attention-weighted row sum.
    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let n = self.want_vector("vecmat", v)?;
        let (r, c) = self.want_matrix("vecmat", m)?;
        if n != r {
            return Err(TensorError::ShapeMismatch {
                op: "vecmat",
                lhs: self.shape(v).to_vec(),
                rhs: self.shape(m).to_vec(),
            });
        }
        let vd = &self.nodes[v.0].value.data;
        let md = &self.nodes[m.0].value.data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            let w = vd[i];
            if w == 0.0 {
                continue;
            }
            let row = &md[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += w * row[j];
            }
        }
        let out = self.rounded(out);
        let ng = self.needs(&[v, m]);
        self.push("vecmat", Tensor::vector(out), Op::VecMat { v, m }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let out = self.rounded(out);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let out = self.rounded(out);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        self.push("sub", Tensor::new(shape, out)?, Op::Sub { a, b }, ng)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same("hadamard", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let out = self.rounded(out);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        self.push("hadamard", Tensor::new(shape, out)?, Op::Hadamard { a, b }, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let out = self.rounded(out);
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, c }, ng)
    }

    /// Multiply a tensor by a scalar node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != [1] {
            return Err(TensorError::InvalidShape {
                op: "scale_by",
                shape: self.shape(s).to_vec(),
                reason: "scale factor must be a scalar".into(),
            });
        }
        let sv = self.nodes[s.0].value.data[0];
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * sv).collect();
        let out = self.rounded(out);
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x, s]);
        self.push("scale_by", Tensor::new(shape, out)?, Op::ScaleBy { x, s }, ng)
    }

    fn unary<F: Fn(f64) -> f64>(
        &mut self,
        op: &'static str,
        x: NodeId,
        f: F,
        rule: Op,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| f(v)).collect();
        let out = self.rounded(out);
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        self.push(op, Tensor::new(shape, out)?, rule, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, f64::ln, Op::Log { x })
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_vector("softmax", x)?;
        let xd = &self.nodes[x.0].value.data;
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xd.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = self.rounded(exps.iter().map(|e| e / z).collect());
        let ng = self.needs(&[x]);
        self.push("softmax", Tensor::vector(out), Op::Softmax { x }, ng)
    }

    /// L2 normalization of a vector; the zero vector maps to itself.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_vector("l2_normalize", x)?;
        let xd = &self.nodes[x.0].value.data;
        let norm = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = if norm == 0.0 {
            xd.clone()
        } else {
            self.rounded(xd.iter().map(|v| v / norm).collect())
        };
        let ng = self.needs(&[x]);
        self.push("l2_normalize", Tensor::vector(out), Op::L2Normalize { x }, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let s = self.precision.round(s);
        let ng = self.needs(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.len() as f64;
        let s: f64 = self.nodes[x.0].value.data.iter().sum::<f64>() / n;
        let s = self.precision.round(s);
        let ng = self.needs(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, ng)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same("dot", a, b)?;
        let s: f64 = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .sum();
        let s = self.precision.round(s);
        let ng = self.needs(&[a, b]);
        self.push("dot", Tensor::scalar(s), Op::Dot { a, b }, ng)
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            self.want_vector("concat", p)?;
            out.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let ng = self.needs(parts);
        self.push(
            "concat",
            Tensor::vector(out),
            Op::Concat { parts: parts.to_vec() },
            ng,
        )
    }

    /// Stack equal-length vectors as rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack_rows",
                reason: "no rows".into(),
            });
        }
        let c = self.want_vector("stack_rows", rows[0])?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.want_vector("stack_rows", r)? != c {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: self.shape(r).to_vec(),
                });
            }
            out.extend_from_slice(&self.nodes[r.0].value.data);
        }
        let ng = self.needs(rows);
        self.push(
            "stack_rows",
            Tensor::new(vec![rows.len(), c], out)?,
            Op::StackRows { rows: rows.to_vec() },
            ng,
        )
    }

    /// Collect scalar nodes into a vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack_scalars",
                reason: "no inputs".into(),
            });
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p) != [1] {
                return Err(TensorError::InvalidShape {
                    op: "stack_scalars",
                    shape: self.shape(p).to_vec(),
                    reason: "expected scalars".into(),
                });
            }
            out.push(self.nodes[p.0].value.data[0]);
        }
        let ng = self.needs(parts);
        self.push(
            "stack_scalars",
            Tensor::vector(out),
            Op::StackScalars { parts: parts.to_vec() },
            ng,
        )
    }

    /// Extract one element of a vector as a scalar node.
    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let n = self.want_vector("index", x)?;
        if i >= n {
            return Err(TensorError::IndexOutOfBounds {
                op: "index",
                index: i,
                extent: n,
            });
        }
        let v = self.nodes[x.0].value.data[i];
        let ng = self.needs(&[x]);
        self.push("index", Tensor::scalar(v), Op::Index { x, i }, ng)
    }

    /// Contiguous slice of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.want_vector("slice", x)?;
        if start + len > n || len == 0 {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                extent: n,
            });
        }
        let out = self.nodes[x.0].value.data[start..start + len].to_vec();
        let ng = self.needs(&[x]);
        self.push("slice", Tensor::vector(out), Op::Slice { x, start, len }, ng)
    }

    /// Gather rows of an embedding table: [V, d] + indices -> [n, d].
    pub fn embedding_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = self.want_matrix("embedding_lookup", table)?;
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                reason: "no indices".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding_lookup",
                    index: i,
                    extent: v,
                });
            }
            out.extend_from_slice(&self.nodes[table.0].value.data[i * d..(i + 1) * d]);
        }
        let ng = self.needs(&[table]);
        self.push(
            "embedding_lookup",
            Tensor::new(vec![indices.len(), d], out)?,
            Op::EmbeddingRows { table, indices: indices.to_vec() },
            ng,
        )
    }

    /// One row of a matrix as a vector (non-differentiable index set).
    pub fn row(&mut self, m: NodeId, i: usize) -> Result<NodeId> {
        let (r, c) = self.want_matrix("row", m)?;
        if i >= r {
            return Err(TensorError::IndexOutOfBounds {
                op: "row",
                index: i,
                extent: r,
            });
        }
        let flat = self.flatten(m)?;
        self.slice(flat, i * c, c)
    }

    /// Reinterpret as a flat vector (no data movement in value terms).
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.len();
        if self.shape(x).len() == 1 {
            return Ok(x);
        }
        let out = self.nodes[x.0].value.data.clone();
        let ng = self.needs(&[x]);
        // slice over the full extent doubles as an identity with reshape
        self.push(
            "flatten",
            Tensor::vector(out),
            Op::Slice { x, start: 0, len: n },
            ng,
        )
    }

    /// Inverted dropout: keeps with probability 1 - rate and scales by
    /// 1/(1 - rate); identity when `train` is false or rate is 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut super::Rng, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                reason: format!("rate {rate} outside [0,1)"),
            });
        }
        if !train || rate == 0.0 {
            return self.scale(x, 1.0);
        }
        let keep = 1.0 - rate;
        let inv = self.precision.round(1.0 / keep);
        let mask: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|_| if rng.uniform() < keep { inv } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = self.rounded(out);
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x, mask }, ng)
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.nodes[x.0].value.clone();
        let _ = x;
        self.push("stop_gradient", t, Op::StopGrad, false)
    }

    // ---- backward ----------------------------------------------------

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::RepeatedBackward);
        }
        if self.shape(loss) != [1] {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        if self.precision == Precision::F32 {
            for g in grads.iter_mut().flatten() {
                for x in g.iter_mut() {
                    *x = *x as f32 as f64;
                }
            }
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Result<&Tensor> {
        self.grads
            .get(id.0)
            .and_then(|g| g.as_ref())
            .ok_or(TensorError::NoGradient)
    }

    fn accum(grads: &mut [Option<Vec<f64>>], node: &Node, id: NodeId, update: &[f64]) {
        if !node.needs_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (s, u) in slot.iter_mut().zip(update) {
            *s += u;
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec { m, v } => {
                let (r, c) = (self.nodes[m.0].value.shape[0], self.nodes[m.0].value.shape[1]);
                if self.nodes[m.0].needs_grad {
                    let vd = val(*v);
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &mut gm[i * c..(i + 1) * c];
                        for j in 0..c {
                            row[j] = gi * vd[j];
                        }
                    }
                    Self::accum(grads, &self.nodes[m.0], *m, &gm);
                }
                if self.nodes[v.0].needs_grad {
                    let md = val(*m);
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &md[i * c..(i + 1) * c];
                        for j in 0..c {
                            gv[j] += gi * row[j];
                        }
                    }
                    Self::accum(grads, &self.nodes[v.0], *v, &gv);
                }
            }
            Op::MatMul { a, b } => {
                let (r, c) = (self.nodes[a.0].value.shape[0], self.nodes[a.0].value.shape[1]);
                let k = self.nodes[b.0].value.shape[1];
                if self.nodes[a.0].needs_grad {
                    let bd = val(*b);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for l in 0..c {
                            let brow = &bd[l * k..(l + 1) * k];
                            let grow = &g[i * k..(i + 1) * k];
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * c + l] = acc;
                        }
                    }
                    Self::accum(grads, &self.nodes[a.0], *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = val(*a);
                    let mut gb = vec![0.0; c * k];
                    for i in 0..r {
                        let grow = &g[i * k..(i + 1) * k];
                        for l in 0..c {
                            let x = ad[i * c + l];
                            if x == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[l * k..(l + 1) * k];
                            for j in 0..k {
                                brow[j] += x * grow[j];
                            }
                        }
                    }
                    Self::accum(grads, &self.nodes[b.0], *b, &gb);
                }
            }
            Op::VecMat { v, m } => {
                let (r, c) = (self.nodes[m.0].value.shape[0], self.nodes[m.0].value.shape[1]);
                if self.nodes[v.0].needs_grad {
                    let md = val(*m);
                    let mut gv = vec![0.0; r];
                    for i in 0..r {
                        let row = &md[i * c..(i + 1) * c];
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[j] * row[j];
                        }
                        gv[i] = acc;
                    }
                    Self::accum(grads, &self.nodes[v.0], *v, &gv);
                }
                if self.nodes[m.0].needs_grad {
                    let vd = val(*v);
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        let w = vd[i];
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut gm[i * c..(i + 1) * c];
                        for j in 0..c {
                            row[j] = w * g[j];
                        }
                    }
                    Self::accum(grads, &self.nodes[m.0], *m, &gm);
                }
            }
            Op::Add { a, b } => {
                Self::accum(grads, &self.nodes[a.0], *a, g);
                Self::accum(grads, &self.nodes[b.0], *b, g);
            }
            Op::Sub { a, b } => {
                Self::accum(grads, &self.nodes[a.0], *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                Self::accum(grads, &self.nodes[b.0], *b, &neg);
            }
            Op::Hadamard { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let gb: Vec<f64> = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    Self::accum(grads, &self.nodes[a.0], *a, &gb);
                }
                if self.nodes[b.0].needs_grad {
                    let ga: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    Self::accum(grads, &self.nodes[b.0], *b, &ga);
                }
            }
            Op::Scale { x, c } => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                if self.nodes[x.0].needs_grad {
                    let gx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    Self::accum(grads, &self.nodes[x.0], *x, &gx);
                }
                if self.nodes[s.0].needs_grad {
                    let gs: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                    Self::accum(grads, &self.nodes[s.0], *s, &[gs]);
                }
            }
            Op::Tanh { x } => {
                let y = &node.value.data;
                let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value.data;
                let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::Exp { x } => {
                let y = &node.value.data;
                let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::Log { x } => {
                let xd = val(*x);
                let gx: Vec<f64> = g.iter().zip(xd).map(|(gi, xi)| gi / xi).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::Softmax { x } => {
                let y = &node.value.data;
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::L2Normalize { x } => {
                let xd = val(*x);
                let norm = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    Self::accum(grads, &self.nodes[x.0], *x, g);
                } else {
                    let y = &node.value.data;
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| (gi - dot * yi) / norm)
                        .collect();
                    Self::accum(grads, &self.nodes[x.0], *x, &gx);
                }
            }
            Op::Sum { x } => {
                let gx = vec![g[0]; self.nodes[x.0].value.len()];
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                let gx = vec![g[0] / n as f64; n];
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::Dot { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let ga: Vec<f64> = val(*b).iter().map(|y| g[0] * y).collect();
                    Self::accum(grads, &self.nodes[a.0], *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb: Vec<f64> = val(*a).iter().map(|y| g[0] * y).collect();
                    Self::accum(grads, &self.nodes[b.0], *b, &gb);
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    Self::accum(grads, &self.nodes[p.0], p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::StackRows { rows } => {
                let c = self.nodes[rows[0].0].value.len();
                for (i, &r) in rows.iter().enumerate() {
                    Self::accum(grads, &self.nodes[r.0], r, &g[i * c..(i + 1) * c]);
                }
            }
            Op::StackScalars { parts } => {
                for (i, &p) in parts.iter().enumerate() {
                    Self::accum(grads, &self.nodes[p.0], p, &g[i..i + 1]);
                }
            }
            Op::Index { x, i } => {
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    gx[*i] = g[0];
                    Self::accum(grads, &self.nodes[x.0], *x, &gx);
                }
            }
            Op::Slice { x, start, len } => {
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    gx[*start..start + len].copy_from_slice(g);
                    Self::accum(grads, &self.nodes[x.0], *x, &gx);
                }
            }
            Op::EmbeddingRows { table, indices } => {
                if self.nodes[table.0].needs_grad {
                    let d = self.nodes[table.0].value.shape[1];
                    let mut gt = vec![0.0; self.nodes[table.0].value.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let trow = &mut gt[i * d..(i + 1) * d];
                        for j in 0..d {
                            trow[j] += grow[j];
                        }
                    }
                    Self::accum(grads, &self.nodes[table.0], *table, &gt);
                }
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                Self::accum(grads, &self.nodes[x.0], *x, &gx);
            }
            Op::StopGrad => {}
        }
    }
}
