//! Computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so every input id precedes
//! its consumers and a single reverse sweep visits each node exactly
//! once. Construction cannot form cycles. Graphs are single-threaded;
//! independent graphs may run on separate threads.

use std::sync::Arc;

use super::{Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// A[r,k] @ B[k,c]
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [r,c] + row-broadcast [c]
    AddRowBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax of a matrix (max-subtracted for stability).
    SoftmaxRows(NodeId),
    Scale(NodeId, f64),
    /// [r,c] -> [r,1] mean over columns
    MeanRows(NodeId),
    /// [r,c] -> [r,1] sum over columns
    SumRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Inner product of two same-size tensors -> scalar.
    Dot(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// out[i, :] = a[idx[i], :]; backward scatter-adds.
    GatherRows(NodeId, Arc<Vec<u32>>),
    /// Each input row repeated `times` consecutive times.
    RepeatRows(NodeId, usize),
    /// [(g*l), c] -> [g, c] mean over each block of l consecutive rows.
    GroupMeanRows(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    /// Multi-head self-attention over `groups` independent equal-length
    /// token sequences stacked row-wise. Heads are column slices of q/k/v.
    /// Scores are plain inner products of the projected tokens. The
    /// attention weights are saved in the node's aux buffer for backward,
    /// laid out [(groups*heads*l), l].
    MultiHeadAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: usize,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
    /// Saved attention weights (only for MultiHeadAttention nodes).
    aux: Option<Vec<F>>,
}

/// Gradient tensors produced by [`Graph::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the backward output w.r.t. the given node, if tracked.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value computed at a node.
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Input node that does not receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false, None)
    }

    /// Input node eligible for gradients.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true, None)
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool, aux: Option<Vec<F>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.nodes[id.0].value.matrix_dims(op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.dims(a, "matmul")?;
        let (rb, cb) = self.dims(b, "matmul")?;
        if ca != rb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].value.shape().to_vec(),
                rhs: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![ra, cb]);
        F::gemm(
            ra,
            ca,
            cb,
            F::one(),
            self.nodes[a.0].value.data(),
            ca as isize,
            1,
            self.nodes[b.0].value.data(),
            cb as isize,
            1,
            F::zero(),
            out.data_mut(),
            cb as isize,
            1,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), needs, None))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].value.shape().to_vec(),
                rhs: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "add_row_bias")?;
        let (rb, cb) = self.dims(bias, "add_row_bias")?;
        if rb * cb != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.nodes[a.0].value.shape().to_vec(),
                rhs: self.nodes[bias.0].value.shape().to_vec(),
            });
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let needs = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRowBias(a, bias), needs, None))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(F) -> F, op: Op) -> NodeId {
        let data = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let value = Tensor { shape, data };
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, op, needs, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = F::from_f64(c);
        self.unary(a, |x| x * k, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "softmax_rows")?;
        let x = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            softmax_row(row, &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::SoftmaxRows(a), needs, None))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "mean_rows")?;
        let x = self.nodes[a.0].value.data();
        let inv = F::from_f64(1.0 / c as f64);
        let data = (0..r)
            .map(|i| {
                let mut s = F::zero();
                for j in 0..c {
                    s += x[i * c + j];
                }
                s * inv
            })
            .collect();
        let value = Tensor::new(vec![r, 1], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::MeanRows(a), needs, None))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "sum_rows")?;
        let x = self.nodes[a.0].value.data();
        let data = (0..r)
            .map(|i| {
                let mut s = F::zero();
                for j in 0..c {
                    s += x[i * c + j];
                }
                s
            })
            .collect();
        let value = Tensor::new(vec![r, 1], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::SumRows(a), needs, None))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = self.nodes[a.0].value.data();
        let inv = F::from_f64(1.0 / x.len().max(1) as f64);
        let mut s = F::zero();
        for &v in x {
            s += v;
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s * inv), Op::MeanAll(a), needs, None)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let x = self.nodes[a.0].value.data();
        let mut s = F::zero();
        for &v in x {
            s += v;
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::SumAll(a), needs, None)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].value.numel() != self.nodes[b.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.nodes[a.0].value.shape().to_vec(),
                rhs: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let mut s = F::zero();
        for (&x, &y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            s += x * y;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), needs, None))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols with no inputs");
        let (r, _) = self.dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.dims(p, "concat_cols")?;
            if rp != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            widths.push(cp);
            total += cp;
        }
        let mut data = vec![F::zero(); r * total];
        let mut offset = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![r, total], data)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs, None))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let x = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::SliceCols(a, start, len), needs, None))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<u32>>) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "gather_rows")?;
        let mut data = vec![F::zero(); idx.len() * c];
        let x = self.nodes[a.0].value.data();
        for (i, &src) in idx.iter().enumerate() {
            let src = src as usize;
            if src >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: src,
                    bound: r,
                });
            }
            data[i * c..(i + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::GatherRows(a, idx), needs, None))
    }

    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "repeat_rows")?;
        let x = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); r * times * c];
        for i in 0..r {
            for t in 0..times {
                data[(i * times + t) * c..(i * times + t + 1) * c]
                    .copy_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r * times, c], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::RepeatRows(a, times), needs, None))
    }

    pub fn group_mean_rows(&mut self, a: NodeId, groups: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "group_mean_rows")?;
        if groups == 0 || r % groups != 0 {
            return Err(TensorError::GroupMismatch {
                op: "group_mean_rows",
                rows: r,
                groups,
            });
        }
        let l = r / groups;
        let inv = F::from_f64(1.0 / l as f64);
        let x = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); groups * c];
        for g in 0..groups {
            for i in 0..l {
                for j in 0..c {
                    data[g * c + j] += x[(g * l + i) * c + j];
                }
            }
            for j in 0..c {
                data[g * c + j] *= inv;
            }
        }
        let value = Tensor::new(vec![groups, c], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::GroupMeanRows(a, l), needs, None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a, "transpose")?;
        let x = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Transpose(a), needs, None))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[a.0].value.numel() {
            return Err(TensorError::InvalidShape {
                expected,
                got: self.nodes[a.0].value.numel(),
            });
        }
        let value = Tensor::new(shape, self.nodes[a.0].value.data().to_vec())?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Reshape(a), needs, None))
    }

    /// Multi-head self-attention over `groups` stacked sequences.
    ///
    /// `q`, `k`, `v` have shape [(groups * l), d_h] with d_h divisible by
    /// `heads`; head h uses the column slice [h*d', (h+1)*d'). For each
    /// group and head, weights alpha = row-softmax(Q_h K_h^T) and the
    /// output slice is alpha V_h.
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (r, dh) = self.dims(q, "multi_head_attention")?;
        for &other in &[k, v] {
            if self.nodes[other.0].value.shape() != self.nodes[q.0].value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "multi_head_attention",
                    lhs: self.nodes[q.0].value.shape().to_vec(),
                    rhs: self.nodes[other.0].value.shape().to_vec(),
                });
            }
        }
        if groups == 0 || r % groups != 0 {
            return Err(TensorError::GroupMismatch {
                op: "multi_head_attention",
                rows: r,
                groups,
            });
        }
        if heads == 0 || dh % heads != 0 {
            return Err(TensorError::GroupMismatch {
                op: "multi_head_attention",
                rows: dh,
                groups: heads,
            });
        }
        let l = r / groups;
        let dp = dh / heads;
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![F::zero(); r * dh];
        let mut weights = vec![F::zero(); groups * heads * l * l];
        let mut scores = vec![F::zero(); l];
        for g in 0..groups {
            let row0 = g * l;
            for h in 0..heads {
                let col0 = h * dp;
                for i in 0..l {
                    let qi = &qd[(row0 + i) * dh + col0..(row0 + i) * dh + col0 + dp];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(row0 + j) * dh + col0..(row0 + j) * dh + col0 + dp];
                        let mut acc = F::zero();
                        for p in 0..dp {
                            acc += qi[p] * kj[p];
                        }
                        *s = acc;
                    }
                    let wrow = ((g * heads + h) * l + i) * l;
                    softmax_row(&scores, &mut weights[wrow..wrow + l]);
                    let orow = (row0 + i) * dh + col0;
                    for j in 0..l {
                        let a = weights[wrow + j];
                        let vj = &vd[(row0 + j) * dh + col0..(row0 + j) * dh + col0 + dp];
                        for p in 0..dp {
                            out[orow + p] += a * vj[p];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![r, dh], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::MultiHeadAttention {
                q,
                k,
                v,
                groups,
                heads,
            },
            needs,
            Some(weights),
        ))
    }

    /// Reverse sweep from a scalar output. Returns gradients for every
    /// gradient-eligible leaf reachable from `out`; unreachable leaves get
    /// zero gradients.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<F>, TensorError> {
        let out_t = &self.nodes[out.0].value;
        if !out_t.is_scalar() {
            return Err(TensorError::NonScalarOutput {
                shape: out_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(out_t.shape().to_vec(), F::one()));
        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(id, &grad, &mut grads);
            // Leaf gradients are kept; interior gradients are dropped once used.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(grad);
            }
        }
        // Unreachable gradient-eligible leaves report zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, update: impl FnOnce(&mut [F])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        update(slot.as_mut().unwrap().data_mut());
    }

    fn step_backward(&self, id: usize, grad: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) {
        let node = &self.nodes[id];
        let g = grad.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ra, ca) = self.nodes[a.0].value.matrix_dims("matmul").unwrap();
                let (_, cb) = self.nodes[b.0].value.matrix_dims("matmul").unwrap();
                if self.nodes[a.0].needs_grad {
                    let bdat = self.nodes[b.0].value.data();
                    self.accumulate(grads, *a, |da| {
                        // dA = dC @ B^T
                        F::gemm(
                            ra,
                            cb,
                            ca,
                            F::one(),
                            g,
                            cb as isize,
                            1,
                            bdat,
                            1,
                            cb as isize,
                            F::one(),
                            da,
                            ca as isize,
                            1,
                        );
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let adat = self.nodes[a.0].value.data();
                    self.accumulate(grads, *b, |db| {
                        // dB = A^T @ dC
                        F::gemm(
                            ca,
                            ra,
                            cb,
                            F::one(),
                            adat,
                            1,
                            ca as isize,
                            g,
                            cb as isize,
                            1,
                            F::one(),
                            db,
                            cb as isize,
                            1,
                        );
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bdat = self.nodes[b.0].value.data();
                    self.accumulate(grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * bdat[i];
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let adat = self.nodes[a.0].value.data();
                    self.accumulate(grads, *b, |db| {
                        for i in 0..db.len() {
                            db[i] += g[i] * adat[i];
                        }
                    });
                }
            }
            Op::AddRowBias(a, bias) => {
                let (r, c) = self.nodes[a.0].value.matrix_dims("add_row_bias").unwrap();
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        if x[i] > F::zero() {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i] * (F::one() - y[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let (r, c) = node.value.matrix_dims("softmax_rows").unwrap();
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        let row = i * c;
                        let mut s = F::zero();
                        for j in 0..c {
                            s += g[row + j] * y[row + j];
                        }
                        for j in 0..c {
                            da[row + j] += y[row + j] * (g[row + j] - s);
                        }
                    }
                });
            }
            Op::Scale(a, cst) => {
                let k = F::from_f64(*cst);
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * k;
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.nodes[a.0].value.matrix_dims("mean_rows").unwrap();
                let inv = F::from_f64(1.0 / c as f64);
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        let gv = g[i] * inv;
                        for j in 0..c {
                            da[i * c + j] += gv;
                        }
                    }
                });
            }
            Op::SumRows(a) => {
                let (r, c) = self.nodes[a.0].value.matrix_dims("sum_rows").unwrap();
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i];
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel().max(1);
                let gv = g[0] * F::from_f64(1.0 / n as f64);
                self.accumulate(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                if self.nodes[a.0].needs_grad {
                    let bdat = self.nodes[b.0].value.data();
                    self.accumulate(grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += gv * bdat[i];
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let adat = self.nodes[a.0].value.data();
                    self.accumulate(grads, *b, |db| {
                        for i in 0..db.len() {
                            db[i] += gv * adat[i];
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.matrix_dims("concat_cols").unwrap();
                let mut offset = 0usize;
                for &p in parts {
                    let (_, w) = self.nodes[p.0].value.matrix_dims("concat_cols").unwrap();
                    self.accumulate(grads, p, |dp| {
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = self.nodes[a.0].value.matrix_dims("slice_cols").unwrap();
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..*len {
                            da[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let (_, c) = self.nodes[a.0].value.matrix_dims("gather_rows").unwrap();
                self.accumulate(grads, *a, |da| {
                    for (i, &src) in idx.iter().enumerate() {
                        let src = src as usize;
                        for j in 0..c {
                            da[src * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::RepeatRows(a, times) => {
                let (r, c) = self.nodes[a.0].value.matrix_dims("repeat_rows").unwrap();
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        for t in 0..*times {
                            for j in 0..c {
                                da[i * c + j] += g[(i * times + t) * c + j];
                            }
                        }
                    }
                });
            }
            Op::GroupMeanRows(a, l) => {
                let (groups, c) = node.value.matrix_dims("group_mean_rows").unwrap();
                let inv = F::from_f64(1.0 / *l as f64);
                self.accumulate(grads, *a, |da| {
                    for gi in 0..groups {
                        for i in 0..*l {
                            for j in 0..c {
                                da[(gi * l + i) * c + j] += g[gi * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.matrix_dims("transpose").unwrap();
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::MultiHeadAttention {
                q,
                k,
                v,
                groups,
                heads,
                ..
            } => {
                self.attention_backward(id, *q, *k, *v, *groups, *heads, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        id: usize,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: usize,
        heads: usize,
        g: &[F],
        grads: &mut Vec<Option<Tensor<F>>>,
    ) {
        let (r, dh) = self.nodes[id].value.matrix_dims("multi_head_attention").unwrap();
        let l = r / groups;
        let dp = dh / heads;
        let weights = self.nodes[id].aux.as_ref().expect("attention weights saved");
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let need_q = self.nodes[q.0].needs_grad;
        let need_k = self.nodes[k.0].needs_grad;
        let need_v = self.nodes[v.0].needs_grad;
        let mut dq = if need_q { vec![F::zero(); r * dh] } else { Vec::new() };
        let mut dk = if need_k { vec![F::zero(); r * dh] } else { Vec::new() };
        let mut dv = if need_v { vec![F::zero(); r * dh] } else { Vec::new() };
        let mut dalpha = vec![F::zero(); l];
        let mut dscore = vec![F::zero(); l];
        for gi in 0..groups {
            let row0 = gi * l;
            for h in 0..heads {
                let col0 = h * dp;
                for i in 0..l {
                    let wrow = ((gi * heads + h) * l + i) * l;
                    let alpha = &weights[wrow..wrow + l];
                    let grow = (row0 + i) * dh + col0;
                    // dV_j += alpha_ij * dOut_i ; dalpha_j = <dOut_i, V_j>
                    for j in 0..l {
                        let vrow = (row0 + j) * dh + col0;
                        let mut acc = F::zero();
                        for p in 0..dp {
                            acc += g[grow + p] * vd[vrow + p];
                        }
                        dalpha[j] = acc;
                        if need_v {
                            let a = alpha[j];
                            for p in 0..dp {
                                dv[vrow + p] += a * g[grow + p];
                            }
                        }
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    // Softmax backward: ds_j = alpha_j * (dalpha_j - sum_t dalpha_t alpha_t)
                    let mut s = F::zero();
                    for j in 0..l {
                        s += dalpha[j] * alpha[j];
                    }
                    for j in 0..l {
                        dscore[j] = alpha[j] * (dalpha[j] - s);
                    }
                    // score_ij = <Q_i, K_j>: dQ_i += ds_j K_j ; dK_j += ds_j Q_i
                    let qrow = (row0 + i) * dh + col0;
                    for j in 0..l {
                        let krow = (row0 + j) * dh + col0;
                        let ds = dscore[j];
                        if need_q {
                            for p in 0..dp {
                                dq[qrow + p] += ds * kd[krow + p];
                            }
                        }
                        if need_k {
                            for p in 0..dp {
                                dk[krow + p] += ds * qd[qrow + p];
                            }
                        }
                    }
                }
            }
        }
        if need_q {
            self.accumulate(grads, q, |d| {
                for (dst, src) in d.iter_mut().zip(&dq) {
                    *dst += *src;
                }
            });
        }
        if need_k {
            self.accumulate(grads, k, |d| {
                for (dst, src) in d.iter_mut().zip(&dk) {
                    *dst += *src;
                }
            });
        }
        if need_v {
            self.accumulate(grads, v, |d| {
                for (dst, src) in d.iter_mut().zip(&dv) {
                    *dst += *src;
                }
            });
        }
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Split on sign so exp never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(t32(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn relu_clamps_negative_entries() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(t32(&[2], &[-1.5, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(t32(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]));
        let y = g.sum_all(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_values_match_hand_computation() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t32(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 2]));
        let y = g.relu(x);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(t32(&[2], &[1.0, 2.0]));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 7.0).abs() < 1e-6);
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let idx = Arc::new(vec![0u32, 0, 1]);
        let y = g.gather_rows(x, idx).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn attention_on_single_token_has_unit_weight() {
        let mut g: Graph<f32> = Graph::new();
        let q = g.leaf(t32(&[1, 4], &[0.3, -0.2, 0.6, 0.1]));
        let k = g.leaf(t32(&[1, 4], &[1.0, 2.0, -0.5, 0.4]));
        let v = g.leaf(t32(&[1, 4], &[5.0, 6.0, 7.0, 8.0]));
        let out = g.multi_head_attention(q, k, v, 1, 2).unwrap();
        // Sequence of one token: output must equal v for every head.
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut g: Graph<f32> = Graph::new();
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let q = g.leaf(t32(&[6, 4], &data));
        let k = g.leaf(t32(&[6, 4], &data.iter().map(|v| v * 0.5).collect::<Vec<_>>()));
        let v = g.leaf(t32(&[6, 4], &data.iter().map(|v| v + 1.0).collect::<Vec<_>>()));
        let out = g.multi_head_attention(q, k, v, 2, 2).unwrap();
        let weights = g.nodes[out.0].aux.as_ref().unwrap();
        // [(groups*heads*l), l] = [(2*2*3), 3]
        for row in weights.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn duplicate_tokens_produce_identical_attention_outputs() {
        let mut g: Graph<f32> = Graph::new();
        // Tokens 0 and 2 of the single group are identical.
        let mut q = vec![0.0f32; 12];
        let mut k = vec![0.0f32; 12];
        let mut v = vec![0.0f32; 12];
        for (buf, scale) in [(&mut q, 1.0f32), (&mut k, 0.7), (&mut v, -0.4)] {
            for j in 0..4 {
                let val = scale * (j as f32 + 1.0) * 0.21;
                buf[j] = val;
                buf[8 + j] = val;
                buf[4 + j] = scale * (j as f32 - 2.0) * 0.13;
            }
        }
        let qn = g.leaf(t32(&[3, 4], &q));
        let kn = g.leaf(t32(&[3, 4], &k));
        let vn = g.leaf(t32(&[3, 4], &v));
        let out = g.multi_head_attention(qn, kn, vn, 1, 2).unwrap();
        let o = g.value(out).data();
        for j in 0..4 {
            assert!((o[j] - o[8 + j]).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g: Graph<f32> = Graph::new();
            let data: Vec<f32> = (0..16).map(|i| ((i * 7 + 3) as f32 * 0.11).cos()).collect();
            let x = g.leaf(t32(&[4, 4], &data));
            let w = g.leaf(t32(&[4, 4], &data.iter().rev().copied().collect::<Vec<_>>()));
            let y = g.matmul(x, w).unwrap();
            let z = g.sigmoid(y);
            let s = g.softmax_rows(z).unwrap();
            g.value(s).data().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b, "identical inputs must give bit-identical outputs");
    }
}
