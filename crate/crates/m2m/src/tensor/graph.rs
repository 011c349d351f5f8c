//! Dynamic computation tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation validates its
//! input shapes eagerly, computes its value immediately, and records enough
//! structure for [`Graph::backward`] to walk the tape once in reverse. Nodes
//! are visited in strictly decreasing creation order, so every node's output
//! gradient is fully accumulated before its own backward rule runs; a node
//! consumed twice therefore receives the sum of both paths.
//!
//! Parameter leaves copy the current value out of the [`ParamStore`]; their
//! gradients accumulate into the caller's [`GradStore`] keyed by [`ParamId`].

use super::store::{GradStore, ParamId, ParamStore};
use super::{mm_nn, mm_nt, mm_tn, Tensor, TensorError};

/// Handle to a node on the tape of the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Leaf; `Some` means a trainable parameter, `None` a data input.
    Leaf(Option<ParamId>),
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    ScaleRows { x: usize, s: usize },
    Col { x: usize, col: usize },
    BroadcastRow { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Softplus { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Softmax { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    SumAll { x: usize },
    SumSquares { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape { x: usize },
    Transpose { x: usize },
    Gather { table: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, usize)>,
    /// Smallest |pre-activation| seen by any LeakyRelu this pass. Finite
    /// differences are unreliable within ~h of the kink; gradient checks use
    /// this to detect ill-conditioned evaluation points.
    min_leaky_abs: f64,
}

fn outer_axis_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            min_leaky_abs: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Owned copy of a node's value (for extracting predictions).
    pub fn output(&self, id: NodeId) -> Tensor {
        self.nodes[id.0].value.clone()
    }

    pub fn min_leaky_abs(&self) -> f64 {
        self.min_leaky_abs
    }

    /// True when every node value on the tape is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite_all())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-trainable data leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf(None), false)
    }

    /// Trainable leaf: copies the parameter's current value onto the tape.
    /// Repeated requests for the same parameter return the same node, which
    /// also means a graph must only ever see one store: ids from a second
    /// store would collide with the first store's cached leaves.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.param_leaves.iter().find(|(pid, _)| *pid == id) {
            return NodeId(node);
        }
        let node = self.push(store.value(id).clone(), Op::Leaf(Some(id)), true);
        self.param_leaves.push((id, node.0));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            out.data_mut(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a: a.0, b: b.0 }, needs))
    }

    /// Batched matmul over the leading axis: `[B,m,k] @ [B,k,n]`, or with
    /// `trans_b` set, `[B,m,k] @ [B,n,k]^T`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros(&[bs, m, n]);
        {
            let (da, db, do_) = (self.value(a).data(), self.value(b).data(), out.data_mut());
            for i in 0..bs {
                let ab = &da[i * m * k..(i + 1) * m * k];
                let bb = &db[i * k * n..(i + 1) * k * n];
                let ob = &mut do_[i * m * n..(i + 1) * m * n];
                if trans_b {
                    mm_nt(ab, bb, m, k, n, ob);
                } else {
                    mm_nn(ab, bb, m, k, n, ob);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            needs,
        ))
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    /// Broadcasts a rank-1 bias over the trailing axis: `[..., d] + [d]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let d = sb[0];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            out,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
            needs,
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x: x.0, c }, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        let needs = self.needs(x);
        self.push(out, Op::AddScalar { x: x.0 }, needs)
    }

    /// Row-wise scaling: `x: [n, d]` scaled by `s: [n]` or `[n, 1]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let s_rows = match ss.as_slice() {
            [n] | [n, 1] => *n,
            _ => 0,
        };
        if sx.len() != 2 || s_rows != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: sx,
                rhs: ss,
            });
        }
        let d = sx[1];
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (row, &f) in out.data_mut().chunks_mut(d).zip(sv.iter()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleRows { x: x.0, s: s.0 }, needs))
    }

    /// Extracts column `col` of a rank-2 tensor as `[n, 1]`.
    pub fn col(&mut self, x: NodeId, col: usize) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "col",
                shape: sx,
                reason: "rank-2 required".to_string(),
            });
        }
        if col >= sx[1] {
            return Err(TensorError::IndexOutOfRange {
                op: "col",
                index: col,
                limit: sx[1],
            });
        }
        let (n, k) = (sx[0], sx[1]);
        let data: Vec<f64> = (0..n).map(|i| self.value(x).data()[i * k + col]).collect();
        let out = Tensor::from_vec(&[n, 1], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Col { x: x.0, col }, needs))
    }

    /// Replicates a `[d]` or `[1, d]` tensor into `[n, d]`.
    pub fn broadcast_row(&mut self, x: NodeId, n: usize) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = match sx.as_slice() {
            [d] | [1, d] => *d,
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "broadcast_row",
                    shape: sx,
                    reason: "rank-1 or [1, d] required".to_string(),
                })
            }
        };
        let src = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&src);
        }
        let out = Tensor::from_vec(&[n, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::BroadcastRow { x: x.0 }, needs))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut min_abs = self.min_leaky_abs;
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                min_abs = min_abs.min(v.abs());
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            })
            .collect();
        self.min_leaky_abs = min_abs;
        let out = Tensor::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x: x.0, slope }, needs)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Softplus { x: x.0 }, needs)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let out = Tensor::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Exp { x: x.0 }, needs)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let out = Tensor::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Ln { x: x.0 }, needs)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                shape: sx,
            });
        }
        let (outer, alen, inner) = outer_axis_inner(&sx, axis);
        let mut out = self.value(x).clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * alen * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for a in 0..alen {
                        mx = mx.max(d[base + a * inner]);
                    }
                    let mut sum = 0.0;
                    for a in 0..alen {
                        let e = (d[base + a * inner] - mx).exp();
                        d[base + a * inner] = e;
                        sum += e;
                    }
                    for a in 0..alen {
                        d[base + a * inner] /= sum;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x: x.0, axis }, needs))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "mean_axis",
                axis,
                shape: sx,
            });
        }
        let (outer, alen, inner) = outer_axis_inner(&sx, axis);
        let mut oshape = sx.clone();
        oshape.remove(axis);
        let mut out = Tensor::zeros(&oshape);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            let inv = 1.0 / alen as f64;
            for o in 0..outer {
                for a in 0..alen {
                    let sbase = (o * alen + a) * inner;
                    let dbase = o * inner;
                    for i in 0..inner {
                        dst[dbase + i] += src[sbase + i] * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanAxis { x: x.0, axis }, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, needs)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x: x.0 }, needs)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no parts".to_string(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sp.to_vec(),
                });
            }
            axis_total += sp[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = axis_total;
        let (outer, _, inner) = outer_axis_inner(&oshape, axis);
        let mut out = Tensor::zeros(&oshape);
        {
            let dst = out.data_mut();
            let mut offset = 0;
            for &p in parts {
                let palen = self.shape(p)[axis];
                let src = self.value(p).data();
                for o in 0..outer {
                    let sbase = o * palen * inner;
                    let dbase = (o * axis_total + offset) * inner;
                    dst[dbase..dbase + palen * inner]
                        .copy_from_slice(&src[sbase..sbase + palen * inner]);
                }
                offset += palen;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != self.value(x).len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} != {}", expect, self.value(x).len()),
            });
        }
        let out = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x: x.0 }, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: sx,
                reason: "rank-2 required".to_string(),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = Tensor::zeros(&[n, m]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose { x: x.0 }, needs))
    }

    /// Embedding lookup: rows of `table: [V, d]` selected by `indices`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: st,
                reason: "rank-2 table required".to_string(),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                limit: v,
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[indices.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Walks the tape once in reverse
    /// creation order; parameter gradients accumulate into `grads`.
    pub fn backward(&mut self, loss: NodeId, grads: &mut GradStore) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut bufs: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        bufs[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![1.0]).expect("scalar"));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = bufs[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let gy = gy.data();
            match &self.nodes[idx].op {
                Op::Leaf(Some(pid)) => {
                    let g = grads.get_mut(*pid).data_mut();
                    for (o, &v) in g.iter_mut().zip(gy.iter()) {
                        *o += v;
                    }
                }
                Op::Leaf(None) => {}
                Op::Matmul { a, b } => {
                    let (m, k) = {
                        let s = self.nodes[*a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[*b].value.shape()[1];
                    if self.nodes[*a].needs_grad {
                        let bv = self.nodes[*b].value.data();
                        let ga = Self::buf(&mut bufs, *a, self.nodes[*a].value.shape());
                        mm_nt(gy, bv, m, n, k, ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let av = self.nodes[*a].value.data();
                        let gb = Self::buf(&mut bufs, *b, self.nodes[*b].value.shape());
                        mm_tn(av, gy, m, k, n, gb);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let sa = self.nodes[*a].value.shape().to_vec();
                    let (bs, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *trans_b {
                        self.nodes[*b].value.shape()[1]
                    } else {
                        self.nodes[*b].value.shape()[2]
                    };
                    if self.nodes[*a].needs_grad {
                        let bv = self.nodes[*b].value.data();
                        let ga = Self::buf(&mut bufs, *a, &sa);
                        for i in 0..bs {
                            let gyb = &gy[i * m * n..(i + 1) * m * n];
                            let bb = &bv[i * k * n..(i + 1) * k * n];
                            let gab = &mut ga[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // c = a b^T  =>  da = dc b
                                mm_nn(gyb, bb, m, n, k, gab);
                            } else {
                                mm_nt(gyb, bb, m, n, k, gab);
                            }
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let av = self.nodes[*a].value.data();
                        let bshape = self.nodes[*b].value.shape().to_vec();
                        let gb = Self::buf(&mut bufs, *b, &bshape);
                        for i in 0..bs {
                            let gyb = &gy[i * m * n..(i + 1) * m * n];
                            let ab = &av[i * m * k..(i + 1) * m * k];
                            let gbb = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // c = a b^T  =>  db = dc^T a
                                mm_tn(gyb, ab, m, n, k, gbb);
                            } else {
                                mm_tn(ab, gyb, m, k, n, gbb);
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &t in [a, b].iter() {
                        if self.nodes[*t].needs_grad {
                            let g = Self::buf(&mut bufs, *t, self.nodes[*t].value.shape());
                            for (o, &v) in g.iter_mut().zip(gy.iter()) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[*a].needs_grad {
                        let g = Self::buf(&mut bufs, *a, self.nodes[*a].value.shape());
                        for (o, &v) in g.iter_mut().zip(gy.iter()) {
                            *o += v;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let g = Self::buf(&mut bufs, *b, self.nodes[*b].value.shape());
                        for (o, &v) in g.iter_mut().zip(gy.iter()) {
                            *o -= v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[*a].needs_grad {
                        let bv = self.nodes[*b].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *a, self.nodes[*a].value.shape());
                        for ((o, &v), &w) in g.iter_mut().zip(gy.iter()).zip(bv.iter()) {
                            *o += v * w;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let av = self.nodes[*a].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *b, self.nodes[*b].value.shape());
                        for ((o, &v), &w) in g.iter_mut().zip(gy.iter()).zip(av.iter()) {
                            *o += v * w;
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let d = self.nodes[*bias].value.len();
                    if self.nodes[*x].needs_grad {
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for (o, &v) in g.iter_mut().zip(gy.iter()) {
                            *o += v;
                        }
                    }
                    if self.nodes[*bias].needs_grad {
                        let g = Self::buf(&mut bufs, *bias, self.nodes[*bias].value.shape());
                        for row in gy.chunks(d) {
                            for (o, &v) in g.iter_mut().zip(row.iter()) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.nodes[*x].needs_grad {
                        let c = *c;
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for (o, &v) in g.iter_mut().zip(gy.iter()) {
                            *o += c * v;
                        }
                    }
                }
                Op::AddScalar { x } => {
                    if self.nodes[*x].needs_grad {
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for (o, &v) in g.iter_mut().zip(gy.iter()) {
                            *o += v;
                        }
                    }
                }
                Op::ScaleRows { x, s } => {
                    let d = self.nodes[*x].value.shape()[1];
                    if self.nodes[*x].needs_grad {
                        let sv = self.nodes[*s].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for ((grow, gyrow), &f) in
                            g.chunks_mut(d).zip(gy.chunks(d)).zip(sv.iter())
                        {
                            for (o, &v) in grow.iter_mut().zip(gyrow.iter()) {
                                *o += f * v;
                            }
                        }
                    }
                    if self.nodes[*s].needs_grad {
                        let xv = self.nodes[*x].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *s, self.nodes[*s].value.shape());
                        for ((o, gyrow), xrow) in
                            g.iter_mut().zip(gy.chunks(d)).zip(xv.chunks(d))
                        {
                            let mut acc = 0.0;
                            for (&v, &w) in gyrow.iter().zip(xrow.iter()) {
                                acc += v * w;
                            }
                            *o += acc;
                        }
                    }
                }
                Op::Col { x, col } => {
                    if self.nodes[*x].needs_grad {
                        let k = self.nodes[*x].value.shape()[1];
                        let col = *col;
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for (i, &v) in gy.iter().enumerate() {
                            g[i * k + col] += v;
                        }
                    }
                }
                Op::BroadcastRow { x } => {
                    if self.nodes[*x].needs_grad {
                        let d = self.nodes[*x].value.len();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for row in gy.chunks(d) {
                            for (o, &v) in g.iter_mut().zip(row.iter()) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.nodes[*x].needs_grad {
                        let slope = *slope;
                        let xv = self.nodes[*x].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for ((o, &v), &xi) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *o += v * if xi >= 0.0 { 1.0 } else { slope };
                        }
                    }
                }
                Op::Softplus { x } => {
                    if self.nodes[*x].needs_grad {
                        let xv = self.nodes[*x].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for ((o, &v), &xi) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *o += v * sigmoid(xi);
                        }
                    }
                }
                Op::Exp { x } => {
                    if self.nodes[*x].needs_grad {
                        let yv = self.nodes[idx].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for ((o, &v), &yi) in g.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                            *o += v * yi;
                        }
                    }
                }
                Op::Ln { x } => {
                    if self.nodes[*x].needs_grad {
                        let xv = self.nodes[*x].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for ((o, &v), &xi) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *o += v / xi;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.nodes[*x].needs_grad {
                        let shape = self.nodes[idx].value.shape().to_vec();
                        let y = self.nodes[idx].value.data().to_vec();
                        let (outer, alen, inner) = outer_axis_inner(&shape, *axis);
                        let g = Self::buf(&mut bufs, *x, &shape);
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * alen * inner + i;
                                let mut dot = 0.0;
                                for a in 0..alen {
                                    let p = base + a * inner;
                                    dot += gy[p] * y[p];
                                }
                                for a in 0..alen {
                                    let p = base + a * inner;
                                    g[p] += y[p] * (gy[p] - dot);
                                }
                            }
                        }
                    }
                }
                Op::MeanAxis { x, axis } => {
                    if self.nodes[*x].needs_grad {
                        let shape = self.nodes[*x].value.shape().to_vec();
                        let (outer, alen, inner) = outer_axis_inner(&shape, *axis);
                        let inv = 1.0 / alen as f64;
                        let g = Self::buf(&mut bufs, *x, &shape);
                        for o in 0..outer {
                            for a in 0..alen {
                                let gbase = (o * alen + a) * inner;
                                let ybase = o * inner;
                                for i in 0..inner {
                                    g[gbase + i] += gy[ybase + i] * inv;
                                }
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[*x].needs_grad {
                        let v = gy[0];
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        g.iter_mut().for_each(|o| *o += v);
                    }
                }
                Op::SumSquares { x } => {
                    if self.nodes[*x].needs_grad {
                        let v = gy[0];
                        let xv = self.nodes[*x].value.data().to_vec();
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for (o, &xi) in g.iter_mut().zip(xv.iter()) {
                            *o += 2.0 * xi * v;
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let oshape = self.nodes[idx].value.shape().to_vec();
                    let (outer, axis_total, inner) = outer_axis_inner(&oshape, axis);
                    let mut offset = 0;
                    for &p in &parts {
                        let palen = self.nodes[p].value.shape()[axis];
                        if self.nodes[p].needs_grad {
                            let pshape = self.nodes[p].value.shape().to_vec();
                            let g = Self::buf(&mut bufs, p, &pshape);
                            for o in 0..outer {
                                let gbase = o * palen * inner;
                                let ybase = (o * axis_total + offset) * inner;
                                for i in 0..palen * inner {
                                    g[gbase + i] += gy[ybase + i];
                                }
                            }
                        }
                        offset += palen;
                    }
                }
                Op::Reshape { x } => {
                    if self.nodes[*x].needs_grad {
                        let g = Self::buf(&mut bufs, *x, self.nodes[*x].value.shape());
                        for (o, &v) in g.iter_mut().zip(gy.iter()) {
                            *o += v;
                        }
                    }
                }
                Op::Transpose { x } => {
                    if self.nodes[*x].needs_grad {
                        let sx = self.nodes[*x].value.shape().to_vec();
                        let (m, n) = (sx[0], sx[1]);
                        let g = Self::buf(&mut bufs, *x, &sx);
                        for j in 0..n {
                            for i in 0..m {
                                g[i * n + j] += gy[j * m + i];
                            }
                        }
                    }
                }
                Op::Gather { table, indices } => {
                    if self.nodes[*table].needs_grad {
                        let indices = indices.clone();
                        let d = self.nodes[*table].value.shape()[1];
                        let tshape = self.nodes[*table].value.shape().to_vec();
                        let g = Self::buf(&mut bufs, *table, &tshape);
                        for (r, &i) in indices.iter().enumerate() {
                            let src = &gy[r * d..(r + 1) * d];
                            let dst = &mut g[i * d..(i + 1) * d];
                            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn buf<'g>(bufs: &'g mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'g mut [f64] {
        bufs[idx]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }
}
