//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node; tape order is the topological order, so
//! `backward` is a single reverse sweep. Nodes are addressed by [`NodeId`].
//! A tape is built per forward pass and consumed by one `backward` call.

use crate::scalar::Scalar;
use crate::tensor::{KernelError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a @ transpose(b)` over the last two axes; the attention-score shape.
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: S,
    },
    Relu {
        a: NodeId,
    },
    SoftmaxLast {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatLast {
        parts: Vec<NodeId>,
    },
    SliceLast {
        a: NodeId,
        lo: usize,
        hi: usize,
    },
    Reshape {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
        smoothing: S,
        reduction: Reduction,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
        mask: Vec<bool>,
        reduction: Reduction,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// raw 2-D kernels
// ---------------------------------------------------------------------------

/// `c += a @ b` with `a: [m,k]`, `b: [k,n]`. The i-k-j loop keeps the inner
/// loop contiguous in both `b` and `c` so it vectorizes.
fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * *bj;
            }
        }
    }
}

/// `c += a @ b^T` with `a: [m,k]`, `b: [n,k]`; rows dot rows.
fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (x, y) in arow.iter().zip(brow) {
                s += *x * *y;
            }
            *cj += s;
        }
    }
}

/// `c += a^T @ b` with `a: [p,m]`, `b: [p,n]` giving `c: [m,n]`.
fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], p: usize, m: usize, n: usize) {
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, ai) in arow.iter().enumerate() {
            if *ai == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += *ai * *bj;
            }
        }
    }
}

/// Leading (batch) dims of both operands of a matrix product: equal, or one
/// side has none and is shared across the other's batch.
fn matmul_batching(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, bool, bool), KernelError> {
    let mismatch = || KernelError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    if ab == bb {
        Ok((ab.to_vec(), false, false))
    } else if ab.is_empty() {
        Ok((bb.to_vec(), true, false))
    } else if bb.is_empty() {
        Ok((ab.to_vec(), false, true))
    } else {
        Err(mismatch())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last `backward` call, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // -- forward ops --------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, _, _) = matmul_batching("matmul", &ash, &bsh)?;
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(KernelError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let nb: usize = batch.iter().product();
        let mut out = vec![S::zero(); nb * m * n];
        let (adata, bdata) = (self.data(a), self.data(b));
        let a_shared = ash.len() == 2;
        let b_shared = bsh.len() == 2;
        for i in 0..nb {
            let ao = if a_shared { 0 } else { i * m * ka };
            let bo = if b_shared { 0 } else { i * ka * n };
            mm_acc(
                &adata[ao..ao + m * ka],
                &bdata[bo..bo + ka * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul { a, b }))
    }

    /// `a @ transpose(b)`: `[..,m,k] x [..,n,k] -> [..,m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, _, _) = matmul_batching("matmul_nt", &ash, &bsh)?;
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (n, kb) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(KernelError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ash,
                rhs: bsh,
            });
        }
        let nb: usize = batch.iter().product();
        let mut out = vec![S::zero(); nb * m * n];
        let (adata, bdata) = (self.data(a), self.data(b));
        let a_shared = ash.len() == 2;
        let b_shared = bsh.len() == 2;
        for i in 0..nb {
            let ao = if a_shared { 0 } else { i * m * ka };
            let bo = if b_shared { 0 } else { i * n * ka };
            mm_nt_acc(
                &adata[ao..ao + m * ka],
                &bdata[bo..bo + n * ka],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMulNT { a, b }))
    }

    /// Elementwise sum; `b` may also be a trailing-axes broadcast of `a`
    /// (bias addition).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !(ash == bsh || ash.ends_with(&bsh)) {
            return Err(KernelError::ShapeMismatch {
                op: "add",
                lhs: ash,
                rhs: bsh,
            });
        }
        let bd = self.data(b);
        let tile = bd.len().max(1);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % tile])
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(ash, out)?, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        node_op: Op<S>,
    ) -> Result<NodeId, KernelError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash != bsh {
            return Err(KernelError::ShapeMismatch {
                op,
                lhs: ash,
                rhs: bsh,
            });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(ash, out)?, rg, node_op))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| x * c).collect(),
        )
        .expect("scale preserves shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| x.max(S::zero())).collect(),
        )
        .expect("relu preserves shape");
        let rg = self.any_requires(&[a]);
        self.push(t, rg, Op::Relu { a })
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax_last_axis(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).last_dim();
        if n == 0 {
            return Err(KernelError::BadShape {
                op: "softmax_last_axis",
                expected: vec![1],
                got: shape,
            });
        }
        if self.data(a).iter().any(|x| !x.is_finite()) {
            return Err(KernelError::NonFinite {
                op: "softmax_last_axis",
            });
        }
        let mut out = Vec::with_capacity(self.data(a).len());
        for row in self.data(a).chunks(n) {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let exps: Vec<S> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: S = exps.iter().cloned().sum();
            out.extend(exps.iter().map(|&e| e / z));
        }
        let rg = self.any_requires(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SoftmaxLast { a }))
    }

    /// Per-row normalization over the last axis followed by the affine
    /// `gain * y + bias`.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    ) -> Result<NodeId, KernelError> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).last_dim();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [n] {
                return Err(KernelError::BadShape {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    expected: vec![n],
                    got: self.shape(p).to_vec(),
                });
            }
        }
        let inv_n = S::one() / S::from_f64(n as f64);
        let mut out = Vec::with_capacity(self.data(a).len());
        {
            let (ad, gd, bd) = (self.data(a), self.data(gain), self.data(bias));
            for row in ad.chunks(n) {
                let mean: S = row.iter().cloned().sum::<S>() * inv_n;
                let var: S = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_n;
                let inv_std = S::one() / (var + eps).sqrt();
                for (j, &x) in row.iter().enumerate() {
                    out.push(gd[j] * (x - mean) * inv_std + bd[j]);
                }
            }
        }
        let rg = self.any_requires(&[a, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm { a, gain, bias, eps },
        ))
    }

    /// Rows of `table` selected by `ids`; backward scatters into the rows,
    /// accumulating when an id repeats.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, KernelError> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(KernelError::BadShape {
                op: "embedding_lookup",
                expected: vec![0, 0],
                got: tsh,
            });
        }
        let (vocab, dim) = (tsh[0], tsh[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(KernelError::IndexOutOfRange { id, vocab });
            }
            out.extend_from_slice(&self.data(table)[id * dim..(id + 1) * dim]);
        }
        let rg = self.any_requires(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenation along the last axis; all other axes must agree.
    pub fn concat_last_axis(&mut self, parts: &[NodeId]) -> Result<NodeId, KernelError> {
        let first = parts.first().ok_or_else(|| {
            KernelError::InvalidArgument("concat_last_axis: no parts given".into())
        })?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_last_axis",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_requires(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `lo..hi` of the last axis. The range must be non-empty.
    pub fn slice_last_axis(
        &mut self,
        a: NodeId,
        lo: usize,
        hi: usize,
    ) -> Result<NodeId, KernelError> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).last_dim();
        if lo >= hi || hi > n {
            return Err(KernelError::InvalidSlice { lo, hi, axis: n });
        }
        let w = hi - lo;
        let rows = self.value(a).rows();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.data(a)[r * n + lo..r * n + hi]);
        }
        let mut oshape = shape;
        let last = oshape.len() - 1;
        oshape[last] = w;
        let rg = self.any_requires(&[a]);
        Ok(self.push(Tensor::new(oshape, out)?, rg, Op::SliceLast { a, lo, hi }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, KernelError> {
        let want: usize = shape.iter().product();
        if want != self.data(a).len() {
            return Err(KernelError::BadShape {
                op: "reshape",
                expected: shape,
                got: self.shape(a).to_vec(),
            });
        }
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        let rg = self.any_requires(&[a]);
        Ok(self.push(t, rg, Op::Reshape { a }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: S = self.data(a).iter().cloned().sum();
        let rg = self.any_requires(&[a]);
        self.push(Tensor::scalar(s), rg, Op::SumAll { a })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, with optional label smoothing. With zero smoothing this is
    /// exactly the KL divergence from one-hot references.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
        smoothing: S,
        reduction: Reduction,
    ) -> Result<NodeId, KernelError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || mask.len() != targets.len() {
            return Err(KernelError::BadShape {
                op: "cross_entropy_from_logits",
                expected: vec![targets.len(), shape.last().copied().unwrap_or(0)],
                got: shape,
            });
        }
        let v = shape[1];
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(KernelError::AllMasked {
                op: "cross_entropy_from_logits",
            });
        }
        let mut total = S::zero();
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t as usize >= v {
                return Err(KernelError::IndexOutOfRange {
                    id: t as usize,
                    vocab: v,
                });
            }
            let row = &self.data(logits)[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
            let mean_logit = row.iter().cloned().sum::<S>() / S::from_f64(v as f64);
            total += lse - (S::one() - smoothing) * row[t as usize] - smoothing * mean_logit;
        }
        if reduction == Reduction::Mean {
            total = total / S::from_f64(active as f64);
        }
        let rg = self.any_requires(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                smoothing,
                reduction,
            },
        ))
    }

    /// Mean (or sum) of squared differences over unmasked elements.
    pub fn mse_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<NodeId, KernelError> {
        let (psh, tsh) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if psh != tsh || mask.len() != self.data(pred).len() {
            return Err(KernelError::ShapeMismatch {
                op: "mse_loss",
                lhs: psh,
                rhs: tsh,
            });
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(KernelError::AllMasked { op: "mse_loss" });
        }
        let mut total = S::zero();
        for ((&p, &t), &m) in self.data(pred).iter().zip(self.data(target)).zip(mask) {
            if m {
                let d = p - t;
                total += d * d;
            }
        }
        if reduction == Reduction::Mean {
            total = total / S::from_f64(active as f64);
        }
        let rg = self.any_requires(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::Mse {
                pred,
                target,
                mask: mask.to_vec(),
                reduction,
            },
        ))
    }

    // -- backward ------------------------------------------------------------

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    fn accumulate(&mut self, id: NodeId, delta: &[S]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let g = node
            .grad
            .get_or_insert_with(|| vec![S::zero(); node.value.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    /// Reverse sweep from a scalar node. Consumes the graph: calling it a
    /// second time on the same tape is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), KernelError> {
        if self.consumed {
            return Err(KernelError::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(KernelError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.step_backward(NodeId(i));
        }
        Ok(())
    }

    fn step_backward(&mut self, id: NodeId) {
        let go = self.nodes[id.0].grad.clone().expect("grad present");
        // Ops hold only ids and small metadata, so a per-node match keeps the
        // borrow checker out of the way.
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let nb: usize = self.shape(id)[..self.shape(id).len() - 2].iter().product();
                let a_shared = ash.len() == 2;
                let b_shared = bsh.len() == 2;
                let mut da = vec![S::zero(); self.data(a).len()];
                let mut db = vec![S::zero(); self.data(b).len()];
                for i in 0..nb {
                    let g = &go[i * m * n..(i + 1) * m * n];
                    let ao = if a_shared { 0 } else { i * m * k };
                    let bo = if b_shared { 0 } else { i * k * n };
                    // dA = dC @ B^T ; dB = A^T @ dC
                    mm_nt_acc(
                        g,
                        &self.data(b)[bo..bo + k * n],
                        &mut da[ao..ao + m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn_acc(
                        &self.data(a)[ao..ao + m * k],
                        g,
                        &mut db[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 2];
                let nb: usize = self.shape(id)[..self.shape(id).len() - 2].iter().product();
                let a_shared = ash.len() == 2;
                let b_shared = bsh.len() == 2;
                let mut da = vec![S::zero(); self.data(a).len()];
                let mut db = vec![S::zero(); self.data(b).len()];
                for i in 0..nb {
                    let g = &go[i * m * n..(i + 1) * m * n];
                    let ao = if a_shared { 0 } else { i * m * k };
                    let bo = if b_shared { 0 } else { i * n * k };
                    // c = a @ b^T: dA = dC @ B ; dB = dC^T @ A
                    mm_acc(
                        g,
                        &self.data(b)[bo..bo + n * k],
                        &mut da[ao..ao + m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn_acc(
                        g,
                        &self.data(a)[ao..ao + m * k],
                        &mut db[bo..bo + n * k],
                        m,
                        n,
                        k,
                    );
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &go);
                let blen = self.data(b).len().max(1);
                if blen == go.len() {
                    self.accumulate(b, &go);
                } else {
                    let mut db = vec![S::zero(); blen];
                    for (i, &g) in go.iter().enumerate() {
                        db[i % blen] += g;
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &go);
                let neg: Vec<S> = go.iter().map(|&g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<S> = go.iter().zip(self.data(b)).map(|(&g, &y)| g * y).collect();
                let db: Vec<S> = go.iter().zip(self.data(a)).map(|(&g, &x)| g * x).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<S> = go.iter().map(|&g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::Relu { a } => {
                let a = *a;
                let da: Vec<S> = go
                    .iter()
                    .zip(self.data(a))
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::SoftmaxLast { a } => {
                let a = *a;
                let n = self.nodes[id.0].value.last_dim();
                let y = self.nodes[id.0].value.data();
                let mut da = Vec::with_capacity(go.len());
                for (yrow, grow) in y.chunks(n).zip(go.chunks(n)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    da.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (a, gain, bias, eps) = (*a, *gain, *bias, *eps);
                let n = self.nodes[a.0].value.last_dim();
                let inv_n = S::one() / S::from_f64(n as f64);
                let mut da = vec![S::zero(); self.data(a).len()];
                let mut dgain = vec![S::zero(); n];
                let mut dbias = vec![S::zero(); n];
                let gd = self.data(gain).to_vec();
                for (r, (row, grow)) in self.data(a).chunks(n).zip(go.chunks(n)).enumerate() {
                    let mean: S = row.iter().cloned().sum::<S>() * inv_n;
                    let var: S = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_n;
                    let inv_std = S::one() / (var + eps).sqrt();
                    let ys: Vec<S> = row.iter().map(|&x| (x - mean) * inv_std).collect();
                    let dy: Vec<S> = grow.iter().zip(&gd).map(|(&g, &gn)| g * gn).collect();
                    let mean_dy: S = dy.iter().cloned().sum::<S>() * inv_n;
                    let mean_dy_y: S = dy.iter().zip(&ys).map(|(&d, &yv)| d * yv).sum::<S>() * inv_n;
                    for j in 0..n {
                        da[r * n + j] = (dy[j] - mean_dy - ys[j] * mean_dy_y) * inv_std;
                        dgain[j] += grow[j] * ys[j];
                        dbias[j] += grow[j];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let dim = self.nodes[id.0].value.last_dim();
                let mut dt = vec![S::zero(); self.data(table).len()];
                for (r, &tok) in ids.iter().enumerate() {
                    let off = tok as usize * dim;
                    for j in 0..dim {
                        dt[off + j] += go[r * dim + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::ConcatLast { parts } => {
                let parts = parts.clone();
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.nodes[p.0].value.last_dim())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = self.nodes[id.0].value.rows();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = vec![S::zero(); rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&go[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(p, &dp);
                    off += w;
                }
            }
            Op::SliceLast { a, lo, hi } => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let n = self.nodes[a.0].value.last_dim();
                let rows = self.nodes[a.0].value.rows();
                let w = hi - lo;
                // gradient is zero outside [lo, hi)
                let mut da = vec![S::zero(); self.data(a).len()];
                for r in 0..rows {
                    da[r * n + lo..r * n + hi].copy_from_slice(&go[r * w..(r + 1) * w]);
                }
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(a, &go);
            }
            Op::SumAll { a } => {
                let a = *a;
                let da = vec![go[0]; self.data(a).len()];
                self.accumulate(a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                smoothing,
                reduction,
            } => {
                let logits = *logits;
                let (targets, mask) = (targets.clone(), mask.clone());
                let smoothing = *smoothing;
                let active = mask.iter().filter(|&&m| m).count();
                let w = match reduction {
                    Reduction::Mean => go[0] / S::from_f64(active as f64),
                    Reduction::Sum => go[0],
                };
                let v = self.nodes[logits.0].value.last_dim();
                let even = smoothing / S::from_f64(v as f64);
                let mut dl = vec![S::zero(); self.data(logits).len()];
                for (r, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &self.data(logits)[r * v..(r + 1) * v];
                    let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
                    let exps: Vec<S> = row.iter().map(|&x| (x - mx).exp()).collect();
                    let z: S = exps.iter().cloned().sum();
                    for j in 0..v {
                        let q = if j == t as usize {
                            S::one() - smoothing + even
                        } else {
                            even
                        };
                        dl[r * v + j] = w * (exps[j] / z - q);
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::Mse {
                pred,
                target,
                mask,
                reduction,
            } => {
                let (pred, target) = (*pred, *target);
                let mask = mask.clone();
                let active = mask.iter().filter(|&&m| m).count();
                let w = match reduction {
                    Reduction::Mean => go[0] / S::from_f64(active as f64),
                    Reduction::Sum => go[0],
                };
                let two = S::from_f64(2.0);
                let dp: Vec<S> = self
                    .data(pred)
                    .iter()
                    .zip(self.data(target))
                    .zip(&mask)
                    .map(|((&p, &t), &m)| {
                        if m {
                            two * w * (p - t)
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                let dt: Vec<S> = dp.iter().map(|&d| -d).collect();
                self.accumulate(pred, &dp);
                self.accumulate(target, &dt);
            }
        }
    }
}
