use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Additive logit applied to masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;
/// Layer-normalization variance floor.
pub const LN_EPS: f64 = 1e-12;
/// Probability clamp used by binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Released,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    BceSum(usize, usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// and acyclic by construction. A node requires gradients iff it is a trainable
/// leaf or any of its inputs requires gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
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

    /// Gradient of the last backward pass, present only on trainable leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Number of gradient buffers currently held by the graph.
    pub fn grad_buffer_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.grad.is_some()).count()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            self.backward_done = false;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- linear algebra ------------------------------------------------

    /// `a · b` over the last two axes.
    ///
    /// `a` is `(.., m, k)`. `b` is either a shared `(k, n)` matrix or has the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes; `b` is `(n, k)` or batched `(.., n, k)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op_name = if trans_b { "matmul_t" } else { "matmul" };
        let sa = self.val(a).shape().to_vec();
        let sb = self.val(b).shape().to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != bk {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let shared_b = sb.len() == 2;
        let (batch, m) = if shared_b {
            (1, numel(&sa[..sa.len() - 1]))
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape(op_name, &sa, &sb));
            }
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2])
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.val(a).data();
            let bd = self.val(b).data();
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            trans_b,
            shared_b,
            batch,
            m,
            k,
            n,
        };
        self.record(op_name, value, op, &[a.0, b.0])
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.record("add", v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.record("sub", v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.record("mul", v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        self.record("scale", v, Op::Scale(a.0, s), &[a.0])
    }

    /// Adds a `(n)` bias to every row of a `(.., n)` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(bias));
        let n = *ta.shape().last().unwrap_or(&1);
        if tb.rank() != 1 || tb.numel() != n {
            return Err(Error::shape("add_bias", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("add_bias", v, Op::AddBias(a.0, bias.0), &[a.0, bias.0])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        });
        self.record("gelu", v, Op::Gelu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.record("sigmoid", v, Op::Sigmoid(a.0), &[a.0])
    }

    // ---- normalization -------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis with a key mask.
    ///
    /// `key_mask` holds one row of `last_dim` flags per group of
    /// `rows_per_mask` consecutive rows; `false` entries receive
    /// [`MASK_LOGIT`] before normalization.
    pub fn softmax_masked(
        &mut self,
        a: Var,
        key_mask: &[bool],
        rows_per_mask: usize,
    ) -> Result<Var> {
        self.softmax_impl(a, Some((key_mask, rows_per_mask)))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let t = self.val(a);
        let n = *t.shape().last().unwrap_or(&1);
        let rows = t.numel() / n;
        if let Some((m, per)) = mask {
            if per == 0 || !rows.is_multiple_of(per) || m.len() != (rows / per) * n {
                return Err(Error::shape("softmax", t.shape(), &[m.len(), per]));
            }
        }
        let mut data = t.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            if let Some((m, per)) = mask {
                let mrow = &m[(r / per) * n..(r / per + 1) * n];
                for (x, &keep) in row.iter_mut().zip(mrow) {
                    if !keep {
                        *x += MASK_LOGIT;
                    }
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.record("softmax", v, Op::Softmax(a.0), &[a.0])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let n = *tx.shape().last().unwrap_or(&1);
        if tg.numel() != n || tb.numel() != n || tg.rank() != 1 || tb.rank() != 1 {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        self.record("layer_norm", v, op, &[x.0, gain.0, bias.0])
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Mean over elements of the squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.numel() as f64;
        self.record("mse", Tensor::scalar(s), Op::Mse(a.0, b.0), &[a.0, b.0])
    }

    /// `-Σ [t·ln p + (1-t)·ln(1-p)]` summed over all elements, with `p`
    /// clamped to `[1e-7, 1-1e-7]`.
    pub fn bce_sum(&mut self, probs: Var, targets: Var) -> Result<Var> {
        let (tp, tt) = (self.val(probs), self.val(targets));
        if tp.shape() != tt.shape() {
            return Err(Error::shape("bce", tp.shape(), tt.shape()));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        self.record(
            "bce",
            Tensor::scalar(s),
            Op::BceSum(probs.0, targets.0),
            &[probs.0, targets.0],
        )
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        self.record("reshape", t, Op::Reshape(a.0), &[a.0])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.val(a).rank();
        if r < 2 {
            return Err(Error::shape("transpose", self.val(a).shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.val(a);
        let r = t.rank();
        let mut seen = vec![false; r];
        if perm.len() != r
            || perm
                .iter()
                .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", t.shape(), perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let data = permute_data(t.data(), t.shape(), perm);
        let v = Tensor::new(out_shape, data)?;
        self.record(
            "permute",
            v,
            Op::Permute {
                x: a.0,
                perm: perm.to_vec(),
            },
            &[a.0],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.val(p).shape().to_vec())
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.val(p);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.record(
            "concat",
            v,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.val(a);
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        self.record(
            "slice",
            v,
            Op::Slice {
                x: a.0,
                axis,
                start,
            },
            &[a.0],
        )
    }

    /// Gathers rows of a `(V, d)` table; output shape is `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let t = self.val(table);
        if t.rank() != 2 || numel(index_shape) != ids.len() {
            return Err(Error::shape("embedding", t.shape(), index_shape));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let v = Tensor::new(shape, data)?;
        let op = Op::Embedding {
            table: table.0,
            ids: ids.to_vec(),
        };
        self.record("embedding", v, op, &[table.0])
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every trainable leaf, then releases
    /// the recorded operations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty graph".into()));
        }
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran; record a new forward pass first".into(),
            ));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(count);
        grads.resize_with(count, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..count).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                if node.requires_grad {
                    let shape = node.value.shape().to_vec();
                    node.grad = Some(Tensor::new(shape, g)?);
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Released;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Released => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let ad = self.nodes[a].value.data();
                let bd = self.nodes[b].value.data();
                if self.needs(a) {
                    let ga = slot(grads, a, ad.len());
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                        let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // dA = dC · B, B is (n, k)
                            gemm_nn(g_s, b_s, ga_s, m, n, k);
                        } else {
                            // dA = dC · Bᵀ, B is (k, n)
                            gemm_nt(g_s, b_s, ga_s, m, n, k);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, bd.len());
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                        let off = if shared_b { 0 } else { bi * k * n };
                        let gb_s = &mut gb[off..off + k * n];
                        if trans_b {
                            // dB = dCᵀ · A, (n, k)
                            gemm_tn(g_s, a_s, gb_s, n, m, k);
                        } else {
                            // dB = Aᵀ · dC, (k, n)
                            gemm_tn(a_s, g_s, gb_s, k, m, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                accumulate(grads, self, a, |ga| add_into(ga, g));
                accumulate(grads, self, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                accumulate(grads, self, a, |ga| add_into(ga, g));
                accumulate(grads, self, b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                accumulate(grads, self, a, |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                });
                accumulate(grads, self, b, |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                });
            }
            &Op::Scale(a, s) => accumulate(grads, self, a, |ga| {
                for (x, &gy) in ga.iter_mut().zip(g) {
                    *x += gy * s;
                }
            }),
            &Op::AddBias(a, bias) => {
                accumulate(grads, self, a, |ga| add_into(ga, g));
                let n = self.nodes[bias].value.numel();
                accumulate(grads, self, bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                accumulate(grads, self, a, |ga| {
                    for ((gr, yr), xr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for ((x, &gy), &y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gy - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gd = self.nodes[gain].value.data();
                let n = gd.len();
                accumulate(grads, self, x, |gx| {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dot(&dxhat, hr) / n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                accumulate(grads, self, gain, |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                accumulate(grads, self, bias, |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
            }
            &Op::Gelu(a) => {
                let xd = self.nodes[a].value.data();
                accumulate(grads, self, a, |ga| {
                    for ((d, &gy), &x) in ga.iter_mut().zip(g).zip(xd) {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d += gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            &Op::Sigmoid(a) => accumulate(grads, self, a, |ga| {
                for ((d, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gy * y * (1.0 - y);
                }
            }),
            &Op::Sum(a) => accumulate(grads, self, a, |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::Mean(a) => {
                let n = self.nodes[a].value.numel() as f64;
                accumulate(grads, self, a, |ga| {
                    for d in ga.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            &Op::Mse(a, b) => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let c = 2.0 * g[0] / ad.len() as f64;
                accumulate(grads, self, a, |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(ad).zip(bd) {
                        *d += c * (x - y);
                    }
                });
                accumulate(grads, self, b, |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(ad).zip(bd) {
                        *d -= c * (x - y);
                    }
                });
            }
            &Op::BceSum(p, t) => {
                let (pd, td) = (self.nodes[p].value.data(), self.nodes[t].value.data());
                accumulate(grads, self, p, |gp| {
                    for ((d, &pr), &tg) in gp.iter_mut().zip(pd).zip(td) {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pr) {
                            *d += g[0] * (-(tg / pr) + (1.0 - tg) / (1.0 - pr));
                        }
                    }
                });
                accumulate(grads, self, t, |gt| {
                    for (d, &pr) in gt.iter_mut().zip(pd) {
                        let pc = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *d += g[0] * (-(pc.ln()) + (1.0 - pc).ln());
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[*axis] * inner;
                    accumulate(grads, self, p, |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * w..(o + 1) * w],
                                &g[o * total + offset..o * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x].value.shape();
                let outer = numel(&in_shape[..axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let len = node.value.shape()[axis];
                accumulate(grads, self, x, |gx| {
                    for o in 0..outer {
                        let base = o * in_shape[axis] * inner + start * inner;
                        add_into(
                            &mut gx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            &Op::Reshape(a) => accumulate(grads, self, a, |ga| add_into(ga, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                accumulate(grads, self, *x, |gx| add_into(gx, &back));
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.shape()[1];
                accumulate(grads, self, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    graph: &Graph,
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !graph.nodes[id].requires_grad {
        return;
    }
    let len = graph.nodes[id].value.numel();
    f(slot(grads, id, len));
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if r == 0 {
        return data.to_vec();
    }
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    let last = r - 1;
    let (ln, ls) = (out_shape[last], strides[last]);
    while out.len() < total {
        for j in 0..ln {
            out.push(data[src + j * ls]);
        }
        // advance the outer index by one
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
