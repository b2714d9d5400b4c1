//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; `backward` walks it once from the loss down to the
//! leaves and visits each node exactly once.

use std::sync::Arc;

use super::kernels::{self, gemm, Mat};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside the graph module.
pub trait CustomOp<F: Float>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` means the input receives no gradient from this op.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

/// Precomputed rotary-embedding angles for positions `0..max_len`.
#[derive(Debug, Clone)]
pub struct RopeTable<F> {
    cos: Vec<F>,
    sin: Vec<F>,
    max_len: usize,
    half: usize,
}

impl<F: Float> RopeTable<F> {
    pub fn new(head_dim: usize, max_len: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::shape("rope", format!("head dim {head_dim} must be even")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(F::lit(angle.cos()));
                sin.push(F::lit(angle.sin()));
            }
        }
        Ok(RopeTable {
            cos,
            sin,
            max_len,
            half,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.half * 2
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// Position-major sparse target scores for the fused ranking loss.
///
/// Row `r` owns entries `offsets[r]..offsets[r + 1]` of `tokens`/`scores`.
/// Rows with `mask[r] == false` contribute nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTopTargets {
    pub offsets: Vec<usize>,
    pub tokens: Vec<u32>,
    pub scores: Vec<f32>,
    pub mask: Vec<bool>,
}

impl FusedTopTargets {
    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn entries(&self, row: usize) -> (&[u32], &[f32]) {
        let (lo, hi) = (self.offsets[row], self.offsets[row + 1]);
        (&self.tokens[lo..hi], &self.scores[lo..hi])
    }
}

enum Op<F: Float> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Sum(Var),
    Embedding { table: Var, ids: Arc<Vec<u32>> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Rope { x: Var, table: Arc<RopeTable<F>> },
    CausalSoftmax { x: Var, scale: F },
    LogSoftmax(Var),
    NllMean { logp: Var, targets: Arc<Vec<u32>>, mask: Arc<Vec<bool>>, count: usize },
    SoftXentMean { logp: Var, probs: Arc<Vec<F>>, count: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

impl<F: Float> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::Sum(..) => "sum",
            Op::Embedding { .. } => "embedding",
            Op::RmsNorm { .. } => "rms_norm",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Rope { .. } => "rope",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::NllMean { .. } => "nll_mean",
            Op::SoftXentMean { .. } => "soft_xent_mean",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Silu(x) | Op::Sum(x) | Op::LogSoftmax(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::Rope { x, .. }
            | Op::CausalSoftmax { x, .. } => vec![*x],
            Op::NllMean { logp, .. } | Op::SoftXentMean { logp, .. } => vec![*logp],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        op: Box<dyn CustomOp<F>>,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Strict 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-D operands, got {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        self.linear_impl(a, b, false)
    }

    /// `x[..., k] · w[k×n]`: every leading index of `x` is treated as a row.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear_impl(x, w, false)
    }

    /// `x[..., k] · w[n×k]ᵀ`, used for tied unembeddings.
    pub fn linear_transposed(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear_impl(x, w, true)
    }

    fn linear_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 {
            return Err(Error::shape("matmul", format!("operands {ash:?} and {bsh:?}")));
        }
        let k = *ash.last().unwrap();
        let (bk, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {ash:?} x {bsh:?}"),
            ));
        }
        let rows = self.value(a).numel() / k.max(1);
        let mut out = vec![F::zero(); rows * n];
        let bm = Mat::new(self.value(b).data(), bsh[0], bsh[1]);
        gemm(
            Mat::new(self.value(a).data(), rows, k),
            if trans_b { bm.t() } else { bm },
            F::zero(),
            &mut out,
        );
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b })
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(Error::shape("bmm", format!("operands {ash:?} and {bsh:?}")));
        }
        let (g, m, k) = (ash[0], ash[1], ash[2]);
        let (bk, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if k != bk {
            return Err(Error::shape("bmm", format!("inner dimensions {ash:?} x {bsh:?}")));
        }
        let mut out = vec![F::zero(); g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            let am = Mat::new(&av[gi * m * k..(gi + 1) * m * k], m, k);
            let bm = Mat::new(&bv[gi * k * n..(gi + 1) * k * n], bsh[1], bsh[2]);
            gemm(
                am,
                if trans_b { bm.t() } else { bm },
                F::zero(),
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        self.push(Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, trans_b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Row lookup into `table[V×D]`. Ids `>= V` (the padding sentinel)
    /// produce zero rows and receive no gradient.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("table {tsh:?}, ids shape {ids_shape:?} with {} ids", ids.len()),
            ));
        }
        let (vocab, d) = (tsh[0], tsh[1]);
        let tv = self.value(table).data();
        let mut out = vec![F::zero(); ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if (id as usize) < vocab {
                let id = id as usize;
                out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: Arc::new(ids.to_vec()),
            },
        )
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(Error::shape(
                "rms_norm",
                format!("gain {:?} for input {:?}", self.shape(gain), self.shape(x)),
            ));
        }
        let eps = F::lit(eps);
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let rows = xv.numel() / d;
        let mut out = vec![F::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        let dn = F::lit(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let ms: F = row.iter().map(|&v| v * v).sum::<F>() / dn;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * gv[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, inv_rms })
    }

    /// `[b, t, h·dh] -> [b·h, t, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || heads == 0 || sh[2] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{sh:?} into {heads} heads")));
        }
        let (b, t, dh) = (sh[0], sh[1], sh[2] / heads);
        let out = permute_heads(self.value(x).data(), b, t, heads, dh, true);
        self.push(
            Tensor::new(vec![b * heads, t, dh], out)?,
            Op::SplitHeads { x, heads },
        )
    }

    /// `[b·h, t, dh] -> [b, t, h·dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || heads == 0 || sh[0] % heads != 0 {
            return Err(Error::shape("merge_heads", format!("{sh:?} from {heads} heads")));
        }
        let (b, t, dh) = (sh[0] / heads, sh[1], sh[2]);
        let out = permute_heads(self.value(x).data(), b, t, heads, dh, false);
        self.push(
            Tensor::new(vec![b, t, heads * dh], out)?,
            Op::MergeHeads { x, heads },
        )
    }

    /// Rotary position embedding on `[g, t, dh]`, rotating pairs `(i, i + dh/2)`
    /// by the angle of position `t`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable<F>>) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || sh[2] != table.head_dim() || sh[1] > table.max_len() {
            return Err(Error::shape(
                "rope",
                format!("{sh:?} with head dim {} and max len {}", table.head_dim(), table.max_len()),
            ));
        }
        let out = rotate(self.value(x).data(), sh[1], table, false);
        self.push(
            Tensor::new(sh, out)?,
            Op::Rope {
                x,
                table: Arc::clone(table),
            },
        )
    }

    /// Softmax of `scale·x` over the last axis of `[g, t, t]`, restricted to
    /// columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, scale: F) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || sh[1] != sh[2] {
            return Err(Error::shape("causal_softmax", format!("{sh:?} is not [g, t, t]")));
        }
        let t = sh[1];
        let mut out = self.value(x).data().to_vec();
        for (idx, row) in out.chunks_mut(t).enumerate() {
            let i = idx % t;
            let (live, dead) = row.split_at_mut(i + 1);
            for v in live.iter_mut() {
                *v *= scale;
            }
            kernels::softmax_row(live);
            dead.fill(F::zero());
        }
        self.push(Tensor::new(sh, out)?, Op::CausalSoftmax { x, scale })
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let w = out.last_dim();
        if w == 0 {
            return Err(Error::shape("log_softmax", "empty last axis"));
        }
        for row in out.data_mut().chunks_mut(w) {
            kernels::log_softmax_row(row);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// `-mean_{r: mask[r]} logp[r, targets[r]]` over rows of `logp[..., V]`.
    pub fn nll_mean(&mut self, logp: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logp);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "nll_mean",
                format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        let mut count = 0usize;
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r] as usize;
            if tgt >= v {
                return Err(Error::contract(format!(
                    "target {tgt} at unmasked row {r} is outside vocabulary of {v}"
                )));
            }
            total -= lv.data()[r * v + tgt];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let value = total / F::lit(count as f64);
        self.push(
            Tensor::scalar(value),
            Op::NllMean {
                logp,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(mask.to_vec()),
                count,
            },
        )
    }

    /// `-(1/count)·Σ_r Σ_v probs[r,v]·logp[r,v]`; `probs` rows are zero for
    /// rows that do not participate, and `count` is the number that do.
    pub fn soft_xent_mean(&mut self, logp: Var, probs: Vec<F>, count: usize) -> Result<Var> {
        let lv = self.value(logp);
        if probs.len() != lv.numel() {
            return Err(Error::shape(
                "soft_xent_mean",
                format!("{} target values for logits {:?}", probs.len(), lv.shape()),
            ));
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut total = F::zero();
        for (&p, &l) in probs.iter().zip(lv.data()) {
            if p != F::zero() {
                total -= p * l;
            }
        }
        let value = total / F::lit(count as f64);
        self.push(
            Tensor::scalar(value),
            Op::SoftXentMean {
                logp,
                probs: Arc::new(probs),
                count,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::new(shape, vec![F::one()])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.node_backward(node, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], contrib)?;
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let gd = g.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let rows = av.numel() / k.max(1);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let n = if *trans_b { br } else { bc };
                let gm = Mat::new(gd, rows, n);
                let am = Mat::new(av.data(), rows, k);
                let bm = Mat::new(bv.data(), br, bc);
                if self.requires_grad(*a) {
                    let mut da = vec![F::zero(); av.numel()];
                    gemm(gm, if *trans_b { bm } else { bm.t() }, F::zero(), &mut da);
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![F::zero(); bv.numel()];
                    if *trans_b {
                        gemm(gm.t(), am, F::zero(), &mut db);
                    } else {
                        gemm(am.t(), gm, F::zero(), &mut db);
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let (b1, b2) = (bv.shape()[1], bv.shape()[2]);
                let n = if *trans_b { b1 } else { b2 };
                let (need_a, need_b) = (self.requires_grad(*a), self.requires_grad(*b));
                let mut da = vec![F::zero(); if need_a { av.numel() } else { 0 }];
                let mut db = vec![F::zero(); if need_b { bv.numel() } else { 0 }];
                for gi in 0..groups {
                    let gm = Mat::new(&gd[gi * m * n..(gi + 1) * m * n], m, n);
                    let am = Mat::new(&av.data()[gi * m * k..(gi + 1) * m * k], m, k);
                    let bm = Mat::new(&bv.data()[gi * b1 * b2..(gi + 1) * b1 * b2], b1, b2);
                    if need_a {
                        let dst = &mut da[gi * m * k..(gi + 1) * m * k];
                        gemm(gm, if *trans_b { bm } else { bm.t() }, F::zero(), dst);
                    }
                    if need_b {
                        let dst = &mut db[gi * b1 * b2..(gi + 1) * b1 * b2];
                        if *trans_b {
                            gemm(gm.t(), am, F::zero(), dst);
                        } else {
                            gemm(am.t(), gm, F::zero(), dst);
                        }
                    }
                }
                if need_a {
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if need_b {
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
            }
            Op::Scale(x, s) => {
                out.push((*x, g.map(|v| v * *s)));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (F::one() + v * (F::one() - s))
                    })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
                let mut dt = vec![F::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    if id < vocab {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                }
                out.push((*table, Tensor::new(tv.shape().to_vec(), dt)?));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain).data());
                let d = xv.last_dim();
                let dn = F::lit(d as f64);
                let mut dx = vec![F::zero(); xv.numel()];
                let mut dg = vec![F::zero(); d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = xv.row(r);
                    let grow = &gd[r * d..(r + 1) * d];
                    let mut dot = F::zero();
                    for j in 0..d {
                        let n = row[j] * inv;
                        dg[j] += grow[j] * n;
                        dot += grow[j] * gv[j] * n;
                    }
                    let mean = dot / dn;
                    for j in 0..d {
                        let n = row[j] * inv;
                        dx[r * d + j] = inv * (grow[j] * gv[j] - n * mean);
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                out.push((*gain, Tensor::new(vec![d], dg)?));
            }
            Op::SplitHeads { x, heads } => {
                let sh = self.shape(*x);
                let (b, t, dh) = (sh[0], sh[1], sh[2] / heads);
                let dx = permute_heads(gd, b, t, *heads, dh, false);
                out.push((*x, Tensor::new(sh.to_vec(), dx)?));
            }
            Op::MergeHeads { x, heads } => {
                let sh = self.shape(*x);
                let (b, t, dh) = (sh[0] / heads, sh[1], sh[2]);
                let dx = permute_heads(gd, b, t, *heads, dh, true);
                out.push((*x, Tensor::new(sh.to_vec(), dx)?));
            }
            Op::Rope { x, table } => {
                let sh = self.shape(*x);
                let dx = rotate(gd, sh[1], table, true);
                out.push((*x, Tensor::new(sh.to_vec(), dx)?));
            }
            Op::CausalSoftmax { x, scale } => {
                let y = node.value.data();
                let t = self.shape(*x)[1];
                let mut dx = vec![F::zero(); y.len()];
                for (idx, (yr, gr)) in y.chunks(t).zip(gd.chunks(t)).enumerate() {
                    let i = idx % t;
                    let dot: F = (0..=i).map(|j| yr[j] * gr[j]).sum();
                    let dr = &mut dx[idx * t..(idx + 1) * t];
                    for j in 0..=i {
                        dr[j] = *scale * yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, Tensor::new(node.value.shape().to_vec(), dx)?));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(gd.chunks(w)).zip(dx.chunks_mut(w)) {
                    let gsum: F = gr.iter().copied().sum();
                    for j in 0..w {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                out.push((*x, Tensor::new(node.value.shape().to_vec(), dx)?));
            }
            Op::NllMean {
                logp,
                targets,
                mask,
                count,
            } => {
                let lv = self.value(*logp);
                let v = lv.last_dim();
                let scale = -gd[0] / F::lit(*count as f64);
                let mut dl = vec![F::zero(); lv.numel()];
                for (r, (&tgt, &m)) in targets.iter().zip(mask.iter()).enumerate() {
                    if m {
                        dl[r * v + tgt as usize] = scale;
                    }
                }
                out.push((*logp, Tensor::new(lv.shape().to_vec(), dl)?));
            }
            Op::SoftXentMean { logp, probs, count } => {
                let lv = self.value(*logp);
                let scale = -gd[0] / F::lit(*count as f64);
                let dl = probs.iter().map(|&p| p * scale).collect();
                out.push((*logp, Tensor::new(lv.shape().to_vec(), dl)?));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&ins, &node.value, g)?;
                for (v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.shape(*v) {
                            return Err(Error::shape(
                                op.name(),
                                format!("backward produced {:?} for input {:?}", gi.shape(), self.shape(*v)),
                            ));
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<F: Float>(slot: &mut Option<Tensor<F>>, contrib: Tensor<F>) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.shape() != contrib.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("gradient {:?} vs {:?}", acc.shape(), contrib.shape()),
                ));
            }
            for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
    }
    Ok(())
}

#[inline]
fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Moves `[b, t, h, dh]` to `[b, h, t, dh]` (`split`) or back.
fn permute_heads<F: Float>(src: &[F], b: usize, t: usize, h: usize, dh: usize, split: bool) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let merged = ((bi * t + ti) * h + hi) * dh;
                let heads = ((bi * h + hi) * t + ti) * dh;
                let (from, to) = if split { (merged, heads) } else { (heads, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

fn rotate<F: Float>(src: &[F], t: usize, table: &RopeTable<F>, inverse: bool) -> Vec<F> {
    let half = table.half;
    let dh = 2 * half;
    let mut out = vec![F::zero(); src.len()];
    for (idx, (s, o)) in src.chunks(dh).zip(out.chunks_mut(dh)).enumerate() {
        let pos = idx % t;
        let cos = &table.cos[pos * half..(pos + 1) * half];
        let sin = &table.sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let (x1, x2) = (s[i], s[i + half]);
            let sn = if inverse { -sin[i] } else { sin[i] };
            o[i] = x1 * cos[i] - x2 * sn;
            o[i + half] = x1 * sn + x2 * cos[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::identity(2));
        let p = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(p), &Tensor::identity(2));

        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        let yv = g.value(y).data();
        assert!(yv[0].abs() < 1e-12);
        assert!((yv[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 0.1));
        let y = g.causal_softmax(x, 1.0).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_merge_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 8], |i| i as f64));
        let s = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 4]);
        // batch 0, head 1, position 2 starts at merged offset (0*3+2)*8 + 4
        assert_eq!(g.value(s).data()[(3 * 2 - 1) * 4], 20.0);
        let m = g.merge_heads(s, 2).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let table = Arc::new(RopeTable::<f64>::new(4, 8, 10_000.0).unwrap());
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 8, 4], |i| (i as f64 * 0.37).sin()));
        let y = g.rope(x, &table).unwrap();
        let (xv, yv) = (g.value(x).data(), g.value(y).data());
        for (xs, ys) in xv.chunks(4).zip(yv.chunks(4)) {
            for i in 0..2 {
                let nx = xs[i].hypot(xs[i + 2]);
                let ny = ys[i].hypot(ys[i + 2]);
                assert!((nx - ny).abs() < 1e-12);
            }
        }
        // position 0 is unrotated
        assert_eq!(&xv[..4], &yv[..4]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1], &[f64::MAX]).unwrap());
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        // f = sum(x * x) -> df/dx = 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn embedding_skips_sentinel_rows() {
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0));
        let e = g.embedding(table, &[2, 3, 0], &[3]).unwrap();
        assert_eq!(g.value(e).data(), &[5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
