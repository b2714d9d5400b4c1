//! Training objectives recorded on the autodiff graph.
//!
//! All losses are means over valid positions (and over heads for MTP). Masked
//! positions contribute exactly zero to both value and gradient.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm, logsumexp, softmax_row, Mat};
use crate::tensor::{softmax_with_neg_inf, CustomOp, Float, FusedTopTargets, Graph, Tensor, Var};
use crate::top_target::{DenseTargets, SparseTargets};

/// Scalar loss components of one step, as plain numbers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp: f64,
    pub top: Option<f64>,
    pub mtp_per_head: Option<Vec<f64>>,
    pub total: f64,
    pub valid_position_count: usize,
}

impl LossBreakdown {
    pub fn mtp_mean(&self) -> Option<f64> {
        self.mtp_per_head
            .as_ref()
            .map(|h| h.iter().sum::<f64>() / h.len() as f64)
    }

    pub fn mtp_sum(&self) -> Option<f64> {
        self.mtp_per_head.as_ref().map(|h| h.iter().sum())
    }

    pub fn is_finite(&self) -> bool {
        self.ntp.is_finite()
            && self.total.is_finite()
            && self.top.is_none_or(f64::is_finite)
            && self
                .mtp_per_head
                .as_ref()
                .is_none_or(|h| h.iter().all(|v| v.is_finite()))
    }
}

fn rows_and_vocab<F: Float>(g: &Graph<F>, logits: Var, mask_len: usize, op: &'static str) -> Result<(usize, usize)> {
    let v = g.value(logits).last_dim();
    let rows = g.value(logits).numel() / v.max(1);
    if rows != mask_len {
        return Err(Error::Shape {
            op,
            detail: format!("{rows} score rows but mask of {mask_len}"),
        });
    }
    Ok((rows, v))
}

/// Next-token cross-entropy: mean over masked positions of
/// `-log_softmax(logits)[target]`.
pub fn ntp_loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
    rows_and_vocab(g, logits, mask.len(), "ntp_loss")?;
    let logp = g.log_softmax(logits)?;
    g.nll_mean(logp, targets, mask)
}

/// Target distribution `softmax(y_t)` for every row, zero rows where masked.
fn dense_target_probs<F: Float>(targets: &[DenseTargets], mask: &[bool], vocab: usize) -> Result<(Vec<F>, usize)> {
    let body = targets.first().map(DenseTargets::body_len).unwrap_or(0);
    if targets.iter().any(|t| t.body_len() != body || t.vocab_size() != vocab) {
        return Err(Error::shape("top_loss", "target blocks disagree on T or V"));
    }
    if targets.len() * body != mask.len() {
        return Err(Error::shape(
            "top_loss",
            format!("{} target rows for mask of {}", targets.len() * body, mask.len()),
        ));
    }
    let mut probs = vec![F::zero(); mask.len() * vocab];
    let mut count = 0;
    for (b, tg) in targets.iter().enumerate() {
        for t in 0..body {
            let r = b * body + t;
            if !mask[r] {
                continue;
            }
            let row: Vec<F> = tg.row(t).iter().map(|&s| F::lit(s as f64)).collect();
            let p = softmax_with_neg_inf(&row).map_err(|e| match e {
                Error::EmptySupport => Error::contract(format!(
                    "position {r} is unmasked but its target row is all -inf"
                )),
                other => other,
            })?;
            probs[r * vocab..(r + 1) * vocab].copy_from_slice(p.data());
            count += 1;
        }
    }
    Ok((probs, count))
}

/// Listwise ranking loss on dense targets: mean over masked positions of
/// `-⟨softmax(y_t), log_softmax(scores_t)⟩`. `targets` holds one block per
/// batch row. Targets are constants; only `scores` receives gradient.
pub fn top_loss_dense<F: Float>(
    g: &mut Graph<F>,
    scores: Var,
    targets: &[DenseTargets],
    mask: &[bool],
) -> Result<Var> {
    let (_, vocab) = rows_and_vocab(g, scores, mask.len(), "top_loss_dense")?;
    let (probs, count) = dense_target_probs::<F>(targets, mask, vocab)?;
    let logp = g.log_softmax(scores)?;
    g.soft_xent_mean(logp, probs, count)
}

/// Concatenates per-row sparse targets into the flat layout used by the fused
/// loss, checking that every masked-in row has support.
pub fn fused_targets(targets: &[SparseTargets], mask: &[bool]) -> Result<FusedTopTargets> {
    let body = targets.first().map(SparseTargets::body_len).unwrap_or(0);
    if targets.iter().any(|t| t.body_len() != body) || targets.len() * body != mask.len() {
        return Err(Error::shape("top_loss_fused", "targets do not cover the mask"));
    }
    let mut offsets = vec![0];
    let mut tokens = Vec::new();
    let mut scores = Vec::new();
    for (b, tg) in targets.iter().enumerate() {
        for t in 0..body {
            let (toks, sc) = tg.row(t);
            if mask[b * body + t] && toks.is_empty() {
                return Err(Error::contract(format!(
                    "position {} is unmasked but has no target entries",
                    b * body + t
                )));
            }
            tokens.extend_from_slice(toks);
            scores.extend(sc.iter().map(|&s| s as f32));
            offsets.push(tokens.len());
        }
    }
    Ok(FusedTopTargets {
        offsets,
        tokens,
        scores,
        mask: mask.to_vec(),
    })
}

struct FusedTopLoss {
    targets: Arc<FusedTopTargets>,
    block: usize,
    count: usize,
}

impl FusedTopLoss {
    /// Softmax of the sparse target scores of row `r`.
    fn target_probs<F: Float>(&self, r: usize, out: &mut Vec<F>) {
        let (_, sc) = self.targets.entries(r);
        out.clear();
        out.extend(sc.iter().map(|&s| F::lit(s as f64)));
        softmax_row(out);
    }

    fn forward<F: Float>(&self, hidden: &[F], weight: &[F], d: usize, v: usize) -> Result<F> {
        let rows = self.targets.rows();
        let mut logits = vec![F::zero(); self.block * v];
        let mut p: Vec<F> = Vec::new();
        let mut total = F::zero();
        for r0 in (0..rows).step_by(self.block) {
            let r1 = (r0 + self.block).min(rows);
            let n = r1 - r0;
            let buf = &mut logits[..n * v];
            gemm(
                Mat::new(&hidden[r0 * d..r1 * d], n, d),
                Mat::new(weight, d, v),
                F::zero(),
                buf,
            );
            for r in r0..r1 {
                if !self.targets.mask[r] {
                    continue;
                }
                let row = &buf[(r - r0) * v..(r - r0 + 1) * v];
                let lse = logsumexp(row);
                self.target_probs(r, &mut p);
                let (toks, _) = self.targets.entries(r);
                let mut dot = F::zero();
                for (&tok, &pi) in toks.iter().zip(&p) {
                    dot += pi * (row[tok as usize] - lse);
                }
                total -= dot;
            }
        }
        Ok(total / F::lit(self.count as f64))
    }
}

impl<F: Float> CustomOp<F> for FusedTopLoss {
    fn name(&self) -> &'static str {
        "top_loss_fused"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (hidden, weight) = (inputs[0], inputs[1]);
        let (d, v) = (weight.shape()[0], weight.shape()[1]);
        let rows = self.targets.rows();
        let scale = grad.item() / F::lit(self.count as f64);
        let hd = hidden.data();
        let mut dh = vec![F::zero(); hidden.numel()];
        let mut dw = vec![F::zero(); weight.numel()];
        let mut dlogits = vec![F::zero(); self.block * v];
        let mut p: Vec<F> = Vec::new();
        for r0 in (0..rows).step_by(self.block) {
            let r1 = (r0 + self.block).min(rows);
            let n = r1 - r0;
            // recompute this block's logits; they are never cached
            let buf = &mut dlogits[..n * v];
            gemm(Mat::new(&hd[r0 * d..r1 * d], n, d), Mat::new(weight.data(), d, v), F::zero(), buf);
            for r in r0..r1 {
                let row = &mut buf[(r - r0) * v..(r - r0 + 1) * v];
                if !self.targets.mask[r] {
                    row.fill(F::zero());
                    continue;
                }
                softmax_row(row);
                self.target_probs(r, &mut p);
                let (toks, _) = self.targets.entries(r);
                for (&tok, &pi) in toks.iter().zip(&p) {
                    row[tok as usize] -= pi;
                }
                for x in row.iter_mut() {
                    *x *= scale;
                }
            }
            let buf = &dlogits[..n * v];
            gemm(Mat::new(buf, n, v), Mat::new(weight.data(), d, v).t(), F::zero(), &mut dh[r0 * d..r1 * d]);
            gemm(Mat::new(&hd[r0 * d..r1 * d], n, d).t(), Mat::new(buf, n, v), F::one(), &mut dw);
        }
        Ok(vec![
            Some(Tensor::new(hidden.shape().to_vec(), dh)?),
            Some(Tensor::new(weight.shape().to_vec(), dw)?),
        ])
    }
}

/// Ranking loss computed block-wise from the final hidden states and the TOP
/// unembedding without materializing the `T × V` targets or the full score
/// matrix. Numerically equal to
/// `top_loss_dense(hidden · weight, densify(targets))`.
///
/// `targets` holds one block per batch row; `block_size` rows of logits are
/// live at a time (clamped to the number of rows).
pub fn top_loss_fused<F: Float>(
    g: &mut Graph<F>,
    hidden: Var,
    weight: Var,
    targets: &[SparseTargets],
    mask: &[bool],
    block_size: usize,
) -> Result<Var> {
    if block_size == 0 {
        return Err(Error::contract("block size must be at least 1"));
    }
    let wsh = g.shape(weight).to_vec();
    let d = g.value(hidden).last_dim();
    if wsh.len() != 2 || wsh[0] != d {
        return Err(Error::shape(
            "top_loss_fused",
            format!("hidden {:?} with head weight {wsh:?}", g.shape(hidden)),
        ));
    }
    let v = wsh[1];
    let rows = g.value(hidden).numel() / d.max(1);
    if rows != mask.len() {
        return Err(Error::shape("top_loss_fused", format!("{rows} rows, mask of {}", mask.len())));
    }
    if targets.iter().any(|t| t.vocab_size() != v) {
        return Err(Error::shape("top_loss_fused", "target vocabulary differs from head width"));
    }
    let flat = fused_targets(targets, mask)?;
    let count = flat.mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let op = FusedTopLoss {
        targets: Arc::new(flat),
        block: block_size.min(rows.max(1)),
        count,
    };
    let value = op.forward(g.value(hidden).data(), g.value(weight).data(), d, v)?;
    g.custom(&[hidden, weight], Tensor::scalar(value), Box::new(op))
}

/// Multi-token loss over `N` heads. `targets` and `mask` are `B × T × N`
/// (head `n` at offset `n + 1`). Returns the mean over heads and each head's
/// loss.
pub fn mtp_loss<F: Float>(
    g: &mut Graph<F>,
    head_logits: &[Var],
    targets: &[u32],
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let n = head_logits.len();
    if n == 0 || targets.len() != mask.len() || targets.len() % n != 0 {
        return Err(Error::shape(
            "mtp_loss",
            format!("{n} heads with {} targets and {} mask entries", targets.len(), mask.len()),
        ));
    }
    let rows = targets.len() / n;
    let mut per_head = Vec::with_capacity(n);
    for (h, &logits) in head_logits.iter().enumerate() {
        let tg: Vec<u32> = (0..rows).map(|r| targets[r * n + h]).collect();
        let mk: Vec<bool> = (0..rows).map(|r| mask[r * n + h]).collect();
        per_head.push(ntp_loss(g, logits, &tg, &mk)?);
    }
    let mut total = per_head[0];
    for &h in &per_head[1..] {
        total = g.add(total, h)?;
    }
    let total = if n > 1 {
        g.scale(total, F::lit(1.0 / n as f64))?
    } else {
        total
    };
    Ok((total, per_head))
}

/// `ntp + weight · aux`. With `aux = None` the NTP (or MTP total) is returned.
pub fn combine<F: Float>(g: &mut Graph<F>, ntp: Var, aux: Option<Var>, weight: f64) -> Result<Var> {
    match aux {
        None => Ok(ntp),
        Some(aux) => {
            let aux = if weight == 1.0 {
                aux
            } else {
                g.scale(aux, F::lit(weight))?
            };
            g.add(ntp, aux)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn ntp_uniform_and_delta() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 3, 4]));
        let l = ntp_loss(&mut g, logits, &[0, 2, 3], &[true; 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let mut z = Tensor::<f64>::zeros(&[1, 2, 4]);
        z.data_mut()[1] = 20.0;
        z.data_mut()[4 + 3] = 20.0;
        let logits = g.constant(z);
        let l = ntp_loss(&mut g, logits, &[1, 3], &[true, true]).unwrap();
        assert!(g.value(l).item() <= 1e-8);
    }

    #[test]
    fn ntp_matches_direct_formula() {
        let z = random(&[2, 3, 5], 11);
        let targets = [0u32, 4, 2, 1, 3, 3];
        let mut g = Graph::new();
        let logits = g.constant(z.clone());
        let l = ntp_loss(&mut g, logits, &targets, &[true; 6]).unwrap();
        let mut direct = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = z.row(r);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            direct += -(row[t as usize].exp() / denom).ln();
        }
        assert!((g.value(l).item() - direct / 6.0).abs() < 1e-10);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(ntp_loss(&mut g, logits, &[0, 0], &[false, false]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn top_matched_two_point_distribution_gives_ln2() {
        let probs = vec![0.5f64, 0.5, 0.0];
        let mut g = Graph::<f64>::new();
        let scores = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, -20.0]).unwrap());
        let logp = g.log_softmax(scores).unwrap();
        let l = g.soft_xent_mean(logp, probs, 1).unwrap();
        // q = [0.5, 0.5, ~1e-9] so the loss is ln 2 up to the tiny tail mass
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn combine_sums() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let only = combine(&mut g, a, None, 1.0).unwrap();
        assert_eq!(g.value(only).item(), 2.0);
        let both = combine(&mut g, a, Some(b), 1.0).unwrap();
        assert_eq!(g.value(both).item(), 5.0);
    }

    #[test]
    fn mtp_single_head_is_ntp_and_uniform_heads_are_ln_v() {
        let z = random(&[1, 4, 6], 5);
        let tg = [1u32, 2, 3, 4];
        let mut g = Graph::new();
        let logits = g.constant(z);
        let ntp = ntp_loss(&mut g, logits, &tg, &[true; 4]).unwrap();
        let (total, heads) = mtp_loss(&mut g, &[logits], &tg, &[true; 4]).unwrap();
        assert!((g.value(total).item() - g.value(ntp).item()).abs() < 1e-12);
        assert_eq!(heads.len(), 1);

        let mut g = Graph::<f64>::new();
        let heads: Vec<Var> = (0..4).map(|_| g.constant(Tensor::zeros(&[1, 2, 4]))).collect();
        let targets: Vec<u32> = (0..8).map(|i| i % 4).collect();
        let (total, per) = mtp_loss(&mut g, &heads, &targets, &[true; 8]).unwrap();
        for h in per {
            assert!((g.value(h).item() - 4f64.ln()).abs() < 1e-15);
        }
        assert!((g.value(total).item() - 4f64.ln()).abs() < 1e-15);
    }
}
