//! Held-out evaluation: NTP-head loss for every objective, per-head losses for
//! MTP models, and ranking diagnostics for the TOP head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TokenSequence, WindowSet};
use crate::error::{Error, Result};
use crate::model::{Model, Objective, Params};
use crate::tensor::Float;
use crate::top_target::{build_dense, DenseTargets};

/// Ranking quality of the TOP head against proximity targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankQuality {
    /// Fraction of positions where the TOP head's argmax is the next token.
    pub next_token_top1_rate: f64,
    /// Mean 1-based rank of the next token under the TOP scores.
    pub mean_rank: f64,
    /// Sampled pairwise order agreement with the targets; `None` when no
    /// eligible pair was seen.
    pub window_ordering_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ntp_head_loss: f64,
    pub perplexity: f64,
    pub mtp_per_head_losses: Option<Vec<f64>>,
    pub top_rank_quality: Option<RankQuality>,
    /// Valid positions scored by the NTP head.
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Evaluate at most this many windows (in stream order).
    pub max_windows: Option<usize>,
    /// Cap on sampled token pairs per position for ordering agreement.
    pub pairs_per_position: usize,
    pub pair_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 8,
            max_windows: None,
            pairs_per_position: 64,
            pair_seed: 0,
        }
    }
}

/// Running pair counts for ordering agreement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairTally {
    pub agree: u64,
    pub total: u64,
}

impl PairTally {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.agree as f64 / self.total as f64)
    }
}

/// Tallies sampled pairs at row `t`: among tokens with finite, distinct target
/// scores, counts pairs whose model score order matches the target order.
/// With at most `cap` eligible pairs all are used; otherwise `cap` are drawn.
fn tally_row(scores: &[f64], target: &[f32], cap: usize, rng: &mut ChaCha8Rng, tally: &mut PairTally) {
    let support: Vec<usize> = (0..target.len()).filter(|&v| target[v].is_finite()).collect();
    let n = support.len();
    if n < 2 || cap == 0 {
        return;
    }
    let mut judge = |a: usize, b: usize| {
        let (ta, tb) = (target[a], target[b]);
        if ta == tb {
            return;
        }
        let (sa, sb) = (scores[a], scores[b]);
        tally.total += 1;
        if (ta > tb && sa > sb) || (ta < tb && sa < sb) {
            tally.agree += 1;
        }
    };
    if n * (n - 1) / 2 <= cap {
        for i in 0..n {
            for j in i + 1..n {
                judge(support[i], support[j]);
            }
        }
    } else {
        for _ in 0..cap {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            judge(support[i], support[j]);
        }
    }
}

/// Pairwise order agreement between `top_scores` (`T × V`) and proximity
/// targets. Returns `None` if no position has an eligible pair.
pub fn window_ordering_agreement<F: Float>(
    top_scores: &[F],
    targets: &DenseTargets,
    pairs_per_position: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let (t_len, v) = (targets.body_len(), targets.vocab_size());
    if top_scores.len() != t_len * v {
        return Err(Error::shape(
            "window_ordering_agreement",
            format!("{} scores for {t_len} × {v} targets", top_scores.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = PairTally::default();
    let mut row = vec![0.0; v];
    for t in 0..t_len {
        for (dst, s) in row.iter_mut().zip(&top_scores[t * v..(t + 1) * v]) {
            *dst = s.as_f64();
        }
        tally_row(&row, targets.row(t), pairs_per_position, &mut rng, &mut tally);
    }
    Ok(tally.rate())
}

/// Whether per-head losses are non-decreasing in head offset, with the
/// consecutive differences.
pub fn mtp_head_ordering(losses: &[f64]) -> (bool, Vec<f64>) {
    let margins: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    (margins.iter().all(|&m| m >= 0.0), margins)
}

impl EvalReport {
    /// [`mtp_head_ordering`] of this report, `None` for non-MTP reports or a
    /// single head.
    pub fn head_ordering(&self) -> Option<(bool, Vec<f64>)> {
        self.mtp_per_head_losses
            .as_ref()
            .filter(|h| h.len() >= 2)
            .map(|h| mtp_head_ordering(h))
    }
}

/// `-log_softmax(row)[target]` in f64.
fn xent<F: Float>(row: &[F], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    lse - row[target].as_f64()
}

#[derive(Default)]
struct Accum {
    ntp_sum: f64,
    ntp_count: usize,
    head_sums: Vec<f64>,
    head_counts: Vec<usize>,
    top1: usize,
    rank_sum: f64,
    ranked: usize,
    pairs: PairTally,
}

/// Evaluates a model on held-out windows. Losses are averaged over valid
/// positions; all accumulation is in f64 and in fixed window order.
pub fn evaluate<F: Float>(
    model: &Model<F>,
    params: &Params<F>,
    heldout: &WindowSet,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let spec = model.spec();
    if heldout.window() < spec.objective.lookahead() {
        return Err(Error::contract(format!(
            "held-out windows carry {} lookahead tokens, objective needs {}",
            heldout.window(),
            spec.objective.lookahead()
        )));
    }
    if heldout.vocab_size() != spec.vocab_size {
        return Err(Error::contract("held-out vocabulary differs from the model's"));
    }
    let n_windows = opts.max_windows.map_or(heldout.len(), |m| m.min(heldout.len()));
    if n_windows == 0 {
        return Err(Error::contract("empty held-out set"));
    }
    let heads = spec.mtp_heads();
    let mut acc = Accum {
        head_sums: vec![0.0; heads],
        head_counts: vec![0; heads],
        ..Accum::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.pair_seed);
    let bs = opts.batch_size.max(1);
    for lo in (0..n_windows).step_by(bs) {
        let idx: Vec<usize> = (lo..(lo + bs).min(n_windows)).collect();
        let batch = heldout.batch(&idx)?;
        eval_batch(model, params, &batch, opts, &mut rng, &mut acc)?;
    }
    if acc.ntp_count == 0 {
        return Err(Error::contract("held-out set has no valid positions"));
    }
    let ntp_head_loss = acc.ntp_sum / acc.ntp_count as f64;
    let mtp_per_head_losses = (heads > 0).then(|| {
        acc.head_sums
            .iter()
            .zip(&acc.head_counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect()
    });
    let top_rank_quality = matches!(spec.objective, Objective::Top { .. }).then(|| RankQuality {
        next_token_top1_rate: acc.top1 as f64 / acc.ranked.max(1) as f64,
        mean_rank: acc.rank_sum / acc.ranked.max(1) as f64,
        window_ordering_agreement: acc.pairs.rate(),
    });
    Ok(EvalReport {
        ntp_head_loss,
        perplexity: ntp_head_loss.exp(),
        mtp_per_head_losses,
        top_rank_quality,
        token_count: acc.ntp_count,
    })
}

fn eval_batch<F: Float>(
    model: &Model<F>,
    params: &Params<F>,
    batch: &Batch,
    opts: &EvalOptions,
    rng: &mut ChaCha8Rng,
    acc: &mut Accum,
) -> Result<()> {
    let spec = model.spec();
    let (b, t_len, v) = (batch.batch_size, batch.seq_len, spec.vocab_size);
    let out = model.infer(params, &batch.inputs, b, t_len)?;
    let mask = batch.ntp_mask();
    for (r, &ok) in mask.iter().enumerate() {
        if ok {
            acc.ntp_sum += xent(out.ntp_logits.row(r), batch.ntp_targets[r] as usize);
            acc.ntp_count += 1;
        }
    }
    if spec.mtp_heads() > 0 {
        let n = spec.mtp_heads();
        let targets = batch.mtp_targets(n)?;
        let mmask = batch.mtp_mask(n)?;
        for (h, logits) in out.mtp_logits.iter().enumerate() {
            for r in 0..b * t_len {
                if mmask[r * n + h] {
                    acc.head_sums[h] += xent(logits.row(r), targets[r * n + h] as usize);
                    acc.head_counts[h] += 1;
                }
            }
        }
    }
    if let (Objective::Top { window }, Some(scores)) = (spec.objective, &out.top_scores) {
        let mut row = vec![0.0; v];
        for bi in 0..b {
            let overhang = batch.overhang_row(bi);
            let seq = TokenSequence::new(
                overhang[..t_len + window].to_vec(),
                t_len,
                window,
                v,
            )?;
            let targets = build_dense(&seq, v, window)?;
            for t in 0..t_len {
                let r = bi * t_len + t;
                if !mask[r] {
                    continue;
                }
                for (dst, s) in row.iter_mut().zip(scores.row(r)) {
                    *dst = s.as_f64();
                }
                let next = best_target(targets.row(t));
                let true_score = row[next];
                let argmax = argmax(&row);
                acc.top1 += usize::from(argmax == next);
                acc.rank_sum += 1.0 + row.iter().filter(|&&s| s > true_score).count() as f64;
                acc.ranked += 1;
                tally_row(&row, targets.row(t), opts.pairs_per_position, rng, &mut acc.pairs);
            }
        }
    }
    Ok(())
}

/// The highest-scoring target token, i.e. the next token.
fn best_target(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in row.iter().enumerate() {
        if s > row[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest score, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in row.iter().enumerate() {
        if s > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn targets() -> DenseTargets {
        let seq = TokenSequence::new(vec![0, 1, 2, 3, 1, 0, 2, 3, 3, 1], 6, 4, 4).unwrap();
        build_dense(&seq, 4, 4).unwrap()
    }

    #[test]
    fn ordering_examples() {
        let (ok, m) = mtp_head_ordering(&[2.1, 2.4, 2.6, 2.7]);
        assert!(ok);
        for (a, b) in m.iter().zip([0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!mtp_head_ordering(&[2.1, 2.0]).0);
    }

    #[test]
    fn agreement_perfect_and_reversed() {
        let tg = targets();
        let same: Vec<f64> = tg.scores().iter().map(|&s| if s.is_finite() { s as f64 } else { -1e9 }).collect();
        let rev: Vec<f64> = same.iter().map(|s| -s).collect();
        assert_eq!(window_ordering_agreement(&same, &tg, 64, 0).unwrap(), Some(1.0));
        assert_eq!(window_ordering_agreement(&rev, &tg, 64, 0).unwrap(), Some(0.0));
    }

    #[test]
    fn agreement_absent_without_pairs() {
        let seq = TokenSequence::new(vec![0, 1, 1], 2, 1, 2).unwrap();
        let tg = build_dense(&seq, 2, 1).unwrap();
        assert_eq!(window_ordering_agreement(&[0.0f64; 4], &tg, 64, 0).unwrap(), None);
    }

    #[test]
    fn agreement_random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stream: Vec<u32> = (0..2100).map(|_| rng.random_range(0..16)).collect();
        let seq = TokenSequence::new(stream, 2000, 100, 16).unwrap();
        let tg = build_dense(&seq, 16, 100).unwrap();
        let scores: Vec<f64> = (0..2000 * 16).map(|_| rng.random::<f64>()).collect();
        let rate = window_ordering_agreement(&scores, &tg, 64, 1).unwrap().unwrap();
        assert!((rate - 0.5).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn uniform_model_scores_ln_v() {
        let mut spec = ModelSpec::desk(Objective::Mtp { future_tokens: 2 });
        spec.d_model = 16;
        spec.n_heads = 2;
        spec.n_layers = 2;
        spec.max_seq_len = 16;
        spec.mlp_hidden = 16;
        let model = Model::<f64>::new(spec.clone()).unwrap();
        let mut params = Params::init(&spec, 0).unwrap();
        params.get_mut("unembed").unwrap().data_mut().fill(0.0);
        let stream: Vec<u32> = (0..100).map(|i| (i * 7 % 256) as u32).collect();
        let ws = WindowSet::new(stream, 16, 2, 256).unwrap();
        let r = evaluate(&model, &params, &ws, &EvalOptions::default()).unwrap();
        let ln256 = 256f64.ln();
        assert!((r.ntp_head_loss - ln256).abs() < 1e-12);
        assert!((r.perplexity - 256.0).abs() < 1e-9);
        for h in r.mtp_per_head_losses.unwrap() {
            assert!((h - ln256).abs() < 1e-12);
        }
        assert_eq!(r.token_count, 99);
    }
}
