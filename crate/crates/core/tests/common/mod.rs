//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use toplab::data::{Batch, TokenId, WindowSet};
use toplab::model::{ModelSpec, Objective, Params};
use toplab::tensor::{Float, Tensor};

/// A model small enough for element-wise finite differences.
pub fn tiny_spec(objective: Objective, n_layers: usize) -> ModelSpec {
    ModelSpec {
        d_model: 8,
        n_layers,
        n_heads: 2,
        vocab_size: 7,
        max_seq_len: 8,
        rope_theta: 10_000.0,
        mlp_hidden: 12,
        tied_embeddings: false,
        objective,
    }
}

/// Parameters with O(1) entries so that every path through the network
/// carries a gradient well above finite-difference noise.
pub fn lively_params<F: Float>(spec: &ModelSpec, seed: u64) -> Params<F> {
    let base = Params::<f64>::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let wide = Normal::new(0.0, 0.4).unwrap();
    let gain = Normal::new(1.0, 0.1).unwrap();
    let entries = base
        .into_entries()
        .into_iter()
        .map(|(name, t)| {
            let is_norm = name.ends_with("norm");
            let fresh = Tensor::from_fn(t.shape(), |_| {
                if is_norm {
                    gain.sample(&mut rng)
                } else {
                    wide.sample(&mut rng)
                }
            });
            (name, fresh)
        })
        .collect();
    Params::from_entries(spec, entries).unwrap().cast()
}

pub fn random_stream(len: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

/// A batch of `b` windows of `T + lookahead` tokens taken from a random
/// stream; the last window runs into sentinel padding.
pub fn random_batch(b: usize, seq_len: usize, lookahead: usize, vocab: usize, seed: u64) -> Batch {
    let stream = random_stream((b * seq_len - 1).max(seq_len.max(2)), vocab, seed);
    let ws = WindowSet::new(stream, seq_len, lookahead, vocab).unwrap();
    let idx: Vec<usize> = (0..b).collect();
    ws.batch(&idx).unwrap()
}

/// A byte-level training stream from the built-in text generator.
pub fn text_stream(bytes: usize, seed: u64) -> Vec<TokenId> {
    toplab::data::synthetic_corpus(bytes, seed)
        .into_iter()
        .map(TokenId::from)
        .collect()
}

/// Which training loss a model-level check differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Ntp,
    Mtp,
    TopDense,
    TopFused { block: usize },
}

/// Records `kind`'s loss for `batch` on `g`, reading parameters through `bound`.
pub fn record_loss<F: Float>(
    g: &mut toplab::tensor::Graph<F>,
    model: &toplab::model::Model<F>,
    bound: &toplab::model::BoundParams,
    batch: &Batch,
    kind: LossKind,
) -> toplab::Result<toplab::tensor::Var> {
    use toplab::losses;
    let spec = model.spec();
    let want_scores = kind == LossKind::TopDense;
    let out = model.forward(g, bound, &batch.inputs, batch.batch_size, batch.seq_len, want_scores)?;
    let mask = batch.ntp_mask();
    match (kind, spec.objective) {
        (LossKind::Ntp, _) => losses::ntp_loss(g, out.ntp_logits, &batch.ntp_targets, &mask),
        (LossKind::Mtp, Objective::Mtp { future_tokens }) => {
            let tg = batch.mtp_targets(future_tokens)?;
            let mk = batch.mtp_mask(future_tokens)?;
            Ok(losses::mtp_loss(g, &out.mtp_logits, &tg, &mk)?.0)
        }
        (LossKind::TopDense, Objective::Top { window }) => {
            let dense = (0..batch.batch_size)
                .map(|b| toplab::top_target::build_dense(&batch.sequence(b)?, batch.vocab_size, window))
                .collect::<toplab::Result<Vec<_>>>()?;
            losses::top_loss_dense(g, out.top_scores.unwrap(), &dense, &mask)
        }
        (LossKind::TopFused { block }, Objective::Top { window }) => {
            let sparse = toplab::trainer::batch_targets(batch, window)?;
            losses::top_loss_fused(g, out.final_hidden, out.top_head.unwrap(), &sparse, &mask, block)
        }
        (k, o) => panic!("{k:?} does not apply to {o:?}"),
    }
}

/// Parameters a loss does not touch; they are held constant during a check.
fn untouched(kind: LossKind, name: &str) -> bool {
    match kind {
        LossKind::TopDense | LossKind::TopFused { .. } => name == "unembed",
        _ => false,
    }
}

/// Central-difference check of `kind`'s loss with respect to every parameter
/// of a small f64 model with `n_layers` blocks.
pub fn model_gradcheck(
    objective: Objective,
    n_layers: usize,
    kind: LossKind,
    seed: u64,
) -> toplab::tensor::GradCheckReport {
    use toplab::model::{BoundParams, Model};
    let spec = tiny_spec(objective, n_layers);
    let params: Params<f64> = lively_params(&spec, seed);
    let model = Model::<f64>::new(spec.clone()).unwrap();
    let batch = random_batch(2, 6, objective.lookahead(), spec.vocab_size, seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let checked: Vec<Tensor<f64>> = params
        .entries()
        .iter()
        .filter(|(n, _)| !untouched(kind, n))
        .map(|(_, t)| t.clone())
        .collect();
    let build = |g: &mut toplab::tensor::Graph<f64>, vars: &[toplab::tensor::Var]| {
        let mut next = vars.iter();
        let all: Vec<_> = names
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| {
                if untouched(kind, n) {
                    g.constant(t.clone())
                } else {
                    *next.next().unwrap()
                }
            })
            .collect();
        let bound = BoundParams::from_vars(&params, &all)?;
        record_loss(g, &model, &bound, &batch, kind)
    };
    toplab::tensor::finite_difference_check(build, &checked, 1e-5, 1e-4, 1e-6, 1).unwrap()
}

/// `|fused - dense|` for one random instance of the TOP loss computed straight
/// from hidden states and a head matrix, or `None` if no position is valid.
pub fn fused_dense_gap<F: Float>(
    rows: usize,
    seq_len: usize,
    vocab: usize,
    window: usize,
    block: usize,
    seed: u64,
) -> Option<f64> {
    use toplab::data::TokenSequence;
    use toplab::losses::{top_loss_dense, top_loss_fused};
    use toplab::tensor::Graph;
    use toplab::top_target::build_sparse;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 5;
    let mut sparse = Vec::new();
    for _ in 0..rows {
        let real = rng.random_range(1..=seq_len + window);
        let mut toks = random_stream(real, vocab, rng.random());
        toks.resize(seq_len + window, vocab as TokenId);
        let seq = TokenSequence::new(toks, seq_len, window, vocab).unwrap();
        sparse.push(build_sparse(&seq, vocab, window).unwrap());
    }
    let mask: Vec<bool> = sparse.iter().flat_map(|s| s.valid_mask()).collect();
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let dense: Vec<_> = sparse.iter().map(|s| s.densify()).collect();
    let hidden = Tensor::<F>::from_fn(&[rows, seq_len, d], |_| F::lit(rng.random_range(-1.0..1.0)));
    let weight = Tensor::<F>::from_fn(&[d, vocab], |_| F::lit(rng.random_range(-2.0..2.0)));

    let mut g = Graph::<F>::new();
    let h = g.param(hidden);
    let w = g.param(weight);
    let fused = top_loss_fused(&mut g, h, w, &sparse, &mask, block).unwrap();
    let scores = g.linear(h, w).unwrap();
    let dense = top_loss_dense(&mut g, scores, &dense, &mask).unwrap();
    Some((g.value(fused).item().as_f64() - g.value(dense).item().as_f64()).abs())
}

/// Every output tensor of a forward pass, flattened per output kind.
fn outputs(inf: &toplab::model::Inference<f64>) -> Vec<&Tensor<f64>> {
    let mut v = vec![&inf.ntp_logits];
    v.extend(inf.top_scores.as_ref());
    v.extend(inf.mtp_logits.iter());
    v
}

/// Changes the token at each position `p` of a random input and checks that
/// every output at positions `< p` stays bitwise identical (and that the
/// output at `p` does change, so the test is not vacuous).
pub fn causality_holds(objective: Objective, n_layers: usize, seed: u64) -> bool {
    use toplab::model::Model;
    let spec = tiny_spec(objective, n_layers);
    let params: Params<f64> = lively_params(&spec, seed);
    let model = Model::new(spec.clone()).unwrap();
    let t = spec.max_seq_len;
    let v = spec.vocab_size;
    let base = random_stream(t, v, seed);
    let reference = model.infer(&params, &base, 1, t).unwrap();
    (0..t).all(|p| {
        let mut poked = base.clone();
        poked[p] = (poked[p] + 1) % v as TokenId;
        let out = model.infer(&params, &poked, 1, t).unwrap();
        outputs(&reference).iter().zip(outputs(&out)).all(|(a, b)| {
            let prefix = p * v;
            let same_before = a.data()[..prefix]
                .iter()
                .zip(&b.data()[..prefix])
                .all(|(x, y)| x.to_bits() == y.to_bits());
            let moved_at_p = a.data()[prefix..prefix + v] != b.data()[prefix..prefix + v];
            same_before && moved_at_p
        })
    })
}

/// Next-token logits of the full training model and of its stripped
/// inference model are bitwise equal.
pub fn strip_is_bitwise(objective: Objective, n_layers: usize, seed: u64) -> bool {
    use toplab::model::{strip_to_inference, Model};
    let spec = tiny_spec(objective, n_layers);
    let params: Params<f64> = lively_params(&spec, seed);
    let (stripped_spec, stripped) = strip_to_inference(&spec, &params).unwrap();
    let t = spec.max_seq_len;
    let input = random_stream(2 * t, spec.vocab_size, seed);
    let full = Model::new(spec).unwrap().infer(&params, &input, 2, t).unwrap();
    let lean = Model::new(stripped_spec).unwrap().infer(&stripped, &input, 2, t).unwrap();
    full.ntp_logits.shape() == lean.ntp_logits.shape()
        && full
            .ntp_logits
            .data()
            .iter()
            .zip(lean.ntp_logits.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// A byte-level run small enough to train for a handful of steps in tests.
pub fn small_run(objective: Objective, dir: &std::path::Path) -> toplab::trainer::RunConfig {
    let mut cfg = toplab::trainer::RunConfig::desk(objective);
    cfg.model.d_model = 16;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.max_seq_len = 16;
    cfg.model.mlp_hidden = 24;
    cfg.steps = 10;
    cfg.warmup_steps = 2;
    cfg.peak_lr = 3e-3;
    cfg.batch_size = 4;
    cfg.eval_every = 5;
    cfg.checkpoint_every = 5;
    cfg.eval_windows = Some(4);
    cfg.heldout_fraction = 0.1;
    cfg.fused_block_size = 8;
    cfg.output_dir = dir.to_path_buf();
    cfg
}
