//! Optimization: warmup + cosine schedule, global-norm clipping, AdamW, the
//! per-step objective, and the training loop with metrics and checkpoints.

mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::model::{Model, ModelSpec, Objective, Params};
use crate::tensor::{Float, Graph, Tensor};
use crate::top_target::{build_sparse, SparseTargets};

pub use run::{
    eval_row, read_state, train, write_state, TrainOptions, TrainState, TrainSummary, EVAL_HEADER, METRICS_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr_fraction: f64,
    pub batch_size: usize,
    pub grad_clip_max_norm: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Evaluate every this many steps (and at the last step); 0 disables.
    pub eval_every: usize,
    /// Checkpoint every this many steps (and at the last step); 0 keeps only
    /// the final checkpoint.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Assemble batches on the training thread and write `wall_ms = 0` so
    /// metrics files are byte-for-byte reproducible.
    pub deterministic: bool,
    /// Weight of the TOP term in `ntp + weight · top`.
    pub top_loss_weight: f64,
    /// Rows of logits live at once in the fused TOP loss.
    pub fused_block_size: usize,
    /// Fraction of the stream (from the end) held out for evaluation.
    pub heldout_fraction: f64,
    /// Windows per evaluation; `None` uses the whole held-out split.
    pub eval_windows: Option<usize>,
}

impl RunConfig {
    /// Desk-scale defaults for `objective`.
    pub fn desk(objective: Objective) -> Self {
        RunConfig {
            model: ModelSpec::desk(objective),
            steps: 3000,
            warmup_steps: 100,
            peak_lr: 3e-4,
            min_lr_fraction: 0.10,
            batch_size: 16,
            grad_clip_max_norm: 1.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            eval_every: 250,
            checkpoint_every: 1000,
            output_dir: PathBuf::from("runs/desk"),
            deterministic: true,
            top_loss_weight: 1.0,
            fused_block_size: 64,
            heldout_fraction: 0.05,
            eval_windows: Some(64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.warmup_steps >= self.steps {
            return bad("warmup_steps must be smaller than steps");
        }
        if !(self.min_lr_fraction > 0.0 && self.min_lr_fraction <= 1.0) {
            return bad("min_lr_fraction must lie in (0, 1]");
        }
        if !(self.grad_clip_max_norm > 0.0) {
            return bad("grad_clip_max_norm must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.fused_block_size == 0 {
            return bad("fused_block_size must be at least 1");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction must lie in (0, 1)");
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return bad("adamw needs beta1, beta2 in [0, 1), eps > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Learning rate at `step`: a linear ramp from 0 to `peak_lr` over the warmup,
/// then cosine decay to `peak_lr · min_lr_fraction` at `steps`.
pub fn lr_at(step: usize, cfg: &RunConfig) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.min_lr_fraction;
    peak * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { op: "clip_gradients" });
    }
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// AdamW moments for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Updates applied so far.
    pub t: u64,
    decay: Vec<bool>,
}

impl<F: Float> AdamW<F> {
    /// Zero moments shaped like `shapes`; `decay[i]` selects which
    /// parameters receive weight decay.
    pub fn new(shapes: &[&[usize]], decay: Vec<bool>) -> Self {
        assert_eq!(shapes.len(), decay.len());
        AdamW {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            decay,
        }
    }

    /// Decay matrices, not gains.
    pub fn for_params(params: &Params<F>) -> Self {
        let shapes: Vec<&[usize]> = params.tensors().map(Tensor::shape).collect();
        let decay = params.tensors().map(|t| t.ndim() >= 2).collect();
        AdamW::new(&shapes, decay)
    }

    /// One decoupled-weight-decay Adam update with bias correction.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<F>>,
        grads: &[Tensor<F>],
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (fb1, fb2, feps) = (F::lit(b1), F::lit(b2), F::lit(cfg.eps));
        let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let (fc1, fc2, flr) = (F::lit(c1), F::lit(c2), F::lit(lr));
        let mut n = 0;
        for (i, p) in params.into_iter().enumerate() {
            let g = grads
                .get(i)
                .ok_or_else(|| Error::contract("fewer gradients than parameters"))?;
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(Error::shape("adamw", format!("parameter {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let shrink = if self.decay[i] {
                F::lit(1.0 - lr * cfg.weight_decay)
            } else {
                F::one()
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = fb1 * *mj + one_b1 * gj;
                *vj = fb2 * *vj + one_b2 * gj * gj;
                let mhat = *mj / fc1;
                let vhat = *vj / fc2;
                *x = *x * shrink - flr * mhat / (vhat.sqrt() + feps);
            }
            n += 1;
        }
        if n != self.m.len() {
            return Err(Error::contract(format!("{n} parameters for {} optimizer slots", self.m.len())));
        }
        Ok(())
    }
}

/// Loss values and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepResult<F> {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor<F>>,
    /// Next-token cross-entropy read through the TOP head (TOP models only),
    /// computed as a side value outside the loss.
    pub top_head_xent: Option<f64>,
}

/// Sparse TOP targets for every row of `batch`.
pub fn batch_targets(batch: &Batch, window: usize) -> Result<Vec<SparseTargets>> {
    (0..batch.batch_size)
        .map(|b| {
            let row = batch.overhang_row(b);
            let seq = crate::data::TokenSequence::new(
                row[..batch.seq_len + window].to_vec(),
                batch.seq_len,
                window,
                batch.vocab_size,
            )?;
            build_sparse(&seq, batch.vocab_size, window)
        })
        .collect()
}

/// Forward, objective loss and backward for one batch.
///
/// `targets` may carry precomputed TOP targets; they are built on the fly
/// otherwise.
pub fn loss_and_grads<F: Float>(
    model: &Model<F>,
    params: &Params<F>,
    batch: &Batch,
    targets: Option<&[SparseTargets]>,
    top_loss_weight: f64,
    fused_block_size: usize,
) -> Result<StepResult<F>> {
    let spec = model.spec();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, params, true);
    let out = model.forward(&mut g, &bound, &batch.inputs, batch.batch_size, batch.seq_len, false)?;
    let mask = batch.ntp_mask();
    let valid = mask.iter().filter(|&&m| m).count();
    let (loss, ntp, top, heads) = match spec.objective {
        Objective::Ntp => {
            let l = losses::ntp_loss(&mut g, out.ntp_logits, &batch.ntp_targets, &mask)?;
            (l, l, None, None)
        }
        Objective::Mtp { future_tokens } => {
            let tg = batch.mtp_targets(future_tokens)?;
            let mk = batch.mtp_mask(future_tokens)?;
            let (mean, per_head) = losses::mtp_loss(&mut g, &out.mtp_logits, &tg, &mk)?;
            (mean, per_head[0], None, Some(per_head))
        }
        Objective::Top { window } => {
            let owned;
            let tg = match targets {
                Some(t) => t,
                None => {
                    owned = batch_targets(batch, window)?;
                    &owned
                }
            };
            let head = out
                .top_head
                .ok_or_else(|| Error::contract("TOP model without a TOP head"))?;
            let ntp = losses::ntp_loss(&mut g, out.ntp_logits, &batch.ntp_targets, &mask)?;
            let top = losses::top_loss_fused(&mut g, out.final_hidden, head, tg, &mask, fused_block_size)?;
            let total = losses::combine(&mut g, ntp, Some(top), top_loss_weight)?;
            (total, ntp, Some(top), None)
        }
    };
    let value = |g: &Graph<F>, v| g.value(v).item().as_f64();
    let breakdown = LossBreakdown {
        ntp: value(&g, ntp),
        top: top.map(|t| value(&g, t)),
        mtp_per_head: heads.as_ref().map(|h| h.iter().map(|&v| value(&g, v)).collect()),
        total: value(&g, loss),
        valid_position_count: valid,
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads = g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    // recorded after the loss, so the reverse sweep never visits it
    let top_head_xent = match out.top_head {
        Some(head) => {
            let scores = g.linear(out.final_hidden, head)?;
            let xent = losses::ntp_loss(&mut g, scores, &batch.ntp_targets, &mask)?;
            Some(value(&g, xent))
        }
        None => None,
    };
    Ok(StepResult {
        breakdown,
        grads,
        top_head_xent,
    })
}
