//! The training loop and its on-disk artifacts.
//!
//! Output directory layout:
//!
//! ```text
//! metrics.csv               one row per optimizer step
//! eval.csv                  one row per held-out evaluation
//! timing.csv                step wall-clock times (never compared)
//! checkpoints/step_NNNNNN.ckpt    model checkpoint
//! checkpoints/step_NNNNNN.state   optimizer state for resuming
//! ```
//!
//! The batch at step `k` depends only on `(seed, k)`, so a run resumed from a
//! checkpoint sees the same data as an uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use super::{batch_targets, clip_gradients, loss_and_grads, lr_at, AdamW, RunConfig};
use crate::data::{split_heldout, unigram_entropy, Batch, TokenId, WindowSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::losses::LossBreakdown;
use crate::model::checkpoint::{atomic_write, write_tensors, Reader};
use crate::model::{load_checkpoint, save_checkpoint, Model, Objective, Params};
use crate::top_target::SparseTargets;

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_ntp,loss_top,loss_mtp_mean,loss_mtp_sum,mtp_per_head,top_head_xent,grad_norm,tokens_seen,valid_positions,wall_ms";
pub const EVAL_HEADER: &str =
    "step,ntp_head_loss,perplexity,mtp_per_head,top1_rate,mean_rank,window_agreement,token_count";
const TIMING_HEADER: &str = "step,wall_ms";

const STATE_MAGIC: &[u8; 8] = b"TOPLABST";
const STATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint (its `.state` sibling must exist).
    pub resume_from: Option<PathBuf>,
    /// Stop (with a checkpoint) after this step instead of `steps`.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_step: usize,
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub last_loss: Option<LossBreakdown>,
    pub last_eval: Option<EvalReport>,
    /// Unigram entropy (nats) of the full token stream.
    pub corpus_unigram_entropy: f64,
    pub tokens_seen: u64,
}

/// Optimizer state saved next to each checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub tokens_seen: u64,
    pub opt: AdamW<f32>,
}

pub fn write_state(mut w: impl Write, state: &TrainState, params: &Params<f32>) -> Result<()> {
    let mut head = Vec::new();
    head.extend_from_slice(STATE_MAGIC);
    head.extend_from_slice(&STATE_FORMAT_VERSION.to_le_bytes());
    for v in [state.step as u64, state.tokens_seen, state.opt.t] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&head)?;
    let named = |prefix: &str, ts: &[crate::tensor::Tensor<f32>]| {
        params
            .names()
            .zip(ts)
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect::<Vec<_>>()
    };
    write_tensors(&mut w, &named("m", &state.opt.m))?;
    write_tensors(&mut w, &named("v", &state.opt.v))
}

pub fn read_state(r: impl Read, path: &Path, params: &Params<f32>) -> Result<TrainState> {
    let mut r = Reader::new(r, path);
    r.magic(STATE_MAGIC, STATE_FORMAT_VERSION)?;
    let step = r.u64()? as usize;
    let tokens_seen = r.u64()?;
    let t = r.u64()?;
    let mut opt = AdamW::for_params(params);
    for (prefix, slot) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        let entries = r.tensors::<f32>()?;
        if entries.len() != slot.len() {
            return Err(r.fail(format!("{} {prefix} tensors for {} parameters", entries.len(), slot.len())));
        }
        for ((name, t), (pname, dst)) in entries.into_iter().zip(params.names().zip(slot.iter_mut())) {
            if name != format!("{prefix}.{pname}") || t.shape() != dst.shape() {
                return Err(r.fail(format!("unexpected optimizer tensor {name} {:?}", t.shape())));
            }
            *dst = t;
        }
    }
    opt.t = t;
    Ok(TrainState {
        step,
        tokens_seen,
        opt,
    })
}

fn state_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("state")
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Opens a CSV for appending. Fresh runs start a new file; resumed runs drop
/// any rows past `keep_upto` (written after the checkpoint being resumed).
fn open_csv(path: &Path, header: &str, keep_upto: Option<usize>) -> Result<BufWriter<File>> {
    let mut body = format!("{header}\n");
    if let Some(limit) = keep_upto {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                if step.is_some_and(|s| s <= limit) {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
    }
    fs::write(path, body)?;
    Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?))
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined(v: Option<&[f64]>) -> String {
    v.map(|h| h.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

/// One `eval.csv` row (without the trailing newline).
pub fn eval_row(step: usize, r: &EvalReport) -> String {
    let rq = r.top_rank_quality.as_ref();
    format!(
        "{step},{},{},{},{},{},{},{}",
        r.ntp_head_loss,
        r.perplexity,
        joined(r.mtp_per_head_losses.as_deref()),
        opt_num(rq.map(|q| q.next_token_top1_rate)),
        opt_num(rq.map(|q| q.mean_rank)),
        opt_num(rq.and_then(|q| q.window_ordering_agreement)),
        r.token_count
    )
}

type Work = (Batch, Option<Vec<SparseTargets>>);

fn make_work(ws: &WindowSet, cfg: &RunConfig, step: usize) -> Result<Work> {
    let batch = ws.nth_batch(cfg.batch_size, cfg.seed, step - 1)?;
    let targets = match cfg.model.objective {
        Objective::Top { window } => Some(batch_targets(&batch, window)?),
        _ => None,
    };
    Ok((batch, targets))
}

fn diverged(e: Error, step: usize, last_good: &Option<PathBuf>) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            last_good: last_good
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        },
        other => other,
    }
}

/// Trains `cfg.model` on `corpus` (token ids), holding out the final
/// `heldout_fraction` of the stream for evaluation.
pub fn train(cfg: &RunConfig, corpus: &[TokenId], opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let spec = &cfg.model;
    let (t_len, v) = (spec.max_seq_len, spec.vocab_size);
    let look = spec.objective.lookahead();
    let (train_part, held) = split_heldout(corpus, cfg.heldout_fraction, t_len);
    if held.len() < 2 {
        return Err(Error::CorpusTooSmall {
            len: corpus.len(),
            needed: ((2 * t_len) as f64 / cfg.heldout_fraction).ceil() as usize,
        });
    }
    let train_ws = WindowSet::new(train_part.to_vec(), t_len, look, v)?;
    let held_ws = WindowSet::new(held.to_vec(), t_len, look, v)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("checkpoints"))?;
    let model = Model::<f32>::new(spec.clone())?;

    let (mut params, mut opt, start, mut tokens_seen, mut last_ckpt) = match &opts.resume_from {
        Some(path) => {
            let (ckpt_spec, params) = load_checkpoint::<f32>(path)?;
            if &ckpt_spec != spec {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different model spec",
                    path.display()
                )));
            }
            let sp = state_path(path);
            let state = read_state(BufReader::new(File::open(&sp)?), &sp, &params)?;
            (params, state.opt, state.step, state.tokens_seen, Some(path.clone()))
        }
        None => {
            let params = Params::<f32>::init(spec, cfg.seed)?;
            let opt = AdamW::for_params(&params);
            (params, opt, 0, 0, None)
        }
    };
    let keep = opts.resume_from.as_ref().map(|_| start);
    let metrics_path = out.join("metrics.csv");
    let eval_path = out.join("eval.csv");
    let mut metrics = open_csv(&metrics_path, METRICS_HEADER, keep)?;
    let mut evals = open_csv(&eval_path, EVAL_HEADER, keep)?;
    let mut timing = open_csv(&out.join("timing.csv"), TIMING_HEADER, keep)?;

    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let eval_opts = EvalOptions {
        max_windows: cfg.eval_windows,
        pair_seed: cfg.seed,
        ..EvalOptions::default()
    };
    let mut last_loss = None;
    let mut last_eval = None;

    let mut step_loop = |next: &mut dyn FnMut() -> Result<Work>| -> Result<()> {
        for step in start + 1..=end {
            let (batch, targets) = next()?;
            let t0 = Instant::now();
            let res = loss_and_grads(
                &model,
                &params,
                &batch,
                targets.as_deref(),
                cfg.top_loss_weight,
                cfg.fused_block_size,
            )
            .map_err(|e| diverged(e, step, &last_ckpt))?;
            let mut grads = res.grads;
            let norm = clip_gradients(&mut grads, cfg.grad_clip_max_norm).map_err(|e| diverged(e, step, &last_ckpt))?;
            let lr = lr_at(step, cfg);
            opt.step(params.tensors_mut(), &grads, lr, &cfg.adamw)?;
            if params.tensors().any(|t| !t.all_finite()) {
                return Err(diverged(Error::NonFinite { op: "adamw" }, step, &last_ckpt));
            }
            tokens_seen += batch.real_tokens() as u64;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;

            let b = &res.breakdown;
            writeln!(
                metrics,
                "{step},{lr},{},{},{},{},{},{},{},{norm},{tokens_seen},{},{}",
                b.total,
                b.ntp,
                opt_num(b.top),
                opt_num(b.mtp_mean()),
                opt_num(b.mtp_sum()),
                joined(b.mtp_per_head.as_deref()),
                opt_num(res.top_head_xent),
                b.valid_position_count,
                if cfg.deterministic { "0".to_string() } else { format!("{wall_ms:.3}") },
            )?;
            metrics.flush()?;
            writeln!(timing, "{step},{wall_ms:.3}")?;
            timing.flush()?;
            last_loss = Some(res.breakdown);

            let is_last = step == end;
            // an early stop (`stop_after`) checkpoints but does not add an eval
            // row, so a resumed run's eval file matches an uninterrupted one
            let is_final = step == cfg.steps;
            if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || is_final) {
                let report = evaluate(&model, &params, &held_ws, &eval_opts)?;
                writeln!(evals, "{}", eval_row(step, &report))?;
                evals.flush()?;
                log::info!("step {step}: held-out ntp loss {:.4}", report.ntp_head_loss);
                last_eval = Some(report);
            }
            if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || is_last {
                let path = checkpoint_path(out, step);
                save_checkpoint(&path, spec, &params)?;
                let state = TrainState {
                    step,
                    tokens_seen,
                    opt: opt.clone(),
                };
                atomic_write(&state_path(&path), |w| write_state(w, &state, &params))?;
                last_ckpt = Some(path);
            }
        }
        Ok(())
    };

    if cfg.deterministic {
        let mut k = start;
        step_loop(&mut || {
            k += 1;
            make_work(&train_ws, cfg, k)
        })?;
    } else {
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Work>>(2);
            let ws = &train_ws;
            s.spawn(move || {
                for k in start + 1..=end {
                    if tx.send(make_work(ws, cfg, k)).is_err() {
                        break;
                    }
                }
            });
            step_loop(&mut || {
                rx.recv()
                    .map_err(|_| Error::contract("batch producer stopped early"))?
            })
        })?;
    }

    let last_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            // resumed at or past the end: nothing ran, keep the input checkpoint
            let p = checkpoint_path(out, start);
            save_checkpoint(&p, spec, &params)?;
            p
        }
    };
    Ok(TrainSummary {
        final_step: end.max(start),
        last_checkpoint,
        metrics_path,
        eval_path,
        last_loss,
        last_eval,
        corpus_unigram_entropy: unigram_entropy(corpus, v),
        tokens_seen,
    })
}
