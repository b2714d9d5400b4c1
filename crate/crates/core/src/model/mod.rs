//! Decoder-only transformer with objective-specific heads.
//!
//! Blocks are pre-norm (RMS) with rotary causal self-attention and a gated
//! SiLU MLP. On top of the final hidden state sit:
//!
//! - NTP: the unembedding `u_ntp`.
//! - TOP: `u_ntp` plus a second unembedding `u_top` reading the same hidden
//!   state. No extra transformer layers.
//! - MTP(N): a shared trunk of `L - N` blocks, then `N` parallel single-block
//!   heads, each followed by the shared final norm and `u_ntp`. Total block
//!   count stays `L`, so the trunk shrinks by `N - 1` relative to the path
//!   through head 1.

pub(crate) mod checkpoint;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, RopeTable, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};

const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Ntp,
    Mtp { future_tokens: usize },
    Top { window: usize },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ntp => "ntp",
            Objective::Mtp { .. } => "mtp",
            Objective::Top { .. } => "top",
        }
    }

    /// Tokens of lookahead a batch needs beyond the body.
    pub fn lookahead(&self) -> usize {
        match *self {
            Objective::Ntp => 1,
            Objective::Mtp { future_tokens } => future_tokens.max(1),
            Objective::Top { window } => window.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    pub objective: Objective,
}

/// Gated-MLP width of about `8/3·D`, rounded up to a multiple of 8.
pub fn default_mlp_hidden(d_model: usize) -> usize {
    (8 * d_model / 3).div_ceil(8) * 8
}

impl ModelSpec {
    /// Desk-scale default: D=128, L=4, 4 heads, V=256, T=256, θ=10⁴.
    pub fn desk(objective: Objective) -> Self {
        ModelSpec {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 256,
            max_seq_len: 256,
            rope_theta: 10_000.0,
            mlp_hidden: default_mlp_hidden(128),
            tied_embeddings: false,
            objective,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible into {} heads", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.mlp_hidden == 0 {
            return bad("layers, vocab, max_seq_len and mlp_hidden must be positive".into());
        }
        if !(self.rope_theta > 0.0) {
            return bad("rope_theta must be positive".into());
        }
        match self.objective {
            Objective::Mtp { future_tokens } if future_tokens == 0 || future_tokens > self.n_layers => {
                bad(format!(
                    "MTP with {future_tokens} heads needs 1 <= N <= L = {} (trunk depth L-(N-1) >= 1)",
                    self.n_layers
                ))
            }
            Objective::Top { window } if window == 0 => bad("TOP window must be at least 1".into()),
            _ => Ok(()),
        }
    }

    /// Blocks shared by every head.
    pub fn trunk_layers(&self) -> usize {
        match self.objective {
            Objective::Mtp { future_tokens } => self.n_layers - future_tokens,
            _ => self.n_layers,
        }
    }

    pub fn mtp_heads(&self) -> usize {
        match self.objective {
            Objective::Mtp { future_tokens } => future_tokens,
            _ => 0,
        }
    }

    /// Blocks on the path from the embedding to the next-token logits.
    pub fn effective_depth(&self) -> usize {
        self.trunk_layers() + usize::from(self.mtp_heads() > 0)
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, f) = (self.d_model, self.vocab_size, self.mlp_hidden);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        let block = |prefix: String, out: &mut Vec<(String, Vec<usize>)>| {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm", vec![d]),
                ("w_gate", vec![d, f]),
                ("w_up", vec![d, f]),
                ("w_down", vec![f, d]),
            ] {
                out.push((format!("{prefix}.{name}"), shape));
            }
        };
        for i in 0..self.trunk_layers() {
            block(format!("layers.{i}"), &mut out);
        }
        for n in 0..self.mtp_heads() {
            block(format!("mtp_heads.{n}"), &mut out);
        }
        out.push(("final_norm".into(), vec![d]));
        if !self.tied_embeddings {
            out.push(("unembed".into(), vec![d, v]));
        }
        if matches!(self.objective, Objective::Top { .. }) {
            out.push(("top_unembed".into(), vec![d, v]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Parameters excluding the input embedding and every `D × V`
    /// unembedding (NTP and TOP heads).
    pub fn non_embedding_param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .filter(|(n, _)| !matches!(n.as_str(), "embed" | "unembed" | "top_unembed"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named parameter tensors in the canonical order of [`ModelSpec::param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Float> Params<F> {
    pub fn from_entries(spec: &ModelSpec, entries: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let layout = spec.param_layout();
        if layout.len() != entries.len() {
            return Err(Error::contract(format!(
                "spec expects {} parameter tensors, got {}",
                layout.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::contract(format!(
                    "expected parameter {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Params { entries })
    }

    /// Scaled-normal initialization; residual output projections are scaled
    /// down by `sqrt(2·blocks)`. Both unembeddings use the same scheme.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (spec.trunk_layers() + spec.mtp_heads()) as f64;
        let entries = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("norm") {
                    Tensor::full(&shape, F::one())
                } else {
                    let std = if name.ends_with(".wo") || name.ends_with(".w_down") {
                        INIT_STD / (2.0 * blocks).sqrt()
                    } else {
                        INIT_STD
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&shape, |_| F::lit(normal.sample(&mut rng)))
                };
                (name, t)
            })
            .collect();
        Ok(Params { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<F>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<F>)> {
        self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

struct BlockVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Parameters registered as leaves on a graph, in canonical order.
pub struct BoundParams {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl BoundParams {
    /// Pairs already-registered graph handles with the names of `params`
    /// (same order), e.g. leaves created by a gradient checker.
    pub fn from_vars<F: Float>(params: &Params<F>, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::contract(format!("{} handles for {} parameters", vars.len(), params.len())));
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            names: params.names().map(str::to_string).collect(),
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    fn req(&self, name: &str) -> Result<Var> {
        self.var(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    fn block(&self, prefix: &str) -> Result<BlockVars> {
        let v = |n: &str| self.req(&format!("{prefix}.{n}"));
        Ok(BlockVars {
            attn_norm: v("attn_norm")?,
            wq: v("wq")?,
            wk: v("wk")?,
            wv: v("wv")?,
            wo: v("wo")?,
            mlp_norm: v("mlp_norm")?,
            w_gate: v("w_gate")?,
            w_up: v("w_up")?,
            w_down: v("w_down")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × T × V` next-token logits.
    pub ntp_logits: Var,
    /// `B × T × V` ranking scores from the TOP head, when requested.
    pub top_scores: Option<Var>,
    /// The TOP unembedding leaf (TOP models only), for the fused loss.
    pub top_head: Option<Var>,
    /// Per-head `B × T × V` logits; head 0 is the next-token head.
    pub mtp_logits: Vec<Var>,
    /// `B × T × D` normalized hidden state fed to the unembeddings
    /// (head 0's for MTP).
    pub final_hidden: Var,
}

/// A model architecture bound to its rotary table; parameters live apart.
pub struct Model<F: Float> {
    spec: ModelSpec,
    rope: Arc<RopeTable<F>>,
}

impl<F: Float> Model<F> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let rope = Arc::new(RopeTable::new(spec.head_dim(), spec.max_seq_len, spec.rope_theta)?);
        Ok(Model { spec, rope })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Registers `params` on `g` as leaves (`requires_grad = trainable`).
    pub fn bind(&self, g: &mut Graph<F>, params: &Params<F>, trainable: bool) -> BoundParams {
        let vars = params
            .tensors()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        BoundParams {
            vars,
            names: params.names().map(str::to_string).collect(),
        }
    }

    fn block(&self, g: &mut Graph<F>, p: &BlockVars, x: Var) -> Result<Var> {
        let heads = self.spec.n_heads;
        let h = g.rms_norm(x, p.attn_norm, NORM_EPS)?;
        let q = g.linear(h, p.wq)?;
        let k = g.linear(h, p.wk)?;
        let v = g.linear(h, p.wv)?;
        let q = g.split_heads(q, heads)?;
        let k = g.split_heads(k, heads)?;
        let v = g.split_heads(v, heads)?;
        let q = g.rope(q, &self.rope)?;
        let k = g.rope(k, &self.rope)?;
        let scores = g.bmm(q, k, true)?;
        let probs = g.causal_softmax(scores, F::lit(1.0 / (self.spec.head_dim() as f64).sqrt()))?;
        let attn = g.bmm(probs, v, false)?;
        let attn = g.merge_heads(attn, heads)?;
        let attn = g.linear(attn, p.wo)?;
        let x = g.add(x, attn)?;

        let h = g.rms_norm(x, p.mlp_norm, NORM_EPS)?;
        let gate = g.linear(h, p.w_gate)?;
        let gate = g.silu(gate)?;
        let up = g.linear(h, p.w_up)?;
        let m = g.mul(gate, up)?;
        let m = g.linear(m, p.w_down)?;
        g.add(x, m)
    }

    fn unembed(&self, g: &mut Graph<F>, bound: &BoundParams, h: Var) -> Result<Var> {
        if self.spec.tied_embeddings {
            g.linear_transposed(h, bound.req("embed")?)
        } else {
            g.linear(h, bound.req("unembed")?)
        }
    }

    /// Forward pass over `B × T` token ids (row-major). Sentinel ids embed to
    /// zero; their positions must be masked by the caller.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        bound: &BoundParams,
        inputs: &[TokenId],
        batch: usize,
        seq_len: usize,
        want_top_scores: bool,
    ) -> Result<ForwardOutput> {
        if seq_len > self.spec.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {seq_len} exceeds model maximum {}",
                self.spec.max_seq_len
            )));
        }
        if inputs.len() != batch * seq_len || inputs.is_empty() {
            return Err(Error::shape(
                "forward",
                format!("{} ids for batch {batch} × {seq_len}", inputs.len()),
            ));
        }
        let mut x = g.embedding(bound.req("embed")?, inputs, &[batch, seq_len])?;
        for i in 0..self.spec.trunk_layers() {
            x = self.block(g, &bound.block(&format!("layers.{i}"))?, x)?;
        }
        let final_norm = bound.req("final_norm")?;

        if self.spec.mtp_heads() > 0 {
            let mut mtp_logits = Vec::with_capacity(self.spec.mtp_heads());
            let mut first_hidden = None;
            for n in 0..self.spec.mtp_heads() {
                let y = self.block(g, &bound.block(&format!("mtp_heads.{n}"))?, x)?;
                let h = g.rms_norm(y, final_norm, NORM_EPS)?;
                first_hidden.get_or_insert(h);
                mtp_logits.push(self.unembed(g, bound, h)?);
            }
            return Ok(ForwardOutput {
                ntp_logits: mtp_logits[0],
                top_scores: None,
                top_head: None,
                mtp_logits,
                final_hidden: first_hidden.expect("at least one head"),
            });
        }

        let h = g.rms_norm(x, final_norm, NORM_EPS)?;
        let ntp_logits = self.unembed(g, bound, h)?;
        let top_head = bound.var("top_unembed");
        let top_scores = match (top_head, want_top_scores) {
            (Some(w), true) => Some(g.linear(h, w)?),
            _ => None,
        };
        Ok(ForwardOutput {
            ntp_logits,
            top_scores,
            top_head,
            mtp_logits: Vec::new(),
            final_hidden: h,
        })
    }

    /// Constant-parameter forward returning the NTP logits (and TOP scores if
    /// the model has a TOP head) as tensors.
    pub fn infer(
        &self,
        params: &Params<F>,
        inputs: &[TokenId],
        batch: usize,
        seq_len: usize,
    ) -> Result<Inference<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, params, false);
        let out = self.forward(&mut g, &bound, inputs, batch, seq_len, true)?;
        Ok(Inference {
            ntp_logits: g.value(out.ntp_logits).clone(),
            top_scores: out.top_scores.map(|v| g.value(v).clone()),
            mtp_logits: out.mtp_logits.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Inference<F> {
    pub ntp_logits: Tensor<F>,
    pub top_scores: Option<Tensor<F>>,
    pub mtp_logits: Vec<Tensor<F>>,
}

/// Drops training-only heads: the TOP unembedding, or every MTP head after
/// the first (whose block is appended to the trunk). The result is a plain
/// NTP model computing the same next-token logits.
pub fn strip_to_inference<F: Float>(spec: &ModelSpec, params: &Params<F>) -> Result<(ModelSpec, Params<F>)> {
    let mut out_spec = spec.clone();
    out_spec.objective = Objective::Ntp;
    let entries: Vec<(String, Tensor<F>)> = match spec.objective {
        Objective::Ntp => return Ok((spec.clone(), params.clone())),
        Objective::Top { .. } => params
            .entries()
            .iter()
            .filter(|(n, _)| n != "top_unembed")
            .cloned()
            .collect(),
        Objective::Mtp { .. } => {
            let trunk = spec.trunk_layers();
            out_spec.n_layers = trunk + 1;
            params
                .entries()
                .iter()
                .filter_map(|(n, t)| {
                    if let Some(rest) = n.strip_prefix("mtp_heads.0.") {
                        Some((format!("layers.{trunk}.{rest}"), t.clone()))
                    } else if n.starts_with("mtp_heads.") {
                        None
                    } else {
                        Some((n.clone(), t.clone()))
                    }
                })
                .collect()
        }
    };
    // re-establish canonical order for the new layout
    let layout = out_spec.param_layout();
    let mut ordered = Vec::with_capacity(layout.len());
    for (name, _) in &layout {
        let t = entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name} while stripping")))?;
        ordered.push(t.clone());
    }
    Ok((out_spec.clone(), Params::from_entries(&out_spec, ordered)?))
}

/// Greedy decoding from the NTP head: repeatedly appends the argmax token
/// (lowest id on ties). Context beyond `max_seq_len` is truncated from the left.
pub fn generate_greedy<F: Float>(
    model: &Model<F>,
    params: &Params<F>,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let spec = model.spec();
    if !matches!(spec.objective, Objective::Ntp) {
        return Err(Error::contract("greedy generation expects a stripped (NTP) model"));
    }
    if prompt.len() > spec.max_seq_len {
        return Err(Error::contract(format!(
            "prompt of {} tokens exceeds model maximum {}",
            prompt.len(),
            spec.max_seq_len
        )));
    }
    if prompt.is_empty() && max_new > 0 {
        return Err(Error::contract("greedy generation needs a non-empty prompt"));
    }
    if let Some(bad) = prompt.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::contract(format!("prompt token {bad} outside vocabulary")));
    }
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        let start = tokens.len().saturating_sub(spec.max_seq_len);
        let ctx = &tokens[start..];
        let out = model.infer(params, ctx, 1, ctx.len())?;
        let last = out.ntp_logits.row(ctx.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        tokens.push(best as TokenId);
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(objective: Objective) -> ModelSpec {
        ModelSpec {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 8,
            rope_theta: 10_000.0,
            mlp_hidden: 24,
            tied_embeddings: false,
            objective,
        }
    }

    #[test]
    fn desk_spec_is_valid() {
        let s = ModelSpec::desk(Objective::Top { window: 32 });
        s.validate().unwrap();
        assert_eq!(s.mlp_hidden, 344);
    }

    #[test]
    fn mtp_needs_enough_layers() {
        assert!(tiny(Objective::Mtp { future_tokens: 4 }).validate().is_err());
        let s = tiny(Objective::Mtp { future_tokens: 3 });
        s.validate().unwrap();
        assert_eq!(s.trunk_layers(), 0);
        assert_eq!(s.effective_depth(), 1);
    }

    #[test]
    fn parameter_matching() {
        let ntp = tiny(Objective::Ntp);
        let top = tiny(Objective::Top { window: 4 });
        let mtp = tiny(Objective::Mtp { future_tokens: 2 });
        let (d, v) = (ntp.d_model, ntp.vocab_size);
        assert_eq!(top.param_count() - ntp.param_count(), d * v);
        assert_eq!(top.non_embedding_param_count(), ntp.non_embedding_param_count());
        assert_eq!(mtp.non_embedding_param_count(), ntp.non_embedding_param_count());
    }

    #[test]
    fn init_matches_layout_and_is_seeded() {
        let spec = tiny(Objective::Top { window: 4 });
        let a = Params::<f32>::init(&spec, 3).unwrap();
        let b = Params::<f32>::init(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), spec.param_count());
        assert_ne!(a, Params::<f32>::init(&spec, 4).unwrap());
        Params::from_entries(&spec, a.into_entries()).unwrap();
    }

    #[test]
    fn forward_shapes() {
        for obj in [Objective::Ntp, Objective::Top { window: 3 }, Objective::Mtp { future_tokens: 2 }] {
            let spec = tiny(obj);
            let model = Model::<f64>::new(spec.clone()).unwrap();
            let params = Params::init(&spec, 0).unwrap();
            let ids: Vec<u32> = (0..12).map(|i| i % 11).collect();
            let out = model.infer(&params, &ids, 2, 6).unwrap();
            assert_eq!(out.ntp_logits.shape(), &[2, 6, 11]);
            assert_eq!(out.top_scores.is_some(), matches!(obj, Objective::Top { .. }));
            assert_eq!(out.mtp_logits.len(), spec.mtp_heads());
        }
    }

    #[test]
    fn too_long_sequence_rejected() {
        let spec = tiny(Objective::Ntp);
        let model = Model::<f64>::new(spec.clone()).unwrap();
        let params = Params::init(&spec, 0).unwrap();
        assert!(model.infer(&params, &[0; 9], 1, 9).is_err());
    }

    #[test]
    fn generate_zero_new_returns_prompt() {
        let spec = tiny(Objective::Ntp);
        let model = Model::<f32>::new(spec.clone()).unwrap();
        let params = Params::init(&spec, 1).unwrap();
        assert_eq!(generate_greedy(&model, &params, &[1, 2, 3], 0).unwrap(), vec![1, 2, 3]);
        assert!(generate_greedy(&model, &params, &[0; 9], 1).is_err());
        let a = generate_greedy(&model, &params, &[4, 5], 10).unwrap();
        let b = generate_greedy(&model, &params, &[4, 5], 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
    }
}
