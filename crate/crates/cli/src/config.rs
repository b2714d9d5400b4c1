//! Run configuration files, presets and flag overrides.
//!
//! Resolution order, later wins:
//!
//! 1. the preset named by `--config` (or by `base = "..."` inside a file),
//!    falling back to `desk_ntp`;
//! 2. values present in the config file;
//! 3. command-line flags.
//!
//! The fully resolved document is written as `manifest.toml` in the output
//! directory. It uses the same schema, so `--config <run>/manifest.toml`
//! reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toplab::model::{default_mlp_hidden, ModelSpec, Objective};
use toplab::trainer::{AdamWConfig, RunConfig};

use crate::CliError;

pub const PRESETS: &[&str] = &["desk_ntp", "desk_mtp", "desk_top", "fig2_mtp8"];

/// Environment variable naming the default root for run directories.
pub const OUT_ROOT_ENV: &str = "TOPLAB_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Ntp,
    Mtp,
    Top,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub mlp_hidden: usize,
    pub tied_embeddings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    /// TOP window size `W`.
    pub window: usize,
    /// MTP future tokens `N`.
    pub future_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr_fraction: f64,
    pub batch_size: usize,
    pub grad_clip_max_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub deterministic: bool,
    pub top_loss_weight: f64,
    pub fused_block_size: usize,
    pub heldout_fraction: f64,
    /// Held-out windows per evaluation; 0 means all.
    pub eval_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Text file to train on; when absent a synthetic corpus is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    /// One-symbol-per-line vocabulary; bytes are used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// A fully explicit configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    /// Preset the document was resolved from.
    pub base: String,
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub adamw: AdamWConfig,
    pub data: DataSection,
    pub output: OutputSection,
}

/// Partial document as read from disk; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    base: Option<String>,
    model: Option<ModelPatch>,
    objective: Option<ObjectivePatch>,
    train: Option<TrainPatch>,
    adamw: Option<AdamWPatch>,
    data: Option<DataPatch>,
    output: Option<OutputPatch>,
}

macro_rules! patch {
    ($name:ident for $target:ty { $($field:ident: $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name { $($field: Option<$ty>),* }

        impl $name {
            fn apply(self, t: &mut $target) {
                $(if let Some(v) = self.$field { t.$field = v; })*
            }
        }
    };
}

patch!(ModelPatch for ModelSection {
    d_model: usize, n_layers: usize, n_heads: usize, vocab_size: usize,
    max_seq_len: usize, rope_theta: f64, mlp_hidden: usize, tied_embeddings: bool,
});
patch!(ObjectivePatch for ObjectiveSection { kind: ObjectiveKind, window: usize, future_tokens: usize });
patch!(TrainPatch for TrainSection {
    steps: usize, warmup_steps: usize, peak_lr: f64, min_lr_fraction: f64, batch_size: usize,
    grad_clip_max_norm: f64, seed: u64, eval_every: usize, checkpoint_every: usize,
    deterministic: bool, top_loss_weight: f64, fused_block_size: usize, heldout_fraction: f64,
    eval_windows: usize,
});
patch!(AdamWPatch for AdamWConfig { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 });

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataPatch {
    corpus: Option<PathBuf>,
    synthetic_bytes: Option<usize>,
    synthetic_seed: Option<u64>,
    toy_vocab: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputPatch {
    dir: Option<PathBuf>,
}

/// Command-line overrides shared by the commands that resolve a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub objective: Option<ObjectiveKind>,
    pub window: Option<usize>,
    pub future_tokens: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub deterministic: Option<bool>,
}

pub fn preset(name: &str) -> Option<Resolved> {
    let spec = ModelSpec::desk(Objective::Ntp);
    let run = RunConfig::desk(Objective::Ntp);
    let mut r = Resolved {
        base: name.to_string(),
        model: ModelSection {
            d_model: spec.d_model,
            n_layers: spec.n_layers,
            n_heads: spec.n_heads,
            vocab_size: spec.vocab_size,
            max_seq_len: spec.max_seq_len,
            rope_theta: spec.rope_theta,
            mlp_hidden: spec.mlp_hidden,
            tied_embeddings: spec.tied_embeddings,
        },
        objective: ObjectiveSection {
            kind: ObjectiveKind::Ntp,
            window: 32,
            future_tokens: 4,
        },
        train: TrainSection {
            steps: run.steps,
            warmup_steps: run.warmup_steps,
            peak_lr: run.peak_lr,
            min_lr_fraction: run.min_lr_fraction,
            batch_size: run.batch_size,
            grad_clip_max_norm: run.grad_clip_max_norm,
            seed: run.seed,
            eval_every: run.eval_every,
            checkpoint_every: run.checkpoint_every,
            deterministic: run.deterministic,
            top_loss_weight: run.top_loss_weight,
            fused_block_size: run.fused_block_size,
            heldout_fraction: run.heldout_fraction,
            eval_windows: run.eval_windows.unwrap_or(0),
        },
        adamw: run.adamw,
        data: DataSection {
            corpus: None,
            synthetic_bytes: 5_000_000,
            synthetic_seed: 0,
            toy_vocab: None,
        },
        output: OutputSection { dir: None },
    };
    match name {
        "desk_ntp" => {}
        "desk_mtp" => r.objective.kind = ObjectiveKind::Mtp,
        "desk_top" => r.objective.kind = ObjectiveKind::Top,
        "fig2_mtp8" => {
            // a 3-block trunk under eight one-block heads, so every offset is
            // predicted through as many blocks as the 4-layer desk model
            r.objective.kind = ObjectiveKind::Mtp;
            r.objective.future_tokens = 8;
            r.model.n_layers = 11;
            r.train.steps = 2000;
            r.train.eval_every = 100;
            r.train.eval_windows = 0;
        }
        _ => return None,
    }
    Some(r)
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Resolved {
    /// Resolves `--config` (a preset name or a TOML path) and applies flags.
    pub fn load(config: Option<&str>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut r = match config {
            None => preset("desk_ntp").expect("known preset"),
            Some(name) if !name.ends_with(".toml") && !Path::new(name).exists() => preset(name).ok_or_else(|| {
                config_error(format!(
                    "unknown preset '{name}' (known: {}; or pass a .toml path)",
                    PRESETS.join(", ")
                ))
            })?,
            Some(path) => Self::from_file(Path::new(path))?,
        };
        r.apply(overrides);
        r.run_config()?;
        Ok(r)
    }

    fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let base = file.base.as_deref().unwrap_or("desk_ntp");
        let mut r = preset(base).ok_or_else(|| format!("unknown base preset '{base}'"))?;
        if let Some(p) = file.model {
            p.apply(&mut r.model);
        }
        if let Some(p) = file.objective {
            p.apply(&mut r.objective);
        }
        if let Some(p) = file.train {
            p.apply(&mut r.train);
        }
        if let Some(p) = file.adamw {
            p.apply(&mut r.adamw);
        }
        if let Some(d) = file.data {
            if d.corpus.is_some() {
                r.data.corpus = d.corpus;
            }
            if let Some(v) = d.synthetic_bytes {
                r.data.synthetic_bytes = v;
            }
            if let Some(v) = d.synthetic_seed {
                r.data.synthetic_seed = v;
            }
            if d.toy_vocab.is_some() {
                r.data.toy_vocab = d.toy_vocab;
            }
        }
        if let Some(o) = file.output {
            if o.dir.is_some() {
                r.output.dir = o.dir;
            }
        }
        Ok(r)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
            if self.train.warmup_steps >= v {
                // keep tiny smoke runs valid: warmup shrinks with the run
                self.train.warmup_steps = v / 10;
            }
        }
        if let Some(v) = o.objective {
            self.objective.kind = v;
        }
        if let Some(v) = o.window {
            self.objective.window = v;
        }
        if let Some(v) = o.future_tokens {
            self.objective.future_tokens = v;
        }
        if o.corpus.is_some() {
            self.data.corpus = o.corpus.clone();
        }
        if o.out.is_some() {
            self.output.dir = o.out.clone();
        }
        if let Some(v) = o.deterministic {
            self.train.deterministic = v;
        }
    }

    pub fn objective(&self) -> Objective {
        match self.objective.kind {
            ObjectiveKind::Ntp => Objective::Ntp,
            ObjectiveKind::Mtp => Objective::Mtp {
                future_tokens: self.objective.future_tokens,
            },
            ObjectiveKind::Top => Objective::Top {
                window: self.objective.window,
            },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            rope_theta: m.rope_theta,
            mlp_hidden: if m.mlp_hidden == 0 { default_mlp_hidden(m.d_model) } else { m.mlp_hidden },
            tied_embeddings: m.tied_embeddings,
            objective: self.objective(),
        }
    }

    /// Output directory: explicit `--out`/`[output] dir`, else
    /// `$TOPLAB_OUT_ROOT/<base>-<objective>-s<seed>` (root defaults to `runs`).
    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!(
                "{}-{}-s{}",
                self.base,
                self.objective().name(),
                self.train.seed
            ))
        })
    }

    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        if matches!(self.objective.kind, ObjectiveKind::Top) && self.objective.window == 0 {
            return Err(config_error("window size must be at least 1"));
        }
        let t = &self.train;
        let cfg = RunConfig {
            model: self.model_spec(),
            steps: t.steps,
            warmup_steps: t.warmup_steps,
            peak_lr: t.peak_lr,
            min_lr_fraction: t.min_lr_fraction,
            batch_size: t.batch_size,
            grad_clip_max_norm: t.grad_clip_max_norm,
            adamw: self.adamw,
            seed: t.seed,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            output_dir: self.output_dir(),
            deterministic: t.deterministic,
            top_loss_weight: t.top_loss_weight,
            fused_block_size: t.fused_block_size,
            heldout_fraction: t.heldout_fraction,
            eval_windows: (t.eval_windows > 0).then_some(t.eval_windows),
        };
        cfg.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }

    /// The manifest text: a version comment followed by the resolved TOML.
    pub fn manifest(&self) -> String {
        let mut explicit = self.clone();
        explicit.output.dir = Some(self.output_dir());
        explicit.model.mlp_hidden = explicit.model_spec().mlp_hidden;
        format!(
            "# toplab {} run manifest\n{}",
            env!("CARGO_PKG_VERSION"),
            toml::to_string(&explicit).expect("config serializes")
        )
    }
}
