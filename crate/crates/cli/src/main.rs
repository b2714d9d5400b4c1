//! `toplab`: train, evaluate and compare NTP / MTP / TOP language models.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures (I/O, divergence, malformed files).

mod compare;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use toplab::data::{load_corpus, synthetic_corpus, TokenId, TokenSequence, Vocab, WindowSet};
use toplab::eval::{evaluate, EvalOptions, EvalReport};
use toplab::model::{generate_greedy, load_checkpoint, strip_to_inference, Model};
use toplab::top_target::build_sparse;
use toplab::trainer::{eval_row, train, TrainOptions, EVAL_HEADER};

use config::{ObjectiveKind, Overrides, Resolved};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] toplab::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use toplab::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Config(_) | E::Contract(_) | E::CorpusTooSmall { .. } | E::Tokenize { .. }) => 1,
            CliError::Core(_) | CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Parser)]
#[command(name = "toplab", version, about = "Desk-scale NTP / MTP / TOP language-model lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, evaluations and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split of its corpus.
    Eval(EvalArgs),
    /// Precompute the sparse proximity-target file for a corpus.
    BuildTargets(BuildTargetsArgs),
    /// Greedy generation from a checkpoint's next-token head.
    Generate(GenerateArgs),
    /// Side-by-side table of finished runs.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Preset name (desk_ntp, desk_mtp, desk_top, fig2_mtp8) or a TOML file.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
    /// TOP window size.
    #[arg(long = "objective.window")]
    window: Option<usize>,
    /// MTP future tokens.
    #[arg(long = "objective.future-tokens")]
    future_tokens: Option<usize>,
    /// Text corpus (defaults to a generated synthetic corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bitwise-reproducible mode (`--deterministic` or `--deterministic=false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    deterministic: Option<bool>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            steps: self.steps,
            objective: self.objective,
            window: self.window,
            future_tokens: self.future_tokens,
            corpus: self.corpus.clone(),
            out: self.out.clone(),
            deterministic: self.deterministic,
        }
    }

    fn resolve(&self) -> Result<Resolved, CliError> {
        Resolved::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Resume from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config for the data source; defaults to the run's manifest.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory whose eval.csv receives the row; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate at most this many held-out windows.
    #[arg(long)]
    windows: Option<usize>,
}

#[derive(Args)]
struct BuildTargetsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Window size W (at least 1).
    #[arg(long)]
    window: usize,
    /// Output target file.
    #[arg(long)]
    out: PathBuf,
    /// One-symbol-per-line vocabulary; bytes when absent.
    #[arg(long)]
    toy_vocab: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long)]
    toy_vocab: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories, each holding manifest.toml, metrics.csv and eval.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn vocab_from(toy: Option<&Path>) -> Result<Vocab, CliError> {
    Ok(match toy {
        Some(p) => Vocab::from_toy_file(p)?,
        None => Vocab::Byte,
    })
}

/// Loads the configured corpus, or generates the synthetic one.
fn corpus_tokens(r: &Resolved) -> Result<(Vec<TokenId>, Vocab), CliError> {
    let vocab = vocab_from(r.data.toy_vocab.as_deref())?;
    if vocab.size() != r.model.vocab_size {
        return Err(CliError::Usage(format!(
            "model vocab_size {} does not match the vocabulary ({} symbols)",
            r.model.vocab_size,
            vocab.size()
        )));
    }
    let tokens = match &r.data.corpus {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Runtime(format!("corpus not found: {}", path.display())));
            }
            load_corpus(path, &vocab)?
        }
        None => vocab.tokenize(&synthetic_corpus(r.data.synthetic_bytes, r.data.synthetic_seed))?,
    };
    Ok((tokens, vocab))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let resolved = args.run.resolve()?;
    let mut cfg = resolved.run_config()?;
    cfg.output_dir = resolved.output_dir();
    // the corpus is read before anything is written
    let (tokens, _) = corpus_tokens(&resolved)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("manifest.toml"), resolved.manifest())?;
    log::info!(
        "training {} ({} params, {} non-embedding) on {} tokens into {}",
        cfg.model.objective.name(),
        cfg.model.param_count(),
        cfg.model.non_embedding_param_count(),
        tokens.len(),
        cfg.output_dir.display()
    );
    let opts = TrainOptions {
        resume_from: args.resume.clone(),
        stop_after: None,
    };
    let summary = train(&cfg, &tokens, &opts)?;
    println!("finished step {} -> {}", summary.final_step, summary.last_checkpoint.display());
    if let Some(loss) = &summary.last_loss {
        println!("final train loss {:.4} (ntp head {:.4})", loss.total, loss.ntp);
    }
    println!("corpus unigram entropy {:.4} nats", summary.corpus_unigram_entropy);
    if let Some(report) = &summary.last_eval {
        print_report(report);
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("held-out ntp-head loss {:.4}  perplexity {:.3}  tokens {}", r.ntp_head_loss, r.perplexity, r.token_count);
    if let Some(h) = &r.mtp_per_head_losses {
        let list: Vec<String> = h.iter().map(|v| format!("{v:.4}")).collect();
        println!("mtp per-head losses [{}]", list.join(", "));
        if let Some((ordered, _)) = r.head_ordering() {
            println!("heads ordered by offset: {ordered}");
        }
    }
    if let Some(q) = &r.top_rank_quality {
        println!(
            "top head: next-token top-1 {:.4}  mean rank {:.2}  window agreement {}",
            q.next_token_top1_rate,
            q.mean_rank,
            q.window_ordering_agreement
                .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
        );
    }
}

/// `<run>/checkpoints/x.ckpt` -> `<run>`.
fn run_dir_of(ckpt: &Path) -> Option<PathBuf> {
    ckpt.parent()?.parent().map(Path::to_path_buf)
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if !args.checkpoint.is_file() {
        return Err(CliError::Runtime(format!("checkpoint not found: {}", args.checkpoint.display())));
    }
    let run_dir = run_dir_of(&args.checkpoint);
    let manifest = run_dir.as_ref().map(|d| d.join("manifest.toml")).filter(|p| p.is_file());
    let config = match (&args.config, &manifest) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(m)) => Some(m.display().to_string()),
        (None, None) => None,
    };
    let resolved = Resolved::load(
        config.as_deref(),
        &Overrides {
            corpus: args.corpus.clone(),
            ..Overrides::default()
        },
    )?;
    let (spec, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (tokens, _) = corpus_tokens(&resolved)?;
    let (_, held) = toplab::data::split_heldout(&tokens, resolved.train.heldout_fraction, spec.max_seq_len);
    let held = WindowSet::new(held.to_vec(), spec.max_seq_len, spec.objective.lookahead(), spec.vocab_size)?;
    let model = Model::new(spec)?;
    let opts = EvalOptions {
        max_windows: args.windows.or((resolved.train.eval_windows > 0).then_some(resolved.train.eval_windows)),
        pair_seed: resolved.train.seed,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &params, &held, &opts)?;
    print_report(&report);
    let out = args
        .out
        .clone()
        .or(run_dir)
        .ok_or_else(|| CliError::Usage("cannot infer an output directory; pass --out".into()))?;
    fs::create_dir_all(&out)?;
    let path = out.join("eval.csv");
    let mut text = if path.is_file() {
        fs::read_to_string(&path)?
    } else {
        format!("{EVAL_HEADER}\n")
    };
    let step = args
        .checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("step_"))
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(0);
    text.push_str(&eval_row(step, &report));
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_build_targets(args: &BuildTargetsArgs) -> Result<(), CliError> {
    if args.window == 0 {
        return Err(CliError::Usage("window size must be at least 1".into()));
    }
    if !args.corpus.is_file() {
        return Err(CliError::Runtime(format!("corpus not found: {}", args.corpus.display())));
    }
    let vocab = vocab_from(args.toy_vocab.as_deref())?;
    let tokens = load_corpus(&args.corpus, &vocab)?;
    let seq = TokenSequence::padded(&tokens, args.window, vocab.size())?;
    let targets = build_sparse(&seq, vocab.size(), args.window)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    targets.save(&args.out)?;
    println!(
        "{} positions, {} pairs -> {}",
        targets.body_len(),
        targets.total_pairs(),
        args.out.display()
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let vocab = vocab_from(args.toy_vocab.as_deref())?;
    let (spec, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    if spec.vocab_size != vocab.size() {
        return Err(CliError::Usage("checkpoint vocabulary does not match".into()));
    }
    let (spec, params) = strip_to_inference(&spec, &params)?;
    let model = Model::new(spec)?;
    let prompt = vocab.tokenize(args.prompt.as_bytes())?;
    let out = generate_greedy(&model, &params, &prompt, args.max_new)?;
    println!("{}", String::from_utf8_lossy(&vocab.decode(&out)));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::BuildTargets(a) => cmd_build_targets(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Compare(a) => compare::cmd_compare(&a.runs, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
