//! The `futuresight` command line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use futuresight_core::corpus::{build_examples, build_idf_table, default_stopwords, PipelineConfig};
use futuresight_core::evaluation::{
    build_human_eval_set, conditioning_sensitivity, realization_score, score_human_eval, synthetic_suite, AnswerItem, EvalSource,
    HumanEvalConfig, KeyItem,
};
use futuresight_core::generation::{create_session, Engine, GenerationBudget, Generated, SamplingParams, Session};
use futuresight_core::model::{InjectionMode, ModelConfig};
use futuresight_core::tokenizer::Tokenizer;
use futuresight_core::training::TrainConfig;

use crate::formats::{self, StoryRecord};
use crate::runner::{self, RunConfig, TOKENIZER_FILE};
use crate::service::{self, AppState};
use crate::{checkpoint, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "futuresight", version, about = "Future-conditioned story generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Generate a continuation, optionally as an interactive session.
    Generate(GenerateArgs),
    /// Diagnostics and human-evaluation materials.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Build dataset, tokenizer and IDF files from story records.
    Build(CorpusBuildArgs),
}

#[derive(Debug, Args)]
pub struct CorpusBuildArgs {
    /// A story JSONL file or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Dataset output; tokenizer.json and idf.json are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub lc: usize,
    #[arg(long, default_value_t = 4)]
    pub lf: usize,
    #[arg(long, default_value_t = 9)]
    pub min_sentences: usize,
    #[arg(long, default_value_t = 2000)]
    pub vocab: usize,
    /// Plain-text stopword list; the built-in list when omitted.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to tokenizer.json beside the dataset.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// JSON model config; desk-scale defaults when omitted. vocab_size is taken from the tokenizer.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub accum: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Updates of linear warmup.
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
    /// Update at which the rate reaches zero; `0` keeps it constant.
    #[arg(long, default_value_t = 0)]
    pub decay_steps: u64,
    /// Update at which the linear decay begins.
    #[arg(long, default_value_t = 0)]
    pub decay_start: u64,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 0.9)]
    pub temperature: f64,
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    #[arg(long, default_value_t = 512)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub greedy: bool,
}

impl SamplingArgs {
    pub fn params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
            greedy: self.greedy,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to tokenizer.json beside the checkpoint.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub future: String,
    #[arg(long, default_value_t = 3)]
    pub distance: usize,
    /// Token budget; ignored when --sentences is given.
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    #[arg(long)]
    pub sentences: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Read commands from stdin: `:future <distance> <text>`, `:gen [n]`, `:show`, `:quit`.
    #[arg(long)]
    pub interactive: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Symmetrized total-variation distance between two futures.
    Sensitivity(SensitivityArgs),
    /// Realization score of a text against a future.
    Realization(RealizationArgs),
    /// Write blinded and key files for the three-class human study.
    BuildHumaneval(BuildHumanEvalArgs),
    /// Score evaluator answer files against a key file.
    ScoreHumaneval(ScoreHumanEvalArgs),
    /// Write the synthetic templated story suite.
    Synthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub future_a: String,
    #[arg(long)]
    pub future_b: String,
    #[arg(long, default_value_t = 3)]
    pub distance: usize,
}

#[derive(Debug, Args)]
pub struct RealizationArgs {
    #[arg(long)]
    pub idf: PathBuf,
    #[arg(long)]
    pub generated: String,
    #[arg(long)]
    pub future: String,
}

#[derive(Debug, Args)]
pub struct BuildHumanEvalArgs {
    /// MEMORY-mode checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// NONE-mode baseline checkpoint.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Dataset whose examples supply contexts, futures and distances.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub sentences: usize,
    /// Seed of the item shuffle; generation uses the sampling seed.
    #[arg(long, default_value_t = 7)]
    pub shuffle_seed: u64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub blinded: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreHumanEvalArgs {
    #[arg(long)]
    pub key: PathBuf,
    /// One answer file per evaluator.
    #[arg(long, required = true, num_args = 1..)]
    pub answers: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Writes stories.jsonl and oracle.jsonl into this directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Without a checkpoint, model endpoints answer MODEL_NOT_LOADED.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub idf: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Idle session lifetime in seconds.
    #[arg(long, default_value_t = 3600)]
    pub session_ttl: u64,
    /// Directory of static assets served under `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, &mut std::io::stdin().lock(), &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Corpus(CorpusCommand::Build(a)) => corpus_build(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Generate(a) => generate(&a, input, out),
        Command::Eval(e) => eval(e, out),
        Command::Serve(a) => serve(&a),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn corpus_build(a: &CorpusBuildArgs, out: &mut dyn Write) -> Result<()> {
    let config = PipelineConfig {
        context_len: a.lc,
        future_window: a.lf,
        min_sentences: a.min_sentences,
        vocab_size: a.vocab,
    };
    config.validate()?;
    let stopwords = match &a.stopwords {
        Some(p) => formats::read_stopwords(p)?,
        None => default_stopwords(),
    };
    let stories = formats::read_stories(&a.input)?;
    let table = build_idf_table(&stories, &stopwords)?;
    let tokenizer = Tokenizer::train(stories.iter().map(|s| s.raw_text.as_str()), a.vocab)?;
    let (examples, skipped) = build_examples(&stories, &config, &tokenizer, &table)?;
    formats::write_dataset(&a.out, &examples)?;
    formats::write_tokenizer(&sibling(&a.out, TOKENIZER_FILE), &tokenizer)?;
    formats::write_idf(&sibling(&a.out, "idf.json"), &table)?;
    writeln!(
        out,
        "stories {} examples {} skipped_short {} skipped_unscoreable {} vocab {}",
        stories.len(),
        examples.len(),
        skipped.too_short.len(),
        skipped.unscoreable.len(),
        tokenizer.vocab_size()
    )
    .map_err(out_err)
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let tokenizer_path = a.tokenizer.clone().unwrap_or_else(|| sibling(&a.dataset, TOKENIZER_FILE));
    let tokenizer = formats::read_tokenizer(&tokenizer_path)?;
    let mut model: ModelConfig = match &a.model_config {
        Some(p) => formats::read_json(p)?,
        None => ModelConfig::default(),
    };
    model.vocab_size = tokenizer.vocab_size();
    let train = TrainConfig {
        epochs: a.epochs,
        accumulation_steps: a.accum,
        learning_rate: a.lr,
        warmup_steps: a.warmup,
        decay_steps: a.decay_steps,
        decay_start: a.decay_start,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let summary = runner::run_training(&RunConfig {
        dataset: a.dataset.clone(),
        tokenizer: tokenizer_path,
        out: a.out.clone(),
        model,
        train,
        checkpoint_every: a.checkpoint_every,
        resume: a.resume.clone(),
        max_steps: a.max_steps,
    })?;
    let loss = summary.last.as_ref().map_or(f64::NAN, |r| r.mean_loss);
    writeln!(
        out,
        "steps {} last_loss {loss:.6} completed {} checkpoint {}",
        summary.steps,
        summary.completed,
        summary.checkpoint.display()
    )
    .map_err(out_err)
}

/// Loads a checkpoint and its tokenizer into an inference engine.
pub fn load_engine(ckpt: &Path, tokenizer: Option<&Path>) -> Result<Engine> {
    let tokenizer_path = tokenizer.map(Path::to_path_buf).unwrap_or_else(|| sibling(ckpt, TOKENIZER_FILE));
    let tokenizer = formats::read_tokenizer(&tokenizer_path)?;
    let model = checkpoint::load(ckpt)?.model;
    Ok(Engine::new(model, tokenizer)?)
}

/// One non-interactive generation, as the `generate` command performs it.
pub fn generate_once(
    engine: &Engine,
    context: &str,
    future: &str,
    distance: usize,
    sampling: SamplingParams,
    budget: GenerationBudget,
) -> Result<(Session, Generated)> {
    let mut session = create_session(engine, context, future, distance, sampling)?;
    let generated = session.generate(engine, budget)?;
    Ok((session, generated))
}

fn generate(a: &GenerateArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let engine = load_engine(&a.model.ckpt, a.model.tokenizer.as_deref())?;
    let budget = match a.sentences {
        Some(n) => GenerationBudget::Sentences(n),
        None => GenerationBudget::Tokens(a.max_tokens),
    };
    if !a.interactive {
        let (_, generated) = generate_once(&engine, &a.context, &a.future, a.distance, a.sampling.params(), budget)?;
        return writeln!(out, "{}", generated.text).map_err(out_err);
    }
    let mut session = create_session(&engine, &a.context, &a.future, a.distance, a.sampling.params())?;
    repl(&engine, &mut session, a.max_tokens, input, out)
}

/// Interactive loop. Blank lines and `:gen` continue generation; `:future`
/// swaps the future; `:show` prints the transcript as JSON.
pub fn repl(engine: &Engine, session: &mut Session, step_tokens: usize, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line).map_err(|e| Error::io("<stdin>", e))? == 0 {
            return Ok(());
        }
        let cmd = line.trim();
        let reply = if cmd.is_empty() || cmd.starts_with(":gen") {
            let n = cmd.strip_prefix(":gen").map(str::trim).filter(|s| !s.is_empty());
            match n.map(str::parse::<usize>).transpose() {
                Ok(n) => session
                    .generate(engine, GenerationBudget::Tokens(n.unwrap_or(step_tokens)))
                    .map(|g| format!("{}\n[stop: {:?}]", g.text, g.stop))
                    .map_err(Error::from),
                Err(_) => Err(Error::Usage("usage: :gen [tokens]".into())),
            }
        } else if let Some(rest) = cmd.strip_prefix(":future") {
            let mut parts = rest.trim().splitn(2, ' ');
            match (parts.next().and_then(|d| d.parse::<usize>().ok()), parts.next()) {
                (Some(d), Some(text)) => session
                    .set_future(engine, text, d)
                    .map(|()| format!("[future set: {d} {}]", text.trim()))
                    .map_err(Error::from),
                _ => Err(Error::Usage("usage: :future <distance> <text>".into())),
            }
        } else if cmd == ":show" {
            Ok(serde_json::to_string_pretty(&session.transcript()).expect("transcript serializes"))
        } else if cmd == ":quit" {
            return Ok(());
        } else {
            Err(Error::Usage(format!("unknown command {cmd:?}")))
        };
        match reply {
            Ok(text) => writeln!(out, "{text}"),
            Err(e) => writeln!(out, "error: {e}"),
        }
        .map_err(out_err)?;
    }
}

fn eval(cmd: EvalCommand, out: &mut dyn Write) -> Result<()> {
    match cmd {
        EvalCommand::Sensitivity(a) => {
            let engine = load_engine(&a.model.ckpt, a.model.tokenizer.as_deref())?;
            let s = conditioning_sensitivity(&engine, &a.context, &a.future_a, &a.future_b, a.distance)?;
            writeln!(out, "{s}").map_err(out_err)
        }
        EvalCommand::Realization(a) => {
            let table = formats::read_idf(&a.idf)?;
            match realization_score(&a.generated, &a.future, &table) {
                Some(s) => writeln!(out, "{s}"),
                None => writeln!(out, "null"),
            }
            .map_err(out_err)
        }
        EvalCommand::BuildHumaneval(a) => {
            let model = load_engine(&a.ckpt, a.tokenizer.as_deref())?;
            if model.model.config().injection_mode != InjectionMode::Memory {
                return Err(Error::Usage(format!("{}: expected a MEMORY-mode checkpoint", a.ckpt.display())));
            }
            let baseline = checkpoint::load_with_mode(&a.baseline, InjectionMode::None)?.model;
            let baseline = Engine::new(baseline, model.tokenizer.clone())?;
            let examples = formats::read_dataset(&a.dataset)?;
            let sample: Vec<EvalSource> = examples
                .iter()
                .map(|e| EvalSource {
                    context: model.tokenizer.decode(&e.context_ids),
                    future: model.tokenizer.decode(&e.future_ids),
                    distance: e.future_distance,
                })
                .collect();
            let config = HumanEvalConfig {
                n_per_class: a.n_per_class,
                sentences: a.sentences,
                sampling: a.sampling.params(),
                seed: a.shuffle_seed,
            };
            let set = build_human_eval_set(&model, &baseline, &sample, &config)?;
            formats::write_jsonl(&a.blinded, &set.blinded)?;
            formats::write_jsonl(&a.key, &set.key)?;
            writeln!(out, "items {}", set.key.len()).map_err(out_err)
        }
        EvalCommand::ScoreHumaneval(a) => {
            let key: Vec<KeyItem> = formats::read_jsonl(&a.key)?;
            let evaluators = a
                .answers
                .iter()
                .map(|p| formats::read_jsonl::<AnswerItem>(p))
                .collect::<Result<Vec<_>>>()?;
            let report = score_human_eval(&key, &evaluators)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes")).map_err(out_err)
        }
        EvalCommand::Synthetic(a) => {
            let specs = synthetic_suite(a.n, a.seed);
            let records: Vec<StoryRecord> = specs
                .iter()
                .map(|s| StoryRecord {
                    id: s.story_id.clone(),
                    text: s.text(),
                })
                .collect();
            formats::write_stories(&a.out.join("stories.jsonl"), &records)?;
            formats::write_jsonl(&a.out.join("oracle.jsonl"), &specs)?;
            writeln!(out, "stories {}", specs.len()).map_err(out_err)
        }
    }
}

fn serve(a: &ServeArgs) -> Result<()> {
    let engine = a.ckpt.as_deref().map(|c| load_engine(c, a.tokenizer.as_deref())).transpose()?;
    let idf = a.idf.as_deref().map(formats::read_idf).transpose()?;
    let state = AppState::new(engine, idf, Duration::from_secs(a.session_ttl));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Usage(format!("runtime: {e}")))?;
    eprintln!("listening on {}", a.addr);
    rt.block_on(service::serve(state, a.addr, a.static_dir.clone()))
        .map_err(|e| Error::Usage(format!("serve {}: {e}", a.addr)))
}
