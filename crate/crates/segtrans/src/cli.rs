//! `segtrans` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use segtrans_core::augment::{
    fit_unsupervised, split_corpus, AugmentError, Origin, UnsupSegmenter, WeightedExample, DEFAULT_SPLIT_PUNCTUATION,
};
use segtrans_core::compute::{gradient_check, Tape};
use segtrans_core::data::{build_vocabulary, split_train_valid, DataError, SegmentedSentence, Vocabulary};
use segtrans_core::decode::{postprocess, segment_long, DecodeError, Ensemble};
use segtrans_core::eval::{bootstrap_ci, f1_score, EvalError};
use segtrans_core::model::{Batch, CharLM, ModelError, SegModel, Trainable, Weighting};
use segtrans_core::rng::SplitMix64;
use segtrans_core::train::{fine_tune, train, Checkpoint, TrainError, TrainReport};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::io::{self, read_bakeoff, read_dataset, read_lines, read_vocab, write_bakeoff, write_dataset, write_vocab, IoError, WeightedLine};
use crate::manifest::{manifest_path, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "segtrans", version, about = "Word segmentation as character-level translation", args_override_self = true)]
pub struct Cli {
    /// key=value settings file (default: $SEGTRANS_CONFIG)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Seed for every random choice of the run
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize a gold corpus, split it into train/valid and build the vocabulary
    Preprocess(PreprocessArgs),
    /// Build a weighted training set with sentence splitting and/or unsupervised data
    Augment(AugmentArgs),
    /// Train a segmenter (or a character language model with --lm)
    Train(TrainArgs),
    /// Continue training a segmenter checkpoint on gold data
    Finetune(FinetuneArgs),
    /// Segment raw text
    Segment(SegmentArgs),
    /// Word precision, recall and F1 of a prediction against gold
    Score(ScoreArgs),
    /// Bootstrap confidence interval of F1
    Bootstrap(BootstrapArgs),
    /// Check analytic gradients of a toy model against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    valid_ratio: f64,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Gold training corpus (bakeoff format)
    #[arg(long)]
    gold: PathBuf,
    /// Weighted dataset to write
    #[arg(long)]
    output: PathBuf,
    /// Cut sentences after commas and periods
    #[arg(long)]
    split: bool,
    /// Add unsupervised segmentations of the gold text
    #[arg(long)]
    unsup: bool,
    /// Extra raw text for the unsupervised segmenter (fit and segmented)
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Externally produced segmentations used as augmented data
    #[arg(long = "import")]
    import: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_word_len: usize,
    /// Weight of gold sentences relative to augmented ones
    #[arg(long, default_value_t = 1.0)]
    gold_weight: f64,
    /// Characters after which sentences are cut
    #[arg(long)]
    punctuation: Option<String>,
    /// Validation corpus to split alongside the training side
    #[arg(long, requires = "valid_output")]
    valid: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    valid_output: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct ModelFlags {
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    enc_depth: Option<usize>,
    #[arg(long)]
    dec_depth: Option<usize>,
    #[arg(long)]
    dropout_state: Option<f64>,
    /// Probability or "none"
    #[arg(long)]
    dropout_state_encoder: Option<String>,
    /// Probability or "none"
    #[arg(long)]
    dropout_state_decoder: Option<String>,
    #[arg(long)]
    dropout_src: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    tied_embeddings: Option<bool>,
    #[arg(long)]
    layer_norm: Option<bool>,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "embed_dim", &self.embed_dim);
        push(&mut v, "hidden_dim", &self.hidden_dim);
        push(&mut v, "enc_depth", &self.enc_depth);
        push(&mut v, "dec_depth", &self.dec_depth);
        push(&mut v, "dropout_state", &self.dropout_state);
        push(&mut v, "dropout_state_encoder", &self.dropout_state_encoder);
        push(&mut v, "dropout_state_decoder", &self.dropout_state_decoder);
        push(&mut v, "dropout_src", &self.dropout_src);
        push(&mut v, "label_smoothing", &self.label_smoothing);
        push(&mut v, "tied_embeddings", &self.tied_embeddings);
        push(&mut v, "layer_norm", &self.layer_norm);
        v
    }
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    #[arg(long, visible_alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    batch_size_tokens: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Weight of delimiter tokens in the loss
    #[arg(long)]
    k_delim: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Updates between validations, or "none" for once per epoch
    #[arg(long)]
    eval_every: Option<String>,
    /// Global gradient norm limit, or "none"
    #[arg(long)]
    clip_norm: Option<String>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "learning_rate", &self.learning_rate);
        push(&mut v, "beta1", &self.beta1);
        push(&mut v, "beta2", &self.beta2);
        push(&mut v, "epsilon", &self.epsilon);
        push(&mut v, "batch_size_tokens", &self.batch_size_tokens);
        push(&mut v, "patience", &self.patience);
        push(&mut v, "k_delim", &self.k_delim);
        push(&mut v, "max_epochs", &self.max_epochs);
        push(&mut v, "eval_every", &self.eval_every);
        push(&mut v, "clip_norm", &self.clip_norm);
        v
    }
}

fn push<T: ToString>(v: &mut Vec<(&'static str, String)>, key: &'static str, x: &Option<T>) {
    if let Some(x) = x {
        v.push((key, x.to_string()));
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Weighted dataset or plain bakeoff corpus
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Train a character language model on the segmented side instead
    #[arg(long)]
    lm: bool,
    /// Store Adam moments in the checkpoint
    #[arg(long)]
    keep_moments: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Starting segmenter checkpoint
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Vocabulary of the new run; must match the checkpoint
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    keep_moments: bool,
    /// Model settings of the new run; must match the checkpoint
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Several segmenter checkpoints whose distributions are averaged
    #[arg(long, num_args = 1..)]
    ensemble: Vec<PathBuf>,
    /// Character language model joining the ensemble
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    input: PathBuf,
    #[arg(long, default_value = "-")]
    output: PathBuf,
    #[arg(long, visible_alias = "beam-size")]
    beam: Option<usize>,
    /// Let the decoder emit any token instead of copying the input
    #[arg(long)]
    unconstrained: bool,
    #[arg(long)]
    max_len_factor: Option<f64>,
    #[arg(long)]
    length_normalization: bool,
    /// Decoding threads; output order does not depend on it
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    punctuation: Option<String>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = 599)]
    resamples: usize,
    /// Leave the original test set out of the statistics
    #[arg(long)]
    exclude_original: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
    #[arg(long, default_value_t = 5)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 3)]
    sentences: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: DecodeError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("gradient check failed: relative error {error:.3e} exceeds {tolerance:.1e}")]
    Gradient { error: f64, tolerance: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Stable identifier printed in front of the message.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Config(_) => "config",
            CliError::Checkpoint(e) => e.code(),
            CliError::Data(_) => "data",
            CliError::Augment(_) => "augment",
            CliError::Train(_) | CliError::Model(_) => "train",
            CliError::Decode { .. } => "decode",
            CliError::Eval(_) => "eval",
            CliError::Gradient { .. } => "gradcheck",
            CliError::Invalid(_) => "invalid",
            CliError::Manifest { .. } => "manifest",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first) and runs the command. Usage errors
/// print help text and return 2; failures print `error[<code>]: <message>`
/// on one line and return 1.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.code());
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let ctx = Ctx {
        cfg,
        manifest: cli.manifest,
    };
    match cli.command {
        Command::Preprocess(a) => preprocess(ctx, a),
        Command::Augment(a) => augment(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Finetune(a) => finetune_cmd(ctx, a),
        Command::Segment(a) => segment_cmd(ctx, a),
        Command::Score(a) => score_cmd(ctx, a),
        Command::Bootstrap(a) => bootstrap_cmd(ctx, a),
        Command::Gradcheck(a) => gradcheck_cmd(ctx, a),
    }
}

struct Ctx {
    cfg: RunConfig,
    manifest: Option<PathBuf>,
}

impl Ctx {
    fn finish(&self, mut m: RunManifest, outputs: &[&Path]) -> Result<()> {
        let path = manifest_path(self.manifest.as_deref(), &m.command, outputs);
        m.write(&path).map_err(|source| CliError::Manifest { path, source })
    }
}

fn hashed(m: &mut RunManifest, input: bool, role: &str, path: &Path) -> Result<()> {
    let r = if input { m.input(role, path) } else { m.output(role, path) };
    r.map_err(|source| {
        CliError::Io(IoError::Io {
            path: path.into(),
            source,
        })
    })
}

fn punctuation(arg: &Option<String>) -> Vec<char> {
    match arg {
        Some(s) => s.chars().collect(),
        None => DEFAULT_SPLIT_PUNCTUATION.to_vec(),
    }
}

fn non_empty(c: Vec<SegmentedSentence>) -> Vec<SegmentedSentence> {
    c.into_iter().filter(|s| !s.is_empty()).collect()
}

fn preprocess(ctx: Ctx, a: PreprocessArgs) -> Result<()> {
    let seed = ctx.cfg.train.seed;
    let mut m = RunManifest::start("preprocess");
    m.seed = Some(seed);
    m.config([("valid_ratio", a.valid_ratio.to_string())]);
    hashed(&mut m, true, "corpus", &a.input)?;
    let corpus = non_empty(read_bakeoff(&a.input)?);
    let split = split_train_valid(&corpus, a.valid_ratio, seed)?;
    let vocab = build_vocabulary(&split.train)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|source| IoError::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    let train_path = a.out_dir.join("train.txt");
    let valid_path = a.out_dir.join("valid.txt");
    let vocab_path = a.out_dir.join("vocab.txt");
    write_bakeoff(&train_path, &split.train)?;
    write_bakeoff(&valid_path, &split.valid)?;
    write_vocab(&vocab_path, &vocab)?;
    hashed(&mut m, false, "train", &train_path)?;
    hashed(&mut m, false, "valid", &valid_path)?;
    hashed(&mut m, false, "vocab", &vocab_path)?;
    m.result("train_sentences", split.train.len());
    m.result("valid_sentences", split.valid.len());
    m.result("vocab_size", vocab.len());
    eprintln!(
        "train={} valid={} vocab={}",
        split.train.len(),
        split.valid.len(),
        vocab.len()
    );
    // lands at <out_dir>/preprocess.manifest
    ctx.finish(m, &[a.out_dir.join("preprocess").as_path()])
}

fn augment(ctx: Ctx, a: AugmentArgs) -> Result<()> {
    if !(a.gold_weight >= 1.0) {
        return Err(AugmentError::GoldWeightTooSmall(a.gold_weight).into());
    }
    let punct = punctuation(&a.punctuation);
    let mut m = RunManifest::start("augment");
    m.config([
        ("split", a.split.to_string()),
        ("unsup", a.unsup.to_string()),
        ("max_word_len", a.max_word_len.to_string()),
        ("gold_weight", a.gold_weight.to_string()),
        ("punctuation", punct.iter().collect::<String>()),
    ]);
    hashed(&mut m, true, "gold", &a.gold)?;
    let gold = non_empty(read_bakeoff(&a.gold)?);

    let mut augmented: Vec<SegmentedSentence> = Vec::new();
    if a.unsup {
        let mut raw: Vec<_> = gold.iter().map(|s| s.chars().to_vec()).collect();
        if let Some(p) = &a.raw {
            hashed(&mut m, true, "raw", p)?;
            for line in read_lines(p)? {
                let s = segtrans_core::data::normalize_line(&line);
                if !s.is_empty() {
                    raw.push(s);
                }
            }
        }
        let seg = fit_unsupervised(&raw, a.max_word_len)?;
        augmented.extend(raw.iter().map(|r| seg.segment_sentence(r)));
    }
    if let Some(p) = &a.import {
        hashed(&mut m, true, "import", p)?;
        augmented.extend(non_empty(read_bakeoff(p)?));
    }

    let (gold, augmented) = if a.split {
        (split_corpus(&gold, &punct), split_corpus(&augmented, &punct))
    } else {
        (gold, augmented)
    };
    let gold_origin = if a.split { Origin::Split } else { Origin::Gold };
    let mut lines: Vec<WeightedLine> = gold
        .into_iter()
        .map(|sentence| WeightedLine {
            weight: a.gold_weight,
            origin: gold_origin,
            sentence,
        })
        .collect();
    let n_gold = lines.len();
    lines.extend(augmented.into_iter().map(|sentence| WeightedLine {
        weight: 1.0,
        origin: Origin::Unsupervised,
        sentence,
    }));
    write_dataset(&a.output, &lines)?;
    hashed(&mut m, false, "dataset", &a.output)?;
    m.result("gold_examples", n_gold);
    m.result("augmented_examples", lines.len() - n_gold);

    if let (Some(v), Some(vo)) = (&a.valid, &a.valid_output) {
        hashed(&mut m, true, "valid", v)?;
        let valid = non_empty(read_bakeoff(v)?);
        let valid = if a.split { split_corpus(&valid, &punct) } else { valid };
        write_bakeoff(vo, &valid)?;
        hashed(&mut m, false, "valid", vo)?;
    }
    eprintln!("gold={} augmented={}", n_gold, lines.len() - n_gold);
    ctx.finish(m, &[a.output.as_path()])
}

fn examples(lines: &[WeightedLine], vocab: &Vocabulary) -> Vec<WeightedExample> {
    lines
        .iter()
        .map(|l| WeightedExample::new(&l.sentence, vocab, l.weight, l.origin))
        .collect()
}

fn load_sets(data: &Path, valid: &Path, vocab: &Vocabulary) -> Result<(Vec<WeightedExample>, Vec<WeightedExample>)> {
    let train_set = examples(&read_dataset(data)?, vocab);
    let valid_set = segtrans_core::augment::weighted_examples(&read_bakeoff(valid)?, vocab, 1.0, Origin::Gold);
    Ok((train_set, valid_set))
}

fn log_line(r: &segtrans_core::train::ValidationRecord) {
    eprintln!("{r}");
}

fn report_results(m: &mut RunManifest, r: &TrainReport) {
    m.result("best_valid_cost", r.best_valid_cost);
    m.result("best_epoch", r.best_epoch);
    m.result("best_step", r.best_step);
    m.result("epochs", r.epochs);
    m.result("steps", r.steps);
}

fn train_cmd(mut ctx: Ctx, a: TrainArgs) -> Result<()> {
    for (k, v) in a.model.pairs().into_iter().chain(a.train.pairs()) {
        ctx.cfg.set(k, &v)?;
    }
    let vocab = read_vocab(&a.vocab)?;
    let (train_set, valid_set) = load_sets(&a.data, &a.valid, &vocab)?;
    let mut m = RunManifest::start(if a.lm { "train-lm" } else { "train" });
    m.seed = Some(ctx.cfg.train.seed);
    m.config(crate::config::model_pairs(&ctx.cfg.model));
    m.config(crate::config::train_pairs(&ctx.cfg.train));
    hashed(&mut m, true, "data", &a.data)?;
    hashed(&mut m, true, "valid", &a.valid)?;
    hashed(&mut m, true, "vocab", &a.vocab)?;

    let seed = ctx.cfg.train.seed;
    let ck = if a.lm {
        let mut lm = CharLM::new(ctx.cfg.model.clone(), vocab.len(), seed)?;
        let r = train(&mut lm, &train_set, &valid_set, &ctx.cfg.train, &mut log_line)?;
        report_results(&mut m, &r);
        Checkpoint::from_lm(&lm, &vocab, Some(&r), seed, a.keep_moments)
    } else {
        let mut model = SegModel::new(ctx.cfg.model.clone(), vocab.len(), seed)?;
        let r = train(&mut model, &train_set, &valid_set, &ctx.cfg.train, &mut log_line)?;
        report_results(&mut m, &r);
        Checkpoint::from_segmenter(&model, &vocab, Some(&r), seed, a.keep_moments)
    };
    save_checkpoint(&ck, &a.output)?;
    hashed(&mut m, false, "model", &a.output)?;
    ctx.finish(m, &[a.output.as_path()])
}

fn finetune_cmd(mut ctx: Ctx, a: FinetuneArgs) -> Result<()> {
    for (k, v) in a.train.pairs() {
        ctx.cfg.set(k, &v)?;
    }
    let start = load_checkpoint(&a.init)?;
    let vocab = match &a.vocab {
        Some(p) => read_vocab(p)?,
        None => start.vocab.clone(),
    };
    // the new run's model settings start from the checkpoint; only flags change them
    let mut model_config = start.model_config.clone();
    for (k, v) in a.model.pairs() {
        crate::config::set_model(&mut model_config, k, &v)?;
    }
    let (train_set, valid_set) = load_sets(&a.data, &a.valid, &vocab)?;
    let mut m = RunManifest::start("finetune");
    m.seed = Some(ctx.cfg.train.seed);
    m.config(crate::config::model_pairs(&model_config));
    m.config(crate::config::train_pairs(&ctx.cfg.train));
    hashed(&mut m, true, "init", &a.init)?;
    hashed(&mut m, true, "data", &a.data)?;
    hashed(&mut m, true, "valid", &a.valid)?;
    let (model, r) = fine_tune(&start, &vocab, &model_config, &train_set, &valid_set, &ctx.cfg.train, &mut log_line)?;
    report_results(&mut m, &r);
    let ck = Checkpoint::from_segmenter(&model, &vocab, Some(&r), ctx.cfg.train.seed, a.keep_moments);
    save_checkpoint(&ck, &a.output)?;
    hashed(&mut m, false, "model", &a.output)?;
    ctx.finish(m, &[a.output.as_path()])
}

fn segment_cmd(mut ctx: Ctx, a: SegmentArgs) -> Result<()> {
    if let Some(b) = a.beam {
        ctx.cfg.set("beam_size", &b.to_string())?;
    }
    if let Some(f) = a.max_len_factor {
        ctx.cfg.set("max_len_factor", &f.to_string())?;
    }
    if a.unconstrained {
        ctx.cfg.decode.constrained = false;
    }
    if a.length_normalization {
        ctx.cfg.decode.length_normalization = true;
    }
    if ctx.cfg.decode.beam_size == 0 {
        return Err(CliError::Decode {
            line: 0,
            source: DecodeError::ZeroBeam,
        });
    }
    let paths: Vec<&PathBuf> = a.model.iter().chain(&a.ensemble).collect();
    if paths.is_empty() {
        return Err(CliError::Invalid("segment needs --model or --ensemble".into()));
    }
    if a.jobs == 0 {
        return Err(CliError::Invalid("--jobs must be at least 1".into()));
    }
    let punct = punctuation(&a.punctuation);
    let mut m = RunManifest::start("segment");
    m.config(crate::config::decode_pairs(&ctx.cfg.decode));
    m.config([("jobs", a.jobs.to_string())]);

    let mut vocab: Option<Vocabulary> = None;
    let mut models = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        hashed(&mut m, true, &format!("model{i}"), p)?;
        let ck = load_checkpoint(p)?;
        match &vocab {
            None => vocab = Some(ck.vocab.clone()),
            Some(v) if *v != ck.vocab => {
                return Err(CliError::Decode {
                    line: 0,
                    source: DecodeError::VocabularyMismatch,
                })
            }
            Some(_) => {}
        }
        models.push(ck.segmenter()?);
    }
    let vocab = vocab.expect("at least one model");
    let lm = match &a.lm {
        Some(p) => {
            hashed(&mut m, true, "lm", p)?;
            let ck = load_checkpoint(p)?;
            if ck.vocab != vocab {
                return Err(CliError::Decode {
                    line: 0,
                    source: DecodeError::VocabularyMismatch,
                });
            }
            Some(ck.lm()?)
        }
        None => None,
    };
    hashed(&mut m, true, "input", &a.input)?;
    let lines = read_lines(&a.input)?;

    let ensemble = Ensemble {
        models: models.iter().collect(),
        lm: lm.as_ref(),
        vocab: &vocab,
        config: ctx.cfg.decode.clone(),
    };
    let out = segment_lines(&lines, &ensemble, &punct, a.jobs)?;
    io::write_lines(&a.output, &out)?;
    hashed(&mut m, false, "output", &a.output)?;
    m.result("sentences", lines.len());
    ctx.finish(m, &[a.output.as_path()])
}

fn segment_one(line: &str, ensemble: &Ensemble<'_>, punct: &[char]) -> std::result::Result<String, DecodeError> {
    let seg = segment_long(line, ensemble, punct)?;
    postprocess(&seg, line)
}

/// Decodes `lines` on `jobs` threads, each taking a contiguous block, so the
/// output order is the input order.
pub fn segment_lines(lines: &[String], ensemble: &Ensemble<'_>, punct: &[char], jobs: usize) -> Result<Vec<String>> {
    let block = lines.len().div_ceil(jobs.max(1)).max(1);
    let run_block = |start: usize, chunk: &[String]| -> Result<Vec<String>> {
        chunk
            .iter()
            .enumerate()
            .map(|(i, l)| {
                segment_one(l, ensemble, punct).map_err(|source| CliError::Decode {
                    line: start + i + 1,
                    source,
                })
            })
            .collect()
    };
    if jobs <= 1 {
        return run_block(0, lines);
    }
    let results: Vec<Result<Vec<String>>> = std::thread::scope(|s| {
        let handles: Vec<_> = lines
            .chunks(block)
            .enumerate()
            .map(|(b, chunk)| s.spawn(move || run_block(b * block, chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(lines.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn read_pair(m: &mut RunManifest, pred: &Path, gold: &Path) -> Result<(Vec<SegmentedSentence>, Vec<SegmentedSentence>)> {
    hashed(m, true, "pred", pred)?;
    hashed(m, true, "gold", gold)?;
    Ok((read_bakeoff(pred)?, read_bakeoff(gold)?))
}

fn score_cmd(ctx: Ctx, a: ScoreArgs) -> Result<()> {
    let mut m = RunManifest::start("score");
    let (pred, gold) = read_pair(&mut m, &a.pred, &a.gold)?;
    let r = f1_score(&pred, &gold)?;
    // table row first, then the same numbers as key=value lines
    println!("{r}");
    let fields: [(&str, String); 6] = [
        ("precision", r.precision.to_string()),
        ("recall", r.recall.to_string()),
        ("f1", r.f1.to_string()),
        ("gold_words", r.gold_words.to_string()),
        ("pred_words", r.pred_words.to_string()),
        ("correct_words", r.correct_words.to_string()),
    ];
    for (k, v) in fields {
        println!("{k}={v}");
        m.result(k, v);
    }
    ctx.finish(m, &[])
}

fn bootstrap_cmd(ctx: Ctx, a: BootstrapArgs) -> Result<()> {
    let seed = ctx.cfg.train.seed;
    let mut m = RunManifest::start("bootstrap");
    m.seed = Some(seed);
    m.config([
        ("resamples", a.resamples.to_string()),
        ("include_original", (!a.exclude_original).to_string()),
    ]);
    let (pred, gold) = read_pair(&mut m, &a.pred, &a.gold)?;
    let r = bootstrap_ci(&pred, &gold, a.resamples, seed, !a.exclude_original)?;
    println!("{r}");
    m.result("mean", r.mean);
    m.result("half_width", r.half_width);
    ctx.finish(m, &[])
}

fn gradcheck_cmd(ctx: Ctx, a: GradcheckArgs) -> Result<()> {
    const FIRST_CHAR: usize = 7;
    if a.vocab_size <= FIRST_CHAR {
        return Err(CliError::Invalid(format!("--vocab-size must exceed {FIRST_CHAR}")));
    }
    let seed = ctx.cfg.train.seed;
    let mut m = RunManifest::start("gradcheck");
    m.seed = Some(seed);
    let mut model_cfg = ctx.cfg.model.clone();
    model_cfg.embed_dim = a.embed_dim;
    model_cfg.hidden_dim = a.hidden_dim;
    model_cfg.dropout_state = 0.0;
    model_cfg.dropout_state_encoder = None;
    model_cfg.dropout_state_decoder = None;
    model_cfg.dropout_src = 0.0;
    m.config(crate::config::model_pairs(&model_cfg));
    let model = SegModel::new(model_cfg, a.vocab_size, seed)?;

    let mut rng = SplitMix64::derive(seed, "gradcheck-data");
    let data: Vec<WeightedExample> = (0..a.sentences.max(1))
        .map(|_| {
            let n = 1 + rng.below(5);
            let source: Vec<u32> = (0..n).map(|_| (FIRST_CHAR + rng.below(a.vocab_size - FIRST_CHAR)) as u32).collect();
            let boundaries: Vec<usize> = (1..n).filter(|_| rng.bernoulli(0.5)).collect();
            let target = segtrans_core::data::target_ids(&source, &boundaries);
            WeightedExample {
                source,
                target,
                weight: 1.0,
                origin: Origin::Gold,
            }
        })
        .collect();
    let refs: Vec<&WeightedExample> = data.iter().collect();
    let batch = Batch::new(
        &refs,
        Weighting::Objective {
            k_delim: ctx.cfg.train.k_delim,
        },
    )?;
    let report = gradient_check(model.params(), 1e-5, usize::MAX, seed, |tape: &mut Tape<'_>| {
        model.batch_loss(tape, &batch, None)
    })?;
    println!("max_rel_error={:.3e} checked={}", report.max_rel_error, report.checked);
    m.result("max_rel_error", report.max_rel_error);
    m.result("checked", report.checked);
    ctx.finish(m, &[])?;
    if report.max_rel_error > a.tolerance {
        return Err(CliError::Gradient {
            error: report.max_rel_error,
            tolerance: a.tolerance,
        });
    }
    Ok(())
}
