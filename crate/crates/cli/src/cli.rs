//! Argument definitions. Every `Config` key is a global `--kebab-case` flag
//! (the snake_case spelling is accepted as an alias).

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Arg, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use tabula_core::Config;

#[derive(Debug, Parser)]
#[command(name = "tabula", version, about = "Open-domain question answering over tables")]
pub struct Cli {
    /// Config file of `key = value` lines; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Collapse near-duplicate tables within each page.
    Dedup(DedupArgs),
    /// Build a BM25 inverted index.
    IndexBm25(IndexBm25Args),
    /// Retrieve top-k tables per question from a BM25 or embedding index.
    Retrieve(RetrieveArgs),
    /// Sample pre-training (span, table) pairs from table metadata.
    PretrainPairs(PretrainPairsArgs),
    /// Pre-train the dual encoder on span/table pairs.
    Pretrain(PretrainArgs),
    /// Fine-tune the dual encoder on questions, optionally with mined negatives.
    Train(TrainArgs),
    /// Embed every table with the table tower.
    EncodeCorpus(EncodeCorpusArgs),
    /// Query an embedding index interactively.
    Search(SearchArgs),
    /// Mine one hard negative per question from a run file.
    Mine(MineArgs),
    /// Train the span reader.
    TrainReader(TrainReaderArgs),
    /// Predict answers from retrieved candidates.
    Answer(AnswerArgs),
    /// Recall@k of a run file.
    EvalRetrieval(EvalRetrievalArgs),
    /// EM / F1 and oracle variants of predictions.
    EvalQa(EvalQaArgs),
    /// McNemar test between two prediction files.
    Significance(SignificanceArgs),
    /// Run a named multi-stage pipeline.
    Recipe(RecipeArgs),
    /// Run the built-in invariant checks.
    Selfcheck(SelfcheckArgs),
    /// Write a synthetic corpus and question splits.
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[arg(long, visible_alias = "in")]
    pub tables: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the original-id → representative-id map (TSV).
    #[arg(long)]
    pub map: PathBuf,
    /// Questions whose gold ids should be remapped.
    #[arg(long, requires = "questions_out")]
    pub questions: Option<PathBuf>,
    #[arg(long)]
    pub questions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexBm25Args {
    #[arg(long, visible_alias = "in")]
    pub tables: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// BM25 or embedding index (detected from the file header).
    #[arg(long)]
    pub index: PathBuf,
    /// Encoder checkpoint; required for embedding indexes.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub questions: PathBuf,
    /// Ranking depth; overrides `--top-k`.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainPairsArgs {
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCommon {
    #[arg(long)]
    pub tables: PathBuf,
    /// Checkpoint to start from; random initialization otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Dev questions for recall@10 early stopping.
    #[arg(long)]
    pub dev_questions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (TSV: step, loss, dev recall@10).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Pairs from `pretrain-pairs`; generated on the fly when absent.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub questions: PathBuf,
    /// Mined negatives (question_id<TAB>table_id).
    #[arg(long)]
    pub negatives: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeCorpusArgs {
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub query: String,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainReaderArgs {
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    /// Retrieval run supplying candidate tables; gold-only otherwise.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnswerArgs {
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub reader: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    pub k: Vec<usize>,
    /// Dedup id map applied to retrieved and gold ids.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Report path; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalQaArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SignificanceMetric {
    Em,
}

#[derive(Debug, Args)]
pub struct SignificanceArgs {
    #[arg(long)]
    pub pred_a: PathBuf,
    #[arg(long)]
    pub pred_b: PathBuf,
    /// Reference answers used to score both prediction files.
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long, value_enum, default_value = "em")]
    pub metric: SignificanceMetric,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    /// Recipe name (see `--list`).
    #[arg(required_unless_present = "list")]
    pub name: Option<String>,
    /// Print the available recipes and their stages.
    #[arg(long)]
    pub list: bool,
    #[arg(long, required_unless_present = "list")]
    pub workdir: Option<PathBuf>,
    #[arg(long, required_unless_present = "list")]
    pub tables: Option<PathBuf>,
    #[arg(long, required_unless_present = "list")]
    pub train_questions: Option<PathBuf>,
    #[arg(long, required_unless_present = "list")]
    pub test_questions: Option<PathBuf>,
    #[arg(long)]
    pub dev_questions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Seed for generated fixtures.
    #[arg(long, default_value_t = 7)]
    pub fixture_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    /// Unique two-token keys with single-token lexical distractors.
    Keyed,
    /// Gold tables paired with one-cell near duplicates.
    NearDuplicate,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, value_enum)]
    pub kind: SyntheticKind,
    /// Writes tables.jsonl, train.jsonl, dev.jsonl and test.jsonl here.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn kebab(key: &str) -> String {
    key.replace('_', "-")
}

/// Short spellings used by individual subcommands.
fn short_alias(key: &str) -> Option<&'static str> {
    match key {
        "dedup_threshold" => Some("threshold"),
        "bm25_boost" => Some("boost"),
        "mine_depth" => Some("depth"),
        _ => None,
    }
}

/// The full command: derived subcommands plus one global flag per config key.
pub fn command() -> Command {
    let mut cmd = Cli::command();
    for (key, doc) in Config::KEYS {
        let default = Config::default()
            .entries()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .unwrap_or_default();
        let mut arg = Arg::new(*key)
            .long(kebab(key))
            .global(true)
            .value_name("VALUE")
            .help_heading("Config")
            .help(format!("{} [default: {default}]", doc.trim()));
        if key.contains('_') {
            arg = arg.alias(*key);
        }
        if let Some(a) = short_alias(key) {
            arg = arg.visible_alias(a);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

/// Resolves the config: defaults, then `--config` file, then flags.
fn resolve_config(cli: &Cli, matches: &ArgMatches) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_file(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    let sub = matches.subcommand().map(|(_, m)| m);
    for (key, _) in Config::KEYS {
        let value = sub
            .and_then(|m| m.get_one::<String>(key))
            .or_else(|| matches.get_one::<String>(key));
        if let Some(v) = value {
            cfg.set(key, v).with_context(|| format!("--{}", kebab(key)))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse<I, T>(args: I) -> Result<(Cli, Config)>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let cfg = resolve_config(&cli, &matches)?;
    Ok((cli, cfg))
}
