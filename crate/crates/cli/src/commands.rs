//! One function per subcommand.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tabula_core::binio::peek_magic;
use tabula_core::bm25::{self, build_index, run_bm25, Bm25Params, InvertedIndex};
use tabula_core::corpus::{load_pairs, save_pairs};
use tabula_core::dedup::{dedup_corpus, load_id_map, remap_examples, save_id_map};
use tabula_core::encoder::{EncoderParams, EncoderShape};
use tabula_core::index::{self, encode_corpus, run_retrieval, search, EmbeddingIndex};
use tabula_core::metrics::{em_f1, mcnemar, qa_report, retrieval_report, Prediction, RetrievalRun};
use tabula_core::miner::{load_negatives, mine_hard_negatives, save_negatives};
use tabula_core::reader::{answer_run, train_reader, ReaderParams, ReaderShape};
use tabula_core::synth::{keyed_retrieval_set, near_duplicate_set, KeyedSpec, NearDuplicateSpec};
use tabula_core::training::{generate_ict_pairs, save_log, train, DevSet, TrainExample, TrainState};
use tabula_core::{load_corpus, load_questions, save_corpus, save_questions, Config, Corpus, QaExample};

use crate::cli::*;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading tables {}", path.display()))
}

fn questions(path: &Path) -> Result<Vec<QaExample>> {
    load_questions(path).with_context(|| format!("loading questions {}", path.display()))
}

pub fn dedup(a: &DedupArgs, cfg: &Config) -> Result<()> {
    let c = corpus(&a.tables)?;
    let out = dedup_corpus(&c, cfg.dedup_threshold);
    save_corpus(&a.out, &out.corpus)?;
    save_id_map(&a.map, &out.mapping)?;
    if let (Some(q), Some(q_out)) = (&a.questions, &a.questions_out) {
        let mut ex = questions(q)?;
        remap_examples(&mut ex, &out.mapping);
        save_questions(q_out, &ex)?;
    }
    eprintln!(
        "dedup: {} tables -> {} ({} merges)",
        c.len(),
        out.corpus.len(),
        out.merges.len()
    );
    Ok(())
}

fn bm25_params(cfg: &Config) -> Bm25Params {
    Bm25Params {
        k1: cfg.bm25_k1,
        b: cfg.bm25_b,
        boost: cfg.bm25_boost,
    }
}

pub fn index_bm25(a: &IndexBm25Args, cfg: &Config) -> Result<()> {
    let idx = build_index(&corpus(&a.tables)?, bm25_params(cfg))?;
    idx.save(&a.out)?;
    eprintln!("index-bm25: {} documents", idx.doc_count());
    Ok(())
}

fn checkpoint(path: &Path) -> Result<EncoderParams> {
    EncoderParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn retrieve(a: &RetrieveArgs, cfg: &Config) -> Result<()> {
    let qs = questions(&a.questions)?;
    let k = a.k.unwrap_or(cfg.top_k);
    let magic = peek_magic(&a.index)?;
    let run = if &magic == bm25::MAGIC {
        if a.checkpoint.is_some() {
            bail!("--checkpoint is only meaningful for embedding indexes");
        }
        run_bm25(&InvertedIndex::load(&a.index)?, &qs, k)
    } else if &magic == index::MAGIC {
        let ck = a
            .checkpoint
            .as_ref()
            .context("--checkpoint is required with an embedding index")?;
        let params = checkpoint(ck)?;
        run_retrieval(&EmbeddingIndex::load(&a.index)?, &params, &qs, k)?
    } else {
        bail!("{}: not a BM25 or embedding index", a.index.display());
    };
    run.save(&a.out)?;
    eprintln!("retrieve: {} questions, {} rows", run.num_questions(), run.num_rows());
    Ok(())
}

pub fn pretrain_pairs(a: &PretrainPairsArgs, cfg: &Config) -> Result<()> {
    let pairs = generate_ict_pairs(&corpus(&a.tables)?, cfg.ict_per_table, cfg.seed);
    save_pairs(&a.out, &pairs)?;
    eprintln!("pretrain-pairs: {} pairs", pairs.len());
    Ok(())
}

fn initial_params(init: Option<&Path>, cfg: &Config) -> Result<EncoderParams> {
    let shape = EncoderShape {
        d: cfg.embed_dim,
        feature_dims: cfg.feature_dims,
        use_structure: cfg.use_structure,
        schema_only: cfg.schema_only,
    };
    match init {
        Some(p) => {
            let params = checkpoint(p)?;
            if params.shape != shape {
                bail!(
                    "checkpoint {} has shape {:?}, config asks for {:?}",
                    p.display(),
                    params.shape,
                    shape
                );
            }
            Ok(params)
        }
        None => Ok(EncoderParams::init(shape, cfg.seed)?),
    }
}

fn run_training(common: &TrainCommon, data: &[TrainExample], c: &Corpus, cfg: &Config) -> Result<()> {
    let params = initial_params(common.init.as_deref(), cfg)?;
    let dev = match &common.dev_questions {
        Some(p) => Some(DevSet::new(c, questions(p)?)?),
        None => None,
    };
    let out = train(TrainState::new(params), data, c, dev.as_ref(), cfg)?;
    out.state.params.save(&common.out)?;
    if let Some(log) = &common.log {
        save_log(log, &out.log)?;
    }
    let last = out.log.last();
    eprintln!(
        "trained {} steps on {} examples{}{}",
        out.state.step,
        data.len(),
        last.map(|l| format!(", final loss {:.4}", l.loss)).unwrap_or_default(),
        out.state
            .best_recall
            .map(|r| format!(", best dev recall@10 {r:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs, cfg: &Config) -> Result<()> {
    let c = corpus(&a.common.tables)?;
    let pairs = match &a.pairs {
        Some(p) => load_pairs(p)?,
        None => generate_ict_pairs(&c, cfg.ict_per_table, cfg.seed),
    };
    let data: Vec<TrainExample> = pairs.iter().map(TrainExample::from_pair).collect();
    run_training(&a.common, &data, &c, cfg)
}

pub fn train_cmd(a: &TrainArgs, cfg: &Config) -> Result<()> {
    let c = corpus(&a.common.tables)?;
    let negatives = a.negatives.as_ref().map(load_negatives).transpose()?;
    let data = TrainExample::from_examples(&questions(&a.questions)?, negatives.as_ref());
    run_training(&a.common, &data, &c, cfg)
}

pub fn encode(a: &EncodeCorpusArgs, _cfg: &Config) -> Result<()> {
    let idx = encode_corpus(&checkpoint(&a.checkpoint)?, &corpus(&a.tables)?);
    idx.save(&a.out)?;
    eprintln!("encode-corpus: {} tables, d = {}", idx.len(), idx.dim());
    Ok(())
}

pub fn search_cmd(a: &SearchArgs, cfg: &Config) -> Result<()> {
    let params = checkpoint(&a.checkpoint)?;
    let idx = EmbeddingIndex::load(&a.index)?;
    for (rank, (id, score)) in search(&idx, &params.encode_question_text(&a.query), cfg.top_k)?
        .into_iter()
        .enumerate()
    {
        println!("{}\t{id}\t{score:.6}", rank + 1);
    }
    Ok(())
}

pub fn mine(a: &MineArgs, cfg: &Config) -> Result<()> {
    let run = RetrievalRun::load(&a.run)?;
    let report = mine_hard_negatives(&run, &questions(&a.questions)?, &corpus(&a.tables)?, cfg.mine_depth)?;
    save_negatives(&a.out, &report.triples)?;
    for q in &report.missing {
        eprintln!("mine: question {q} missing from run");
    }
    eprintln!(
        "mine: {} negatives, {} questions without a clean candidate, {} missing",
        report.triples.len(),
        report.exhausted.len(),
        report.missing.len()
    );
    Ok(())
}

pub fn train_reader_cmd(a: &TrainReaderArgs, cfg: &Config) -> Result<()> {
    let c = corpus(&a.tables)?;
    let run = a.run.as_ref().map(RetrievalRun::load).transpose()?;
    let rp = match &a.init {
        Some(p) => ReaderParams::load(p)?,
        None => ReaderParams::init(ReaderShape::from_config(cfg), cfg.seed)?,
    };
    let out = train_reader(rp, run.as_ref(), &questions(&a.questions)?, &c, cfg)?;
    out.params.save(&a.out)?;
    eprintln!(
        "train-reader: {} steps, {} examples skipped (no matching span){}",
        out.span_losses.len(),
        out.skipped.len(),
        out.span_losses
            .last()
            .map(|l| format!(", final span loss {l:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn answer(a: &AnswerArgs, cfg: &Config) -> Result<()> {
    let rp = ReaderParams::load(&a.reader)?;
    let run = RetrievalRun::load(&a.run)?;
    let (preds, missing) = answer_run(&rp, &run, &questions(&a.questions)?, &corpus(&a.tables)?, cfg.top_k, cfg.max_answer_len)?;
    tabula_core::corpus::write_jsonl(&a.out, &preds)?;
    eprintln!("answer: {} predictions, {} questions missing from run", preds.len(), missing.len());
    Ok(())
}

pub fn eval_retrieval(a: &EvalRetrievalArgs, _cfg: &Config) -> Result<()> {
    let run = RetrievalRun::load(&a.run)?;
    let map = a.map.as_ref().map(load_id_map).transpose()?;
    let report = retrieval_report(&run, &questions(&a.questions)?, &a.k, map.as_ref())?;
    if report.num_skipped > 0 {
        eprintln!("eval-retrieval: {} questions missing from run (counted as misses)", report.num_skipped);
    }
    emit(a.out.as_deref(), &report.to_json())
}

fn predictions(path: &Path) -> Result<Vec<Prediction>> {
    tabula_core::corpus::read_jsonl(path).with_context(|| format!("loading predictions {}", path.display()))
}

pub fn eval_qa(a: &EvalQaArgs, _cfg: &Config) -> Result<()> {
    let report = qa_report(&predictions(&a.pred)?, &questions(&a.questions)?)?;
    emit(a.out.as_deref(), &report.to_json())
}

pub fn significance(a: &SignificanceArgs, _cfg: &Config) -> Result<()> {
    let qs = questions(&a.questions)?;
    let correct = |path: &Path| -> Result<Vec<bool>> {
        let by_id: HashMap<String, Prediction> =
            predictions(path)?.into_iter().map(|p| (p.question_id.clone(), p)).collect();
        Ok(qs
            .iter()
            .map(|q| match a.metric {
                SignificanceMetric::Em => by_id
                    .get(q.id())
                    .is_some_and(|p| !q.answers.is_empty() && em_f1(&p.answer, &q.answers).0 == 1),
            })
            .collect())
    };
    let m = mcnemar(&correct(&a.pred_a)?, &correct(&a.pred_b)?)?;
    let json = serde_json::json!({
        "metric": "em",
        "num_questions": qs.len(),
        "b": m.b,
        "c": m.c,
        "statistic": m.statistic,
        "p_value": m.p_value,
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&json)?)
}

pub fn synthesize(a: &SynthesizeArgs, cfg: &Config) -> Result<()> {
    let set = match a.kind {
        SyntheticKind::Keyed => keyed_retrieval_set(KeyedSpec::default(), cfg.seed)?,
        SyntheticKind::NearDuplicate => near_duplicate_set(NearDuplicateSpec::default(), cfg.seed)?,
    };
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    save_corpus(a.out_dir.join("tables.jsonl"), &set.corpus)?;
    save_questions(a.out_dir.join("train.jsonl"), &set.train)?;
    save_questions(a.out_dir.join("dev.jsonl"), &set.dev)?;
    save_questions(a.out_dir.join("test.jsonl"), &set.test)?;
    eprintln!(
        "synthesize: {} tables, {}/{}/{} train/dev/test questions",
        set.corpus.len(),
        set.train.len(),
        set.dev.len(),
        set.test.len()
    );
    Ok(())
}
