//! Dual-encoder training: in-batch and hard-negative losses, exact gradients,
//! Adam, pre-training pairs and the early-stopped training loop.

mod grad;
mod ict;
mod loss;
mod optim;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use grad::{
    apply_gradients, backprop_and_step, backward, batch_loss_value, check_gradients, forward,
    loss_and_gradients, FeatureBatch, Forward, GradCheck, Gradients, Moments, TowerGrad, TrainState,
    GRAD_CHECK_FLOOR,
};
pub use ict::{generate_ict_pairs, MAX_SPAN, MIN_SPAN};
pub use loss::{
    batch_loss, hard_negative_loss, in_batch_loss, log_sum_exp, softmax, LossGrad, Matrix, ScoreBatch,
    MASKED_LOGIT,
};
pub use optim::{AdamSlot, LinearSchedule, BETA1, BETA2, EPSILON};

use crate::config::Config;
use crate::corpus::Corpus;
use crate::encoder::{dot, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{encode_corpus, run_retrieval};
use crate::metrics::recall_at_k;
use crate::table::{QaExample, Table, TextTablePair};
use crate::textproc::SparseVector;

/// Cutoff used for early stopping.
pub const DEV_RECALL_K: usize = 10;

/// Scores a batch of `(question text, gold table)` pairs, plus one hard
/// negative per example when given.
pub fn batch_scores(params: &EncoderParams, batch: &[(&str, &Table)], hard_negs: Option<&[&Table]>) -> Result<ScoreBatch> {
    let mut seen = HashSet::new();
    for (_, t) in batch {
        if !seen.insert(t.table_id.as_str()) {
            return Err(Error::Invalid(format!("table `{}` is gold for two examples in one batch", t.table_id)));
        }
    }
    if let Some(n) = hard_negs {
        if n.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                actual: n.len(),
            });
        }
    }
    if batch.len() < 2 {
        return Err(Error::Invalid(format!("batch size must be at least 2, got {}", batch.len())));
    }
    let hq: Vec<Vec<f64>> = batch.iter().map(|(q, _)| params.encode_question_text(q).0).collect();
    let score = |tables: &[&Table]| {
        let ht: Vec<Vec<f64>> = tables.iter().map(|t| params.encode_table(t).0).collect();
        let mut s = Matrix::zeros(hq.len(), ht.len());
        for (i, q) in hq.iter().enumerate() {
            for (j, t) in ht.iter().enumerate() {
                s.set(i, j, dot(q, t));
            }
        }
        s
    };
    let golds: Vec<&Table> = batch.iter().map(|(_, t)| *t).collect();
    Ok(ScoreBatch {
        scores: score(&golds),
        hard: hard_negs.map(score),
    })
}

/// One training pair: question (or pre-training span) text, its gold table
/// and an optional mined hard negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub text: String,
    pub table_id: String,
    pub hard_negative: Option<String>,
}

impl TrainExample {
    pub fn from_pair(p: &TextTablePair) -> Self {
        TrainExample {
            text: p.text.clone(),
            table_id: p.table_id.clone(),
            hard_negative: None,
        }
    }

    /// Examples without a gold table are dropped.
    pub fn from_examples(examples: &[QaExample], negatives: Option<&HashMap<String, String>>) -> Vec<Self> {
        examples
            .iter()
            .filter_map(|e| {
                Some(TrainExample {
                    text: e.text().to_string(),
                    table_id: e.gold_table_id.clone()?,
                    hard_negative: negatives.and_then(|n| n.get(e.id()).cloned()),
                })
            })
            .collect()
    }
}

/// Dev questions and the corpus restricted to their gold tables.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub corpus: Corpus,
    pub examples: Vec<QaExample>,
}

impl DevSet {
    pub fn new(corpus: &Corpus, examples: Vec<QaExample>) -> Result<Self> {
        let examples: Vec<QaExample> = examples.into_iter().filter(|e| e.gold_table_id.is_some()).collect();
        if examples.is_empty() {
            return Err(Error::Invalid("dev set has no questions with gold tables".into()));
        }
        let dev_corpus = corpus.subset(examples.iter().filter_map(|e| e.gold_table_id.as_deref()))?;
        Ok(DevSet {
            corpus: dev_corpus,
            examples,
        })
    }

    pub fn recall(&self, params: &EncoderParams) -> Result<f64> {
        let idx = encode_corpus(params, &self.corpus);
        let run = run_retrieval(&idx, params, &self.examples, DEV_RECALL_K)?;
        recall_at_k(&run, &self.examples, DEV_RECALL_K, None)
    }
}

/// Epoch-wise shuffled batches with no repeated gold table inside a batch.
/// Conflicting examples are deferred to the next batch; an incomplete batch
/// at the end of an epoch is dropped.
struct BatchSampler<'a> {
    data: &'a [TrainExample],
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    deferred: VecDeque<usize>,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    fn new(data: &'a [TrainExample], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
        }
        let distinct: HashSet<&str> = data.iter().map(|e| e.table_id.as_str()).collect();
        if data.len() < batch_size || distinct.len() < batch_size {
            return Err(Error::Invalid(format!(
                "batch size {batch_size} exceeds the dataset ({} examples, {} distinct tables)",
                data.len(),
                distinct.len()
            )));
        }
        let mut s = BatchSampler {
            data,
            batch_size,
            order: (0..data.len()).collect(),
            pos: 0,
            deferred: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        loop {
            let mut batch = Vec::with_capacity(self.batch_size);
            let mut tables = HashSet::new();
            let mut still_deferred = VecDeque::new();
            while let Some(i) = self.deferred.pop_front() {
                if batch.len() < self.batch_size && tables.insert(self.data[i].table_id.as_str()) {
                    batch.push(i);
                } else {
                    still_deferred.push_back(i);
                }
            }
            while batch.len() < self.batch_size && self.pos < self.order.len() {
                let i = self.order[self.pos];
                self.pos += 1;
                if tables.insert(self.data[i].table_id.as_str()) {
                    batch.push(i);
                } else {
                    still_deferred.push_back(i);
                }
            }
            self.deferred = still_deferred;
            if batch.len() == self.batch_size {
                return batch;
            }
            self.deferred.clear();
            self.pos = 0;
            self.order.shuffle(&mut self.rng);
        }
    }
}

/// Inverted dropout on feature entries.
pub fn feature_dropout(x: &SparseVector, rate: f64, rng: &mut ChaCha8Rng) -> SparseVector {
    if rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - rate;
    SparseVector::from_pairs(
        x.entries()
            .iter()
            .filter(|_| rng.gen::<f64>() < keep)
            .map(|&(f, v)| (f, v / keep)),
    )
}

/// Training-log row; `dev_recall` is absent when no dev set is given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub dev_recall: Option<f64>,
}

pub fn log_to_tsv(rows: &[LogRow]) -> String {
    let mut out = String::from("step\tloss\tdev_recall@10\n");
    for r in rows {
        let recall = r.dev_recall.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{}\t{:.6}\t{}", r.step, r.loss, recall);
    }
    out
}

pub fn save_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_to_tsv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state; `params` holds the best checkpoint when a dev set was used.
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Per-step batch loss.
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

fn features_for<'a>(
    params: &EncoderParams,
    corpus: &'a Corpus,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<HashMap<String, SparseVector>> {
    let mut tables: Vec<&Table> = Vec::new();
    let mut seen = HashSet::new();
    for id in ids {
        if seen.insert(id) {
            tables.push(corpus.require(id)?);
        }
    }
    Ok(tables
        .par_iter()
        .map(|t| (t.table_id.clone(), params.table_features(t)))
        .collect())
}

/// Runs up to `cfg.max_steps` updates. With a dev set, recall@10 on the
/// dev-tables-only corpus is computed every `cfg.eval_every` steps (and at the
/// last step); the best parameters are kept and training stops after
/// `cfg.patience` evaluations without improvement.
pub fn train(
    mut state: TrainState,
    data: &[TrainExample],
    corpus: &Corpus,
    dev: Option<&DevSet>,
    cfg: &Config,
) -> Result<TrainOutcome> {
    if !state.moments.matches(&state.params) {
        return Err(Error::Invalid("optimizer moments do not match parameter shapes".into()));
    }
    let mut outcome = TrainOutcome {
        state: state.clone(),
        log: Vec::new(),
        losses: Vec::new(),
        stopped_early: false,
    };
    if cfg.max_steps == 0 {
        return Ok(outcome);
    }
    if data.is_empty() {
        return Err(Error::Invalid("no training data".into()));
    }
    let mut sampler = BatchSampler::new(data, cfg.batch_size, cfg.seed)?;
    let table_feats = features_for(
        &state.params,
        corpus,
        data.iter()
            .flat_map(|e| std::iter::once(e.table_id.as_str()).chain(e.hard_negative.as_deref())),
    )?;
    let question_feats: Vec<SparseVector> = data.par_iter().map(|e| state.params.question_features(&e.text)).collect();
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.max_steps as u64, cfg.warmup_fraction);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval_every = cfg.eval_every.max(1) as u64;
    let mut best_params = state.params.clone();
    let mut window = Vec::new();
    let end = state.step + cfg.max_steps as u64;

    while state.step < end {
        let idx = sampler.next_batch();
        let any_negative = idx.iter().any(|&i| data[i].hard_negative.is_some());
        let mut fb = FeatureBatch {
            questions: Vec::with_capacity(idx.len()),
            tables: Vec::with_capacity(idx.len()),
            table_ids: Vec::with_capacity(idx.len()),
            negatives: Vec::new(),
        };
        for &i in &idx {
            let ex = &data[i];
            fb.questions.push(feature_dropout(&question_feats[i], cfg.dropout, &mut dropout_rng));
            fb.tables.push(feature_dropout(&table_feats[&ex.table_id], cfg.dropout, &mut dropout_rng));
            fb.table_ids.push(ex.table_id.clone());
            if any_negative {
                let neg = ex.hard_negative.as_ref().map(|n| {
                    (n.clone(), feature_dropout(&table_feats[n], cfg.dropout, &mut dropout_rng))
                });
                fb.negatives.push(neg);
            }
        }
        let loss = backprop_and_step(&mut state, &fb, &schedule)?;
        outcome.losses.push(loss);
        window.push(loss);

        if state.step.is_multiple_of(eval_every) || state.step == end {
            let mean_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let dev_recall = dev.map(|d| d.recall(&state.params)).transpose()?;
            outcome.log.push(LogRow {
                step: state.step,
                loss: mean_loss,
                dev_recall,
            });
            if let Some(r) = dev_recall {
                if state.best_recall.is_none_or(|b| r > b) {
                    state.best_recall = Some(r);
                    state.evals_since_improvement = 0;
                    best_params = state.params.clone();
                } else {
                    state.evals_since_improvement += 1;
                    if state.evals_since_improvement >= cfg.patience {
                        outcome.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if dev.is_some() && state.best_recall.is_some() {
        state.params = best_params;
    }
    outcome.state = state;
    Ok(outcome)
}
