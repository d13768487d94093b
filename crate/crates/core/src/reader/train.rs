//! Reader training: logistic candidate loss plus marginal span cross entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::RetrievalRun;
use crate::table::QaExample;
use crate::textproc::tokens;
use crate::training::{log_sum_exp, AdamSlot, GradCheck, LinearSchedule, GRAD_CHECK_FLOOR};

use super::model::{
    all_span_scores, backprop_candidate, backprop_question, backprop_spans, backprop_token_reps, question_features,
    question_vector, sigmoid, softplus, table_forward, PreparedTable, ReaderGrads, ReaderParams,
};

/// One training question with its candidate tables featurized.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub question_id: String,
    pub question_features: Vec<Vec<u32>>,
    pub candidates: Vec<PreparedTable>,
    /// Index of the gold table in `candidates`.
    pub gold: usize,
    /// Indices of gold-table spans whose tokens equal some answer.
    pub positives: Vec<usize>,
}

/// Candidates are the run's top `cfg.top_k` tables plus the gold table when
/// missing. Returns prepared examples and the ids of examples skipped because
/// no gold-table span matches an answer.
pub fn prepare_examples(
    shape: &super::ReaderShape,
    run: Option<&RetrievalRun>,
    examples: &[QaExample],
    corpus: &Corpus,
    cfg: &Config,
) -> Result<(Vec<PreparedExample>, Vec<String>)> {
    let prepared: Vec<std::result::Result<PreparedExample, String>> = examples
        .par_iter()
        .filter(|ex| ex.gold_table_id.is_some())
        .map(|ex| {
            let gold_id = ex.gold_table_id.as_deref().expect("filtered");
            let mut ids: Vec<&str> = run
                .and_then(|r| r.get(ex.id()))
                .map(|r| r.iter().take(cfg.top_k).map(|(id, _)| id.as_str()).collect())
                .unwrap_or_default();
            if !ids.contains(&gold_id) {
                ids.push(gold_id);
            }
            let candidates = ids
                .iter()
                .map(|id| Ok(PreparedTable::new(corpus.require(id)?, shape, cfg.max_answer_len)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.to_string());
            let candidates = match candidates {
                Ok(c) => c,
                Err(e) => return Err(format!("{}: {e}", ex.id())),
            };
            let gold = ids.iter().position(|id| *id == gold_id).expect("gold added");
            let answers: Vec<Vec<String>> = ex.answers.iter().map(|a| tokens(a)).filter(|a| !a.is_empty()).collect();
            let g = &candidates[gold];
            let positives: Vec<usize> = g
                .spans
                .iter()
                .enumerate()
                .filter(|(_, &(s, e))| {
                    answers.iter().any(|a| {
                        a.len() == e - s + 1 && g.flat.tokens[s..=e].iter().zip(a).all(|(t, w)| t.token == *w)
                    })
                })
                .map(|(k, _)| k)
                .collect();
            Ok(PreparedExample {
                question_id: ex.id().to_string(),
                question_features: question_features(ex.text(), shape.feature_dims),
                candidates,
                gold,
                positives,
            })
        })
        .collect();
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for p in prepared {
        match p {
            Ok(p) if p.positives.is_empty() => skipped.push(p.question_id),
            Ok(p) => out.push(p),
            Err(e) => return Err(Error::Invalid(format!("cannot prepare reader example {e}"))),
        }
    }
    Ok((out, skipped))
}

/// Loss components of one example: mean logistic loss over candidates and
/// the span cross entropy on the gold table. Accumulates gradients into `g`
/// when given.
pub fn example_loss(rp: &ReaderParams, ex: &PreparedExample, mut g: Option<&mut ReaderGrads>) -> (f64, f64) {
    let m = question_vector(rp, &ex.question_features);
    let mut dm = vec![0.0; rp.r()];
    let n = ex.candidates.len() as f64;
    let mut cand_loss = 0.0;
    let mut span_ce = 0.0;
    for (c, t) in ex.candidates.iter().enumerate() {
        let fwd = table_forward(rp, t, &m);
        let y = if c == ex.gold { 1.0 } else { 0.0 };
        cand_loss += (softplus(fwd.logit) - y * fwd.logit) / n;
        let scores = (c == ex.gold).then(|| all_span_scores(rp, t, &fwd.h));
        if let Some(s) = &scores {
            let pos: Vec<f64> = ex.positives.iter().map(|&k| s[k]).collect();
            let lse_all = log_sum_exp(s);
            let lse_pos = log_sum_exp(&pos);
            span_ce += lse_all - lse_pos;
        }
        let Some(g) = g.as_deref_mut() else { continue };
        let mut dh = vec![vec![0.0; rp.r()]; fwd.h.len()];
        backprop_candidate(rp, g, &fwd, (sigmoid(fwd.logit) - y) / n, &mut dh);
        if let Some(s) = &scores {
            let lse_all = log_sum_exp(s);
            let pos: Vec<f64> = ex.positives.iter().map(|&k| s[k]).collect();
            let lse_pos = log_sum_exp(&pos);
            let mut ds: Vec<f64> = s.iter().map(|&x| (x - lse_all).exp()).collect();
            for &k in &ex.positives {
                ds[k] -= (s[k] - lse_pos).exp();
            }
            backprop_spans(rp, g, t, &fwd.h, &ds, &mut dh);
        }
        backprop_token_reps(g, t, &fwd, &m, &dh, &mut dm);
    }
    if let Some(g) = g {
        backprop_question(g, &ex.question_features, &dm);
    }
    (cand_loss, span_ce)
}

fn batch_grads(rp: &ReaderParams, batch: &[&PreparedExample]) -> (ReaderGrads, f64, f64) {
    let parts: Vec<(ReaderGrads, f64, f64)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = ReaderGrads::zeros(&rp.shape);
            let (c, s) = example_loss(rp, ex, Some(&mut g));
            (g, c, s)
        })
        .collect();
    let mut total = ReaderGrads::zeros(&rp.shape);
    let (mut cand, mut span) = (0.0, 0.0);
    for (g, c, s) in parts {
        total.merge(g);
        cand += c;
        span += s;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    (total, cand * inv, span * inv)
}

struct ReaderMoments {
    embedding: AdamSlot,
    w1: AdamSlot,
    b1: AdamSlot,
    w2: AdamSlot,
    b2: AdamSlot,
    wc: AdamSlot,
    bc: AdamSlot,
}

impl ReaderMoments {
    fn zeros(rp: &ReaderParams) -> Self {
        ReaderMoments {
            embedding: AdamSlot::zeros(rp.embedding.len()),
            w1: AdamSlot::zeros(rp.w1.len()),
            b1: AdamSlot::zeros(rp.b1.len()),
            w2: AdamSlot::zeros(rp.w2.len()),
            b2: AdamSlot::zeros(1),
            wc: AdamSlot::zeros(rp.wc.len()),
            bc: AdamSlot::zeros(1),
        }
    }

    fn step(&mut self, rp: &mut ReaderParams, g: &ReaderGrads, lr: f64, t: u64) {
        let r = rp.r();
        self.embedding
            .update_chunked(&mut rp.embedding, r, lr, t, |f| g.embedding.get(&(f as u32)).map(Vec::as_slice));
        self.w1.update(&mut rp.w1, &g.w1, lr, t);
        self.b1.update(&mut rp.b1, &g.b1, lr, t);
        self.w2.update(&mut rp.w2, &g.w2, lr, t);
        self.b2.update(std::slice::from_mut(&mut rp.b2), &[g.b2], lr, t);
        self.wc.update(&mut rp.wc, &g.wc, lr, t);
        self.bc.update(std::slice::from_mut(&mut rp.bc), &[g.bc], lr, t);
    }
}

#[derive(Debug, Clone)]
pub struct ReaderTrainOutcome {
    pub params: ReaderParams,
    /// Examples without a matching gold span.
    pub skipped: Vec<String>,
    /// Per-step mean candidate loss.
    pub candidate_losses: Vec<f64>,
    /// Per-step mean span cross entropy.
    pub span_losses: Vec<f64>,
}

/// Adam on the summed loss for `cfg.reader_steps` steps of
/// `cfg.reader_batch_size` examples, reshuffled every epoch.
pub fn train_reader(
    mut rp: ReaderParams,
    run: Option<&RetrievalRun>,
    examples: &[QaExample],
    corpus: &Corpus,
    cfg: &Config,
) -> Result<ReaderTrainOutcome> {
    let (data, skipped) = prepare_examples(&rp.shape, run, examples, corpus, cfg)?;
    let mut outcome = ReaderTrainOutcome {
        params: rp.clone(),
        skipped,
        candidate_losses: Vec::new(),
        span_losses: Vec::new(),
    };
    if cfg.reader_steps == 0 {
        return Ok(outcome);
    }
    if data.is_empty() {
        return Err(Error::Invalid("no reader training example has a matching answer span".into()));
    }
    let bs = cfg.reader_batch_size.clamp(1, data.len());
    let schedule = LinearSchedule::new(cfg.reader_learning_rate, cfg.reader_steps as u64, cfg.warmup_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut moments = ReaderMoments::zeros(&rp);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len();
    for step in 0..cfg.reader_steps as u64 {
        if pos + bs > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let batch: Vec<&PreparedExample> = order[pos..pos + bs].iter().map(|&i| &data[i]).collect();
        pos += bs;
        let (g, cand, span) = batch_grads(&rp, &batch);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("reader gradient at step {step}")));
        }
        moments.step(&mut rp, &g, schedule.lr(step), step + 1);
        outcome.candidate_losses.push(cand);
        outcome.span_losses.push(span);
    }
    outcome.params = rp;
    Ok(outcome)
}

fn total_loss(rp: &ReaderParams, ex: &PreparedExample) -> f64 {
    let (c, s) = example_loss(rp, ex, None);
    c + s
}

/// Central-difference check of every parameter the example touches.
pub fn check_reader_gradients(rp: &ReaderParams, ex: &PreparedExample, h: f64) -> GradCheck {
    let mut g = ReaderGrads::zeros(&rp.shape);
    example_loss(rp, ex, Some(&mut g));
    let r = rp.r();
    let mut p = rp.clone();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut probe = |p: &mut ReaderParams, get: &dyn Fn(&mut ReaderParams) -> &mut f64, analytic: f64| {
        let orig = *get(p);
        *get(p) = orig + h;
        let up = total_loss(p, ex);
        *get(p) = orig - h;
        let down = total_loss(p, ex);
        *get(p) = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
        checked += 1;
    };
    for (&f, row) in &g.embedding {
        for (k, &a) in row.iter().enumerate() {
            let i = f as usize * r + k;
            probe(&mut p, &move |p: &mut ReaderParams| &mut p.embedding[i], a);
        }
    }
    for (i, &a) in g.w1.iter().enumerate() {
        probe(&mut p, &move |p: &mut ReaderParams| &mut p.w1[i], a);
    }
    for (i, &a) in g.b1.iter().enumerate() {
        probe(&mut p, &move |p: &mut ReaderParams| &mut p.b1[i], a);
    }
    for (i, &a) in g.w2.iter().enumerate() {
        probe(&mut p, &move |p: &mut ReaderParams| &mut p.w2[i], a);
    }
    for (i, &a) in g.wc.iter().enumerate() {
        probe(&mut p, &move |p: &mut ReaderParams| &mut p.wc[i], a);
    }
    probe(&mut p, &|p: &mut ReaderParams| &mut p.b2, g.b2);
    probe(&mut p, &|p: &mut ReaderParams| &mut p.bc, g.bc);
    GradCheck {
        max_rel_error: worst,
        checked,
    }
}
