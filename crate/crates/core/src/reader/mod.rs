//! Answer extraction: candidate scoring and within-cell span selection.

mod model;
mod train;

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

pub use model::{
    reader_token_features, sigmoid, softplus, PreparedTable, ReaderGrads, ReaderParams, ReaderShape,
};
pub use train::{
    check_reader_gradients, example_loss, prepare_examples, train_reader, PreparedExample, ReaderTrainOutcome,
};

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::config::Config;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{CandidateAnswer, Prediction, RetrievalRun};
use crate::table::{QaExample, Table};
use crate::textproc::{flatten_table_layout, FlatTable, FlattenMode};

use model::{all_span_scores, question_features, question_vector, table_forward, token_reps};

const MAGIC: &[u8; 4] = b"TQRD";
const VERSION: u32 = 1;

impl ReaderShape {
    pub fn from_config(cfg: &Config) -> Self {
        ReaderShape {
            r: cfg.reader_dim,
            hidden: cfg.reader_hidden,
            feature_dims: cfg.reader_feature_dims,
            include_header: cfg.reader_include_header,
        }
    }
}

/// A within-cell token span. Row 0 is the header; data rows and columns are
/// numbered from 1. Token offsets are inclusive and relative to the cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpanCandidate {
    pub row_idx: usize,
    pub col_idx: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub text: String,
}

/// `(cell index, (flattened start, flattened end))` for every span of at
/// most `max_len` tokens, in (row, col, start, end) order.
pub(crate) fn span_positions(flat: &FlatTable, max_len: usize, include_header: bool) -> Vec<(usize, (usize, usize))> {
    let mut out = Vec::new();
    for (ci, cell) in flat.cells.iter().enumerate() {
        if cell.row_idx == 0 && !include_header {
            continue;
        }
        for s in 0..cell.len() {
            for e in s..cell.len().min(s + max_len) {
                out.push((ci, (cell.start + s, cell.start + e)));
            }
        }
    }
    out
}

fn cell_text(table: &Table, row_idx: usize, col_idx: usize) -> &str {
    if row_idx == 0 {
        &table.header[col_idx - 1]
    } else {
        &table.rows[row_idx - 1][col_idx - 1]
    }
}

fn span_candidate(table: &Table, flat: &FlatTable, cell: usize, (s, e): (usize, usize)) -> SpanCandidate {
    let c = &flat.cells[cell];
    let (ts, te) = (s - c.start, e - c.start);
    let text = cell_text(table, c.row_idx, c.col_idx);
    SpanCandidate {
        row_idx: c.row_idx,
        col_idx: c.col_idx,
        token_start: ts,
        token_end: te,
        text: text[c.source_spans[ts].0..c.source_spans[te].1].to_string(),
    }
}

/// All within-cell spans of up to `max_len` tokens; header cells included.
pub fn enumerate_spans(table: &Table, max_len: usize) -> Vec<SpanCandidate> {
    enumerate_spans_with(table, max_len, true)
}

pub fn enumerate_spans_with(table: &Table, max_len: usize, include_header: bool) -> Vec<SpanCandidate> {
    let flat = flatten_table_layout(table, FlattenMode::Full);
    span_positions(&flat, max_len, include_header)
        .into_iter()
        .map(|(cell, pos)| span_candidate(table, &flat, cell, pos))
        .collect()
}

impl PreparedTable {
    pub fn span(&self, table: &Table, k: usize) -> SpanCandidate {
        span_candidate(table, &self.flat, self.span_cells[k], self.spans[k])
    }
}

/// Representation of the flattened table token at `position` under question
/// `question`.
pub fn token_representation(rp: &ReaderParams, question: &str, table: &Table, position: usize) -> Result<Vec<f64>> {
    let t = PreparedTable::new(table, &rp.shape, 1);
    let feats = t
        .token_features
        .get(position)
        .ok_or_else(|| Error::Invalid(format!("position {position} outside table `{}`", table.table_id)))?;
    let m = question_vector(rp, &question_features(question, rp.shape.feature_dims));
    let (_, h) = token_reps(rp, std::slice::from_ref(feats), &m);
    Ok(h.into_iter().next().expect("one token"))
}

/// Span scores for `spans` (as produced by [`enumerate_spans_with`] with the
/// reader's header setting). An empty list marks an unanswerable candidate.
pub fn score_spans(rp: &ReaderParams, question: &str, table: &Table, max_len: usize) -> Result<Vec<f64>> {
    let t = PreparedTable::new(table, &rp.shape, max_len);
    if t.spans.is_empty() {
        return Err(Error::Invalid(format!("table `{}` has no answer spans", table.table_id)));
    }
    let m = question_vector(rp, &question_features(question, rp.shape.feature_dims));
    let (_, h) = token_reps(rp, &t.token_features, &m);
    Ok(all_span_scores(rp, &t, &h))
}

/// Candidate logit from the mean token representation.
pub fn score_candidate(rp: &ReaderParams, question: &str, table: &Table) -> f64 {
    let t = PreparedTable::new(table, &rp.shape, 1);
    let m = question_vector(rp, &question_features(question, rp.shape.feature_dims));
    table_forward(rp, &t, &m).logit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerStatus {
    Answered,
    /// No candidate had an enumerable span.
    NoSpans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderAnswer {
    pub status: AnswerStatus,
    pub table_id: Option<String>,
    pub answer: String,
    /// Candidate logit of the selected table.
    pub score: f64,
    /// Best span of every answerable candidate, best candidate first.
    pub candidate_answers: Vec<CandidateAnswer>,
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Picks the answerable candidate with the highest logit (ties by ascending
/// table id) and returns its best span.
pub fn answer(rp: &ReaderParams, question: &str, candidates: &[&Table], max_len: usize) -> Result<ReaderAnswer> {
    if candidates.is_empty() {
        return Err(Error::Invalid("answer() needs at least one candidate".into()));
    }
    let m = question_vector(rp, &question_features(question, rp.shape.feature_dims));
    let mut scored: Vec<(f64, CandidateAnswer)> = candidates
        .par_iter()
        .filter_map(|table| {
            let t = PreparedTable::new(table, &rp.shape, max_len);
            if t.spans.is_empty() {
                return None;
            }
            let fwd = table_forward(rp, &t, &m);
            let best = argmax_first(&all_span_scores(rp, &t, &fwd.h));
            Some((
                fwd.logit,
                CandidateAnswer {
                    table_id: table.table_id.clone(),
                    answer: t.span(table, best).text,
                    score: fwd.logit,
                },
            ))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.table_id.cmp(&b.1.table_id))
    });
    let candidate_answers: Vec<CandidateAnswer> = scored.into_iter().map(|(_, c)| c).collect();
    Ok(match candidate_answers.first() {
        Some(best) => ReaderAnswer {
            status: AnswerStatus::Answered,
            table_id: Some(best.table_id.clone()),
            answer: best.answer.clone(),
            score: best.score,
            candidate_answers,
        },
        None => ReaderAnswer {
            status: AnswerStatus::NoSpans,
            table_id: None,
            answer: String::new(),
            score: 0.0,
            candidate_answers,
        },
    })
}

/// Answers every question from its top-`k` retrieved tables. Questions
/// missing from the run are returned separately.
pub fn answer_run(
    rp: &ReaderParams,
    run: &RetrievalRun,
    questions: &[QaExample],
    corpus: &Corpus,
    k: usize,
    max_len: usize,
) -> Result<(Vec<Prediction>, Vec<String>)> {
    let mut missing = Vec::new();
    let mut predictions = Vec::new();
    for q in questions {
        let Some(ranking) = run.get(q.id()) else {
            missing.push(q.id().to_string());
            continue;
        };
        let tables: Vec<&Table> = ranking
            .iter()
            .take(k)
            .map(|(id, _)| corpus.require(id))
            .collect::<Result<_>>()?;
        if tables.is_empty() {
            missing.push(q.id().to_string());
            continue;
        }
        let a = answer(rp, q.text(), &tables, max_len)?;
        predictions.push(Prediction {
            question_id: q.id().to_string(),
            table_id: a.table_id,
            answer: a.answer,
            score: a.score,
            candidate_answers: a.candidate_answers,
        });
    }
    Ok((predictions, missing))
}

impl ReaderParams {
    /// Layout: magic `TQRD`, version, r, hidden, feature_dims, flags (bit 0:
    /// header spans), then embedding, W1, b1, w2, b2, wc, bc as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut w = ByteWriter::with_header(MAGIC, VERSION);
        w.u32(s.r as u32);
        w.u32(s.hidden as u32);
        w.u32(s.feature_dims as u32);
        w.u32(s.include_header as u32);
        for v in [&self.embedding, &self.w1, &self.b1, &self.w2] {
            v.iter().for_each(|&x| w.f32(x as f32));
        }
        w.f32(self.b2 as f32);
        self.wc.iter().for_each(|&x| w.f32(x as f32));
        w.f32(self.bc as f32);
        w.into_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(path, bytes);
        rd.header(MAGIC, VERSION)?;
        let r = rd.u32()? as usize;
        let hidden = rd.u32()? as usize;
        let feature_dims = rd.u32()? as usize;
        let flags = rd.u32()?;
        if flags > 1 {
            return Err(rd.error(format!("unknown reader flags {flags:#x}")));
        }
        let shape = ReaderShape {
            r,
            hidden,
            feature_dims,
            include_header: flags == 1,
        };
        let count = (feature_dims as u64)
            .saturating_mul(r as u64)
            .saturating_add((hidden as u64).saturating_mul(2 * r as u64 + 2))
            .saturating_add(r as u64 + 2);
        rd.check_count(count, 4)?;
        let mut p = ReaderParams::zeros(shape).map_err(|e| rd.error(e.to_string()))?;
        for v in [&mut p.embedding, &mut p.w1, &mut p.b1, &mut p.w2] {
            for x in v.iter_mut() {
                *x = rd.f32()? as f64;
            }
        }
        p.b2 = rd.f32()? as f64;
        for x in p.wc.iter_mut() {
            *x = rd.f32()? as f64;
        }
        p.bc = rd.f32()? as f64;
        rd.finish()?;
        Ok(p)
    }
}
