//! Retrieval and QA evaluation, plus the run-file format shared by every
//! retriever.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::QaExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunTag {
    Bm25,
    Dense,
    File,
}

impl fmt::Display for RunTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunTag::Bm25 => "bm25",
            RunTag::Dense => "dense",
            RunTag::File => "file",
        })
    }
}

impl FromStr for RunTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(RunTag::Bm25),
            "dense" => Ok(RunTag::Dense),
            "file" => Ok(RunTag::File),
            other => Err(Error::Invalid(format!("unknown run tag `{other}`"))),
        }
    }
}

/// Ranked `(table_id, score)` lists per question, in question order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub tag: RunTag,
    rankings: IndexMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    pub fn new(tag: RunTag) -> Self {
        RetrievalRun {
            tag,
            rankings: IndexMap::new(),
        }
    }

    /// Adds (or replaces) a question's ranking; it must already be sorted by
    /// non-increasing score.
    pub fn insert(&mut self, question_id: &str, ranking: Vec<(String, f64)>) {
        debug_assert!(ranking.windows(2).all(|w| w[0].1 >= w[1].1));
        self.rankings.insert(question_id.to_string(), ranking);
    }

    pub fn get(&self, question_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(question_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_questions(&self) -> usize {
        self.rankings.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rankings.values().map(Vec::len).sum()
    }

    /// TSV: `question_id  table_id  rank  score  tag`, ranks from 1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, ranking) in &self.rankings {
            for (rank, (t, s)) in ranking.iter().enumerate() {
                out.push_str(&format!("{q}\t{t}\t{}\t{s}\t{}\n", rank + 1, self.tag));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut run = RetrievalRun::new(RunTag::File);
        let mut tag: Option<RunTag> = None;
        for (i, line) in text.lines().enumerate() {
            let err = |m: String| (i + 1, m);
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 tab-separated fields, got {}", f.len())));
            }
            let rank: usize = f[2].parse().map_err(|_| err(format!("bad rank `{}`", f[2])))?;
            let score: f64 = f[3].parse().map_err(|_| err(format!("bad score `{}`", f[3])))?;
            let t: RunTag = f[4].parse().map_err(|e: Error| err(e.to_string()))?;
            if *tag.get_or_insert(t) != t {
                return Err(err("mixed tags in one run".into()));
            }
            let ranking = run.rankings.entry(f[0].to_string()).or_default();
            if rank != ranking.len() + 1 {
                return Err(err(format!(
                    "rank {rank} for `{}` is not contiguous (expected {})",
                    f[0],
                    ranking.len() + 1
                )));
            }
            if ranking.last().is_some_and(|&(_, prev)| score > prev) {
                return Err(err("scores must be non-increasing down a ranking".into()));
            }
            ranking.push((f[1].to_string(), score));
        }
        run.tag = tag.unwrap_or(RunTag::File);
        Ok(run)
    }
}

/// Metric values plus bookkeeping counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub num_questions: usize,
    pub num_skipped: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fraction of examples whose gold table is among the first `k` ranked.
/// Questions missing from the run count as misses. `id_map` rewrites
/// retrieved ids (e.g. after dedup) before comparison.
pub fn recall_at_k(
    run: &RetrievalRun,
    examples: &[QaExample],
    k: usize,
    id_map: Option<&IndexMap<String, String>>,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Undefined("recall over an empty example set".into()));
    }
    let resolve = |id: &str| -> String {
        id_map
            .and_then(|m| m.get(id))
            .cloned()
            .unwrap_or_else(|| id.to_string())
    };
    let mut hits = 0usize;
    for ex in examples {
        let gold = ex.gold_table_id.as_deref().ok_or_else(|| {
            Error::Invalid(format!("question `{}` has no gold table", ex.id()))
        })?;
        let gold = resolve(gold);
        if let Some(ranking) = run.get(ex.id()) {
            if ranking.iter().take(k).any(|(t, _)| resolve(t) == gold) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Recall at several cutoffs; `missing` counts questions absent from the run.
pub fn retrieval_report(
    run: &RetrievalRun,
    examples: &[QaExample],
    ks: &[usize],
    id_map: Option<&IndexMap<String, String>>,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        num_questions: examples.len(),
        num_skipped: examples.iter().filter(|e| run.get(e.id()).is_none()).count(),
        ..Default::default()
    };
    for &k in ks {
        report
            .metrics
            .insert(format!("recall@{k}"), recall_at_k(run, examples, k, id_map)?);
    }
    Ok(report)
}

/// SQuAD answer normalization: lowercase, drop ASCII punctuation, drop the
/// articles `a`, `an`, `the`, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut same = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / p.len() as f64;
    let recall = same as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match (0/1) and token F1 against the best-matching gold answer.
pub fn em_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> (u8, f64) {
    let p = normalize_answer(pred);
    let mut em = 0u8;
    let mut f1 = 0.0f64;
    for g in golds {
        let g = normalize_answer(g.as_ref());
        if p == g {
            em = 1;
        }
        f1 = f1.max(token_f1(&p, &g));
    }
    (em, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub table_id: String,
    pub answer: String,
    pub score: f64,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub table_id: Option<String>,
    pub answer: String,
    pub score: f64,
    #[serde(default)]
    pub candidate_answers: Vec<CandidateAnswer>,
}

/// EM, F1 and their oracle variants (best over the selected answer and every
/// candidate answer). Examples without a prediction score zero and are
/// counted in `num_skipped`; predictions for unknown questions are an error.
pub fn qa_report(predictions: &[Prediction], examples: &[QaExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Undefined("QA metrics over an empty example set".into()));
    }
    let known: HashMap<&str, &QaExample> = examples.iter().map(|e| (e.id(), e)).collect();
    let mut by_q: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if !known.contains_key(p.question_id.as_str()) {
            return Err(Error::Invalid(format!(
                "prediction for unknown question `{}`",
                p.question_id
            )));
        }
        by_q.insert(p.question_id.as_str(), p);
    }
    let (mut em, mut f1, mut oem, mut of1) = (0.0, 0.0, 0.0, 0.0);
    let mut skipped = 0;
    for ex in examples {
        let Some(p) = by_q.get(ex.id()) else {
            skipped += 1;
            continue;
        };
        let (e, f) = em_f1(&p.answer, &ex.answers);
        let (mut be, mut bf) = (e, f);
        for c in &p.candidate_answers {
            let (ce, cf) = em_f1(&c.answer, &ex.answers);
            be = be.max(ce);
            bf = bf.max(cf);
        }
        em += e as f64;
        f1 += f;
        oem += be as f64;
        of1 += bf;
    }
    let n = examples.len() as f64;
    let mut report = EvalReport {
        num_questions: examples.len(),
        num_skipped: skipped,
        ..Default::default()
    };
    report.metrics.insert("em".into(), em / n);
    report.metrics.insert("f1".into(), f1 / n);
    report.metrics.insert("oracle_em".into(), oem / n);
    report.metrics.insert("oracle_f1".into(), of1 / n);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McNemar {
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Continuity-corrected McNemar test on paired 0/1 outcomes.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::DimensionMismatch {
            expected: correct_a.len(),
            actual: correct_b.len(),
        });
    }
    if correct_a.is_empty() {
        return Err(Error::Undefined("McNemar test on zero pairs".into()));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count();
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count();
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_counts(b: usize, c: usize) -> McNemar {
    if b + c == 0 {
        return McNemar {
            b,
            c,
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let statistic = diff.max(0.0).powi(2) / (b + c) as f64;
    McNemar {
        b,
        c,
        statistic,
        p_value: chi2_1dof_sf(statistic),
    }
}

/// Upper tail of chi-square with one degree of freedom: `erfc(sqrt(x / 2))`.
pub fn chi2_1dof_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::erf::erfc((x / 2.0).sqrt())
}
