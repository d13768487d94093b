//! Hard-negative mining from a retriever's ranked output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::RetrievalRun;
use crate::table::{QaExample, Table};
use crate::textproc::tokens;

pub const DEFAULT_DEPTH: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedTriple {
    pub question_id: String,
    pub gold_table_id: String,
    pub hard_negative_table_id: String,
}

/// True when some answer, as a normalized token sequence, occurs contiguously
/// inside a single cell (header or data). Empty answers never match.
pub fn contains_answer<S: AsRef<str>>(table: &Table, answers: &[S]) -> bool {
    let needles: Vec<Vec<String>> = answers
        .iter()
        .map(|a| tokens(a.as_ref()))
        .filter(|t| !t.is_empty())
        .collect();
    if needles.is_empty() {
        return false;
    }
    table
        .header
        .iter()
        .chain(table.rows.iter().flatten())
        .any(|cell| {
            let hay = tokens(cell);
            needles
                .iter()
                .any(|n| n.len() <= hay.len() && hay.windows(n.len()).any(|w| w == n.as_slice()))
        })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiningReport {
    pub triples: Vec<MinedTriple>,
    /// Questions absent from the run.
    pub missing: Vec<String>,
    /// Questions whose top-`depth` list had no clean table.
    pub exhausted: Vec<String>,
}

/// Per question, the highest-ranked table within `depth` that is neither the
/// gold table nor contains a reference answer.
pub fn mine_hard_negatives(
    run: &RetrievalRun,
    examples: &[QaExample],
    corpus: &Corpus,
    depth: usize,
) -> Result<MiningReport> {
    if depth == 0 {
        return Err(Error::Config("mining depth must be at least 1".into()));
    }
    enum Outcome {
        Mined(MinedTriple),
        Missing,
        Exhausted,
    }
    let outcomes: Vec<(String, Outcome)> = examples
        .par_iter()
        .filter_map(|ex| {
            let gold = ex.gold_table_id.as_deref()?;
            let Some(ranking) = run.get(ex.id()) else {
                return Some(Ok((ex.id().to_string(), Outcome::Missing)));
            };
            for (tid, _) in ranking.iter().take(depth) {
                if tid == gold {
                    continue;
                }
                let table = match corpus.require(tid) {
                    Ok(t) => t,
                    Err(e) => return Some(Err(e)),
                };
                if !contains_answer(table, &ex.answers) {
                    let t = MinedTriple {
                        question_id: ex.id().to_string(),
                        gold_table_id: gold.to_string(),
                        hard_negative_table_id: tid.clone(),
                    };
                    return Some(Ok((ex.id().to_string(), Outcome::Mined(t))));
                }
            }
            Some(Ok((ex.id().to_string(), Outcome::Exhausted)))
        })
        .collect::<Result<_>>()?;
    let mut report = MiningReport::default();
    for (qid, o) in outcomes {
        match o {
            Outcome::Mined(t) => report.triples.push(t),
            Outcome::Missing => report.missing.push(qid),
            Outcome::Exhausted => report.exhausted.push(qid),
        }
    }
    Ok(report)
}

pub fn negatives_to_tsv(triples: &[MinedTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        let _ = writeln!(out, "{}\t{}", t.question_id, t.hard_negative_table_id);
    }
    out
}

pub fn save_negatives(path: impl AsRef<Path>, triples: &[MinedTriple]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, negatives_to_tsv(triples)).map_err(|e| Error::io(path, e))
}

/// Reads `question_id<TAB>table_id` lines into a map.
pub fn load_negatives(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let mut parts = line.split('\t');
        let (Some(q), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err("expected question_id<TAB>table_id".into()));
        };
        if map.insert(q.to_string(), t.to_string()).is_some() {
            return Err(parse_err(format!("duplicate question `{q}`")));
        }
    }
    Ok(map)
}
