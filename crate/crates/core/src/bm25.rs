//! Okapi BM25 over flattened tables.
//!
//! Page-title and header tokens are counted `boost` times when building a
//! table's document, which lets schema words dominate the term statistics.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{RetrievalRun, RunTag};
use crate::table::QaExample;
use crate::textproc::{flatten_table, tokens, FlattenMode, Segment};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_BOOST: u32 = 15;

pub const MAGIC: &[u8; 4] = b"TQBM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub boost: u32,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
            boost: DEFAULT_BOOST,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub params: Bm25Params,
    terms: HashMap<String, u32>,
    term_names: Vec<String>,
    /// Per term id: `(table ordinal, term frequency)` sorted by ordinal.
    postings: Vec<Vec<(u32, u32)>>,
    table_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.table_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    pub fn table_id(&self, ordinal: usize) -> &str {
        &self.table_ids[ordinal]
    }

    pub fn postings(&self, token: &str) -> &[(u32, u32)] {
        self.terms
            .get(token)
            .map(|&t| self.postings[t as usize].as_slice())
            .unwrap_or(&[])
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.postings(token).len()
    }

    pub fn term_freq(&self, token: &str, ordinal: usize) -> u32 {
        let p = self.postings(token);
        p.binary_search_by_key(&(ordinal as u32), |&(o, _)| o)
            .map(|i| p[i].1)
            .unwrap_or(0)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = doc_freq as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc_len: u32, idf: f64) -> f64 {
        let Bm25Params { k1, b, .. } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_doc_length > 0.0 {
            1.0 - b + b * doc_len as f64 / self.avg_doc_length
        } else {
            1.0
        };
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::with_header(MAGIC, VERSION);
        w.f64(self.params.k1);
        w.f64(self.params.b);
        w.u32(self.params.boost);
        w.u64(self.table_ids.len() as u64);
        for (id, len) in self.table_ids.iter().zip(&self.doc_lengths) {
            w.str(id);
            w.u32(*len);
        }
        w.u64(self.term_names.len() as u64);
        for (name, plist) in self.term_names.iter().zip(&self.postings) {
            w.str(name);
            w.u32(plist.len() as u32);
            for &(o, tf) in plist {
                w.u32(o);
                w.u32(tf);
            }
        }
        w.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.header(MAGIC, VERSION)?;
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
            boost: r.u32()?,
        };
        let n = r.u64()?;
        let n = r.check_count(n, 8)?;
        let mut table_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            table_ids.push(r.str()?);
            doc_lengths.push(r.u32()?);
        }
        let nt = r.u64()?;
        let nt = r.check_count(nt, 8)?;
        let mut terms = HashMap::with_capacity(nt);
        let mut term_names = Vec::with_capacity(nt);
        let mut postings = Vec::with_capacity(nt);
        for t in 0..nt {
            let name = r.str()?;
            let np = r.u32()? as u64;
            let np = r.check_count(np, 8)?;
            let mut plist = Vec::with_capacity(np);
            for _ in 0..np {
                let (o, tf) = (r.u32()?, r.u32()?);
                if o as usize >= n || plist.last().is_some_and(|&(p, _)| p >= o) {
                    return Err(r.error("posting ordinal out of order or out of range"));
                }
                plist.push((o, tf));
            }
            if terms.insert(name.clone(), t as u32).is_some() {
                return Err(r.error(format!("duplicate term `{name}`")));
            }
            term_names.push(name);
            postings.push(plist);
        }
        r.finish()?;
        let avg_doc_length = average(&doc_lengths);
        Ok(InvertedIndex {
            params,
            terms,
            term_names,
            postings,
            table_ids,
            doc_lengths,
            avg_doc_length,
        })
    }
}

fn average(lengths: &[u32]) -> f64 {
    if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64
    }
}

/// Builds the index; each table's document is its full flattening with title
/// and header tokens repeated `params.boost` times.
pub fn build_index(corpus: &Corpus, params: Bm25Params) -> Result<InvertedIndex> {
    if params.boost == 0 {
        return Err(Error::Invalid("bm25 boost must be at least 1".into()));
    }
    let mut terms: HashMap<String, u32> = HashMap::new();
    let mut term_names = Vec::new();
    let mut postings: Vec<Vec<(u32, u32)>> = Vec::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    let mut table_ids = Vec::with_capacity(corpus.len());

    for (ordinal, table) in corpus.iter().enumerate() {
        let mut counts: Vec<(u32, u32)> = Vec::new();
        let mut local: HashMap<u32, usize> = HashMap::new();
        let mut length = 0u32;
        for tok in flatten_table(table, FlattenMode::Full) {
            let weight = match tok.segment {
                Segment::Title | Segment::Header => params.boost,
                _ => 1,
            };
            let id = *terms.entry(tok.token.clone()).or_insert_with(|| {
                term_names.push(tok.token.clone());
                postings.push(Vec::new());
                (term_names.len() - 1) as u32
            });
            match local.get(&id) {
                Some(&slot) => counts[slot].1 += weight,
                None => {
                    local.insert(id, counts.len());
                    counts.push((id, weight));
                }
            }
            length += weight;
        }
        for (id, tf) in counts {
            postings[id as usize].push((ordinal as u32, tf));
        }
        doc_lengths.push(length);
        table_ids.push(table.table_id.clone());
    }

    let avg_doc_length = average(&doc_lengths);
    Ok(InvertedIndex {
        params,
        terms,
        term_names,
        postings,
        table_ids,
        doc_lengths,
        avg_doc_length,
    })
}

fn distinct(query: &[String]) -> Vec<&str> {
    let mut seen = std::collections::HashSet::new();
    query
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

/// Score of one table for a tokenized query. Repeated query tokens count once.
pub fn bm25_score(idx: &InvertedIndex, query: &[String], ordinal: usize) -> f64 {
    let dl = idx.doc_lengths[ordinal];
    distinct(query)
        .into_iter()
        .map(|t| {
            let tf = idx.term_freq(t, ordinal);
            if tf == 0 {
                0.0
            } else {
                idx.term_weight(tf, dl, idx.idf(idx.doc_freq(t)))
            }
        })
        .sum()
}

/// Orders by score descending, then table id ascending.
pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Top `k` tables for a query text; every table is a candidate, so `k` at or
/// above the corpus size returns the whole corpus sorted.
pub fn bm25_topk(idx: &InvertedIndex, query: &str, k: usize) -> Vec<(String, f64)> {
    let query = tokens(query);
    let mut scores = vec![0.0f64; idx.doc_count()];
    let mut terms: Vec<(f64, &[(u32, u32)])> = Vec::new();
    for t in distinct(&query) {
        let plist = idx.postings(t);
        if !plist.is_empty() {
            terms.push((idx.idf(plist.len()), plist));
        }
    }
    // Same per-document summation order as `bm25_score`; zero terms do not
    // change a float sum.
    for (idf, plist) in terms {
        for &(o, tf) in plist {
            scores[o as usize] += idx.term_weight(tf, idx.doc_lengths[o as usize], idf);
        }
    }

    let mut ranked: Vec<(f64, usize)> = scores.into_iter().enumerate().map(|(o, s)| (s, o)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        rank_order((a.0, &idx.table_ids[a.1]), (b.0, &idx.table_ids[b.1]))
    };
    let k = k.min(ranked.len());
    if k == 0 {
        return Vec::new();
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    ranked
        .into_iter()
        .map(|(s, o)| (idx.table_ids[o].clone(), s))
        .collect()
}

/// Runs every question through the index.
pub fn run_bm25(idx: &InvertedIndex, questions: &[QaExample], k: usize) -> RetrievalRun {
    let mut run = RetrievalRun::new(RunTag::Bm25);
    for q in questions {
        run.insert(q.id(), bm25_topk(idx, q.text(), k));
    }
    run
}
