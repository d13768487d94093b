//! Offline table embeddings and exact top-K inner-product search.
//!
//! Embedding file layout (little-endian): magic `b"TQEI"`, version u32 (= 1),
//! count u64, d u32, then `count` ids (u32 byte length + UTF-8), then
//! `count × d` f32 values, row-major.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::corpus::Corpus;
use crate::encoder::{Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{RetrievalRun, RunTag};
use crate::table::QaExample;

pub const MAGIC: &[u8; 4] = b"TQEI";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    /// `ids.len() × d`, row-major.
    vectors: Vec<f32>,
    d: usize,
}

impl EmbeddingIndex {
    pub fn new(d: usize, ids: Vec<String>, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != ids.len() * d {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * d,
                actual: vectors.len(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateTable(dup.clone()));
        }
        Ok(EmbeddingIndex { ids, vectors, d })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Inner product with f64 accumulation.
    pub fn score(&self, i: usize, query: &[f64]) -> f64 {
        self.row(i)
            .iter()
            .zip(query)
            .map(|(&v, &q)| v as f64 * q)
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::with_header(MAGIC, VERSION);
        w.u64(self.ids.len() as u64);
        w.u32(self.d as u32);
        for id in &self.ids {
            w.str(id);
        }
        for &v in &self.vectors {
            w.f32(v);
        }
        w.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.header(MAGIC, VERSION)?;
        let n = r.u64()?;
        let n = r.check_count(n, 4)?;
        let d = r.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.str()?);
        }
        r.check_count((n * d) as u64, 4)?;
        let mut vectors = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            vectors.push(r.f32()?);
        }
        r.finish()?;
        EmbeddingIndex::new(d, ids, vectors).map_err(|e| r.error(e.to_string()))
    }
}

/// Encodes every table with the table tower, in corpus order.
pub fn encode_corpus(params: &EncoderParams, corpus: &Corpus) -> EmbeddingIndex {
    let tables: Vec<_> = corpus.iter().collect();
    let rows = params.encode_tables(&tables);
    let vectors = rows
        .iter()
        .flat_map(|e| e.0.iter().map(|&v| v as f32))
        .collect();
    EmbeddingIndex {
        ids: corpus.ids().map(str::to_string).collect(),
        vectors,
        d: params.d(),
    }
}

/// Heap entry ordered so that the worst-ranked candidate is the maximum.
struct Worst<'a> {
    score: f64,
    id: &'a str,
    ordinal: usize,
}

impl Worst<'_> {
    fn rank_cmp(&self, other: &Self) -> Ordering {
        // Less = ranks earlier.
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for Worst<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst<'_> {}

impl PartialOrd for Worst<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Exact top-`k` tables by inner product; ties go to the smaller table id.
/// `k` is clamped to the index size.
pub fn search(idx: &EmbeddingIndex, h_q: &Embedding, k: usize) -> Result<Vec<(String, f64)>> {
    if h_q.len() != idx.d {
        return Err(Error::DimensionMismatch {
            expected: idx.d,
            actual: h_q.len(),
        });
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let k = k.min(idx.len());
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for (i, id) in idx.ids.iter().enumerate() {
        let cand = Worst {
            score: idx.score(i, h_q.values()),
            id,
            ordinal: i,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(top) = heap.peek() {
            if cand < *top {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|w| (idx.ids[w.ordinal].clone(), w.score))
        .collect())
}

/// Encodes each question and searches the index.
pub fn run_retrieval(
    idx: &EmbeddingIndex,
    params: &EncoderParams,
    questions: &[QaExample],
    k: usize,
) -> Result<RetrievalRun> {
    let ranked: Vec<Vec<(String, f64)>> = questions
        .par_iter()
        .map(|q| search(idx, &params.encode_question_text(q.text()), k))
        .collect::<Result<_>>()?;
    let mut run = RetrievalRun::new(RunTag::Dense);
    for (q, r) in questions.iter().zip(ranked) {
        run.insert(q.id(), r);
    }
    Ok(run)
}
