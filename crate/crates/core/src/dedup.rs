//! Near-duplicate table merging within a page.
//!
//! Tables from the same page are compared through l2-normalized unigram
//! vectors of their header and cell tokens. Pairs are visited in decreasing
//! similarity and their clusters are joined when the pair qualifies
//! (single-link): similarity above the threshold, different page versions,
//! row counts within two, equal column counts.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::table::{QaExample, Table};
use crate::textproc::{flatten_table_layout, unigram_vector, FlattenMode, Segment, SparseVector, Vocabulary};

pub const DEFAULT_THRESHOLD: f64 = 0.91;
pub const MAX_ROW_DIFFERENCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupCluster {
    /// Smallest member id.
    pub representative_id: String,
    pub member_ids: BTreeSet<String>,
}

/// One accepted merge: the pair whose similarity joined two clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

/// Cosine of two l2-normalized vectors; 0 when either is empty.
pub fn pairwise_cosine(u: &SparseVector, v: &SparseVector) -> f64 {
    if u.is_empty() || v.is_empty() {
        return 0.0;
    }
    u.dot(v)
}

pub fn merge_eligible(a: &Table, b: &Table, sim: f64, threshold: f64) -> bool {
    sim > threshold
        && !a.same_page_version(b)
        && a.num_rows().abs_diff(b.num_rows()) <= MAX_ROW_DIFFERENCE
        && a.num_columns() == b.num_columns()
}

/// Header and cell tokens: the table content used for similarity.
pub fn content_tokens(table: &Table) -> Vec<String> {
    flatten_table_layout(table, FlattenMode::Full)
        .tokens
        .into_iter()
        .filter(|t| matches!(t.segment, Segment::Header | Segment::Cell))
        .map(|t| t.token)
        .collect()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Clusters the tables of a single page. Returns clusters sorted by
/// representative id, and the merges in the order they were applied.
pub fn cluster_page(tables: &[&Table], threshold: f64) -> (Vec<DedupCluster>, Vec<MergeRecord>) {
    let mut vocab = Vocabulary::new();
    let vectors: Vec<SparseVector> = tables
        .iter()
        .map(|t| unigram_vector(&content_tokens(t), &mut vocab))
        .collect();
    cluster_vectors(tables, &vectors, threshold)
}

fn cluster_vectors(
    tables: &[&Table],
    vectors: &[SparseVector],
    threshold: f64,
) -> (Vec<DedupCluster>, Vec<MergeRecord>) {
    let n = tables.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = if tables[i].table_id <= tables[j].table_id {
                (i, j)
            } else {
                (j, i)
            };
            pairs.push((pairwise_cosine(&vectors[a], &vectors[b]), a, b));
        }
    }
    pairs.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| tables[x.1].table_id.cmp(&tables[y.1].table_id))
            .then_with(|| tables[x.2].table_id.cmp(&tables[y.2].table_id))
    });

    let mut sets = DisjointSet::new(n);
    let mut merges = Vec::new();
    for (sim, a, b) in pairs {
        if sim <= threshold {
            break;
        }
        if merge_eligible(tables[a], tables[b], sim, threshold) && sets.union(a, b) {
            merges.push(MergeRecord {
                a: tables[a].table_id.clone(),
                b: tables[b].table_id.clone(),
                similarity: sim,
            });
        }
    }

    let mut groups: HashMap<usize, BTreeSet<String>> = HashMap::new();
    for (i, t) in tables.iter().enumerate() {
        groups.entry(sets.find(i)).or_default().insert(t.table_id.clone());
    }
    let mut clusters: Vec<DedupCluster> = groups
        .into_values()
        .map(|members| DedupCluster {
            representative_id: members.iter().next().cloned().unwrap_or_default(),
            member_ids: members,
        })
        .collect();
    clusters.sort_by(|a, b| a.representative_id.cmp(&b.representative_id));
    (clusters, merges)
}

#[derive(Debug, Clone)]
pub struct DedupOutcome {
    /// Representatives only, in input order.
    pub corpus: Corpus,
    /// Every input id mapped to its representative, in input order.
    pub mapping: IndexMap<String, String>,
    pub clusters: Vec<DedupCluster>,
    pub merges: Vec<MergeRecord>,
}

pub fn dedup_corpus(corpus: &Corpus, threshold: f64) -> DedupOutcome {
    let mut pages: IndexMap<&str, Vec<&Table>> = IndexMap::new();
    for t in corpus {
        pages.entry(t.page_title.as_str()).or_default().push(t);
    }

    // One vocabulary over the whole input, in first-seen order.
    let mut vocab = Vocabulary::new();
    let vectors: HashMap<&str, SparseVector> = corpus
        .iter()
        .map(|t| (t.table_id.as_str(), unigram_vector(&content_tokens(t), &mut vocab)))
        .collect();

    let per_page: Vec<(Vec<DedupCluster>, Vec<MergeRecord>)> = pages
        .values()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|tables| {
            let vs: Vec<SparseVector> = tables
                .iter()
                .map(|t| vectors[t.table_id.as_str()].clone())
                .collect();
            cluster_vectors(tables, &vs, threshold)
        })
        .collect();

    let mut rep_of: HashMap<&str, &str> = HashMap::new();
    let mut clusters = Vec::new();
    let mut merges = Vec::new();
    for (cs, ms) in &per_page {
        for c in cs {
            for m in &c.member_ids {
                rep_of.insert(m.as_str(), c.representative_id.as_str());
            }
        }
        clusters.extend(cs.iter().cloned());
        merges.extend(ms.iter().cloned());
    }

    let mapping: IndexMap<String, String> = corpus
        .ids()
        .map(|id| (id.to_string(), rep_of[id].to_string()))
        .collect();
    let kept = corpus
        .iter()
        .filter(|t| mapping[&t.table_id] == t.table_id)
        .cloned();
    let corpus = Corpus::from_tables(kept).expect("subset of a valid corpus");
    DedupOutcome {
        corpus,
        mapping,
        clusters,
        merges,
    }
}

/// Rewrites gold table ids through a dedup mapping. Ids not in the mapping are
/// left untouched.
pub fn remap_examples(examples: &mut [QaExample], mapping: &IndexMap<String, String>) {
    for ex in examples {
        if let Some(gold) = &ex.gold_table_id {
            if let Some(rep) = mapping.get(gold) {
                ex.gold_table_id = Some(rep.clone());
            }
        }
    }
}

/// Writes `old_id<TAB>representative_id` lines.
pub fn save_id_map(path: impl AsRef<Path>, mapping: &IndexMap<String, String>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (k, v) in mapping {
        out.push_str(k);
        out.push('\t');
        out.push_str(v);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_id_map(path: impl AsRef<Path>) -> Result<IndexMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected old_id<TAB>representative_id".into(),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}
