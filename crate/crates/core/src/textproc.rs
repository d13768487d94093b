//! Tokenization, table flattening and sparse feature vectors.
//!
//! Hashed features use 64-bit FNV-1a with the standard offset basis
//! (`0xcbf29ce484222325`) as the fixed seed. Feature keys are the token bytes,
//! optionally followed by a `0x1f` separator and a channel tag (`s:<segment>`,
//! `c:<column>`, `r:<row>`). Changing any of this changes every trained model.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::table::Table;

/// Default hashed feature space size.
pub const DEFAULT_HASH_DIMS: usize = 1 << 18;
/// Smallest feature space `hash_features` accepts.
pub const MIN_HASH_DIMS: usize = 1024;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const CHANNEL_SEP: u8 = 0x1f;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    /// Byte offsets `(start, end)` of each token in the source text.
    pub source_spans: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercases and splits on anything that is not alphanumeric. Punctuation is
/// dropped, digits are kept.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut seq = TokenSeq::default();
    let mut start: Option<usize> = None;
    let push = |seq: &mut TokenSeq, s: usize, e: usize| {
        let tok: String = text[s..e]
            .chars()
            .flat_map(char::to_lowercase)
            .filter(|c| c.is_alphanumeric())
            .collect();
        if !tok.is_empty() {
            seq.tokens.push(tok);
            seq.source_spans.push((s, e));
        }
    };
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                push(&mut seq, s, i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        push(&mut seq, s, text.len());
    }
    seq
}

/// Token strings only.
pub fn tokens(text: &str) -> Vec<String> {
    tokenize(text).tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Question,
    Title,
    Section,
    Caption,
    Header,
    Cell,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Question => "question",
            Segment::Title => "title",
            Segment::Section => "section",
            Segment::Caption => "caption",
            Segment::Header => "header",
            Segment::Cell => "cell",
        }
    }
}

/// A token with its position in the table grid. Header tokens sit in row 0;
/// data cells start at row 1; columns start at 1. Metadata tokens use (0, 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredToken {
    pub token: String,
    pub segment: Segment,
    pub row_idx: usize,
    pub col_idx: usize,
}

impl StructuredToken {
    pub fn plain(token: impl Into<String>, segment: Segment) -> Self {
        StructuredToken {
            token: token.into(),
            segment,
            row_idx: 0,
            col_idx: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlattenMode {
    #[default]
    Full,
    /// Title, section and header only.
    SchemaOnly,
}

/// Where one header or data cell landed in a flattened token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLayout {
    pub row_idx: usize,
    pub col_idx: usize,
    /// Half-open range of positions in [`FlatTable::tokens`].
    pub start: usize,
    pub end: usize,
    /// Byte offsets of each token within the cell text.
    pub source_spans: Vec<(usize, usize)>,
}

impl CellLayout {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlatTable {
    pub tokens: Vec<StructuredToken>,
    /// Header cells then data cells, row-major.
    pub cells: Vec<CellLayout>,
}

pub fn flatten_table_layout(table: &Table, mode: FlattenMode) -> FlatTable {
    let mut flat = FlatTable::default();
    let meta = |flat: &mut FlatTable, text: &str, segment: Segment| {
        flat.tokens.extend(
            tokens(text)
                .into_iter()
                .map(|t| StructuredToken::plain(t, segment)),
        );
    };
    meta(&mut flat, &table.page_title, Segment::Title);
    if let Some(s) = &table.section_title {
        meta(&mut flat, s, Segment::Section);
    }
    if mode == FlattenMode::Full {
        if let Some(c) = &table.caption {
            meta(&mut flat, c, Segment::Caption);
        }
    }

    let cell = |flat: &mut FlatTable, text: &str, segment: Segment, row: usize, col: usize| {
        let seq = tokenize(text);
        let start = flat.tokens.len();
        flat.tokens
            .extend(seq.tokens.into_iter().map(|token| StructuredToken {
                token,
                segment,
                row_idx: row,
                col_idx: col,
            }));
        flat.cells.push(CellLayout {
            row_idx: row,
            col_idx: col,
            start,
            end: flat.tokens.len(),
            source_spans: seq.source_spans,
        });
    };
    for (j, h) in table.header.iter().enumerate() {
        cell(&mut flat, h, Segment::Header, 0, j + 1);
    }
    if mode == FlattenMode::Full {
        for (i, row) in table.rows.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                cell(&mut flat, c, Segment::Cell, i + 1, j + 1);
            }
        }
    }
    flat
}

/// Title, section, caption, header, then cells in row-major order.
pub fn flatten_table(table: &Table, mode: FlattenMode) -> Vec<StructuredToken> {
    flatten_table_layout(table, mode).tokens
}

/// Sorted `(index, value)` pairs with no stored zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Builds from arbitrary `(index, value)` pairs, summing duplicates and
    /// dropping zeros.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in pairs {
            *acc.entry(i).or_insert(0.0) += v;
        }
        SparseVector {
            entries: acc.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for e in &mut self.entries {
                e.1 /= n;
            }
        }
        self
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Returns a copy with each entry replaced by `f(index, value)`; zeros are
    /// dropped.
    pub fn map(&self, mut f: impl FnMut(u32, f64) -> f64) -> Self {
        SparseVector {
            entries: self
                .entries
                .iter()
                .map(|&(i, v)| (i, f(i, v)))
                .filter(|&(_, v)| v != 0.0)
                .collect(),
        }
    }
}

/// Token ids assigned in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.ids.len() as u32;
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// L2-normalized token counts, indexed through `vocab` (new tokens are
/// interned).
pub fn unigram_vector<S: AsRef<str>>(tokens: &[S], vocab: &mut Vocabulary) -> SparseVector {
    SparseVector::from_pairs(tokens.iter().map(|t| (vocab.intern(t.as_ref()), 1.0))).l2_normalized()
}

pub fn hash64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::with_key(FNV_OFFSET_BASIS);
    h.write(bytes);
    h.finish()
}

fn channel_hash(token: &str, tag: &str, value: &dyn std::fmt::Display) -> u64 {
    let mut h = FnvHasher::with_key(FNV_OFFSET_BASIS);
    h.write(token.as_bytes());
    h.write(&[CHANNEL_SEP]);
    h.write(tag.as_bytes());
    h.write(format!("{value}").as_bytes());
    h.finish()
}

/// The raw (unnormalized) hashed feature keys of one token.
///
/// Always includes the bare token. With `use_structure`, adds the token
/// crossed with its segment, and for header/cell tokens with its column; data
/// cells additionally get a row channel.
pub fn token_feature_hashes(tok: &StructuredToken, use_structure: bool) -> Vec<u64> {
    let mut out = vec![hash64(tok.token.as_bytes())];
    if use_structure {
        out.extend(column_channel_hashes(tok));
        if tok.segment == Segment::Cell {
            out.push(channel_hash(&tok.token, "r:", &tok.row_idx));
        }
    }
    out
}

/// Segment and column channels of a token (no bare token, no row channel).
pub fn column_channel_hashes(tok: &StructuredToken) -> Vec<u64> {
    let mut out = vec![channel_hash(&tok.token, "s:", &tok.segment.as_str())];
    if tok.col_idx >= 1 {
        out.push(channel_hash(&tok.token, "c:", &tok.col_idx));
    }
    out
}

/// Hashed bag of features, l2-normalized.
///
/// # Panics
/// If `dims < MIN_HASH_DIMS`.
pub fn hash_features(tokens: &[StructuredToken], dims: usize, use_structure: bool) -> SparseVector {
    hash_counts(tokens, dims, use_structure).l2_normalized()
}

/// Hashed feature counts before normalization.
pub fn hash_counts(tokens: &[StructuredToken], dims: usize, use_structure: bool) -> SparseVector {
    assert!(
        dims >= MIN_HASH_DIMS,
        "feature space must have at least {MIN_HASH_DIMS} dims, got {dims}"
    );
    let d = dims as u64;
    SparseVector::from_pairs(tokens.iter().flat_map(|t| {
        token_feature_hashes(t, use_structure)
            .into_iter()
            .map(move |h| ((h % d) as u32, 1.0))
    }))
}

/// Question tokens as structure-free features.
pub fn question_tokens(text: &str) -> Vec<StructuredToken> {
    tokens(text)
        .into_iter()
        .map(|t| StructuredToken::plain(t, Segment::Question))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(header: &[&str], rows: &[&[&str]]) -> Table {
        Table {
            table_id: "t".into(),
            page_title: "France".into(),
            page_version: "1".into(),
            section_title: None,
            caption: None,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
            is_infobox: false,
        }
    }

    fn triple(t: &StructuredToken) -> (&str, Segment, usize, usize) {
        (t.token.as_str(), t.segment, t.row_idx, t.col_idx)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokens("The Red Album!"), ["the", "red", "album"]);
        assert!(tokens("").is_empty());
        assert_eq!(tokens("A-B 12"), ["a", "b", "12"]);
        let seq = tokenize("  Hi, there");
        assert_eq!(seq.source_spans, [(2, 4), (6, 11)]);
        assert_eq!(tokens("Zürich ÉTÉ"), ["zürich", "été"]);
    }

    #[test]
    fn flatten_one_cell() {
        let t = table(&["city"], &[&["paris"]]);
        let full = flatten_table(&t, FlattenMode::Full);
        assert_eq!(
            full.iter().map(triple).collect::<Vec<_>>(),
            [
                ("france", Segment::Title, 0, 0),
                ("city", Segment::Header, 0, 1),
                ("paris", Segment::Cell, 1, 1)
            ]
        );
        let schema = flatten_table(&t, FlattenMode::SchemaOnly);
        assert_eq!(
            schema.iter().map(triple).collect::<Vec<_>>(),
            [("france", Segment::Title, 0, 0), ("city", Segment::Header, 0, 1)]
        );
    }

    #[test]
    fn flatten_two_by_two_row_major() {
        let t = table(&["a", "b"], &[&["w", "x"], &["y", "z"]]);
        let cells: Vec<_> = flatten_table(&t, FlattenMode::Full)
            .into_iter()
            .filter(|t| t.segment == Segment::Cell)
            .map(|t| (t.row_idx, t.col_idx))
            .collect();
        assert_eq!(cells, [(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn schema_only_drops_caption_keeps_section() {
        let mut t = table(&["a"], &[&["x"]]);
        t.caption = Some("cap".into());
        t.section_title = Some("sec".into());
        let segs: Vec<_> = flatten_table(&t, FlattenMode::SchemaOnly)
            .iter()
            .map(|t| t.segment)
            .collect();
        assert_eq!(segs, [Segment::Title, Segment::Section, Segment::Header]);
    }

    #[test]
    fn unigram_examples() {
        let mut v = Vocabulary::new();
        let u = unigram_vector(&["a", "a", "b"], &mut v);
        let (a, b) = (v.get("a").unwrap(), v.get("b").unwrap());
        assert!((u.get(a) - 2.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((u.get(b) - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!(unigram_vector::<&str>(&[], &mut v).is_empty());
        let x = unigram_vector(&["x"], &mut v);
        assert_eq!(x.entries(), &[(v.get("x").unwrap(), 1.0)]);
    }

    #[test]
    fn vocabulary_is_first_seen() {
        let mut v = Vocabulary::new();
        assert_eq!(v.intern("b"), 0);
        assert_eq!(v.intern("a"), 1);
        assert_eq!(v.intern("b"), 0);
    }

    #[test]
    fn hash_features_deterministic() {
        let t = table(&["a", "b"], &[&["w", "x"], &["y", "z"]]);
        let toks = flatten_table(&t, FlattenMode::Full);
        assert_eq!(
            hash_features(&toks, 4096, true),
            hash_features(&toks, 4096, true)
        );
    }

    #[test]
    fn row_permutation_invisible_without_structure() {
        let a = table(&["h"], &[&["w x"], &["y"], &["z"]]);
        let b = table(&["h"], &[&["z"], &["w x"], &["y"]]);
        let fa = flatten_table(&a, FlattenMode::Full);
        let fb = flatten_table(&b, FlattenMode::Full);
        assert_eq!(hash_features(&fa, 4096, false), hash_features(&fb, 4096, false));
        assert_ne!(hash_features(&fa, 4096, true), hash_features(&fb, 4096, true));
    }

    #[test]
    fn header_and_cell_placement_differ_with_structure() {
        let header = vec![StructuredToken {
            token: "year".into(),
            segment: Segment::Header,
            row_idx: 0,
            col_idx: 1,
        }];
        let cell = vec![StructuredToken {
            token: "year".into(),
            segment: Segment::Cell,
            row_idx: 1,
            col_idx: 1,
        }];
        let hh: Vec<u64> = token_feature_hashes(&header[0], true)
            .iter()
            .map(|h| h % 4096)
            .collect();
        let hc: Vec<u64> = token_feature_hashes(&cell[0], true)
            .iter()
            .map(|h| h % 4096)
            .collect();
        // Segment keys must land in different buckets for the check to mean anything.
        assert_ne!(hh[1], hc[1]);
        assert_ne!(hash_features(&header, 4096, true), hash_features(&cell, 4096, true));
        assert_eq!(hash_features(&header, 4096, false), hash_features(&cell, 4096, false));
    }

    #[test]
    #[should_panic]
    fn hash_features_rejects_tiny_space() {
        hash_features(&question_tokens("a"), 16, false);
    }

    fn arb_table() -> impl Strategy<Value = Table> {
        (1usize..4, 0usize..4).prop_flat_map(|(cols, rows)| {
            (
                prop::collection::vec("[a-z ]{0,8}", cols),
                prop::collection::vec(prop::collection::vec("[a-z0-9 ,]{0,10}", cols), rows),
                proptest::option::of("[a-z ]{0,8}"),
            )
                .prop_map(|(header, rows, caption)| Table {
                    table_id: "t".into(),
                    page_title: "page title".into(),
                    page_version: "1".into(),
                    section_title: Some("sec".into()),
                    caption,
                    header,
                    rows,
                    is_infobox: false,
                })
        })
    }

    proptest! {
        #[test]
        fn tokenize_join_idempotent(s in "\\PC{0,40}") {
            let once = tokens(&s);
            prop_assert_eq!(tokens(&once.join(" ")), once.clone());
            for t in &once {
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
            let spans = tokenize(&s).source_spans;
            prop_assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
        }

        #[test]
        fn unigram_unit_norm(toks in prop::collection::vec("[a-e]", 1..30)) {
            let mut v = Vocabulary::new();
            prop_assert!((unigram_vector(&toks, &mut v).norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn hashed_unit_norm(t in arb_table(), structure in any::<bool>()) {
            let toks = flatten_table(&t, FlattenMode::Full);
            let f = hash_features(&toks, 1024, structure);
            if !toks.is_empty() {
                prop_assert!((f.norm() - 1.0).abs() < 1e-9);
            }
            prop_assert!(f.entries().windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn adding_a_token_never_lowers_its_bucket(t in arb_table(), extra in "[a-z]{1,6}") {
            let mut toks = flatten_table(&t, FlattenMode::Full);
            let before = hash_counts(&toks, 1024, true);
            let tok = StructuredToken::plain(extra, Segment::Caption);
            let idx = (hash64(tok.token.as_bytes()) % 1024) as u32;
            toks.push(tok);
            let after = hash_counts(&toks, 1024, true);
            prop_assert!(after.get(idx) >= before.get(idx) + 1.0);
        }

        #[test]
        fn schema_only_is_subsequence(t in arb_table()) {
            let full = flatten_table(&t, FlattenMode::Full);
            let schema = flatten_table(&t, FlattenMode::SchemaOnly);
            let mut it = full.iter();
            for s in &schema {
                prop_assert!(it.any(|f| f == s));
            }
        }
    }
}
