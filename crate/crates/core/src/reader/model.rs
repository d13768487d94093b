//! Reader parameters and the forward/backward passes shared by inference and
//! training.
//!
//! A table token at flattened position `p` with hashed features `F_p` gets
//! `u_p = Σ_{f ∈ F_p} E[f]`. The question contributes `m`, the mean over its
//! tokens of the same sum. The token representation is
//! `h_p = u_p + m + m ⊙ u_p`. Spans score `w2 · softplus(W1 [h_s ‖ h_e] + b1) + b2`;
//! candidates score `wc · mean_p(h_p) + bc`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::dot;
use crate::error::{Error, Result};
use crate::table::Table;
use crate::textproc::{
    column_channel_hashes, flatten_table_layout, hash64, question_tokens, FlattenMode, FlatTable,
    StructuredToken, MIN_HASH_DIMS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReaderShape {
    /// Token representation width.
    pub r: usize,
    pub hidden: usize,
    pub feature_dims: usize,
    /// Header cells are valid answer locations.
    pub include_header: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderParams {
    pub shape: ReaderShape,
    /// Feature-major: `embedding[f * r + k]`.
    pub embedding: Vec<f64>,
    /// `hidden × 2r`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub wc: Vec<f64>,
    pub bc: f64,
}

impl ReaderParams {
    pub fn zeros(shape: ReaderShape) -> Result<Self> {
        if shape.r == 0 || shape.hidden == 0 {
            return Err(Error::Invalid("reader dimensions must be positive".into()));
        }
        if shape.feature_dims < MIN_HASH_DIMS {
            return Err(Error::Invalid(format!(
                "reader feature_dims must be at least {MIN_HASH_DIMS}"
            )));
        }
        Ok(ReaderParams {
            shape,
            embedding: vec![0.0; shape.feature_dims * shape.r],
            w1: vec![0.0; shape.hidden * 2 * shape.r],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden],
            b2: 0.0,
            wc: vec![0.0; shape.r],
            bc: 0.0,
        })
    }

    /// Small uniform embeddings, Glorot-uniform MLP weights, zero biases.
    pub fn init(shape: ReaderShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f64], bound: f64| {
            for x in v {
                *x = rng.gen_range(-bound..=bound);
            }
        };
        fill(&mut p.embedding, 0.1);
        fill(&mut p.w1, (6.0 / (3 * shape.r + shape.hidden) as f64).sqrt());
        fill(&mut p.w2, (6.0 / (shape.hidden + 1) as f64).sqrt());
        fill(&mut p.wc, (1.0 / shape.r as f64).sqrt());
        Ok(p)
    }

    pub fn r(&self) -> usize {
        self.shape.r
    }

    pub fn hidden(&self) -> usize {
        self.shape.hidden
    }

    pub fn is_finite(&self) -> bool {
        self.embedding
            .iter()
            .chain(&self.w1)
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.wc)
            .chain([&self.b2, &self.bc])
            .all(|v| v.is_finite())
    }

    pub(crate) fn embedding_row(&self, f: u32) -> &[f64] {
        let r = self.r();
        &self.embedding[f as usize * r..(f as usize + 1) * r]
    }

    /// Sum of the feature embeddings of one token.
    pub(crate) fn embed(&self, feats: &[u32]) -> Vec<f64> {
        let mut u = vec![0.0; self.r()];
        for &f in feats {
            for (a, e) in u.iter_mut().zip(self.embedding_row(f)) {
                *a += e;
            }
        }
        u
    }
}

/// Bare token plus segment and column channels, bucketed into `dims`.
pub fn reader_token_features(tok: &StructuredToken, dims: usize) -> Vec<u32> {
    let d = dims as u64;
    std::iter::once(hash64(tok.token.as_bytes()))
        .chain(column_channel_hashes(tok))
        .map(|h| (h % d) as u32)
        .collect()
}

pub(crate) fn question_features(text: &str, dims: usize) -> Vec<Vec<u32>> {
    question_tokens(text)
        .iter()
        .map(|t| reader_token_features(t, dims))
        .collect()
}

/// One candidate table prepared for scoring.
#[derive(Debug, Clone)]
pub struct PreparedTable {
    pub table_id: String,
    pub flat: FlatTable,
    pub token_features: Vec<Vec<u32>>,
    /// Flattened `(start, end)` positions (inclusive) of every candidate span.
    pub spans: Vec<(usize, usize)>,
    /// Index into `flat.cells` of each span's cell.
    pub span_cells: Vec<usize>,
}

impl PreparedTable {
    pub fn new(table: &Table, shape: &ReaderShape, max_len: usize) -> Self {
        let flat = flatten_table_layout(table, FlattenMode::Full);
        let token_features = flat
            .tokens
            .iter()
            .map(|t| reader_token_features(t, shape.feature_dims))
            .collect();
        let (span_cells, spans) = super::span_positions(&flat, max_len, shape.include_header)
            .into_iter()
            .unzip();
        PreparedTable {
            table_id: table.table_id.clone(),
            flat,
            token_features,
            spans,
            span_cells,
        }
    }
}

/// Question conditioning vector `m`.
pub(crate) fn question_vector(rp: &ReaderParams, q_feats: &[Vec<u32>]) -> Vec<f64> {
    let mut m = vec![0.0; rp.r()];
    if q_feats.is_empty() {
        return m;
    }
    for feats in q_feats {
        for (a, x) in m.iter_mut().zip(rp.embed(feats)) {
            *a += x;
        }
    }
    let n = q_feats.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// `(u_p, h_p)` for every token.
pub(crate) fn token_reps(rp: &ReaderParams, feats: &[Vec<u32>], m: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let u: Vec<Vec<f64>> = feats.iter().map(|f| rp.embed(f)).collect();
    let h = u
        .iter()
        .map(|u| u.iter().zip(m).map(|(&a, &b)| a + b + a * b).collect())
        .collect();
    (u, h)
}

pub(crate) fn mean_pool(h: &[Vec<f64>], r: usize) -> Vec<f64> {
    let mut pooled = vec![0.0; r];
    if h.is_empty() {
        return pooled;
    }
    for v in h {
        for (a, x) in pooled.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = h.len() as f64;
    pooled.iter_mut().for_each(|a| *a /= n);
    pooled
}

pub(crate) fn candidate_logit_from(rp: &ReaderParams, pooled: &[f64]) -> f64 {
    dot(&rp.wc, pooled) + rp.bc
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-token projections through the two halves of `W1`.
pub(crate) struct Projections {
    pub start: Vec<Vec<f64>>,
    pub end: Vec<Vec<f64>>,
}

pub(crate) fn project_tokens(rp: &ReaderParams, h: &[Vec<f64>]) -> Projections {
    let r = rp.r();
    let hid = rp.hidden();
    let proj = |offset: usize| -> Vec<Vec<f64>> {
        h.iter()
            .map(|hp| {
                (0..hid)
                    .map(|j| dot(&rp.w1[j * 2 * r + offset..j * 2 * r + offset + r], hp))
                    .collect()
            })
            .collect()
    };
    Projections {
        start: proj(0),
        end: proj(r),
    }
}

/// Pre-activation of the span MLP.
pub(crate) fn span_preactivation(rp: &ReaderParams, proj: &Projections, s: usize, e: usize) -> Vec<f64> {
    rp.b1
        .iter()
        .zip(&proj.start[s])
        .zip(&proj.end[e])
        .map(|((b, x), y)| b + x + y)
        .collect()
}

pub(crate) fn span_score_from(rp: &ReaderParams, z: &[f64]) -> f64 {
    rp.w2.iter().zip(z).map(|(w, &z)| w * softplus(z)).sum::<f64>() + rp.b2
}

/// Full forward state of one table under one question.
pub(crate) struct TableForward {
    pub u: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub logit: f64,
}

pub(crate) fn table_forward(rp: &ReaderParams, t: &PreparedTable, m: &[f64]) -> TableForward {
    let (u, h) = token_reps(rp, &t.token_features, m);
    let pooled = mean_pool(&h, rp.r());
    let logit = candidate_logit_from(rp, &pooled);
    TableForward { u, h, pooled, logit }
}

pub(crate) fn all_span_scores(rp: &ReaderParams, t: &PreparedTable, h: &[Vec<f64>]) -> Vec<f64> {
    let proj = project_tokens(rp, h);
    t.spans
        .iter()
        .map(|&(s, e)| span_score_from(rp, &span_preactivation(rp, &proj, s, e)))
        .collect()
}

/// Gradient buffers; the embedding gradient is kept sparse by feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrads {
    pub embedding: BTreeMap<u32, Vec<f64>>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub wc: Vec<f64>,
    pub bc: f64,
}

impl ReaderGrads {
    pub fn zeros(shape: &ReaderShape) -> Self {
        ReaderGrads {
            embedding: BTreeMap::new(),
            w1: vec![0.0; shape.hidden * 2 * shape.r],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden],
            b2: 0.0,
            wc: vec![0.0; shape.r],
            bc: 0.0,
        }
    }

    pub(crate) fn add_embedding(&mut self, feats: &[u32], g: &[f64], scale: f64) {
        for &f in feats {
            let row = self.embedding.entry(f).or_insert_with(|| vec![0.0; g.len()]);
            for (a, x) in row.iter_mut().zip(g) {
                *a += scale * x;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.embedding.values_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.wc] {
            v.iter_mut().for_each(|x| *x *= s);
        }
        self.b2 *= s;
        self.bc *= s;
    }

    pub fn merge(&mut self, other: ReaderGrads) {
        for (f, v) in other.embedding {
            let row = self.embedding.entry(f).or_insert_with(|| vec![0.0; v.len()]);
            for (a, x) in row.iter_mut().zip(v) {
                *a += x;
            }
        }
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.wc, &other.wc),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.b2 += other.b2;
        self.bc += other.bc;
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.values().flatten().chain(&self.w1).chain(&self.b1).chain(&self.w2).chain(&self.wc)
            .chain([&self.b2, &self.bc])
            .all(|v| v.is_finite())
    }
}

/// Backpropagates `dh` (per-token gradient of `h`) into the embeddings,
/// through both `u_p` and the question vector `m`.
pub(crate) fn backprop_token_reps(
    g: &mut ReaderGrads,
    t: &PreparedTable,
    fwd: &TableForward,
    m: &[f64],
    dh: &[Vec<f64>],
    dm: &mut [f64],
) {
    for (p, dhp) in dh.iter().enumerate() {
        let du: Vec<f64> = dhp.iter().zip(m).map(|(d, mk)| d * (1.0 + mk)).collect();
        for ((a, d), uk) in dm.iter_mut().zip(dhp).zip(&fwd.u[p]) {
            *a += d * (1.0 + uk);
        }
        g.add_embedding(&t.token_features[p], &du, 1.0);
    }
}

pub(crate) fn backprop_question(g: &mut ReaderGrads, q_feats: &[Vec<u32>], dm: &[f64]) {
    if q_feats.is_empty() {
        return;
    }
    let scale = 1.0 / q_feats.len() as f64;
    for feats in q_feats {
        g.add_embedding(feats, dm, scale);
    }
}

/// Adds the gradient of `dlogit · logit` to `g` and to `dh`.
pub(crate) fn backprop_candidate(rp: &ReaderParams, g: &mut ReaderGrads, fwd: &TableForward, dlogit: f64, dh: &mut [Vec<f64>]) {
    for (a, p) in g.wc.iter_mut().zip(&fwd.pooled) {
        *a += dlogit * p;
    }
    g.bc += dlogit;
    if dh.is_empty() {
        return;
    }
    let n = dh.len() as f64;
    for d in dh.iter_mut() {
        for (a, w) in d.iter_mut().zip(&rp.wc) {
            *a += dlogit * w / n;
        }
    }
}

/// Adds the gradient of `Σ_k dscore[k] · score_k` over spans to `g` and `dh`.
pub(crate) fn backprop_spans(
    rp: &ReaderParams,
    g: &mut ReaderGrads,
    t: &PreparedTable,
    h: &[Vec<f64>],
    dscore: &[f64],
    dh: &mut [Vec<f64>],
) {
    let r = rp.r();
    let hid = rp.hidden();
    let proj = project_tokens(rp, h);
    let mut d_start = vec![vec![0.0; hid]; h.len()];
    let mut d_end = vec![vec![0.0; hid]; h.len()];
    for (k, &(s, e)) in t.spans.iter().enumerate() {
        let ds = dscore[k];
        if ds == 0.0 {
            continue;
        }
        let z = span_preactivation(rp, &proj, s, e);
        g.b2 += ds;
        for j in 0..hid {
            g.w2[j] += ds * softplus(z[j]);
            let dz = ds * rp.w2[j] * sigmoid(z[j]);
            g.b1[j] += dz;
            d_start[s][j] += dz;
            d_end[e][j] += dz;
        }
    }
    for p in 0..h.len() {
        for j in 0..hid {
            let (a, b) = (d_start[p][j], d_end[p][j]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let row = j * 2 * r;
            for k in 0..r {
                g.w1[row + k] += a * h[p][k];
                g.w1[row + r + k] += b * h[p][k];
                dh[p][k] += a * rp.w1[row + k] + b * rp.w1[row + r + k];
            }
        }
    }
}
