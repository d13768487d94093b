//! Forward pass over a featurized batch and exact backpropagation through the
//! bilinear score into both towers.

use std::collections::BTreeMap;

use crate::encoder::{dot, EncoderParams, Tower};
use crate::error::{Error, Result};
use crate::textproc::SparseVector;

use super::loss::{batch_loss, LossGrad, Matrix, ScoreBatch, MASKED_LOGIT};
use super::optim::{AdamSlot, LinearSchedule};

/// One batch after featurization (and dropout, when training).
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub questions: Vec<SparseVector>,
    pub tables: Vec<SparseVector>,
    pub table_ids: Vec<String>,
    /// Empty, or one optional `(table_id, features)` per example.
    pub negatives: Vec<Option<(String, SparseVector)>>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn has_negatives(&self) -> bool {
        self.negatives.iter().any(Option::is_some)
    }

    /// Hard-negative score `(i, j)` is masked when question `i` has no mined
    /// negative, when negative `j` is missing, or when negative `j` is the
    /// gold table of question `i`.
    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        match (&self.negatives[i], &self.negatives[j]) {
            (Some(_), Some((nid, _))) => *nid == self.table_ids[i],
            _ => true,
        }
    }

    fn validate(&self) -> Result<()> {
        let b = self.len();
        if b < 2 {
            return Err(Error::Invalid(format!("batch size must be at least 2, got {b}")));
        }
        if self.tables.len() != b || self.table_ids.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                actual: self.tables.len(),
            });
        }
        if !self.negatives.is_empty() && self.negatives.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                actual: self.negatives.len(),
            });
        }
        Ok(())
    }
}

/// Embeddings and scores for one batch.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hq: Vec<Vec<f64>>,
    pub ht: Vec<Vec<f64>>,
    pub hn: Vec<Option<Vec<f64>>>,
    pub scores: ScoreBatch,
}

pub fn forward(params: &EncoderParams, batch: &FeatureBatch) -> Result<Forward> {
    batch.validate()?;
    let b = batch.len();
    let hq: Vec<Vec<f64>> = batch.questions.iter().map(|x| params.question.project(x)).collect();
    let ht: Vec<Vec<f64>> = batch.tables.iter().map(|x| params.table.project(x)).collect();
    let mut s = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            s.set(i, j, dot(&hq[i], &ht[j]));
        }
    }
    let (hn, hard) = if batch.has_negatives() {
        let hn: Vec<Option<Vec<f64>>> = batch
            .negatives
            .iter()
            .map(|n| n.as_ref().map(|(_, x)| params.table.project(x)))
            .collect();
        let mut h = Matrix::filled(b, b, MASKED_LOGIT);
        for i in 0..b {
            for j in 0..b {
                if !batch.is_masked(i, j) {
                    h.set(i, j, dot(&hq[i], hn[j].as_ref().expect("unmasked negative")));
                }
            }
        }
        (hn, Some(h))
    } else {
        (vec![None; b], None)
    };
    Ok(Forward {
        hq,
        ht,
        hn,
        scores: ScoreBatch { scores: s, hard },
    })
}

/// Sparse gradient of one tower: only feature columns touched by the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrad {
    pub columns: BTreeMap<u32, Vec<f64>>,
    pub bias: Vec<f64>,
}

impl TowerGrad {
    fn zeros(d: usize) -> Self {
        TowerGrad {
            columns: BTreeMap::new(),
            bias: vec![0.0; d],
        }
    }

    fn accumulate(&mut self, x: &SparseVector, dh: &[f64]) {
        let d = self.bias.len();
        for &(f, v) in x.entries() {
            let col = self.columns.entry(f).or_insert_with(|| vec![0.0; d]);
            for (c, g) in col.iter_mut().zip(dh) {
                *c += v * g;
            }
        }
        for (c, g) in self.bias.iter_mut().zip(dh) {
            *c += g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.iter().all(|g| g.is_finite())
            && self.columns.values().all(|c| c.iter().all(|g| g.is_finite()))
    }

    /// Gradient of weight `(feature, k)`.
    pub fn weight(&self, feature: u32, k: usize) -> f64 {
        self.columns.get(&feature).map_or(0.0, |c| c[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub question: TowerGrad,
    pub table: TowerGrad,
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

/// Chain rule through `S = Q Tᵀ` and `S' = Q Nᵀ`; the table tower receives
/// gradient from both gold tables and negatives.
pub fn backward(params: &EncoderParams, batch: &FeatureBatch, fwd: &Forward, lg: &LossGrad) -> Gradients {
    let b = batch.len();
    let d = params.d();
    let g = &lg.grad_scores;
    let mut dhq = vec![vec![0.0; d]; b];
    let mut dht = vec![vec![0.0; d]; b];
    let mut dhn = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let gij = g.get(i, j);
            axpy(&mut dhq[i], gij, &fwd.ht[j]);
            axpy(&mut dht[j], gij, &fwd.hq[i]);
        }
    }
    if let Some(h) = &lg.grad_hard {
        for i in 0..b {
            for j in 0..b {
                if batch.is_masked(i, j) {
                    continue;
                }
                let hn = fwd.hn[j].as_ref().expect("unmasked negative");
                axpy(&mut dhq[i], h.get(i, j), hn);
                axpy(&mut dhn[j], h.get(i, j), &fwd.hq[i]);
            }
        }
    }
    let mut question = TowerGrad::zeros(d);
    let mut table = TowerGrad::zeros(d);
    for i in 0..b {
        question.accumulate(&batch.questions[i], &dhq[i]);
        table.accumulate(&batch.tables[i], &dht[i]);
    }
    if lg.grad_hard.is_some() {
        for (j, n) in batch.negatives.iter().enumerate() {
            if let Some((_, x)) = n {
                table.accumulate(x, &dhn[j]);
            }
        }
    }
    Gradients {
        loss: lg.loss,
        question,
        table,
    }
}

/// Loss and gradients for a batch under `params`.
pub fn loss_and_gradients(params: &EncoderParams, batch: &FeatureBatch) -> Result<Gradients> {
    let fwd = forward(params, batch)?;
    let lg = batch_loss(&fwd.scores)?;
    Ok(backward(params, batch, &fwd, &lg))
}

pub fn batch_loss_value(params: &EncoderParams, batch: &FeatureBatch) -> Result<f64> {
    Ok(batch_loss(&forward(params, batch)?.scores)?.loss)
}

/// Adam moments for every parameter tensor of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub question_weights: AdamSlot,
    pub question_bias: AdamSlot,
    pub table_weights: AdamSlot,
    pub table_bias: AdamSlot,
}

impl Moments {
    pub fn zeros(params: &EncoderParams) -> Self {
        Moments {
            question_weights: AdamSlot::zeros(params.question.weights.len()),
            question_bias: AdamSlot::zeros(params.question.bias.len()),
            table_weights: AdamSlot::zeros(params.table.weights.len()),
            table_bias: AdamSlot::zeros(params.table.bias.len()),
        }
    }

    pub fn matches(&self, params: &EncoderParams) -> bool {
        self.question_weights.len() == params.question.weights.len()
            && self.question_bias.len() == params.question.bias.len()
            && self.table_weights.len() == params.table.weights.len()
            && self.table_bias.len() == params.table.bias.len()
    }
}

/// Parameters, optimizer moments and early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub moments: Moments,
    /// Number of updates applied so far.
    pub step: u64,
    pub best_recall: Option<f64>,
    pub evals_since_improvement: usize,
}

impl TrainState {
    pub fn new(params: EncoderParams) -> Self {
        TrainState {
            moments: Moments::zeros(&params),
            params,
            step: 0,
            best_recall: None,
            evals_since_improvement: 0,
        }
    }
}

fn step_tower(tower: &mut Tower, w_slot: &mut AdamSlot, b_slot: &mut AdamSlot, g: &TowerGrad, lr: f64, t: u64) {
    let d = tower.dim();
    w_slot.update_chunked(&mut tower.weights, d, lr, t, |f| {
        g.columns.get(&(f as u32)).map(Vec::as_slice)
    });
    b_slot.update(&mut tower.bias, &g.bias, lr, t);
}

/// Applies precomputed gradients with Adam at the scheduled rate.
pub fn apply_gradients(st: &mut TrainState, grads: &Gradients, schedule: &LinearSchedule) -> Result<()> {
    for (name, g) in [("question", &grads.question), ("table", &grads.table)] {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} tower gradient at step {} (loss {})",
                st.step, grads.loss
            )));
        }
    }
    let lr = schedule.lr(st.step);
    let t = st.step + 1;
    let m = &mut st.moments;
    step_tower(&mut st.params.question, &mut m.question_weights, &mut m.question_bias, &grads.question, lr, t);
    step_tower(&mut st.params.table, &mut m.table_weights, &mut m.table_bias, &grads.table, lr, t);
    st.step = t;
    Ok(())
}

/// One optimization step on a batch; returns the batch loss before the update.
pub fn backprop_and_step(st: &mut TrainState, batch: &FeatureBatch, schedule: &LinearSchedule) -> Result<f64> {
    let grads = loss_and_gradients(&st.params, batch)?;
    apply_gradients(st, &grads, schedule)?;
    Ok(grads.loss)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error, so that entries whose true
/// gradient is essentially zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn param_mut(p: &mut EncoderParams, table_tower: bool, idx: usize) -> &mut f64 {
    let tower = if table_tower { &mut p.table } else { &mut p.question };
    let wlen = tower.weights.len();
    if idx < wlen {
        &mut tower.weights[idx]
    } else {
        &mut tower.bias[idx - wlen]
    }
}

/// Compares every gradient entry touched by `batch` (all weight columns of
/// active features plus both biases) against central finite differences.
pub fn check_gradients(params: &EncoderParams, batch: &FeatureBatch, h: f64) -> Result<GradCheck> {
    let grads = loss_and_gradients(params, batch)?;
    let d = params.d();
    let wlen = d * params.shape.feature_dims;
    let mut probes: Vec<(bool, usize, f64)> = Vec::new();
    for (table_tower, g) in [(false, &grads.question), (true, &grads.table)] {
        for (&f, col) in &g.columns {
            for (k, &a) in col.iter().enumerate() {
                probes.push((table_tower, f as usize * d + k, a));
            }
        }
        for (k, &a) in g.bias.iter().enumerate() {
            probes.push((table_tower, wlen + k, a));
        }
    }
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for &(table_tower, idx, analytic) in &probes {
        let orig = *param_mut(&mut p, table_tower, idx);
        *param_mut(&mut p, table_tower, idx) = orig + h;
        let up = batch_loss_value(&p, batch)?;
        *param_mut(&mut p, table_tower, idx) = orig - h;
        let down = batch_loss_value(&p, batch)?;
        *param_mut(&mut p, table_tower, idx) = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: probes.len(),
    })
}
