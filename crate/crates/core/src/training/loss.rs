//! In-batch softmax losses over score matrices.
//!
//! Row `i` of `S` holds question `i` against every gold table of the batch, so
//! the label of row `i` is column `i`. With hard negatives each row is extended
//! by question `i` against every mined negative (`S'`), giving `2B` logits whose
//! label vector is `[e_i | 0]`.

use crate::error::{Error, Result};

/// Logit assigned to masked entries.
pub const MASKED_LOGIT: f64 = -1e9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Question-by-table logits for one batch; `hard` is present when training
/// with mined negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    pub scores: Matrix,
    pub hard: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_scores: Matrix,
    pub grad_hard: Option<Matrix>,
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log Σ exp(x)` with the max shifted out.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn check_square(m: &Matrix) -> Result<()> {
    if m.rows != m.cols || m.rows == 0 {
        return Err(Error::Invalid(format!(
            "score matrix must be square and non-empty, got {}x{}",
            m.rows, m.cols
        )));
    }
    Ok(())
}

/// Mean row-wise cross entropy with identity labels. The gradient is
/// `(softmax(S) - I) / B`.
pub fn in_batch_loss(sb: &ScoreBatch) -> Result<LossGrad> {
    if sb.hard.is_some() {
        return Err(Error::Invalid("in_batch_loss called with hard negatives".into()));
    }
    let s = &sb.scores;
    check_square(s)?;
    check_finite(s, "score matrix")?;
    let b = s.rows;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, b);
    for i in 0..b {
        let row = s.row(i);
        loss += log_sum_exp(row) - row[i];
        let p = softmax(row);
        for (j, pj) in p.into_iter().enumerate() {
            let label = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, (pj - label) / b as f64);
        }
    }
    Ok(LossGrad {
        loss: loss / b as f64,
        grad_scores: grad,
        grad_hard: None,
    })
}

/// Cross entropy over `[S[i] | S'[i]]` with label `i`, averaged over rows.
pub fn hard_negative_loss(sb: &ScoreBatch) -> Result<LossGrad> {
    let s = &sb.scores;
    let h = sb
        .hard
        .as_ref()
        .ok_or_else(|| Error::Invalid("hard_negative_loss needs a hard-negative matrix".into()))?;
    check_square(s)?;
    if h.rows != s.rows || h.cols != s.cols {
        return Err(Error::DimensionMismatch {
            expected: s.rows,
            actual: h.rows,
        });
    }
    check_finite(s, "score matrix")?;
    check_finite(h, "hard-negative score matrix")?;
    let b = s.rows;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut gs = Matrix::zeros(b, b);
    let mut gh = Matrix::zeros(b, b);
    let mut logits = Vec::with_capacity(2 * b);
    for i in 0..b {
        logits.clear();
        logits.extend_from_slice(s.row(i));
        logits.extend_from_slice(h.row(i));
        loss += log_sum_exp(&logits) - s.get(i, i);
        let p = softmax(&logits);
        for j in 0..b {
            let label = if i == j { 1.0 } else { 0.0 };
            gs.set(i, j, (p[j] - label) * inv_b);
            gh.set(i, j, p[b + j] * inv_b);
        }
    }
    Ok(LossGrad {
        loss: loss * inv_b,
        grad_scores: gs,
        grad_hard: Some(gh),
    })
}

/// Dispatches on whether the batch carries hard negatives.
pub fn batch_loss(sb: &ScoreBatch) -> Result<LossGrad> {
    if sb.hard.is_some() {
        hard_negative_loss(sb)
    } else {
        in_batch_loss(sb)
    }
}
