//! Explicit label transition: the transition matrix `T`, the EM posterior
//! over the latent true label `y` and correctness indicator `z`, the
//! closed-form M-step, the `Q` objective, and the Jensen upper-bound loss.
//!
//! `T[i][k]` is the probability that true class `k` is annotated as class
//! `i` when the annotation is wrong (`z = 0`). Columns sum to one and the
//! diagonal is zero.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, sigmoid_scalar};

const COLUMN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransitionRepr", into = "TransitionRepr")]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransitionRepr {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<TransitionRepr> for TransitionMatrix {
    type Error = Error;

    fn try_from(repr: TransitionRepr) -> Result<Self> {
        TransitionMatrix::from_rows(repr.rows)
    }
}

impl From<TransitionMatrix> for TransitionRepr {
    fn from(t: TransitionMatrix) -> Self {
        TransitionRepr { rows: t.rows() }
    }
}

impl TransitionMatrix {
    /// Zero diagonal, every off-diagonal entry `1/(K-1)`.
    pub fn init(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Argument(format!(
                "transition matrix needs at least 2 classes, got {classes}"
            )));
        }
        let off = 1.0 / (classes - 1) as f64;
        let mut entries = vec![off; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 0.0;
        }
        Ok(Self { classes, entries })
    }

    /// Builds from rows (row = noisy class), checking non-negativity, a zero
    /// diagonal and unit column sums.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        if classes < 2 {
            return Err(Error::Transition(format!("need at least 2 rows, got {classes}")));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != classes) {
            return Err(Error::Transition(format!(
                "row {r} has {} entries, expected {classes}",
                rows[r].len()
            )));
        }
        let t = Self {
            classes,
            entries: rows.into_iter().flatten().collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes;
        for i in 0..k {
            for j in 0..k {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Transition(format!("entry ({i},{j}) = {v}")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Transition(format!("diagonal entry ({i},{i}) = {v}")));
                }
            }
        }
        for j in 0..k {
            let sum = self.column_sum(j);
            if (sum - 1.0).abs() > COLUMN_TOL {
                return Err(Error::Transition(format!("column {j} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `T[noisy][true_class]`.
    pub fn get(&self, noisy: usize, true_class: usize) -> f64 {
        self.entries[noisy * self.classes + true_class]
    }

    pub fn row(&self, noisy: usize) -> &[f64] {
        &self.entries[noisy * self.classes..(noisy + 1) * self.classes]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.classes).map(<[f64]>::to_vec).collect()
    }

    pub fn column_sum(&self, true_class: usize) -> f64 {
        (0..self.classes).map(|i| self.get(i, true_class)).sum()
    }

    /// Off-diagonal row sum `T_{i·}`.
    pub fn row_sum(&self, noisy: usize) -> f64 {
        self.row(noisy)
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != noisy)
            .map(|(_, v)| v)
            .sum()
    }

    /// K header-less rows of K comma-separated decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.entries.chunks(self.classes) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: n + 1,
                        message: format!("bad number {cell:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// `T` with the zero diagonal and every off-diagonal `1/(K-1)`.
pub fn init_transition(classes: usize) -> Result<TransitionMatrix> {
    TransitionMatrix::init(classes)
}

fn check_inputs(probs_y: &[f64], p_z1: f64, t: &TransitionMatrix, noisy: usize) -> Result<()> {
    if probs_y.len() != t.classes() {
        return Err(Error::Shape(format!(
            "{} class probabilities for a {}-class transition matrix",
            probs_y.len(),
            t.classes()
        )));
    }
    if noisy >= t.classes() {
        return Err(Error::Index {
            index: noisy,
            len: t.classes(),
        });
    }
    if !(0.0..=1.0).contains(&p_z1) {
        return Err(Error::Argument(format!("p(z=1|x) = {p_z1} outside [0, 1]")));
    }
    Ok(())
}

/// `p(ŷ|x) = p(z=1|x)·p(y=ŷ|x) + p(z=0|x)·Σ_{k≠î} T[î][k]·p(y=k|x)`.
pub fn marginal_noisy_prob(probs_y: &[f64], p_z1: f64, t: &TransitionMatrix, noisy: usize) -> Result<f64> {
    check_inputs(probs_y, p_z1, t, noisy)?;
    Ok(marginal_unchecked(probs_y, p_z1, t, noisy))
}

fn marginal_unchecked(probs_y: &[f64], p_z1: f64, t: &TransitionMatrix, noisy: usize) -> f64 {
    let flipped: f64 = t
        .row(noisy)
        .iter()
        .zip(probs_y)
        .enumerate()
        .filter(|&(k, _)| k != noisy)
        .map(|(_, (tv, p))| tv * p)
        .sum();
    p_z1 * probs_y[noisy] + (1.0 - p_z1) * flipped
}

/// Joint posterior over `(y, z)` for one instance. Only `(y=ŷ, z=1)` and
/// `(y=e_k, z=0)` for `k ≠ î` can carry mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub noisy: usize,
    pub p_correct: f64,
    /// `p(y=e_k, z=0 | ŷ, x)`; the entry at the noisy index is always 0.
    pub p_wrong: Vec<f64>,
    pub normalizer: f64,
}

impl PosteriorRecord {
    pub fn classes(&self) -> usize {
        self.p_wrong.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.p_correct + self.p_wrong.iter().sum::<f64>()
    }
}

pub fn e_step(probs_y: &[f64], p_z1: f64, t: &TransitionMatrix, noisy: usize) -> Result<PosteriorRecord> {
    check_inputs(probs_y, p_z1, t, noisy)?;
    let c = marginal_unchecked(probs_y, p_z1, t, noisy);
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::DegeneratePosterior(c));
    }
    let p_z0 = 1.0 - p_z1;
    let p_wrong = (0..t.classes())
        .map(|k| {
            if k == noisy {
                0.0
            } else {
                probs_y[k] * p_z0 * t.get(noisy, k) / c
            }
        })
        .collect();
    Ok(PosteriorRecord {
        noisy,
        p_correct: probs_y[noisy] * p_z1 / c,
        p_wrong,
        normalizer: c,
    })
}

/// Per-noisy-class accumulators of the `z = 0` posterior mass:
/// `S[i][k] = Σ_{n: ŷ_n = i} p(y=e_k, z=0 | ŷ_n, x_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    classes: usize,
    sums: Vec<f64>,
    count: usize,
}

impl SufficientStats {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            sums: vec![0.0; classes * classes],
            count: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, noisy: usize, true_class: usize) -> f64 {
        self.sums[noisy * self.classes + true_class]
    }

    pub fn add(&mut self, record: &PosteriorRecord) -> Result<()> {
        if record.classes() != self.classes {
            return Err(Error::Shape(format!(
                "posterior over {} classes added to {}-class statistics",
                record.classes(),
                self.classes
            )));
        }
        let row = &mut self.sums[record.noisy * self.classes..(record.noisy + 1) * self.classes];
        for (k, (dst, p)) in row.iter_mut().zip(&record.p_wrong).enumerate() {
            if k != record.noisy {
                *dst += p;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &SufficientStats) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class statistics into {}-class statistics",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }
}

pub fn accumulate_stats<'a>(
    classes: usize,
    posteriors: impl IntoIterator<Item = &'a PosteriorRecord>,
) -> Result<SufficientStats> {
    let mut stats = SufficientStats::new(classes);
    for record in posteriors {
        stats.add(record)?;
    }
    Ok(stats)
}

/// Closed-form maximizer of `Q(T|T_t)` under the column constraints:
/// `T[i][k] = S[i][k] / Σ_{i'≠k} S[i'][k]`. Columns without any mass keep
/// their previous values.
pub fn m_step(stats: &SufficientStats, prev: &TransitionMatrix) -> Result<TransitionMatrix> {
    let k = stats.classes;
    if prev.classes() != k {
        return Err(Error::Shape(format!(
            "{k}-class statistics with a {}-class transition matrix",
            prev.classes()
        )));
    }
    let mut entries = vec![0.0; k * k];
    for col in 0..k {
        let denom: f64 = (0..k).filter(|&i| i != col).map(|i| stats.get(i, col)).sum();
        for row in 0..k {
            if row == col {
                continue;
            }
            entries[row * k + col] = if denom > 0.0 {
                stats.get(row, col) / denom
            } else {
                prev.get(row, col)
            };
        }
    }
    Ok(TransitionMatrix { classes: k, entries })
}

/// The `T`-dependent part of the EM objective,
/// `Σ_n Σ_{k≠î} p(y=e_k, z=0 | ŷ_n, x_n)·log T[î][k]`.
///
/// Terms with zero weight are skipped. A positive weight on a zero entry
/// makes the value `-∞`; `zero_entry_hits` counts such terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValue {
    pub value: f64,
    pub zero_entry_hits: usize,
}

pub fn q_value(posteriors: &[PosteriorRecord], t: &TransitionMatrix) -> Result<QValue> {
    let mut value = 0.0;
    let mut zero_entry_hits = 0;
    for record in posteriors {
        if record.classes() != t.classes() {
            return Err(Error::Shape(format!(
                "posterior over {} classes scored against {}-class matrix",
                record.classes(),
                t.classes()
            )));
        }
        for (k, &weight) in record.p_wrong.iter().enumerate() {
            if k == record.noisy || weight == 0.0 {
                continue;
            }
            let entry = t.get(record.noisy, k);
            if entry > 0.0 {
                value += weight * entry.ln();
            } else {
                zero_entry_hits += 1;
            }
        }
    }
    if zero_entry_hits > 0 {
        value = f64::NEG_INFINITY;
    }
    Ok(QValue { value, zero_entry_hits })
}

/// Value and gradients of the explicit loss for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    pub grad_z_logit: f64,
    pub probs_y: Vec<f64>,
    pub p_z1: f64,
}

/// Upper bound on `-log p(ŷ|x)`:
///
/// `σ(z)·XE(h, î) + (1-σ(z))·{ Σ_{k≠î} (T[î][k]/T_{î·})·XE(h, k) - log T_{î·} }`
///
/// `T` is a constant here; no gradient flows into it.
pub fn explicit_loss(logits: &[f64], z_logit: f64, noisy: usize, t: &TransitionMatrix) -> Result<ExplicitLoss> {
    let k = logits.len();
    if k != t.classes() {
        return Err(Error::Shape(format!(
            "{k} logits for a {}-class transition matrix",
            t.classes()
        )));
    }
    if noisy >= k {
        return Err(Error::Index { index: noisy, len: k });
    }
    let row_sum = t.row_sum(noisy);
    if !(row_sum > 0.0) {
        return Err(Error::DegenerateRow { row: noisy, sum: row_sum });
    }
    let log_probs = log_softmax(logits);
    let probs_y: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
    let p_z1 = sigmoid_scalar(z_logit);
    let p_z0 = sigmoid_scalar(-z_logit);

    let correct_term = -log_probs[noisy];
    let mut flip_weights = vec![0.0; k];
    let mut flipped_term = -row_sum.ln();
    for (j, w) in flip_weights.iter_mut().enumerate() {
        if j != noisy {
            *w = t.get(noisy, j) / row_sum;
            flipped_term -= *w * log_probs[j];
        }
    }
    let loss = p_z1 * correct_term + p_z0 * flipped_term;

    // ∂/∂h = p - [σ·e_î + (1-σ)·w]
    let grad_logits = (0..k)
        .map(|j| {
            let target = if j == noisy { p_z1 } else { p_z0 * flip_weights[j] };
            probs_y[j] - target
        })
        .collect();
    let grad_z_logit = p_z1 * p_z0 * (correct_term - flipped_term);

    Ok(ExplicitLoss {
        loss,
        grad_logits,
        grad_z_logit,
        probs_y,
        p_z1,
    })
}
