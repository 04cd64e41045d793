//! Energy scores over classifier logits.
//!
//! Scores are linear-scale sums of exponentiated logits. Every exponential is
//! taken after a max-shift, and a result that cannot be represented as a
//! finite positive `f64` is reported as [`Error::Range`] instead of leaking
//! `inf` or `0` into downstream statistics.

use crate::linalg::{compensated_sum, Matrix};
use crate::{Error, Result};

/// Classifier outputs for one sample: `k >= 2` finite logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit {j} is not finite ({})",
                values[j]
            )));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest logit (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// One training batch: ID rows followed by outlier rows, sharing `k` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    id_rows: Matrix,
    out_rows: Matrix,
}

impl LogitBatch {
    /// Either part may be empty here; the DNE losses require both to be non-empty.
    pub fn new(id_rows: Matrix, out_rows: Matrix) -> Result<Self> {
        let k = if id_rows.rows() > 0 {
            id_rows.cols()
        } else {
            out_rows.cols()
        };
        if id_rows.rows() > 0 && out_rows.rows() > 0 && id_rows.cols() != out_rows.cols() {
            return Err(Error::Shape {
                expected: id_rows.cols(),
                found: out_rows.cols(),
            });
        }
        if id_rows.rows() + out_rows.rows() > 0 && k < 2 {
            return Err(Error::InvalidInput(format!(
                "a logit batch needs at least 2 classes, got {k}"
            )));
        }
        if !id_rows.all_finite() || !out_rows.all_finite() {
            return Err(Error::InvalidInput("non-finite logit in batch".into()));
        }
        Ok(Self { id_rows, out_rows })
    }

    pub fn id_rows(&self) -> &Matrix {
        &self.id_rows
    }

    pub fn out_rows(&self) -> &Matrix {
        &self.out_rows
    }

    pub fn b_in(&self) -> usize {
        self.id_rows.rows()
    }

    pub fn b_out(&self) -> usize {
        self.out_rows.rows()
    }

    pub fn k(&self) -> usize {
        if self.id_rows.rows() > 0 {
            self.id_rows.cols()
        } else {
            self.out_rows.cols()
        }
    }

    /// All rows stacked, ID first.
    pub fn stacked(&self) -> Matrix {
        if self.id_rows.rows() == 0 {
            return self.out_rows.clone();
        }
        if self.out_rows.rows() == 0 {
            return self.id_rows.clone();
        }
        self.id_rows
            .vstack(&self.out_rows)
            .expect("column counts checked at construction")
    }
}

/// Batch-normalized energies `F_j(x_i)`: each column of exponentiated logits
/// divided by its sum over every row of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEnergyMatrix {
    values: Matrix,
    n_id: usize,
}

impl NormalizedEnergyMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn k(&self) -> usize {
        self.values.cols()
    }

    /// Number of leading rows that came from the ID part of the batch.
    pub fn n_id(&self) -> usize {
        self.n_id
    }

    /// Row indices of the ID part.
    pub fn id_indices(&self) -> std::ops::Range<usize> {
        0..self.n_id
    }

    /// Row indices of the outlier part.
    pub fn out_indices(&self) -> std::ops::Range<usize> {
        self.n_id..self.values.rows()
    }
}

/// Computes `exp(max) * sum_j exp(f_j - max) * weight_j`, falling back to the
/// log domain only when `exp(max)` alone overflows.
fn shifted_energy(logits: &[f64], weight: impl Fn(usize) -> f64) -> Result<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled = compensated_sum(
        logits
            .iter()
            .enumerate()
            .map(|(j, &f)| (f - max).exp() * weight(j)),
    );
    let scale = max.exp();
    let value = if scale.is_finite() {
        scale * scaled
    } else {
        (max + scaled.ln()).exp()
    };
    if !value.is_finite() {
        return Err(Error::Range(format!(
            "energy overflows f64 (max logit {max})"
        )));
    }
    if value <= 0.0 {
        return Err(Error::Range(format!(
            "energy underflows to zero (max logit {max})"
        )));
    }
    Ok(value)
}

/// Global energy `sum_j exp(f_j)`.
pub fn global_energy(logits: &LogitVector) -> Result<f64> {
    shifted_energy(logits.values(), |_| 1.0)
}

/// Calibrated energy `sum_j exp(f_j) / (1 + p_j)` against an outlier distribution.
pub fn calibrated_energy(logits: &LogitVector, p_out: &[f64]) -> Result<f64> {
    if p_out.len() != logits.k() {
        return Err(Error::Shape {
            expected: logits.k(),
            found: p_out.len(),
        });
    }
    if let Some(p) = p_out.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "outlier distribution entries must be finite and >= 0, got {p}"
        )));
    }
    shifted_energy(logits.values(), |j| 1.0 / (1.0 + p_out[j]))
}

/// Column-wise normalization of `exp(logits)` over all rows of `logits`.
///
/// Each column is shifted by its own maximum before exponentiation. Shared
/// with the DNE gradient, which relies on the same row layout.
pub(crate) fn normalize_columns(logits: &Matrix) -> Matrix {
    let (n, k) = (logits.rows(), logits.cols());
    let mut out = Matrix::zeros(n, k);
    for j in 0..k {
        let max = (0..n)
            .map(|i| logits[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            out[(i, j)] = (logits[(i, j)] - max).exp();
        }
        let z = compensated_sum((0..n).map(|i| out[(i, j)]));
        for i in 0..n {
            out[(i, j)] /= z;
        }
    }
    out
}

/// Batch energy normalization over the combined ID and outlier rows.
pub fn batch_energy_normalize(batch: &LogitBatch) -> Result<NormalizedEnergyMatrix> {
    if batch.b_in() + batch.b_out() == 0 {
        return Err(Error::InvalidInput(
            "batch energy normalization needs at least one row".into(),
        ));
    }
    Ok(NormalizedEnergyMatrix {
        values: normalize_columns(&batch.stacked()),
        n_id: batch.b_in(),
    })
}

/// Class-wise normalized energy: the mass of column `class` held by `rows`.
pub fn class_energy(norm: &NormalizedEnergyMatrix, rows: &[usize], class: usize) -> Result<f64> {
    if class >= norm.k() {
        return Err(Error::Index {
            index: class,
            len: norm.k(),
        });
    }
    if let Some(&i) = rows.iter().find(|&&i| i >= norm.rows()) {
        return Err(Error::Index {
            index: i,
            len: norm.rows(),
        });
    }
    Ok(compensated_sum(rows.iter().map(|&i| norm.values[(i, class)])))
}

/// Sample-wise normalized energy: the total mass of row `row` over all classes.
pub fn sample_energy(norm: &NormalizedEnergyMatrix, row: usize) -> Result<f64> {
    if row >= norm.rows() {
        return Err(Error::Index {
            index: row,
            len: norm.rows(),
        });
    }
    Ok(compensated_sum(norm.values.row(row).iter().copied()))
}
