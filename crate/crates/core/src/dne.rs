//! Dual-normalized energy objective.
//!
//! Both losses read the batch-normalized energies `F` of the stacked
//! ID + outlier batch. The class-wise term pushes every class's ID mass
//! `C_j(x_in)` up to `m_in_c` and its outlier mass `C_j(x_out)` down to
//! `m_out_c`; the sample-wise term pushes each ID row's mass `S(x)` up to
//! `m_in_s = k / b_in` and each outlier row's mass down to `m_out_s`.
//! Because every column of `F` sums to one, these margins are fixed by
//! `(k, b_in)` alone.
//!
//! Class terms are batch sums (no averaging); sample terms are averaged over
//! the ID rows and the outlier rows separately. Cross-entropy is averaged over
//! the ID rows.

use serde::{Deserialize, Serialize};

use crate::energy::{normalize_columns, LogitBatch};
use crate::linalg::{compensated_sum, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DneConfig {
    k: usize,
    b_in: usize,
    b_out: usize,
    pub m_in_c: f64,
    pub m_out_c: f64,
    m_in_s: f64,
    pub m_out_s: f64,
    m_in_s_override: bool,
    /// Multiplier on the DNE part of the total loss. Not part of the method;
    /// kept at 1 except for ablations.
    pub dne_weight: f64,
}

impl DneConfig {
    pub fn new(k: usize, b_in: usize, b_out: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("k must be >= 2, got {k}")));
        }
        if b_in == 0 || b_out == 0 {
            return Err(Error::InvalidInput(format!(
                "DNE needs non-empty ID and outlier batches (b_in {b_in}, b_out {b_out})"
            )));
        }
        Ok(Self {
            k,
            b_in,
            b_out,
            m_in_c: 1.0,
            m_out_c: 0.0,
            m_in_s: k as f64 / b_in as f64,
            m_out_s: 0.0,
            m_in_s_override: false,
            dne_weight: 1.0,
        })
    }

    /// Default margins for the shape of `batch`.
    pub fn for_batch(batch: &LogitBatch) -> Result<Self> {
        Self::new(batch.k(), batch.b_in(), batch.b_out())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn b_in(&self) -> usize {
        self.b_in
    }

    pub fn b_out(&self) -> usize {
        self.b_out
    }

    pub fn m_in_s(&self) -> f64 {
        self.m_in_s
    }

    /// Re-targets the config to a new batch shape. `m_in_s` follows `k / b_in`
    /// unless it was explicitly overridden.
    pub fn with_shape(mut self, k: usize, b_in: usize, b_out: usize) -> Result<Self> {
        let fresh = Self::new(k, b_in, b_out)?;
        self.k = k;
        self.b_in = b_in;
        self.b_out = b_out;
        if !self.m_in_s_override {
            self.m_in_s = fresh.m_in_s;
        }
        Ok(self)
    }

    pub fn with_m_in_s(mut self, m_in_s: f64) -> Self {
        self.m_in_s = m_in_s;
        self.m_in_s_override = true;
        self
    }

    pub fn with_dne_weight(mut self, w: f64) -> Self {
        self.dne_weight = w;
        self
    }

    fn check(&self, batch: &LogitBatch) -> Result<()> {
        if batch.b_in() == 0 || batch.b_out() == 0 {
            return Err(Error::InvalidInput(format!(
                "DNE needs non-empty ID and outlier rows (b_in {}, b_out {})",
                batch.b_in(),
                batch.b_out()
            )));
        }
        for (expected, found) in [
            (self.k, batch.k()),
            (self.b_in, batch.b_in()),
            (self.b_out, batch.b_out()),
        ] {
            if expected != found {
                return Err(Error::Shape { expected, found });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dne_c: f64,
    pub dne_s: f64,
}

impl LossBreakdown {
    pub fn dne(&self) -> f64 {
        self.dne_c + self.dne_s
    }
}

#[inline]
fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Normalized energies plus the class and sample masses derived from them.
struct Masses {
    f: Matrix,
    c_in: Vec<f64>,
    c_out: Vec<f64>,
    s: Vec<f64>,
}

fn masses(batch: &LogitBatch) -> Masses {
    let f = normalize_columns(&batch.stacked());
    let b_in = batch.b_in();
    let n = f.rows();
    let k = f.cols();
    let c_in = (0..k)
        .map(|j| compensated_sum((0..b_in).map(|i| f[(i, j)])))
        .collect();
    let c_out = (0..k)
        .map(|j| compensated_sum((b_in..n).map(|i| f[(i, j)])))
        .collect();
    let s = f
        .iter_rows()
        .map(|r| compensated_sum(r.iter().copied()))
        .collect();
    Masses { f, c_in, c_out, s }
}

fn class_term(m: &Masses, cfg: &DneConfig) -> f64 {
    compensated_sum(m.c_in.iter().zip(&m.c_out).map(|(&ci, &co)| {
        hinge(cfg.m_in_c - ci).powi(2) + hinge(co - cfg.m_out_c).powi(2)
    }))
}

fn sample_term(m: &Masses, cfg: &DneConfig) -> f64 {
    let (id, out) = m.s.split_at(cfg.b_in);
    let id_mean = compensated_sum(id.iter().map(|&s| hinge(cfg.m_in_s - s).powi(2))) / id.len() as f64;
    let out_mean =
        compensated_sum(out.iter().map(|&s| hinge(s - cfg.m_out_s).powi(2))) / out.len() as f64;
    id_mean + out_mean
}

/// Class-wise normalized energy loss.
pub fn dne_c_loss(batch: &LogitBatch, cfg: &DneConfig) -> Result<f64> {
    cfg.check(batch)?;
    Ok(class_term(&masses(batch), cfg))
}

/// Sample-wise normalized energy loss.
pub fn dne_s_loss(batch: &LogitBatch, cfg: &DneConfig) -> Result<f64> {
    cfg.check(batch)?;
    Ok(sample_term(&masses(batch), cfg))
}

fn check_labels(labels: &[usize], cfg: &DneConfig) -> Result<()> {
    if labels.len() != cfg.b_in {
        return Err(Error::Shape {
            expected: cfg.b_in,
            found: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cfg.k) {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {} classes",
            cfg.k
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the rows of `logits` and its gradient.
pub fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            expected: logits.rows(),
            found: labels.len(),
        });
    }
    if logits.rows() == 0 {
        return Err(Error::InvalidInput("cross-entropy over an empty batch".into()));
    }
    let k = logits.cols();
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {k} classes"
        )));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut per_row = Vec::with_capacity(logits.rows());
    for (i, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = compensated_sum(row.iter().map(|f| (f - max).exp()));
        let lse = max + z.ln();
        per_row.push(lse - row[y]);
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = (row[j] - lse).exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((compensated_sum(per_row) / n, grad))
}

/// Cross-entropy on the ID rows plus both DNE terms.
pub fn total_loss(batch: &LogitBatch, id_labels: &[usize], cfg: &DneConfig) -> Result<LossBreakdown> {
    cfg.check(batch)?;
    check_labels(id_labels, cfg)?;
    let (ce, _) = cross_entropy_with_grad(batch.id_rows(), id_labels)?;
    let m = masses(batch);
    let dne_c = class_term(&m, cfg);
    let dne_s = sample_term(&m, cfg);
    Ok(LossBreakdown {
        total: ce + cfg.dne_weight * (dne_c + dne_s),
        ce,
        dne_c,
        dne_s,
    })
}

/// Gradient of the weighted DNE part with respect to the stacked logits.
fn dne_grad(m: &Masses, cfg: &DneConfig) -> Matrix {
    let n = m.f.rows();
    let k = m.f.cols();
    let w = cfg.dne_weight;
    let b_in = cfg.b_in;

    // upstream dL/dF
    let mut g_f = Matrix::zeros(n, k);
    for i in 0..n {
        let is_id = i < b_in;
        let sample = if is_id {
            -2.0 * hinge(cfg.m_in_s - m.s[i]) / b_in as f64
        } else {
            2.0 * hinge(m.s[i] - cfg.m_out_s) / cfg.b_out as f64
        };
        for j in 0..k {
            let class = if is_id {
                -2.0 * hinge(cfg.m_in_c - m.c_in[j])
            } else {
                2.0 * hinge(m.c_out[j] - cfg.m_out_c)
            };
            g_f[(i, j)] = w * (class + sample);
        }
    }

    // dF_ij/df_lj = F_ij (delta_il - F_lj), columns are independent
    let mut grad = Matrix::zeros(n, k);
    for j in 0..k {
        let inner = compensated_sum((0..n).map(|i| g_f[(i, j)] * m.f[(i, j)]));
        for l in 0..n {
            grad[(l, j)] = m.f[(l, j)] * (g_f[(l, j)] - inner);
        }
    }
    grad
}

/// Gradient of the DNE part alone (both hinge losses, weighted).
pub fn dne_loss_grad(batch: &LogitBatch, cfg: &DneConfig) -> Result<Matrix> {
    cfg.check(batch)?;
    Ok(dne_grad(&masses(batch), cfg))
}

/// Loss breakdown and `dL_total / d logits` for the stacked batch (ID rows first).
pub fn total_loss_and_grad(
    batch: &LogitBatch,
    id_labels: &[usize],
    cfg: &DneConfig,
) -> Result<(LossBreakdown, Matrix)> {
    cfg.check(batch)?;
    check_labels(id_labels, cfg)?;
    let (ce, ce_grad) = cross_entropy_with_grad(batch.id_rows(), id_labels)?;
    let m = masses(batch);
    let dne_c = class_term(&m, cfg);
    let dne_s = sample_term(&m, cfg);
    let mut grad = dne_grad(&m, cfg);
    for i in 0..cfg.b_in {
        for (g, c) in grad.row_mut(i).iter_mut().zip(ce_grad.row(i)) {
            *g += c;
        }
    }
    let loss = LossBreakdown {
        total: ce + cfg.dne_weight * (dne_c + dne_s),
        ce,
        dne_c,
        dne_s,
    };
    Ok((loss, grad))
}

/// `dL_total / d logits`, rows ordered ID first.
pub fn total_loss_grad(batch: &LogitBatch, id_labels: &[usize], cfg: &DneConfig) -> Result<Matrix> {
    total_loss_and_grad(batch, id_labels, cfg).map(|(_, g)| g)
}
