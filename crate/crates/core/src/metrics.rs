//! OOD detection metrics. Scores are "higher = more ID-like".
//!
//! - AUROC is the Mann–Whitney statistic with half credit for ties, computed
//!   from integer win/tie counts.
//! - AP is non-interpolated: each positive contributes the precision at the
//!   threshold equal to its own score, so tied samples share one threshold.
//! - FPR@TPR picks the largest threshold `t` that keeps at least the target
//!   fraction of ID scores `>= t`, and reports the OOD fraction `>= t`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
    pub predicted_class: Option<usize>,
    pub true_class: Option<usize>,
}

impl ScoredSample {
    pub fn new(score: f64, is_id: bool) -> Self {
        Self {
            score,
            is_id,
            predicted_class: None,
            true_class: None,
        }
    }

    pub fn with_classes(mut self, predicted: usize, truth: usize) -> Self {
        self.predicted_class = Some(predicted);
        self.true_class = Some(truth);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub ap_in: f64,
    pub ap_out: f64,
    pub fpr_at_95tpr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
}

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

fn check_scores(samples: &[ScoredSample]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {}", s.score)));
    }
    Ok(())
}

fn require_both(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    check_scores(samples)?;
    let n_id = samples.iter().filter(|s| s.is_id).count();
    let n_ood = samples.len() - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(Error::UndefinedMetric(format!(
            "needs ID and OOD samples, got {n_id} ID and {n_ood} OOD"
        )));
    }
    Ok((n_id, n_ood))
}

/// `(2 * wins + ties)` over all ID/OOD pairs, where a win is an ID score above an OOD score.
fn doubled_mann_whitney(samples: &[ScoredSample]) -> u128 {
    let mut sorted: Vec<(f64, bool)> = samples.iter().map(|s| (s.score, s.is_id)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ood_below = 0u128;
    let mut doubled = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut id_here, mut ood_here) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                id_here += 1;
            } else {
                ood_here += 1;
            }
            j += 1;
        }
        doubled += id_here * (2 * ood_below + ood_here);
        ood_below += ood_here;
        i = j;
    }
    doubled
}

pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (n_id, n_ood) = require_both(samples)?;
    let doubled = doubled_mann_whitney(samples);
    Ok(doubled as f64 / (2 * n_id as u128 * n_ood as u128) as f64)
}

/// Step AP. For [`Positive::Ood`] scores are negated before ranking.
pub fn average_precision(samples: &[ScoredSample], positive: Positive) -> Result<f64> {
    check_scores(samples)?;
    let mut ranked: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| match positive {
            Positive::Id => (s.score, s.is_id),
            Positive::Ood => (-s.score, !s.is_id),
        })
        .collect();
    let n_pos = ranked.iter().filter(|r| r.1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("no positive samples".into()));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut sum = 0.0;
    let (mut seen, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let mut j = i;
        let mut pos_here = 0usize;
        while j < ranked.len() && ranked[j].0 == ranked[i].0 {
            pos_here += usize::from(ranked[j].1);
            j += 1;
        }
        seen += j - i;
        tp += pos_here;
        let precision = tp as f64 / seen as f64;
        for _ in 0..pos_here {
            sum += precision;
        }
        i = j;
    }
    Ok(sum / n_pos as f64)
}

/// FPR of OOD samples at the tightest threshold keeping ID TPR `>= tpr_target`.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    let (n_id, n_ood) = require_both(samples)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "TPR target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let mut id_scores: Vec<f64> = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
    id_scores.sort_by(|a, b| b.total_cmp(a));
    // walk distinct ID scores downward until enough ID mass clears the threshold
    let mut threshold = id_scores[n_id - 1];
    let mut i = 0;
    while i < n_id {
        let mut j = i;
        while j < n_id && id_scores[j] == id_scores[i] {
            j += 1;
        }
        if j as f64 / n_id as f64 >= tpr_target {
            threshold = id_scores[i];
            break;
        }
        i = j;
    }
    let false_pos = samples
        .iter()
        .filter(|s| !s.is_id && s.score >= threshold)
        .count();
    Ok(false_pos as f64 / n_ood as f64)
}

/// Fraction of ID samples whose predicted class matches the true class.
pub fn accuracy(samples: &[ScoredSample]) -> Result<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for s in samples.iter().filter(|s| s.is_id) {
        match (s.predicted_class, s.true_class) {
            (Some(p), Some(t)) => {
                n += 1;
                correct += usize::from(p == t);
            }
            _ => {
                return Err(Error::InvalidInput(
                    "accuracy needs predicted and true classes on every ID sample".into(),
                ))
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no ID samples for accuracy".into()));
    }
    Ok(correct as f64 / n as f64)
}

impl MetricReport {
    /// All four detection metrics, plus accuracy when every ID sample carries classes.
    pub fn evaluate(samples: &[ScoredSample]) -> Result<Self> {
        let labelled = samples
            .iter()
            .filter(|s| s.is_id)
            .all(|s| s.predicted_class.is_some() && s.true_class.is_some());
        Ok(Self {
            auroc: auroc(samples)?,
            ap_in: average_precision(samples, Positive::Id)?,
            ap_out: average_precision(samples, Positive::Ood)?,
            fpr_at_95tpr: fpr_at_tpr(samples, DEFAULT_TPR)?,
            acc: if labelled { Some(accuracy(samples)?) } else { None },
        })
    }
}
