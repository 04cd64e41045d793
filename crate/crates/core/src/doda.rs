//! Dynamic outlier distribution adaptation.
//!
//! An [`OutlierDistribution`] starts as the mean exponentiated logits of the
//! auxiliary outliers. During inference every test sample is checked against
//! a Z-score threshold fitted offline on training-ID global energies; samples
//! below it are folded into the distribution as a running mean, and every
//! sample is then scored with the calibrated energy against the updated
//! distribution. Adaptation always precedes scoring.
//!
//! State is `O(k)`: the per-class values and the count of folded samples.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{calibrated_energy, global_energy, LogitVector};
use crate::linalg::compensated_sum;
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 3.0;
pub const DEFAULT_VIRTUAL_COUNT: u64 = 1;

/// Offline OOD filter: mean and sample standard deviation of training-ID
/// global energy, and the threshold `r = mu_in - alpha * sigma_in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyStats {
    mu_in: f64,
    sigma_in: f64,
    alpha: f64,
    r: f64,
}

impl EnergyStats {
    pub fn new(mu_in: f64, sigma_in: f64, alpha: f64) -> Result<Self> {
        if !mu_in.is_finite() || !sigma_in.is_finite() || sigma_in < 0.0 {
            return Err(Error::InvalidInput(format!(
                "energy statistics must be finite with sigma >= 0 (mu {mu_in}, sigma {sigma_in})"
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self {
            mu_in,
            sigma_in,
            alpha,
            r: mu_in - alpha * sigma_in,
        })
    }

    pub fn mu_in(&self) -> f64 {
        self.mu_in
    }

    pub fn sigma_in(&self) -> f64 {
        self.sigma_in
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The threshold `R`. A sample is flagged as OOD iff its global energy is strictly below it.
    pub fn threshold(&self) -> f64 {
        self.r
    }

    /// Same moments, different multiplier.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.mu_in, self.sigma_in, alpha)
    }

    pub fn flags_as_ood(&self, global_energy: f64) -> bool {
        global_energy < self.r
    }
}

/// Fits the filter from precomputed global energies.
pub fn fit_energy_stats_from_energies(energies: &[f64], alpha: f64) -> Result<EnergyStats> {
    if energies.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "fitting energy statistics needs at least 2 samples, got {}",
            energies.len()
        )));
    }
    if let Some(g) = energies.iter().find(|g| !g.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite energy {g}")));
    }
    let n = energies.len() as f64;
    let mu = compensated_sum(energies.iter().copied()) / n;
    let var = compensated_sum(energies.iter().map(|g| (g - mu) * (g - mu))) / (n - 1.0);
    EnergyStats::new(mu, var.sqrt(), alpha)
}

/// Fits the filter from training-ID logits.
pub fn fit_energy_stats(train_id_logits: &[LogitVector], alpha: f64) -> Result<EnergyStats> {
    let energies = train_id_logits
        .iter()
        .enumerate()
        .map(|(i, x)| global_energy(x).map_err(|e| Error::at_sample(i, e)))
        .collect::<Result<Vec<_>>>()?;
    fit_energy_stats_from_energies(&energies, alpha)
}

/// The adapted outlier energy distribution `P^out` and its sample count `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierDistribution {
    values: Vec<f64>,
    m: u64,
}

impl OutlierDistribution {
    pub fn new(values: Vec<f64>, m: u64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "outlier distribution needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "outlier distribution entries must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self { values, m })
    }

    /// All-zero distribution with no observations; its calibrated score is the global energy.
    pub fn zeros(k: usize) -> Result<Self> {
        Self::new(vec![0.0; k], 0)
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> u64 {
        self.m
    }

    /// Calibrated energy of `logits` against this (frozen) distribution.
    pub fn score(&self, logits: &LogitVector) -> Result<f64> {
        calibrated_energy(logits, &self.values)
    }

    fn check_k(&self, logits: &LogitVector) -> Result<()> {
        if logits.k() != self.k() {
            return Err(Error::Shape {
                expected: self.k(),
                found: logits.k(),
            });
        }
        Ok(())
    }

    /// Folds one observation into the running mean. Nothing is modified on error.
    fn absorb(&mut self, logits: &LogitVector) -> Result<()> {
        let exps: Vec<f64> = logits.values().iter().map(|f| f.exp()).collect();
        if exps.iter().any(|e| !e.is_finite()) {
            return Err(Error::Range(
                "exponentiated logit overflows during adaptation".into(),
            ));
        }
        let m = self.m as f64;
        for (v, e) in self.values.iter_mut().zip(exps) {
            *v = (m * *v + e) / (m + 1.0);
        }
        self.m += 1;
        Ok(())
    }
}

/// Initial distribution: per-class mean of `exp(f_j)` over the outlier set,
/// carried as `virtual_count` pseudo-observations.
///
/// With `virtual_count == 0` the first accepted test sample replaces the
/// initial values entirely; an empty outlier set is then allowed and yields zeros.
pub fn init_outlier_distribution(
    k: usize,
    outlier_logits: &[LogitVector],
    virtual_count: u64,
) -> Result<OutlierDistribution> {
    if outlier_logits.is_empty() {
        if virtual_count > 0 {
            return Err(Error::InsufficientData(
                "initializing the outlier distribution needs at least one outlier sample".into(),
            ));
        }
        return OutlierDistribution::zeros(k);
    }
    if let Some((i, x)) = outlier_logits.iter().enumerate().find(|(_, x)| x.k() != k) {
        return Err(Error::at_sample(
            i,
            Error::Shape {
                expected: k,
                found: x.k(),
            },
        ));
    }
    let n = outlier_logits.len() as f64;
    let mut values = Vec::with_capacity(k);
    for j in 0..k {
        let mean = compensated_sum(outlier_logits.iter().map(|x| x.values()[j].exp())) / n;
        values.push(mean);
    }
    OutlierDistribution::new(values, virtual_count).map_err(|_| {
        Error::Range("outlier mean energy is not representable".into())
    })
}

/// Audit record of one inference step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub sample_index: usize,
    pub accepted: bool,
    pub global_energy: f64,
    pub calibrated_score: f64,
}

fn step(
    state: &mut OutlierDistribution,
    logits: &LogitVector,
    sample_index: usize,
    decide: impl FnOnce(f64) -> bool,
) -> Result<AdaptationEvent> {
    state.check_k(logits)?;
    let g = global_energy(logits)?;
    let accepted = decide(g);
    if accepted {
        state.absorb(logits)?;
    }
    let score = state.score(logits)?;
    Ok(AdaptationEvent {
        sample_index,
        accepted,
        global_energy: g,
        calibrated_score: score,
    })
}

/// One label-free inference step: filter, adapt, then score with the updated state.
pub fn adapt_and_score(
    state: &OutlierDistribution,
    stats: &EnergyStats,
    logits: &LogitVector,
    sample_index: usize,
) -> Result<(OutlierDistribution, f64, AdaptationEvent)> {
    let mut next = state.clone();
    let event = step(&mut next, logits, sample_index, |g| stats.flags_as_ood(g))?;
    Ok((next, event.calibrated_score, event))
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "label probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Like [`adapt_and_score`], but with probability `use_label_probability` the
/// acceptance decision comes from the ground-truth label instead of the filter.
///
/// Exactly one uniform draw is consumed per call, whatever the probability,
/// so runs at different probabilities share their random stream.
pub fn adapt_and_score_oracle<R: Rng + ?Sized>(
    state: &OutlierDistribution,
    stats: &EnergyStats,
    logits: &LogitVector,
    is_true_ood: bool,
    use_label_probability: f64,
    rng: &mut R,
    sample_index: usize,
) -> Result<(OutlierDistribution, f64, AdaptationEvent)> {
    check_probability(use_label_probability)?;
    let use_label = rng.random::<f64>() < use_label_probability;
    let mut next = state.clone();
    let event = step(&mut next, logits, sample_index, |g| {
        if use_label {
            is_true_ood
        } else {
            stats.flags_as_ood(g)
        }
    })?;
    Ok((next, event.calibrated_score, event))
}

/// How the outlier distribution evolves over a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum AdaptMode {
    /// No test-time adaptation: every sample is scored against the initial distribution.
    Frozen,
    /// Label-free adaptation driven by the Z-score filter.
    Filter,
    /// Ground-truth labels drive a random fraction of acceptance decisions.
    /// `use_label_probability = 1` is the oracle model.
    LabelAssisted { use_label_probability: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub logits: LogitVector,
    /// Only read in [`AdaptMode::LabelAssisted`].
    pub is_true_ood: Option<bool>,
}

impl StreamSample {
    pub fn unlabeled(logits: LogitVector) -> Self {
        Self {
            logits,
            is_true_ood: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamOptions {
    pub mode: AdaptMode,
    /// Keep one [`AdaptationEvent`] per sample. Off by default to keep memory `O(k)`.
    pub record_events: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Filter,
            record_events: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub scores: Vec<f64>,
    pub events: Vec<AdaptationEvent>,
    /// Inference steps taken; equals the stream length on success.
    pub steps: usize,
    pub accepted: usize,
    pub state: OutlierDistribution,
}

/// Single pass over a stream of samples.
pub fn run_stream<I>(
    state: OutlierDistribution,
    stats: &EnergyStats,
    stream: I,
    opts: &StreamOptions,
) -> Result<StreamOutcome>
where
    I: IntoIterator<Item = StreamSample>,
{
    try_run_stream(state, stats, stream.into_iter().map(Ok), opts)
}

/// Single pass over a fallible stream (e.g. a file reader). Errors carry the sample index.
pub fn try_run_stream<I>(
    mut state: OutlierDistribution,
    stats: &EnergyStats,
    stream: I,
    opts: &StreamOptions,
) -> Result<StreamOutcome>
where
    I: IntoIterator<Item = Result<StreamSample>>,
{
    let mut rng = match opts.mode {
        AdaptMode::LabelAssisted {
            use_label_probability,
            seed,
        } => {
            check_probability(use_label_probability)?;
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        _ => None,
    };
    let frozen = state.clone();
    let mut out = StreamOutcome {
        scores: Vec::new(),
        events: Vec::new(),
        steps: 0,
        accepted: 0,
        state: frozen.clone(),
    };

    for (index, item) in stream.into_iter().enumerate() {
        let sample = item.map_err(|e| Error::at_sample(index, e))?;
        let event = match opts.mode {
            AdaptMode::Frozen => {
                frozen
                    .check_k(&sample.logits)
                    .and_then(|_| {
                        Ok(AdaptationEvent {
                            sample_index: index,
                            accepted: false,
                            global_energy: global_energy(&sample.logits)?,
                            calibrated_score: frozen.score(&sample.logits)?,
                        })
                    })
            }
            AdaptMode::Filter => step(&mut state, &sample.logits, index, |g| stats.flags_as_ood(g)),
            AdaptMode::LabelAssisted {
                use_label_probability,
                ..
            } => {
                let rng = rng.as_mut().expect("seeded above");
                let use_label = rng.random::<f64>() < use_label_probability;
                match (use_label, sample.is_true_ood) {
                    (true, None) => Err(Error::InvalidInput(
                        "label-assisted adaptation needs ground-truth OOD labels".into(),
                    )),
                    (true, Some(is_ood)) => step(&mut state, &sample.logits, index, |_| is_ood),
                    (false, _) => {
                        step(&mut state, &sample.logits, index, |g| stats.flags_as_ood(g))
                    }
                }
            }
        }
        .map_err(|e| Error::at_sample(index, e))?;

        out.steps += 1;
        out.accepted += usize::from(event.accepted);
        out.scores.push(event.calibrated_score);
        if opts.record_events {
            out.events.push(event);
        }
    }
    out.state = match opts.mode {
        AdaptMode::Frozen => frozen,
        _ => state,
    };
    Ok(out)
}

/// Checkpoint of an adaptation run: the distribution plus the filter that drives it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub k: usize,
    pub m: u64,
    pub values: Vec<f64>,
    pub mu_in: f64,
    pub sigma_in: f64,
    pub alpha: f64,
}

impl StateSnapshot {
    pub fn capture(state: &OutlierDistribution, stats: &EnergyStats) -> Self {
        Self {
            k: state.k(),
            m: state.count(),
            values: state.values().to_vec(),
            mu_in: stats.mu_in(),
            sigma_in: stats.sigma_in(),
            alpha: stats.alpha(),
        }
    }

    pub fn restore(&self) -> Result<(OutlierDistribution, EnergyStats)> {
        if self.values.len() != self.k {
            return Err(Error::Shape {
                expected: self.k,
                found: self.values.len(),
            });
        }
        Ok((
            OutlierDistribution::new(self.values.clone(), self.m)?,
            EnergyStats::new(self.mu_in, self.sigma_in, self.alpha)?,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    /// Two-class logits whose global energy is exactly `g`.
    fn with_energy(g: f64) -> LogitVector {
        lv(&[(g / 2.0).ln(), (g / 2.0).ln()])
    }

    #[test]
    fn fit_stats_two_point_examples() {
        let s = fit_energy_stats_from_energies(&[10.0, 10.0], 3.0).unwrap();
        assert_eq!((s.mu_in(), s.sigma_in(), s.threshold()), (10.0, 0.0, 10.0));

        let s = fit_energy_stats_from_energies(&[8.0, 12.0], 3.0).unwrap();
        assert_eq!(s.mu_in(), 10.0);
        assert_relative_eq!(s.sigma_in(), 8f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(s.threshold(), 1.514_718_625_761_429_7, max_relative = 1e-14);
        assert_eq!(s.threshold(), s.mu_in() - s.alpha() * s.sigma_in());
    }

    #[test]
    fn fit_stats_from_logits() {
        let s = fit_energy_stats(&[with_energy(8.0), with_energy(12.0)], DEFAULT_ALPHA).unwrap();
        assert_relative_eq!(s.mu_in(), 10.0, max_relative = 1e-14);
        assert_relative_eq!(s.sigma_in(), 8f64.sqrt(), max_relative = 1e-13);
    }

    #[test]
    fn fit_stats_errors() {
        assert!(matches!(
            fit_energy_stats(&[lv(&[0.0, 0.0])], 3.0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            fit_energy_stats_from_energies(&[1.0, f64::NAN], 3.0),
            Err(Error::InvalidInput(_))
        ));
        let err = fit_energy_stats(&[lv(&[0.0, 0.0]), lv(&[900.0, 0.0])], 3.0).unwrap_err();
        assert!(matches!(err, Error::AtSample { index: 1, .. }));
        assert!(fit_energy_stats_from_energies(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn init_examples() {
        let d = init_outlier_distribution(2, &[lv(&[0.0, 0.0])], 1).unwrap();
        assert_eq!(d.values(), &[1.0, 1.0]);
        assert_eq!(d.count(), 1);

        let d = init_outlier_distribution(
            2,
            &[lv(&[0.0, 0.0]), lv(&[3f64.ln(), 5f64.ln()])],
            DEFAULT_VIRTUAL_COUNT,
        )
        .unwrap();
        assert_relative_eq!(d.values()[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(d.values()[1], 3.0, max_relative = 1e-15);
    }

    #[test]
    fn init_errors_and_empty_literal_mode() {
        assert!(matches!(
            init_outlier_distribution(3, &[], 1),
            Err(Error::InsufficientData(_))
        ));
        let d = init_outlier_distribution(3, &[], 0).unwrap();
        assert_eq!((d.values(), d.count()), (&[0.0, 0.0, 0.0][..], 0));
        assert!(matches!(
            init_outlier_distribution(3, &[lv(&[0.0, 0.0])], 1),
            Err(Error::AtSample { index: 0, .. })
        ));
    }

    #[test]
    fn zero_count_update_replaces_initialization() {
        let state = OutlierDistribution::new(vec![7.0, 9.0], 0).unwrap();
        let stats = EnergyStats::new(100.0, 0.0, 3.0).unwrap();
        let (next, _, event) = adapt_and_score(&state, &stats, &lv(&[0.0, 3f64.ln()]), 0).unwrap();
        assert!(event.accepted);
        assert_eq!(next.values(), &[1.0, 3f64.ln().exp()]);
        assert_relative_eq!(next.values()[1], 3.0, max_relative = 1e-15);
        assert_eq!(next.count(), 1);
    }

    #[test]
    fn one_count_update_averages() {
        let state = OutlierDistribution::new(vec![1.0, 1.0], 1).unwrap();
        let stats = EnergyStats::new(100.0, 0.0, 3.0).unwrap();
        let (next, score, _) =
            adapt_and_score(&state, &stats, &lv(&[3f64.ln(), 5f64.ln()]), 0).unwrap();
        assert_relative_eq!(next.values()[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(next.values()[1], 3.0, max_relative = 1e-15);
        assert_eq!(next.count(), 2);
        // scored after the update: 3/3 + 5/4
        assert_relative_eq!(score, 2.25, max_relative = 1e-14);
    }

    #[test]
    fn rejection_leaves_state_identical() {
        let state = OutlierDistribution::new(vec![0.3, 1.7, 2.9], 4).unwrap();
        let stats = EnergyStats::new(5.0, 1.0, 3.0).unwrap(); // R = 2
        let x = lv(&[0.0, 0.5, 1.0]); // G > 2
        let (next, score, event) = adapt_and_score(&state, &stats, &x, 3).unwrap();
        assert!(!event.accepted);
        assert_eq!(next, state);
        assert_eq!(score, state.score(&x).unwrap());
        assert_eq!(event.sample_index, 3);
    }

    #[test]
    fn threshold_tie_counts_as_id() {
        let stats = EnergyStats::new(2.0, 0.0, 3.0).unwrap();
        let state = OutlierDistribution::new(vec![1.0, 1.0], 1).unwrap();
        let (next, _, event) = adapt_and_score(&state, &stats, &lv(&[0.0, 0.0]), 0).unwrap();
        assert!(!event.accepted);
        assert_eq!(next, state);
    }

    #[test]
    fn dimension_mismatch() {
        let state = OutlierDistribution::new(vec![1.0, 1.0], 1).unwrap();
        let stats = EnergyStats::new(2.0, 0.0, 3.0).unwrap();
        assert!(matches!(
            adapt_and_score(&state, &stats, &lv(&[0.0, 0.0, 0.0]), 0),
            Err(Error::Shape { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn oracle_rejects_id_regardless_of_energy() {
        let state = OutlierDistribution::new(vec![1.0, 1.0], 1).unwrap();
        let stats = EnergyStats::new(1e6, 0.0, 3.0).unwrap(); // filter would accept everything
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..50 {
            let (next, _, event) =
                adapt_and_score_oracle(&state, &stats, &lv(&[0.1, -0.2]), false, 1.0, &mut rng, i)
                    .unwrap();
            assert!(!event.accepted);
            assert_eq!(next, state);
        }
        assert!(adapt_and_score_oracle(&state, &stats, &lv(&[0.0, 0.0]), true, 1.5, &mut rng, 0)
            .is_err());
    }

    #[test]
    fn empty_and_single_streams() {
        let state = OutlierDistribution::new(vec![1.0, 2.0], 1).unwrap();
        let stats = EnergyStats::new(3.0, 0.5, 3.0).unwrap();
        let out = run_stream(state.clone(), &stats, Vec::new(), &StreamOptions::default()).unwrap();
        assert!(out.scores.is_empty());
        assert_eq!(out.state, state);

        let x = lv(&[-1.0, -2.0]);
        let (next, score, event) = adapt_and_score(&state, &stats, &x, 0).unwrap();
        let opts = StreamOptions {
            record_events: true,
            ..Default::default()
        };
        let out = run_stream(state, &stats, vec![StreamSample::unlabeled(x)], &opts).unwrap();
        assert_eq!(out.scores, vec![score]);
        assert_eq!(out.events, vec![event]);
        assert_eq!(out.state, next);
    }

    #[test]
    fn stream_errors_carry_index() {
        let state = OutlierDistribution::new(vec![1.0, 2.0], 1).unwrap();
        let stats = EnergyStats::new(3.0, 0.5, 3.0).unwrap();
        let stream = vec![
            StreamSample::unlabeled(lv(&[0.0, 0.0])),
            StreamSample::unlabeled(lv(&[0.0, 0.0, 0.0])),
        ];
        let err = run_stream(state.clone(), &stats, stream, &StreamOptions::default()).unwrap_err();
        assert!(matches!(err, Error::AtSample { index: 1, .. }));
        assert!(matches!(err.root(), Error::Shape { .. }));

        let opts = StreamOptions {
            mode: AdaptMode::LabelAssisted {
                use_label_probability: 1.0,
                seed: 0,
            },
            record_events: false,
        };
        let err = run_stream(state, &stats, vec![StreamSample::unlabeled(lv(&[0.0, 0.0]))], &opts)
            .unwrap_err();
        assert!(matches!(err.root(), Error::InvalidInput(_)));
    }

    #[test]
    fn frozen_mode_never_updates() {
        let state = OutlierDistribution::new(vec![1.0, 2.0], 1).unwrap();
        let stats = EnergyStats::new(1e9, 0.0, 3.0).unwrap();
        let xs: Vec<_> = (0..5)
            .map(|i| StreamSample::unlabeled(lv(&[i as f64 * 0.1, -0.5])))
            .collect();
        let opts = StreamOptions {
            mode: AdaptMode::Frozen,
            record_events: true,
        };
        let out = run_stream(state.clone(), &stats, xs.clone(), &opts).unwrap();
        assert_eq!(out.state, state);
        assert_eq!(out.accepted, 0);
        for (s, x) in out.scores.iter().zip(&xs) {
            assert_eq!(*s, state.score(&x.logits).unwrap());
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let state = OutlierDistribution::new(vec![0.1, 1.0 / 3.0, 2.718281828459045], 17).unwrap();
        let stats = EnergyStats::new(12.345678901234567, 0.987654321, 2.5).unwrap();
        let snap = StateSnapshot::capture(&state, &stats);
        let text = snap.to_json().unwrap();
        for key in ["\"k\"", "\"m\"", "\"values\"", "\"mu_in\"", "\"sigma_in\"", "\"alpha\""] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
        let back = StateSnapshot::from_json(&text).unwrap();
        assert_eq!(back, snap);
        let (s2, st2) = back.restore().unwrap();
        assert_eq!(s2, state);
        assert_eq!(st2, stats);

        let bad = StateSnapshot { k: 4, ..snap };
        assert!(bad.restore().is_err());
    }
}
