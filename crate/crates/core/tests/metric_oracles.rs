mod common;

use adaptod::metrics::{auroc, average_precision, fpr_at_tpr, MetricReport, Positive, ScoredSample, DEFAULT_TPR};
use adaptod::Error;
use common::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn metrics_equal_brute_force_oracles() {
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..=200);
        let s = random_scored(&mut r, n, seed % 2 == 0);
        assert_eq!(auroc(&s).unwrap(), brute_auroc(&s), "seed {seed}");
        assert_eq!(average_precision(&s, Positive::Id).unwrap(), brute_ap(&s, true), "seed {seed}");
        assert_eq!(average_precision(&s, Positive::Ood).unwrap(), brute_ap(&s, false), "seed {seed}");
        assert_eq!(fpr_at_tpr(&s, DEFAULT_TPR).unwrap(), brute_fpr(&s, DEFAULT_TPR), "seed {seed}");
    }
}

#[test]
fn all_tied_scores() {
    let s: Vec<ScoredSample> = (0..10).map(|i| ScoredSample::new(1.0, i % 3 == 0)).collect();
    assert_eq!(auroc(&s).unwrap(), 0.5);
    assert_eq!(fpr_at_tpr(&s, DEFAULT_TPR).unwrap(), 1.0);
    assert_eq!(average_precision(&s, Positive::Id).unwrap(), 0.4);
}

#[test]
fn single_class_is_undefined() {
    let s: Vec<ScoredSample> = (0..5).map(|i| ScoredSample::new(i as f64, true)).collect();
    assert!(matches!(auroc(&s), Err(Error::UndefinedMetric(_))));
    assert!(matches!(MetricReport::evaluate(&s), Err(Error::UndefinedMetric(_))));
}

#[test]
fn perfect_separation() {
    let s: Vec<ScoredSample> = (0..20).map(|i| ScoredSample::new(i as f64, i >= 10)).collect();
    let r = MetricReport::evaluate(&s).unwrap();
    assert_eq!((r.auroc, r.ap_in, r.ap_out, r.fpr_at_95tpr), (1.0, 1.0, 1.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn invariant_to_order(seed in any::<u64>(), n in 2usize..80, ties in any::<bool>()) {
        let mut r = rng(seed);
        let s = random_scored(&mut r, n, ties);
        let mut rev = s.clone();
        rev.reverse();
        prop_assert_eq!(MetricReport::evaluate(&s).unwrap(), MetricReport::evaluate(&rev).unwrap());
    }

    #[test]
    fn invariant_to_monotone_transforms(seed in any::<u64>(), n in 2usize..80, ties in any::<bool>()) {
        let mut r = rng(seed);
        let s = random_scored(&mut r, n, ties);
        let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new((3.0 * x.score).exp() + 1.0, x.is_id)).collect();
        prop_assert_eq!(MetricReport::evaluate(&s).unwrap(), MetricReport::evaluate(&t).unwrap());
    }

    #[test]
    fn flipping_labels_mirrors_auroc(seed in any::<u64>(), n in 2usize..80, ties in any::<bool>()) {
        let mut r = rng(seed);
        let s = random_scored(&mut r, n, ties);
        let flipped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(x.score, !x.is_id)).collect();
        prop_assert!((auroc(&s).unwrap() + auroc(&flipped).unwrap() - 1.0).abs() < 1e-12);
        let negated: Vec<ScoredSample> = flipped.iter().map(|x| ScoredSample::new(-x.score, x.is_id)).collect();
        prop_assert_eq!(
            average_precision(&negated, Positive::Id).unwrap(),
            average_precision(&s, Positive::Ood).unwrap()
        );
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in any::<u64>(), n in 2usize..80, ties in any::<bool>()) {
        let mut r = rng(seed);
        let rep = MetricReport::evaluate(&random_scored(&mut r, n, ties)).unwrap();
        for v in [rep.auroc, rep.ap_in, rep.ap_out, rep.fpr_at_95tpr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
