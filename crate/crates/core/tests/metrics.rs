use confed::cohort::{generate_cohort, CohortConfig};
use confed::metrics::{auc_pr, auc_roc, make_splits, ppv_npv_at_quantile, Split, SplitPlan};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{pair_count_auc, random_instance, rank_walk_ap};

#[test]
fn auc_roc_matches_pair_counting_on_random_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut r);
        let got = auc_roc(&s, &l).unwrap();
        assert!((got - pair_count_auc(&s, &l)).abs() < 1e-12);
    }
}

#[test]
fn auc_pr_matches_rank_walk_on_random_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut r);
        let got = auc_pr(&s, &l).unwrap();
        assert!((got - rank_walk_ap(&s, &l)).abs() < 1e-12);
    }
}

#[test]
fn perfect_classifier_has_unit_ppv() {
    let n = 200;
    let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
    // perfect ranking at 20% prevalence: every flagged row is a positive
    let labels: Vec<bool> = (0..n).map(|i| i >= n - 40).collect();
    let op = ppv_npv_at_quantile(&scores, &labels, 0.95).unwrap();
    assert_eq!(op.ppv, Some(1.0));
    // nearest rank at 0.95 flags floor(0.05 n) + 1 rows, the 190th smallest
    // included; positives exactly those rows give unit PPV and NPV
    let flagged = n / 20 + 1;
    let labels: Vec<bool> = (0..n).map(|i| i >= n - flagged).collect();
    let op = ppv_npv_at_quantile(&scores, &labels, 0.95).unwrap();
    assert_eq!(op.threshold, 189.0);
    assert_eq!((op.ppv, op.npv), (Some(1.0), Some(1.0)));
}

#[test]
fn independent_labels_give_ppv_near_prevalence() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.2)).collect();
    let op = ppv_npv_at_quantile(&scores, &labels, 0.95).unwrap();
    // 2000 predicted positives: sd of the ppv is sqrt(.2*.8/2000) ≈ 0.009
    assert!((op.ppv.unwrap() - 0.2).abs() < 0.04, "{op:?}");
}

#[test]
fn splits_are_disjoint_and_cover_everyone() {
    let mut c = CohortConfig::desk();
    c.n_people = 1_000;
    let cohort = generate_cohort(&c).unwrap();
    let plan = SplitPlan {
        seed: 3,
        ..SplitPlan::default()
    };
    let s = make_splits(&cohort.records, 5, &plan).unwrap();
    assert_eq!(s.assignment.len(), 1_000);
    assert_eq!(s.count(Split::Test), 200);
    let mut all: Vec<usize> = [Split::Train, Split::Validation, Split::Test]
        .iter()
        .flat_map(|&k| s.indices(k))
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..1_000).collect::<Vec<_>>());
    let central_non_test = s
        .assignment
        .iter()
        .zip(&cohort.records)
        .filter(|(a, r)| r.region == 5 && **a != Split::Test)
        .count();
    assert_eq!(s.count(Split::Validation), (0.2 * central_non_test as f64).round() as usize);
    for i in s.indices(Split::Validation) {
        assert_eq!(cohort.records[i].region, 5);
    }
    assert_eq!(make_splits(&cohort.records, 5, &plan).unwrap(), s);
}

#[test]
fn hundred_people_give_twenty_test_rows() {
    let mut c = CohortConfig::desk();
    c.n_people = 100;
    c.n_regions = 1;
    c.region_weights = vec![1.0];
    let cohort = generate_cohort(&c).unwrap();
    let s = make_splits(&cohort.records, 0, &SplitPlan::default()).unwrap();
    assert_eq!(s.count(Split::Test), 20);
    assert!(make_splits(&cohort.records, 7, &SplitPlan::default()).is_err());
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            proptest::collection::vec(-10.0f64..10.0, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn negated_scores_complement_auc((s, l) in scores_and_labels()) {
        let mut dedup = s.clone();
        dedup.sort_by(f64::total_cmp);
        dedup.dedup();
        prop_assume!(dedup.len() == s.len());
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auc_roc(&s, &l).unwrap() + auc_roc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_roc_invariant_under_increasing_transform((s, l) in scores_and_labels()) {
        let t: Vec<f64> = s.iter().map(|x| (x / 3.0).exp() * 2.0 + 1.0).collect();
        prop_assert!((auc_roc(&s, &l).unwrap() - auc_roc(&t, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval((s, l) in scores_and_labels()) {
        for v in [auc_roc(&s, &l).unwrap(), auc_pr(&s, &l).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let op = ppv_npv_at_quantile(&s, &l, 0.95).unwrap();
        for v in [op.ppv, op.npv].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn duplicating_rows_keeps_rank_and_threshold_metrics((s, l) in scores_and_labels()) {
        let s2: Vec<f64> = s.iter().chain(&s).copied().collect();
        let l2: Vec<bool> = l.iter().chain(&l).copied().collect();
        prop_assert!((auc_roc(&s, &l).unwrap() - auc_roc(&s2, &l2).unwrap()).abs() < 1e-12);
        let a = ppv_npv_at_quantile(&s, &l, 0.95).unwrap();
        let b = ppv_npv_at_quantile(&s2, &l2, 0.95).unwrap();
        prop_assert_eq!(a, b);
    }
}
