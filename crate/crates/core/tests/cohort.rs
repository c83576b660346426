mod common;

use std::collections::HashSet;

use common::{brute_force_matching, record, skewed_manifest};
use proptest::prelude::*;
use vcf_core::cohort::{
    balance_cohort, compute_metrics, demographics, match_pairs, match_score, read_manifest, roc_auc, write_manifest, Label,
    Sex, AGE_CALIPER,
};

fn small_instance(spec: &[(f64, bool, bool)]) -> Vec<vcf_core::cohort::StudyRecord> {
    spec.iter()
        .enumerate()
        .map(|(i, &(age, female, positive))| {
            let sex = if female { Sex::F } else { Sex::M };
            record(&format!("s{i:02}"), (age * 10.0).round() / 10.0, sex, Label::from_bool(positive))
        })
        .collect()
}

fn group_sizes_ok(recs: &[vcf_core::cohort::StudyRecord]) -> bool {
    [Sex::F, Sex::M].iter().all(|&s| {
        [Label::Positive, Label::Negative]
            .iter()
            .all(|&l| recs.iter().filter(|r| r.sex == s && r.label == l).count() <= 7)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_equals_exhaustive_optimum(spec in prop::collection::vec((40.0f64..90.0, any::<bool>(), any::<bool>()), 4..20)) {
        let recs = small_instance(&spec);
        prop_assume!(group_sizes_ok(&recs));
        prop_assume!(recs.iter().any(|r| r.label.is_positive()) && recs.iter().any(|r| !r.label.is_positive()));
        let pairs = match_pairs(&recs).unwrap();
        let score = match_score(&pairs);
        let (k, gap) = brute_force_matching(&recs);
        prop_assert_eq!(score.pairs, k);
        prop_assert!((score.total_age_gap - gap).abs() < 1e-6, "{} vs {}", score.total_age_gap, gap);
    }

    #[test]
    fn metrics_identities_hold(data in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200)) {
        let preds: Vec<f64> = data.iter().map(|d| d.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        let m = compute_metrics(&preds, &labels, 0.5).unwrap();
        let count = |p: bool, l: bool| data.iter().filter(|d| (d.0 >= 0.5) == p && d.1 == l).count();
        prop_assert_eq!((m.tp, m.fp, m.tn, m.fn_), (count(true, true), count(true, false), count(false, false), count(false, true)));
        prop_assert_eq!(m.total(), data.len());
        prop_assert_eq!(m.accuracy, (m.tp + m.tn) as f64 / data.len() as f64);
        let rate = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        prop_assert_eq!(m.sensitivity, rate(m.tp, m.fn_));
        prop_assert_eq!(m.specificity, rate(m.tn, m.fp));
    }

    #[test]
    fn auc_equals_pairwise_count(data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = roc_auc(&scores, &labels).unwrap();
        if pairs == 0.0 {
            prop_assert!(auc.is_none());
        } else {
            prop_assert!((auc.unwrap() - wins / pairs).abs() < 1e-12);
        }
    }
}

#[test]
fn exhaustive_oracle_on_full_groups() {
    // Seven per sex and class, ages packed so most studies compete for partners.
    let mut recs = Vec::new();
    let groups = [(Sex::F, Label::Positive), (Sex::F, Label::Negative), (Sex::M, Label::Positive), (Sex::M, Label::Negative)];
    for (g, &(sex, label)) in groups.iter().enumerate() {
        for k in 0..7 {
            let age = 50.0 + ((k * 37 + g * 11) % 41) as f64 * 0.9;
            recs.push(record(&format!("g{g}-{k}"), (age * 10.0).round() / 10.0, sex, label));
        }
    }
    let score = match_score(&match_pairs(&recs).unwrap());
    let (k, gap) = brute_force_matching(&recs);
    assert_eq!(score.pairs, k);
    assert!((score.total_age_gap - gap).abs() < 1e-6, "{} vs {gap}", score.total_age_gap);
}

#[test]
fn balancing_is_a_same_sex_caliper_matching_without_duplicates() {
    let recs = skewed_manifest(400, 0.4, 3);
    let balanced = balance_cohort(&recs).unwrap();
    let ids: HashSet<&str> = balanced.iter().map(|r| r.study_id.as_str()).collect();
    assert_eq!(ids.len(), balanced.len());
    for pair in balanced.chunks(2) {
        assert!(pair[0].label.is_positive() && !pair[1].label.is_positive());
        assert_eq!(pair[0].sex, pair[1].sex);
        assert!((pair[0].age - pair[1].age).abs() <= AGE_CALIPER);
    }
    let before = demographics(&recs).unwrap().gaps().unwrap();
    let (age_gap, sex_gap) = demographics(&balanced).unwrap().gaps().unwrap();
    assert!(before.0 > 5.0, "fixture should be skewed: {before:?}");
    assert!(age_gap <= 2.0 && sex_gap <= 0.05, "gaps {age_gap} years, {sex_gap}");
}

#[test]
fn balanced_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let balanced = balance_cohort(&skewed_manifest(60, 0.5, 9)).unwrap();
    let path = dir.path().join("balanced.csv");
    write_manifest(&path, &balanced).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), balanced);
}

#[test]
fn mismatched_or_empty_metric_inputs_fail() {
    assert!(compute_metrics(&[0.1], &[true, false], 0.5).is_err());
    assert!(compute_metrics(&[], &[], 0.5).is_err());
}
