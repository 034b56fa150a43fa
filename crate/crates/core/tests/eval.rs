//! Metrics, weighted accuracy, balanced subsets and LOSO integrity.

mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regverify_core::eval::{
    auc, balanced_subset, check_leakage, compute_metrics, run_fold, split_fold, weighted_accuracy,
    ConfusionCounts, ErrorCategory, PrevalenceWeights,
};
use regverify_core::model::{loso_split, train, TrainConfig};
use regverify_core::phantom::{build_dataset, DatasetConfig, ProjectionGeometry};
use regverify_core::pose::RegistrationLabel;
use regverify_core::Error;

const ACCEPT: RegistrationLabel = RegistrationLabel::Accept;
const REJECT: RegistrationLabel = RegistrationLabel::Reject;

/// P(score_pos > score_neg) + ½ P(tie), by enumerating every pair.
fn pairwise_auc(scores: &[f64], truth: &[RegistrationLabel]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if truth[i] != ACCEPT {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if truth[j] != REJECT {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let truth: Vec<_> = (0..50)
            .map(|i| RegistrationLabel::from_accept(i % 3 == 0))
            .collect();
        // coarse scores force plenty of ties on half of the cases
        let scores: Vec<f64> = (0..50)
            .map(|_| {
                let v: f64 = rng.random();
                if case % 2 == 0 {
                    (v * 5.0).floor() / 5.0
                } else {
                    v
                }
            })
            .collect();
        let got = auc(&scores, &truth).unwrap().unwrap();
        assert!((got - pairwise_auc(&scores, &truth)).abs() < 1e-12);
    }
    // single class: undefined, not an error
    assert_eq!(auc(&[0.1, 0.2], &[ACCEPT, ACCEPT]).unwrap(), None);
    assert!(auc(&[0.1], &[ACCEPT, REJECT]).is_err());
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transforms(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..60),
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let truth: Vec<_> = raw.iter().map(|r| RegistrationLabel::from_accept(r.1)).collect();
        let a = auc(&scores, &truth).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let b = auc(&mapped, &truth).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            _ => prop_assert!(false, "definedness changed"),
        }
    }

    #[test]
    fn tabulation_round_trips(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..80)) {
        let pred: Vec<_> = pairs.iter().map(|p| RegistrationLabel::from_accept(p.0)).collect();
        let truth: Vec<_> = pairs.iter().map(|p| RegistrationLabel::from_accept(p.1)).collect();
        let c = ConfusionCounts::tabulate(&pred, &truth).unwrap();
        prop_assert_eq!(c.total(), pairs.len());
        for cat in ErrorCategory::ALL {
            let n = pairs
                .iter()
                .filter(|p| ErrorCategory::of(RegistrationLabel::from_accept(p.0), RegistrationLabel::from_accept(p.1)) == cat)
                .count();
            prop_assert_eq!(c.get(cat), n);
        }
        let correct = pairs.iter().filter(|p| p.0 == p.1).count();
        match c.accuracy() {
            Some(a) => prop_assert!((a - correct as f64 / pairs.len() as f64).abs() < 1e-12),
            None => prop_assert!(pairs.is_empty()),
        }
    }

    #[test]
    fn weighted_accuracy_is_linear_and_bounded(
        f in [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0],
        g in [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0],
        t in 0.0f64..=1.0,
    ) {
        let w = PrevalenceWeights::reference();
        let a = weighted_accuracy(f, &w).unwrap();
        let b = weighted_accuracy(g, &w).unwrap();
        let mix: [f64; 4] = std::array::from_fn(|i| t * f[i] + (1.0 - t) * g[i]);
        let m = weighted_accuracy(mix, &w).unwrap();
        prop_assert!((m - (t * a + (1.0 - t) * b)).abs() < 1e-12);
        let sum: f64 = w.as_array().iter().sum();
        prop_assert!((0.0..=sum + 1e-12).contains(&a));
    }
}

#[test]
fn metric_examples() {
    // TP=2, TN=1, FP=1, FN=0
    let truth = [ACCEPT, ACCEPT, REJECT, REJECT];
    let r = compute_metrics(&[0.9, 0.7, 0.6, 0.1], &truth).unwrap();
    assert_eq!(
        (r.counts.tp, r.counts.tn, r.counts.fp, r.counts.fn_),
        (2, 1, 1, 0)
    );
    assert_eq!(r.accuracy, 0.75);
    assert!((r.precision.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.recall, Some(1.0));
    assert!((r.f1.unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(r.auc, Some(1.0));
    // nothing predicted ACCEPT: precision undefined rather than NaN
    let r = compute_metrics(&[0.1, 0.2], &[ACCEPT, REJECT]).unwrap();
    assert_eq!(r.precision, None);
}

#[test]
fn weighted_accuracy_reference_values() {
    let w = PrevalenceWeights::reference();
    assert_eq!(w.as_array(), [0.226, 0.534, 0.188, 0.051]);
    let v = weighted_accuracy([1.0, 1.0, 0.0, 0.0], &w).unwrap();
    assert!((v - 0.760).abs() < 1e-9);
    assert!(weighted_accuracy([1.2, 1.0, 0.0, 0.0], &w).is_err());
    assert!(PrevalenceWeights::new(0.5, 0.5, 0.5, 0.5).is_err());
}

fn labelled(n: usize, seed: u64) -> (Vec<String>, Vec<RegistrationLabel>, Vec<RegistrationLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n).map(|i| format!("c{i}")).collect();
    let pred = (0..n)
        .map(|_| RegistrationLabel::from_accept(rng.random()))
        .collect();
    let truth = (0..n)
        .map(|_| RegistrationLabel::from_accept(rng.random()))
        .collect();
    (ids, pred, truth)
}

#[test]
fn balanced_subset_is_deterministic_and_balanced() {
    let (ids, pred, truth) = labelled(200, 1);
    let a = balanced_subset(&ids, &pred, &truth, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = balanced_subset(&ids, &pred, &truth, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ids().len(), 32);
    assert_eq!(a.ids().iter().collect::<HashSet<_>>().len(), 32);
    for (cat, picked) in &a.by_category {
        assert_eq!(picked.len(), 8);
        for id in picked {
            let i: usize = id[1..].parse().unwrap();
            assert_eq!(ErrorCategory::of(pred[i], truth[i]), *cat);
            assert_eq!(a.category_of(id), Some(*cat));
        }
    }
}

#[test]
fn balanced_subset_reports_shortage() {
    let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
    let pred = vec![ACCEPT, ACCEPT, REJECT, REJECT, ACCEPT, REJECT];
    let truth = vec![ACCEPT, ACCEPT, REJECT, REJECT, REJECT, REJECT];
    let err =
        balanced_subset(&ids, &pred, &truth, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Shortage { requested: 2, .. }));
}

fn small_dataset(dir: &std::path::Path) -> regverify_core::phantom::DatasetManifest {
    let cfg = DatasetConfig {
        specimens: 5,
        projections_per_specimen: 4,
        samples_per_projection: 20,
        geometry: ProjectionGeometry::square(16),
        prevalence_tolerance: 0.2,
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, 5, dir).unwrap()
}

#[test]
fn loso_folds_never_leak_specimens() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let folds = loso_split(&m.specimen_ids()).unwrap();
    assert_eq!(folds.len(), 5);
    let mut tested = HashSet::new();
    for fold in &folds {
        let split = split_fold(&m, fold, 0.2, 7).unwrap();
        check_leakage(&split).unwrap();
        let spec = |id: &String| id.split('/').next().unwrap().to_string();
        assert!(split
            .test_ids
            .iter()
            .all(|id| spec(id) == fold.held_out_specimen));
        assert!(split
            .train_ids
            .iter()
            .chain(&split.calibration_ids)
            .all(|id| spec(id) != fold.held_out_specimen));
        assert_eq!(
            split.train_ids.len() + split.calibration_ids.len() + split.test_ids.len(),
            m.samples.len()
        );
        // calibration takes whole projections
        let proj = |id: &String| id.rsplit_once('/').unwrap().0.to_string();
        let cal: HashSet<_> = split.calibration_ids.iter().map(proj).collect();
        assert!(split.train_ids.iter().all(|id| !cal.contains(&proj(id))));
        assert_eq!(split, split_fold(&m, fold, 0.2, 7).unwrap());
        tested.extend(split.test_ids);
    }
    assert_eq!(tested.len(), m.samples.len());

    // the checker catches injected leaks
    let mut bad = split_fold(&m, &folds[0], 0.2, 7).unwrap();
    let leaked = bad.test_ids[0].clone();
    bad.train_ids.push(leaked.clone());
    assert!(matches!(check_leakage(&bad), Err(Error::DataLeakage(ids)) if ids.contains(&leaked)));
    let mut bad = split_fold(&m, &folds[1], 0.2, 7).unwrap();
    bad.calibration_ids.push(bad.train_ids[0].clone());
    assert!(check_leakage(&bad).is_err());
}

fn relabel(
    samples: &mut [regverify_core::phantom::RegistrationSample],
    projection: &str,
    rejected: usize,
) {
    for (k, s) in samples
        .iter_mut()
        .filter(|s| s.projection_id == projection)
        .enumerate()
    {
        s.label = RegistrationLabel::from_accept(k >= rejected);
    }
}

#[test]
fn projection_filter_applies_to_training_only() {
    // p95: 19/20 rejected (dropped), p90: 18/20 (kept), p-normal: 10/20
    let mut data = common::samples(1, 3, 20, 16, 9);
    relabel(&mut data, "proj-000", 19);
    relabel(&mut data, "proj-001", 18);
    relabel(&mut data, "proj-002", 10);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let out = train(data.clone(), &data, &common::tiny_model(16), &cfg).unwrap();
    // kept: 40 samples with 12 accepts; oversampled to 28 + 28
    assert_eq!(out.train_size, 56);

    // a held-out specimen keeps its heavily rejected projection
    let dir = tempfile::tempdir().unwrap();
    let mut m = small_dataset(dir.path());
    let held = m.specimen_ids()[0].clone();
    let heavy = m
        .samples
        .iter_mut()
        .filter(|s| s.specimen_id == held && s.projection_id == "proj-000");
    for (k, s) in heavy.enumerate() {
        s.label = RegistrationLabel::from_accept(k >= 19);
    }
    let fold = &loso_split(&m.specimen_ids()).unwrap()[0];
    let held_count = m.samples.iter().filter(|s| s.specimen_id == held).count();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let outcome = run_fold(dir.path(), &m, fold, &common::tiny_model(16), &cfg, 0.1).unwrap();
    assert_eq!(outcome.report.n_test, held_count);
    assert_eq!(outcome.predictions.len(), held_count);
    let ckpt_ids: HashSet<_> = outcome.checkpoint.meta.train_sample_ids.iter().collect();
    assert!(outcome
        .split
        .test_ids
        .iter()
        .all(|id| !ckpt_ids.contains(id)));
}
