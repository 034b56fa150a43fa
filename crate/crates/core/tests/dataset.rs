//! Dataset generation: counts, prevalence, labels and determinism.

use std::fs;

use regverify_core::phantom::{
    build_dataset, filter_projections, DatasetConfig, DatasetManifest, OffsetMode, SampleRecord,
};
use regverify_core::pose::{mtre, RegistrationLabel, RigidTransform};

fn small() -> DatasetConfig {
    DatasetConfig {
        specimens: 2,
        projections_per_specimen: 3,
        samples_per_projection: 8,
        geometry: regverify_core::phantom::ProjectionGeometry::square(24),
        prevalence_tolerance: 0.2,
        ..DatasetConfig::default()
    }
}

#[test]
fn default_dataset_has_4000_samples_near_target_prevalence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::default();
    let m = build_dataset(&cfg, 0, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 4000);
    assert_eq!(m.specimens.len(), 5);
    assert_eq!(m.counts.per_specimen.values().sum::<usize>(), 4000);
    assert!(m.counts.per_projection.values().all(|&n| n == 20));
    let accepted = m.samples.iter().filter(|s| s.label.is_accept()).count() as f64 / 4000.0;
    assert!((accepted - m.accepted_prevalence).abs() < 1e-12);
    assert!((accepted - 0.277).abs() <= 0.05, "prevalence {accepted}");
    m.verify(dir.path()).unwrap();
    // every stored label follows from the stored offset and the landmarks
    for s in m.samples.iter().step_by(97) {
        let lm = m.landmarks(&s.specimen_id).unwrap();
        let e = mtre(&s.offset, &RigidTransform::identity(), lm).unwrap();
        assert_eq!(s.label, RegistrationLabel::from_accept(e < 2.0));
    }
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&small(), 11, a.path()).unwrap();
    let mb = build_dataset(&small(), 11, b.path()).unwrap();
    assert_eq!(ma, mb);
    for s in &ma.samples {
        assert_eq!(
            fs::read(a.path().join(&s.drr_path)).unwrap(),
            fs::read(b.path().join(&s.drr_path)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    let mc = build_dataset(&small(), 12, c.path()).unwrap();
    assert_ne!(ma.samples, mc.samples);
}

#[test]
fn manifest_round_trips_and_loads_samples() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small(), 3, dir.path()).unwrap();
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(m, loaded);
    let samples = loaded
        .load_samples(dir.path(), &loaded.samples[..4])
        .unwrap();
    assert_eq!(samples[0].pair.dims(), (24, 24));
    assert_eq!(samples[0].uid(), loaded.samples[0].uid());
    // a missing image is reported
    fs::remove_file(dir.path().join(&m.samples[0].xray_path)).unwrap();
    assert!(loaded.verify(dir.path()).is_err());
}

#[test]
fn toy_dataset_is_separable_by_construction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::toy_separable();
    let OffsetMode::Separable { min_reject_mtre_mm } = cfg.mode else {
        panic!("toy config must be separable")
    };
    let m = build_dataset(&cfg, 0, dir.path()).unwrap();
    assert_eq!(m.samples.len(), cfg.total_samples());
    for s in &m.samples {
        match s.label {
            RegistrationLabel::Accept => assert_eq!(s.mtre_mm, 0.0),
            RegistrationLabel::Reject => assert!(s.mtre_mm >= min_reject_mtre_mm),
        }
    }
    assert!((m.accepted_prevalence - 0.5).abs() <= cfg.prevalence_tolerance);
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.specimens = 0;
    assert!(build_dataset(&cfg, 0, dir.path())
        .unwrap_err()
        .is_validation());
    let mut cfg = small();
    cfg.mode = OffsetMode::Separable {
        min_reject_mtre_mm: 1.0,
    };
    assert!(build_dataset(&cfg, 0, dir.path()).is_err());
}

fn record(proj: &str, k: usize, reject: bool) -> SampleRecord {
    SampleRecord {
        specimen_id: "spec-a".into(),
        projection_id: proj.into(),
        sample_id: format!("s-{k:03}"),
        xray_path: String::new(),
        drr_path: String::new(),
        meta_path: String::new(),
        offset: RigidTransform::identity(),
        mtre_mm: 0.0,
        label: RegistrationLabel::from_accept(!reject),
    }
}

#[test]
fn projection_filter_boundary() {
    let mut recs: Vec<SampleRecord> = (0..20).map(|k| record("p95", k, k < 19)).collect();
    recs.extend((0..20).map(|k| record("p90", k, k < 18)));
    recs.extend((0..10).map(|k| record("p0", k, false)));
    let kept = filter_projections(&recs, 0.9);
    assert!(kept.iter().all(|r| r.projection_id != "p95"));
    assert_eq!(kept.iter().filter(|r| r.projection_id == "p90").count(), 20);
    assert_eq!(kept.iter().filter(|r| r.projection_id == "p0").count(), 10);
}
