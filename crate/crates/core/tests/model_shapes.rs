//! Architecture shape chain, inference determinism and training invariants.

mod common;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regverify_core::model::{
    split_channels, train, AdamW, Checkpoint, CheckpointMeta, Mode, ModelConfig, Params,
    TrainConfig, VerifierModel,
};
use regverify_core::phantom::ImagePair;

fn params(m: &VerifierModel) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, v| out.extend_from_slice(v));
    out
}

#[test]
fn default_architecture_shape_chain() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.input_size, 128);
    let model = VerifierModel::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array4::from_shape_fn((1, 2, 128, 128), |_| rng.random::<f64>());

    let (features, _) = model.backbone(&x, false);
    assert_eq!(features.dim(), (1, 64, 16, 16));

    let (a, b) = split_channels(&features).unwrap();
    assert_eq!(a.dim(), (1, 32, 16, 16));
    assert_eq!(b.dim(), (1, 32, 16, 16));

    let (aa, ab, _) = model.attention.forward(&a, &b);
    assert_eq!(aa.dim(), a.dim());
    assert_eq!(ab.dim(), b.dim());

    let (logits, cache) = model.forward_batch(&x, Mode::Eval).unwrap();
    assert_eq!(logits.len(), 1);
    assert_eq!(cache.features.dim(), (1, 64, 16, 16));
    assert_eq!(cfg.flat_features(), 32 * 16 * 16);
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = VerifierModel::new(common::tiny_model(16), 0).unwrap();
    let pair = ImagePair::new(
        ndarray::Array2::zeros((8, 8)),
        ndarray::Array2::zeros((8, 8)),
    )
    .unwrap();
    assert!(model.forward(&pair).is_err());
    let x = Array4::zeros((1, 3, 16, 16));
    assert!(model.forward_batch(&x, Mode::Eval).is_err());
}

#[test]
fn inference_is_deterministic_and_probabilities_valid() {
    let samples = common::samples(1, 2, 4, 32, 5);
    let model = VerifierModel::new(common::tiny_model(32), 9).unwrap();
    for s in &samples {
        let a = model.forward(&s.pair).unwrap();
        let b = model.forward(&s.pair).unwrap();
        assert_eq!(a.logit.to_bits(), b.logit.to_bits());
        let [pa, pr] = a.probabilities();
        assert!((0.0..=1.0).contains(&pa));
        assert!((pa + pr - 1.0).abs() < 1e-12);
        assert_eq!(a.predicted_label.is_accept(), pa >= 0.5);
    }
    // batched and single inference agree
    let pairs: Vec<&ImagePair> = samples.iter().map(|s| &s.pair).collect();
    let batched = model.predict_logits(&pairs, 3).unwrap();
    for (s, z) in samples.iter().zip(batched) {
        assert!((model.forward(&s.pair).unwrap().logit - z).abs() < 1e-9);
    }
}

#[test]
fn zero_learning_rate_step_leaves_parameters_unchanged() {
    let model = VerifierModel::new(common::tiny_model(16), 2).unwrap();
    let mut grads = model.zeros_like();
    grads.visit_mut("", &mut |_, v| v.fill(0.5));
    let mut stepped = model.clone();
    AdamW::new(0.0, 1e-2).step(&mut stepped, &grads);
    assert_eq!(params(&model), params(&stepped));
    AdamW::new(1e-3, 0.0).step(&mut stepped, &grads);
    assert_ne!(params(&model), params(&stepped));
}

fn quick_train(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs: 2,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_zero_lr_is_a_no_op() {
    let data = common::samples(2, 2, 6, 16, 1);
    let (tr, val) = data.split_at(12);
    let cfg = common::tiny_model(16);
    let a = train(tr.to_vec(), val, &cfg, &quick_train(1e-3)).unwrap();
    let b = train(tr.to_vec(), val, &cfg, &quick_train(1e-3)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert!(a
        .history
        .iter()
        .all(|h| h.train_loss.is_finite() && h.val_loss.is_finite()));

    let frozen = train(tr.to_vec(), val, &cfg, &quick_train(0.0)).unwrap();
    let init = VerifierModel::new(cfg, 4).unwrap();
    assert_eq!(params(&frozen.model), params(&init));
}

#[test]
fn single_class_training_split_is_rejected() {
    let data = common::samples(1, 1, 6, 16, 1);
    let accepts: Vec<_> = data
        .iter()
        .filter(|s| s.label.is_accept())
        .cloned()
        .collect();
    assert!(train(
        accepts.clone(),
        &accepts,
        &common::tiny_model(16),
        &quick_train(1e-3)
    )
    .is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = VerifierModel::new(common::tiny_model(16), 3).unwrap();
    let ckpt = Checkpoint {
        model: model.clone(),
        meta: CheckpointMeta {
            fold: Some(1),
            train_sample_ids: vec!["a/b/c".into()],
            ..Default::default()
        },
    };
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let s = &common::samples(1, 1, 1, 16, 2)[0];
    assert_eq!(
        model.forward(&s.pair).unwrap().logit.to_bits(),
        back.model.forward(&s.pair).unwrap().logit.to_bits()
    );
    // truncated files fail loudly
    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}
