//! In-memory fixtures shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regverify_core::model::ModelConfig;
use regverify_core::phantom::{
    generate_specimen_named, make_sample, specimen_id, ProjectionGeometry, ProjectionRecord,
    RegistrationSample,
};
use regverify_core::pose::{sample_offset, OffsetBounds, RigidTransform};

/// Small model for fast tests on `size`×`size` inputs.
pub fn tiny_model(size: usize) -> ModelConfig {
    ModelConfig {
        input_size: size,
        stem_out_channels: 4,
        block_channel_sequence: vec![8],
        attention_heads: 2,
        attention_dim: None,
        dropout_rate: 0.3,
        fc_hidden: None,
    }
}

/// Samples alternating between identity offsets and large offsets, so both
/// labels are present in every projection.
pub fn samples(
    specimens: usize,
    projections: usize,
    per: usize,
    size: usize,
    seed: u64,
) -> Vec<RegistrationSample> {
    let geom = ProjectionGeometry::square(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big = OffsetBounds::symmetric(20f64.to_radians(), 30.0);
    let mut out = Vec::new();
    for s in 0..specimens {
        let spec = generate_specimen_named(seed * 100 + s as u64, specimen_id(s));
        for p in 0..projections {
            let view = RigidTransform::rotation_about([0.0, 1.0, 0.0], rng.random_range(-0.4..0.4));
            let proj = ProjectionRecord {
                specimen_id: spec.specimen_id.clone(),
                projection_id: format!("proj-{p:03}"),
                view,
            };
            for k in 0..per {
                let offset = if k % 2 == 0 {
                    RigidTransform::identity()
                } else {
                    sample_offset(&mut rng, &big).unwrap()
                };
                out.push(
                    make_sample(&spec, &geom, &proj, &format!("s-{k:03}"), &offset, 2.0).unwrap(),
                );
            }
        }
    }
    out
}
