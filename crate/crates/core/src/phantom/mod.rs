//! Synthetic specimens, projection rendering and labeled dataset assembly.

mod augment;
mod dataset;
mod render;
mod specimen;

pub use augment::{
    add_gaussian_noise, adjust_brightness, adjust_contrast, augment, gaussian_blur, AugmentParams,
};
pub use dataset::{
    build_dataset, filter_projections, make_sample, oversample_accepts, sample_uid, DatasetConfig,
    DatasetManifest, ImagePair, ManifestCounts, OffsetMode, ProjectionMember, ProjectionRecord,
    RegistrationSample, SampleMeta, SampleRecord, SpecimenRecord, MANIFEST_FILE,
};
pub use render::{line_integrals, normalize_intensity, render_projection, ProjectionGeometry};
pub use specimen::{
    generate_specimen, generate_specimen_named, specimen_id, Ellipsoid, PhantomSpecimen,
};
