//! Labeled X-ray/DRR datasets: sample assembly, on-disk layout, prevalence
//! targeting, projection filtering and accept oversampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentParams};
use super::render::{render_projection, ProjectionGeometry};
use super::specimen::{generate_specimen_named, specimen_id, PhantomSpecimen};
use crate::error::{invalid, Error, Result};
use crate::hashing::config_hash;
use crate::imageio::{read_f32_grid, write_f32_grid, GridSidecar};
use crate::pose::{classify, mtre, LandmarkSet, OffsetBounds, RegistrationLabel, RigidTransform};
use crate::rng::{derive_seed, task_rng};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Co-registered X-ray and DRR, both normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub xray: Array2<f32>,
    pub drr: Array2<f32>,
}

impl ImagePair {
    pub fn new(xray: Array2<f32>, drr: Array2<f32>) -> Result<Self> {
        let pair = Self { xray, drr };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.xray.dim() != self.drr.dim() {
            return Err(invalid(format!(
                "X-ray {:?} and DRR {:?} differ in shape",
                self.xray.dim(),
                self.drr.dim()
            )));
        }
        if self
            .xray
            .iter()
            .chain(self.drr.iter())
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(invalid("image values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.xray.dim()
    }
}

/// One dataset row held in memory.
#[derive(Debug, Clone)]
pub struct RegistrationSample {
    pub specimen_id: String,
    pub projection_id: String,
    pub sample_id: String,
    pub pair: ImagePair,
    pub offset: RigidTransform,
    pub mtre_mm: f64,
    pub label: RegistrationLabel,
}

impl RegistrationSample {
    pub fn uid(&self) -> String {
        sample_uid(&self.specimen_id, &self.projection_id, &self.sample_id)
    }
}

pub fn sample_uid(specimen: &str, projection: &str, sample: &str) -> String {
    format!("{specimen}/{projection}/{sample}")
}

/// A projection view: how the anatomy is oriented in front of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub specimen_id: String,
    pub projection_id: String,
    pub view: RigidTransform,
}

/// Renders one sample. The X-ray is the anatomy at its ground-truth pose
/// (`view`); the DRR is rendered with `offset` applied in anatomy
/// coordinates before the view.
pub fn make_sample(
    spec: &PhantomSpecimen,
    geom: &ProjectionGeometry,
    projection: &ProjectionRecord,
    sample_id: &str,
    offset: &RigidTransform,
    threshold_mm: f64,
) -> Result<RegistrationSample> {
    let xray = render_projection(spec, geom, &projection.view)?;
    make_sample_with_xray(
        spec,
        geom,
        projection,
        sample_id,
        offset,
        threshold_mm,
        xray,
    )
}

fn make_sample_with_xray(
    spec: &PhantomSpecimen,
    geom: &ProjectionGeometry,
    projection: &ProjectionRecord,
    sample_id: &str,
    offset: &RigidTransform,
    threshold_mm: f64,
    xray: Array2<f32>,
) -> Result<RegistrationSample> {
    let drr = render_projection(spec, geom, &projection.view.compose(offset))?;
    let mtre_mm = mtre(offset, &RigidTransform::identity(), &spec.landmarks)?;
    Ok(RegistrationSample {
        specimen_id: spec.specimen_id.clone(),
        projection_id: projection.projection_id.clone(),
        sample_id: sample_id.to_string(),
        pair: ImagePair::new(xray, drr)?,
        offset: *offset,
        mtre_mm,
        label: classify(mtre_mm, threshold_mm)?,
    })
}

/// How registration offsets are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OffsetMode {
    /// Uniform 6DoF draws; bounds are rescaled until the accepted prevalence
    /// hits the target.
    Uniform,
    /// Sanity-check mode: accepted samples have identity offsets, rejected
    /// ones are redrawn until their mTRE is at least `min_reject_mtre_mm`.
    Separable { min_reject_mtre_mm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub specimens: usize,
    pub projections_per_specimen: usize,
    pub samples_per_projection: usize,
    pub geometry: ProjectionGeometry,
    pub offset_bounds: OffsetBounds,
    /// Projection views rotate the anatomy by up to this yaw (about `y`)...
    pub view_yaw_deg: f64,
    /// ...and this tilt (about `x`).
    pub view_tilt_deg: f64,
    pub threshold_mm: f64,
    pub target_prevalence: f64,
    pub prevalence_tolerance: f64,
    pub max_resampling_rounds: usize,
    pub mode: OffsetMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            specimens: 5,
            projections_per_specimen: 40,
            samples_per_projection: 20,
            geometry: ProjectionGeometry::default(),
            offset_bounds: OffsetBounds::default(),
            view_yaw_deg: 30.0,
            view_tilt_deg: 10.0,
            threshold_mm: crate::pose::DEFAULT_THRESHOLD_MM,
            target_prevalence: 0.277,
            prevalence_tolerance: 0.05,
            max_resampling_rounds: 60,
            mode: OffsetMode::Uniform,
        }
    }
}

impl DatasetConfig {
    /// Small, trivially separable dataset (identity vs. large offsets).
    pub fn toy_separable() -> Self {
        Self {
            specimens: 5,
            projections_per_specimen: 12,
            samples_per_projection: 6,
            geometry: ProjectionGeometry::square(32),
            offset_bounds: OffsetBounds::symmetric(30f64.to_radians(), 50.0),
            target_prevalence: 0.5,
            mode: OffsetMode::Separable {
                min_reject_mtre_mm: 40.0,
            },
            ..Self::default()
        }
    }

    pub fn total_samples(&self) -> usize {
        self.specimens * self.projections_per_specimen * self.samples_per_projection
    }

    pub fn validate(&self) -> Result<()> {
        if self.specimens == 0
            || self.projections_per_specimen == 0
            || self.samples_per_projection == 0
        {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        self.geometry.validate()?;
        self.offset_bounds.validate()?;
        if !(self.threshold_mm > 0.0) {
            return Err(Error::Config("threshold_mm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_prevalence) || !(self.prevalence_tolerance >= 0.0) {
            return Err(Error::Config(
                "target prevalence/tolerance out of range".into(),
            ));
        }
        if let OffsetMode::Separable { min_reject_mtre_mm } = self.mode {
            if !(min_reject_mtre_mm >= self.threshold_mm) {
                return Err(Error::Config(
                    "separable mode needs min_reject_mtre_mm at or above the threshold".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Persisted form of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub specimen_id: String,
    pub projection_id: String,
    pub sample_id: String,
    pub xray_path: String,
    pub drr_path: String,
    pub meta_path: String,
    pub offset: RigidTransform,
    pub mtre_mm: f64,
    pub label: RegistrationLabel,
}

impl SampleRecord {
    pub fn uid(&self) -> String {
        sample_uid(&self.specimen_id, &self.projection_id, &self.sample_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenRecord {
    pub specimen_id: String,
    pub seed: u64,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub per_specimen: BTreeMap<String, usize>,
    /// Keyed by `"<specimen>/<projection>"`.
    pub per_projection: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub config_hash: String,
    pub threshold_mm: f64,
    /// Factor applied to `offset_bounds` after prevalence targeting.
    pub offset_scale: f64,
    pub accepted_prevalence: f64,
    pub counts: ManifestCounts,
    pub specimens: Vec<SpecimenRecord>,
    pub projections: Vec<ProjectionRecord>,
    pub samples: Vec<SampleRecord>,
}

/// Per-sample `meta.json`, doubling as the sidecar of both image grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub specimen_id: String,
    pub projection_id: String,
    pub sample_id: String,
    pub view: RigidTransform,
    pub offset: RigidTransform,
    pub mtre_mm: f64,
    pub label: RegistrationLabel,
    pub threshold_mm: f64,
    pub image: GridSidecar,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (
            self.config.geometry.image_height_px,
            self.config.geometry.image_width_px,
        )
    }

    pub fn specimen_ids(&self) -> Vec<String> {
        self.specimens
            .iter()
            .map(|s| s.specimen_id.clone())
            .collect()
    }

    pub fn landmarks(&self, specimen_id: &str) -> Option<&LandmarkSet> {
        self.specimens
            .iter()
            .find(|s| s.specimen_id == specimen_id)
            .map(|s| &s.landmarks)
    }

    pub fn samples_of<'a>(
        &'a self,
        specimen_ids: &'a [String],
    ) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.samples
            .iter()
            .filter(move |s| specimen_ids.contains(&s.specimen_id))
    }

    /// Checks files exist, counts match the config, and every label is
    /// recomputable from its offset and the specimen landmarks.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for s in &self.samples {
            for p in [&s.xray_path, &s.drr_path, &s.meta_path] {
                if !root.join(p).is_file() {
                    return Err(invalid(format!("manifest references missing file {p}")));
                }
            }
            let lm = self
                .landmarks(&s.specimen_id)
                .ok_or_else(|| invalid(format!("unknown specimen {}", s.specimen_id)))?;
            let m = mtre(&s.offset, &RigidTransform::identity(), lm)?;
            if (m - s.mtre_mm).abs() > 1e-6 || classify(m, self.threshold_mm)? != s.label {
                return Err(invalid(format!(
                    "sample {} fails label round-trip",
                    s.uid()
                )));
            }
        }
        for (key, n) in &self.counts.per_projection {
            if *n != self.config.samples_per_projection {
                return Err(invalid(format!("projection {key} has {n} samples")));
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, root: &Path, rec: &SampleRecord) -> Result<RegistrationSample> {
        let (h, w) = self.image_dims();
        let xray = read_f32_grid(&root.join(&rec.xray_path), h, w)?;
        let drr = read_f32_grid(&root.join(&rec.drr_path), h, w)?;
        Ok(RegistrationSample {
            specimen_id: rec.specimen_id.clone(),
            projection_id: rec.projection_id.clone(),
            sample_id: rec.sample_id.clone(),
            pair: ImagePair::new(xray, drr)?,
            offset: rec.offset,
            mtre_mm: rec.mtre_mm,
            label: rec.label,
        })
    }

    pub fn load_samples<'a, I>(&self, root: &Path, records: I) -> Result<Vec<RegistrationSample>>
    where
        I: IntoIterator<Item = &'a SampleRecord>,
    {
        records
            .into_iter()
            .map(|r| self.load_sample(root, r))
            .collect()
    }
}

fn projection_view<R: Rng + ?Sized>(rng: &mut R, yaw_deg: f64, tilt_deg: f64) -> RigidTransform {
    let yaw = if yaw_deg > 0.0 {
        rng.random_range(-yaw_deg..=yaw_deg)
    } else {
        0.0
    };
    let tilt = if tilt_deg > 0.0 {
        rng.random_range(-tilt_deg..=tilt_deg)
    } else {
        0.0
    };
    RigidTransform::rotation_about([1.0, 0.0, 0.0], tilt.to_radians()).compose(
        &RigidTransform::rotation_about([0.0, 1.0, 0.0], yaw.to_radians()),
    )
}

fn offset_from_unit(bounds: &OffsetBounds, unit: &[f64; 6], scale: f64) -> Result<RigidTransform> {
    let lerp = |[lo, hi]: [f64; 2], u: f64| scale * (lo + u * (hi - lo));
    let r = [0, 1, 2].map(|k| lerp(bounds.rotation_rad[k], unit[k]));
    let t = [0, 1, 2].map(|k| lerp(bounds.translation_mm[k], unit[3 + k]));
    RigidTransform::new(r, t)
}

struct Plan {
    specimens: Vec<(u64, PhantomSpecimen)>,
    projections: Vec<Vec<ProjectionRecord>>,
    offsets: Vec<Vec<Vec<RigidTransform>>>,
    scale: f64,
    prevalence: f64,
}

fn plan_dataset(config: &DatasetConfig, seed: u64) -> Result<Plan> {
    let specimens: Vec<(u64, PhantomSpecimen)> = (0..config.specimens)
        .map(|i| {
            let s = derive_seed(seed, &[1, i as u64]);
            (s, generate_specimen_named(s, specimen_id(i)))
        })
        .collect();
    let projections: Vec<Vec<ProjectionRecord>> = (0..config.specimens)
        .map(|i| {
            (0..config.projections_per_specimen)
                .map(|j| ProjectionRecord {
                    specimen_id: specimens[i].1.specimen_id.clone(),
                    projection_id: format!("proj-{j:03}"),
                    view: projection_view(
                        &mut task_rng(seed, &[2, i as u64, j as u64]),
                        config.view_yaw_deg,
                        config.view_tilt_deg,
                    ),
                })
                .collect()
        })
        .collect();

    let total = config.total_samples() as f64;
    let target = config.target_prevalence;
    let tol = config.prevalence_tolerance;
    let (p, m) = (
        config.projections_per_specimen,
        config.samples_per_projection,
    );

    match config.mode {
        OffsetMode::Uniform => {
            let units: Vec<Vec<Vec<[f64; 6]>>> = (0..config.specimens)
                .map(|i| {
                    (0..p)
                        .map(|j| {
                            (0..m)
                                .map(|k| {
                                    let mut rng =
                                        task_rng(seed, &[3, i as u64, j as u64, k as u64]);
                                    std::array::from_fn(|_| rng.random::<f64>())
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let mtres = |scale: f64| -> Result<OffsetGrid> {
                specimens
                    .iter()
                    .zip(&units)
                    .map(|((_, spec), per_proj)| {
                        per_proj
                            .iter()
                            .map(|us| {
                                us.iter()
                                    .map(|u| {
                                        let t = offset_from_unit(&config.offset_bounds, u, scale)?;
                                        Ok((
                                            t,
                                            mtre(&t, &RigidTransform::identity(), &spec.landmarks)?,
                                        ))
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            };
            let prevalence_at = |scale: f64| -> Result<(f64, OffsetGrid)> {
                let all = mtres(scale)?;
                let accepted = all
                    .iter()
                    .flatten()
                    .flatten()
                    .filter(|(_, d)| *d < config.threshold_mm)
                    .count();
                Ok((accepted as f64 / total, all))
            };

            // Prevalence falls as the bounds grow; bisect the scale in log space.
            let (mut lo, mut hi) = (-12.0f64, 4.0f64);
            let mut scale = 1.0;
            let (mut prevalence, mut drawn) = prevalence_at(scale)?;
            for _ in 0..config.max_resampling_rounds {
                if (prevalence - target).abs() <= tol / 4.0 {
                    break;
                }
                if prevalence > target {
                    lo = scale.ln();
                } else {
                    hi = scale.ln();
                }
                scale = (0.5 * (lo + hi)).exp();
                (prevalence, drawn) = prevalence_at(scale)?;
            }
            if (prevalence - target).abs() > tol {
                return Err(Error::GenerationFailure {
                    achieved: prevalence,
                    target,
                    tolerance: tol,
                });
            }
            let offsets = drawn
                .into_iter()
                .map(|pp| {
                    pp.into_iter()
                        .map(|s| s.into_iter().map(|(t, _)| t).collect())
                        .collect()
                })
                .collect();
            Ok(Plan {
                specimens,
                projections,
                offsets,
                scale,
                prevalence,
            })
        }
        OffsetMode::Separable { min_reject_mtre_mm } => {
            let n_accept = (target * m as f64).round() as usize;
            let mut offsets = Vec::with_capacity(config.specimens);
            for (i, (_, spec)) in specimens.iter().enumerate() {
                let mut per_proj = Vec::with_capacity(p);
                for j in 0..p {
                    let mut rng = task_rng(seed, &[4, i as u64, j as u64]);
                    let mut accept: Vec<bool> = (0..m).map(|k| k < n_accept).collect();
                    accept.shuffle(&mut rng);
                    let mut row = Vec::with_capacity(m);
                    for acc in accept {
                        if acc {
                            row.push(RigidTransform::identity());
                            continue;
                        }
                        let mut found = None;
                        for _ in 0..10_000 {
                            let t = crate::pose::sample_offset(&mut rng, &config.offset_bounds)?;
                            if mtre(&t, &RigidTransform::identity(), &spec.landmarks)?
                                >= min_reject_mtre_mm
                            {
                                found = Some(t);
                                break;
                            }
                        }
                        row.push(found.ok_or_else(|| {
                            Error::Config(format!(
                                "offset bounds cannot reach an mTRE of {min_reject_mtre_mm} mm"
                            ))
                        })?);
                    }
                    per_proj.push(row);
                }
                offsets.push(per_proj);
            }
            let prevalence = (n_accept * p * config.specimens) as f64 / total;
            if (prevalence - target).abs() > tol {
                return Err(Error::GenerationFailure {
                    achieved: prevalence,
                    target,
                    tolerance: tol,
                });
            }
            Ok(Plan {
                specimens,
                projections,
                offsets,
                scale: 1.0,
                prevalence,
            })
        }
    }
}

/// Offsets and their mTRE per specimen, projection and sample.
type OffsetGrid = Vec<Vec<Vec<(RigidTransform, f64)>>>;

/// Generates, renders and writes a full dataset under `out`, returning its
/// manifest (also written to `out/manifest.json`).
pub fn build_dataset(config: &DatasetConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let plan = plan_dataset(config, seed)?;
    let (h, w) = (
        config.geometry.image_height_px,
        config.geometry.image_width_px,
    );

    let mut samples = Vec::with_capacity(config.total_samples());
    let mut counts = ManifestCounts::default();
    for (i, (_, spec)) in plan.specimens.iter().enumerate() {
        for (j, proj) in plan.projections[i].iter().enumerate() {
            let xray = render_projection(spec, &config.geometry, &proj.view)?;
            let dir = PathBuf::from(&spec.specimen_id).join(&proj.projection_id);
            fs::create_dir_all(out.join(&dir)).map_err(|e| Error::io(out.join(&dir), e))?;
            for (k, offset) in plan.offsets[i][j].iter().enumerate() {
                let sample_id = format!("s-{k:03}");
                let sample = make_sample_with_xray(
                    spec,
                    &config.geometry,
                    proj,
                    &sample_id,
                    offset,
                    config.threshold_mm,
                    xray.clone(),
                )?;
                let rel = |ext: &str| {
                    dir.join(format!("{sample_id}.{ext}"))
                        .to_string_lossy()
                        .replace('\\', "/")
                };
                let (xp, dp, mp) = (rel("xray.f32"), rel("drr.f32"), rel("meta.json"));
                write_f32_grid(&out.join(&xp), &sample.pair.xray)?;
                write_f32_grid(&out.join(&dp), &sample.pair.drr)?;
                let meta = SampleMeta {
                    specimen_id: sample.specimen_id.clone(),
                    projection_id: sample.projection_id.clone(),
                    sample_id: sample_id.clone(),
                    view: proj.view,
                    offset: sample.offset,
                    mtre_mm: sample.mtre_mm,
                    label: sample.label,
                    threshold_mm: config.threshold_mm,
                    image: GridSidecar::f32(h, w),
                };
                fs::write(out.join(&mp), serde_json::to_vec_pretty(&meta)?)
                    .map_err(|e| Error::io(out.join(&mp), e))?;
                *counts
                    .per_specimen
                    .entry(sample.specimen_id.clone())
                    .or_default() += 1;
                *counts
                    .per_projection
                    .entry(format!("{}/{}", sample.specimen_id, sample.projection_id))
                    .or_default() += 1;
                samples.push(SampleRecord {
                    specimen_id: sample.specimen_id,
                    projection_id: sample.projection_id,
                    sample_id,
                    xray_path: xp,
                    drr_path: dp,
                    meta_path: mp,
                    offset: sample.offset,
                    mtre_mm: sample.mtre_mm,
                    label: sample.label,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        config_hash: config_hash(config),
        threshold_mm: config.threshold_mm,
        offset_scale: plan.scale,
        accepted_prevalence: plan.prevalence,
        counts,
        specimens: plan
            .specimens
            .iter()
            .map(|(s, spec)| SpecimenRecord {
                specimen_id: spec.specimen_id.clone(),
                seed: *s,
                landmarks: spec.landmarks.clone(),
            })
            .collect(),
        projections: plan.projections.into_iter().flatten().collect(),
        samples,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Anything that belongs to one projection and carries a label.
pub trait ProjectionMember {
    fn projection_key(&self) -> (&str, &str);
    fn label(&self) -> RegistrationLabel;
}

impl ProjectionMember for SampleRecord {
    fn projection_key(&self) -> (&str, &str) {
        (&self.specimen_id, &self.projection_id)
    }
    fn label(&self) -> RegistrationLabel {
        self.label
    }
}

impl ProjectionMember for RegistrationSample {
    fn projection_key(&self) -> (&str, &str) {
        (&self.specimen_id, &self.projection_id)
    }
    fn label(&self) -> RegistrationLabel {
        self.label
    }
}

/// Drops every projection whose rejected fraction exceeds
/// `max_reject_fraction` (strictly). Meant for training splits only.
pub fn filter_projections<T: ProjectionMember + Clone>(
    records: &[T],
    max_reject_fraction: f64,
) -> Vec<T> {
    let mut tally: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.projection_key()).or_default();
        e.0 += 1;
        if r.label() == RegistrationLabel::Reject {
            e.1 += 1;
        }
    }
    // compare counts exactly: rejected / total > f  <=>  rejected > f * total
    let keep: std::collections::BTreeSet<(&str, &str)> = tally
        .iter()
        .filter(|(_, (n, rej))| !(*rej as f64 > max_reject_fraction * *n as f64 + 1e-9))
        .map(|(k, _)| *k)
        .collect();
    records
        .iter()
        .filter(|r| keep.contains(&r.projection_key()))
        .cloned()
        .collect()
}

/// Appends augmented copies of accepted samples until
/// `accepted ≥ round(target_ratio · rejected)`.
pub fn oversample_accepts<R: Rng + ?Sized>(
    mut split: Vec<RegistrationSample>,
    rng: &mut R,
    target_ratio: f64,
    params: &AugmentParams,
) -> Result<Vec<RegistrationSample>> {
    params.validate()?;
    let accepted: Vec<usize> = split
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label.is_accept())
        .map(|(i, _)| i)
        .collect();
    if accepted.is_empty() {
        return Err(invalid(
            "training split has no accepted samples to oversample",
        ));
    }
    let rejected = split.len() - accepted.len();
    let wanted = (target_ratio * rejected as f64).round() as usize;
    if accepted.len() >= wanted {
        return Ok(split);
    }
    let mut order = accepted.clone();
    order.shuffle(rng);
    for copy in 0..wanted - accepted.len() {
        let src = &split[order[copy % order.len()]];
        let pair = ImagePair {
            xray: augment(&src.pair.xray, rng, params),
            drr: augment(&src.pair.drr, rng, params),
        };
        let mut dup = src.clone();
        dup.pair = pair;
        dup.sample_id = format!("{}+aug{copy}", src.sample_id);
        split.push(dup);
    }
    Ok(split)
}
