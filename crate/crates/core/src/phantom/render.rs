//! Analytic line-integral projector through ellipsoid phantoms.
//!
//! World frame: the source sits at `(0, 0, -source_to_isocenter)`, the
//! isocenter at the origin and the detector plane at
//! `z = source_to_detector - source_to_isocenter`. Detector `u` runs along
//! world `x`, `v` along world `y`.

use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::specimen::PhantomSpecimen;
use crate::error::{invalid, Result};
use crate::pose::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionGeometry {
    pub source_to_detector_mm: f64,
    pub source_to_isocenter_mm: f64,
    pub detector_width_mm: f64,
    pub detector_height_mm: f64,
    pub image_width_px: usize,
    pub image_height_px: usize,
    /// Principal point `(u, v)` in pixels, measured from the image corner.
    pub principal_point_px: [f64; 2],
}

impl Default for ProjectionGeometry {
    fn default() -> Self {
        Self::square(128)
    }
}

impl ProjectionGeometry {
    /// Default C-arm-like geometry sampled on an `n × n` grid.
    pub fn square(n: usize) -> Self {
        Self {
            source_to_detector_mm: 1000.0,
            source_to_isocenter_mm: 700.0,
            detector_width_mm: 300.0,
            detector_height_mm: 300.0,
            image_width_px: n,
            image_height_px: n,
            principal_point_px: [n as f64 / 2.0, n as f64 / 2.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.source_to_detector_mm,
            self.source_to_isocenter_mm,
            self.detector_width_mm,
            self.detector_height_mm,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid(
                "projection geometry distances and detector size must be positive",
            ));
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if self.source_to_isocenter_mm >= self.source_to_detector_mm {
            return Err(invalid("isocenter must lie between source and detector"));
        }
        if self.principal_point_px.iter().any(|v| !v.is_finite()) {
            return Err(invalid("principal point must be finite"));
        }
        Ok(())
    }

    pub fn pixel_pitch_mm(&self) -> [f64; 2] {
        [
            self.detector_width_mm / self.image_width_px as f64,
            self.detector_height_mm / self.image_height_px as f64,
        ]
    }

    pub fn source(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.source_to_isocenter_mm)
    }

    /// World position of the center of pixel `(u, v)`.
    pub fn pixel_center(&self, u: usize, v: usize) -> Vector3<f64> {
        let [px, py] = self.pixel_pitch_mm();
        Vector3::new(
            (u as f64 + 0.5 - self.principal_point_px[0]) * px,
            (v as f64 + 0.5 - self.principal_point_px[1]) * py,
            self.source_to_detector_mm - self.source_to_isocenter_mm,
        )
    }

    /// Pinhole projection of a world point to continuous pixel coordinates
    /// `(u, v)` such that pixel centers sit at integer values.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let depth = p[2] + self.source_to_isocenter_mm;
        if depth <= 0.0 {
            return None;
        }
        let scale = self.source_to_detector_mm / depth;
        let [px, py] = self.pixel_pitch_mm();
        Some([
            p[0] * scale / px + self.principal_point_px[0] - 0.5,
            p[1] * scale / py + self.principal_point_px[1] - 0.5,
        ])
    }
}

/// Raw line integrals (unnormalized) of the specimen placed at `pose`.
pub fn line_integrals(
    spec: &PhantomSpecimen,
    geom: &ProjectionGeometry,
    pose: &RigidTransform,
) -> Result<Array2<f64>> {
    geom.validate()?;
    if !pose.is_finite() {
        return Err(invalid("pose must be finite"));
    }
    // Rays are mapped back into specimen coordinates: x_spec = Rᵀ (x - t).
    let rt = pose.rotation_matrix().transpose();
    let t = pose.translation_vector();
    let origin = rt * (geom.source() - t);
    let prims: Vec<_> = spec
        .primitives
        .iter()
        .map(|e| {
            let c = Vector3::from(e.center_mm);
            let inv_a = Vector3::from(e.semi_axes_mm.map(|a| 1.0 / a));
            ((origin - c).component_mul(&inv_a), inv_a, e.density)
        })
        .collect();
    let (w, h) = (geom.image_width_px, geom.image_height_px);
    let mut out = Array2::<f64>::zeros((h, w));
    for v in 0..h {
        for u in 0..w {
            let dir = rt * (geom.pixel_center(u, v) - geom.source());
            let dir_len = dir.norm();
            let mut acc = 0.0;
            for (o, inv_a, density) in &prims {
                let d = dir.component_mul(inv_a);
                let a = d.norm_squared();
                let b = o.dot(&d);
                let c = o.norm_squared() - 1.0;
                let disc = b * b - a * c;
                if disc > 0.0 {
                    // chord length in parameter units times the world length of `dir`
                    acc += density * 2.0 * disc.sqrt() / a * dir_len;
                }
            }
            out[[v, u]] = acc;
        }
    }
    Ok(out)
}

/// Min-max normalizes into `[0, 1]`; constant images map to all zeros.
pub fn normalize_intensity(img: &Array2<f64>) -> Result<Array2<f32>> {
    if img.iter().any(|v| !v.is_finite()) {
        return Err(invalid("image contains non-finite values"));
    }
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if !(span > 0.0) {
        return Ok(Array2::zeros(img.raw_dim()));
    }
    Ok(img.mapv(|v| (((v - lo) / span) as f32).clamp(0.0, 1.0)))
}

/// Renders a normalized projection of the specimen placed at `pose`.
pub fn render_projection(
    spec: &PhantomSpecimen,
    geom: &ProjectionGeometry,
    pose: &RigidTransform,
) -> Result<Array2<f32>> {
    normalize_intensity(&line_integrals(spec, geom, pose)?)
}
