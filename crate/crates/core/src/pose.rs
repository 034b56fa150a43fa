//! Rigid 6DoF offsets, landmark mapping, mean target registration error and
//! the accept/reject rule.
//!
//! Offsets act on anatomy coordinates: a landmark `p` maps to `R·p + t`, with
//! `R` built from the axis-angle vector and `t` in millimeters.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default acceptance threshold on mTRE, in millimeters.
pub const DEFAULT_THRESHOLD_MM: f64 = 2.0;

/// A rigid registration offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Axis-angle rotation vector, radians.
    pub rotvec: [f64; 3],
    /// Translation in millimeters.
    pub trans_mm: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        Self {
            rotvec: [0.0; 3],
            trans_mm: [0.0; 3],
        }
    }

    /// Builds a transform and canonicalizes its rotation vector.
    pub fn new(rotvec: [f64; 3], trans_mm: [f64; 3]) -> Result<Self> {
        if rotvec.iter().chain(trans_mm.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("transform components must be finite"));
        }
        Ok(Self { rotvec, trans_mm }.canonical())
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotvec: [0.0; 3],
            trans_mm: t,
        }
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn rotation_about(axis: [f64; 3], angle: f64) -> Self {
        let a = Vector3::from(axis).normalize() * angle;
        Self {
            rotvec: [a.x, a.y, a.z],
            trans_mm: [0.0; 3],
        }
        .canonical()
    }

    pub fn is_finite(&self) -> bool {
        self.rotvec
            .iter()
            .chain(self.trans_mm.iter())
            .all(|v| v.is_finite())
    }

    pub fn rotation_angle(&self) -> f64 {
        Vector3::from(self.rotvec).norm()
    }

    pub fn is_canonical(&self) -> bool {
        self.is_finite() && self.rotation_angle() <= PI + 1e-12
    }

    /// Returns the same rotation with its vector magnitude folded into `[0, π]`.
    pub fn canonical(self) -> Self {
        let v = Vector3::from(self.rotvec);
        let angle = v.norm();
        if angle <= PI {
            return self;
        }
        let axis = v / angle;
        let mut folded = angle.rem_euclid(2.0 * PI);
        let mut axis = axis;
        if folded > PI {
            folded = 2.0 * PI - folded;
            axis = -axis;
        }
        let r = axis * folded;
        Self {
            rotvec: [r.x, r.y, r.z],
            trans_mm: self.trans_mm,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Rotation3::from_scaled_axis(Vector3::from(self.rotvec)).into_inner()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.trans_mm)
    }

    fn from_parts(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        let s = rot.scaled_axis();
        Self {
            rotvec: [s.x, s.y, s.z],
            trans_mm: [t.x, t.y, t.z],
        }
        .canonical()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let r1 = self.rotation_matrix();
        let r = r1 * other.rotation_matrix();
        let t = r1 * other.translation_vector() + self.translation_vector();
        Self::from_parts(&r, t)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self::from_parts(&rt, -(rt * self.translation_vector()))
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation_matrix() * Vector3::from(p) + self.translation_vector();
        [q.x, q.y, q.z]
    }
}

/// Anatomical landmarks of one specimen, in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        let set = Self {
            points,
            names: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_names(points: Vec<[f64; 3]>, names: Vec<String>) -> Result<Self> {
        if names.len() != points.len() {
            return Err(invalid("landmark names and points differ in length"));
        }
        let set = Self {
            points,
            names: Some(names),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(invalid("landmark set is empty"));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("landmark coordinates must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Accept/reject decision on a registration result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegistrationLabel {
    Accept,
    Reject,
}

impl RegistrationLabel {
    pub const ALL: [RegistrationLabel; 2] = [RegistrationLabel::Accept, RegistrationLabel::Reject];

    pub fn is_accept(self) -> bool {
        self == RegistrationLabel::Accept
    }

    pub fn from_accept(accept: bool) -> Self {
        if accept {
            RegistrationLabel::Accept
        } else {
            RegistrationLabel::Reject
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegistrationLabel::Accept => "ACCEPT",
            RegistrationLabel::Reject => "REJECT",
        }
    }
}

impl std::fmt::Display for RegistrationLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RegistrationLabel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ACCEPT" => Ok(RegistrationLabel::Accept),
            "REJECT" => Ok(RegistrationLabel::Reject),
            other => Err(invalid(format!("unknown label {other:?}"))),
        }
    }
}

/// Maps every landmark through `t`.
pub fn apply_transform(t: &RigidTransform, pts: &LandmarkSet) -> Result<LandmarkSet> {
    pts.validate()?;
    if !t.is_finite() {
        return Err(invalid("transform components must be finite"));
    }
    let r = t.rotation_matrix();
    let tv = t.translation_vector();
    let points = pts
        .points
        .iter()
        .map(|p| {
            let q = r * Vector3::from(*p) + tv;
            [q.x, q.y, q.z]
        })
        .collect();
    Ok(LandmarkSet {
        points,
        names: pts.names.clone(),
    })
}

/// Mean Euclidean distance between the landmarks mapped by the estimated and
/// the ground-truth offsets.
pub fn mtre(
    estimated: &RigidTransform,
    gt: &RigidTransform,
    landmarks: &LandmarkSet,
) -> Result<f64> {
    let a = apply_transform(estimated, landmarks)?;
    let b = apply_transform(gt, landmarks)?;
    let total: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| (Vector3::from(*p) - Vector3::from(*q)).norm())
        .sum();
    Ok(total / landmarks.len() as f64)
}

/// ACCEPT iff `mtre_mm < threshold_mm`.
pub fn classify(mtre_mm: f64, threshold_mm: f64) -> Result<RegistrationLabel> {
    if !(mtre_mm >= 0.0) {
        return Err(invalid(format!("mTRE must be non-negative, got {mtre_mm}")));
    }
    if !(threshold_mm > 0.0) || !threshold_mm.is_finite() {
        return Err(invalid(format!(
            "threshold must be positive, got {threshold_mm}"
        )));
    }
    Ok(RegistrationLabel::from_accept(mtre_mm < threshold_mm))
}

/// Per-axis sampling bounds for offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetBounds {
    /// `[min, max]` per rotation-vector component, radians.
    pub rotation_rad: [[f64; 2]; 3],
    /// `[min, max]` per translation component, millimeters.
    pub translation_mm: [[f64; 2]; 3],
}

impl Default for OffsetBounds {
    fn default() -> Self {
        let r = 10f64.to_radians();
        Self::symmetric(r, 10.0)
    }
}

impl OffsetBounds {
    pub fn symmetric(rotation_rad: f64, translation_mm: f64) -> Self {
        Self {
            rotation_rad: [[-rotation_rad, rotation_rad]; 3],
            translation_mm: [[-translation_mm, translation_mm]; 3],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let s = |b: [[f64; 2]; 3]| b.map(|[lo, hi]| [lo * factor, hi * factor]);
        Self {
            rotation_rad: s(self.rotation_rad),
            translation_mm: s(self.translation_mm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.rotation_rad.iter().chain(self.translation_mm.iter()) {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(invalid("offset bounds must be finite"));
            }
            if lo > hi {
                return Err(invalid(format!("inverted offset bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Draws an offset with each of the six components independently uniform
/// within its bounds.
pub fn sample_offset<R: Rng + ?Sized>(
    rng: &mut R,
    bounds: &OffsetBounds,
) -> Result<RigidTransform> {
    bounds.validate()?;
    let mut draw = |[lo, hi]: [f64; 2]| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    let rotvec = bounds.rotation_rad.map(&mut draw);
    let trans_mm = bounds.translation_mm.map(&mut draw);
    RigidTransform::new(rotvec, trans_mm)
}
