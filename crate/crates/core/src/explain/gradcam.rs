//! Grad-CAM over the last convolutional feature map of the verifier.

use ndarray::{Array1, Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, VerifierModel};
use crate::phantom::ImagePair;
use crate::pose::RegistrationLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Upsampled map at input resolution, `(height, width)`.
    pub grid: Array2<f32>,
    /// Normalized map at the feature-map resolution.
    pub native: Array2<f64>,
    pub native_dims: (usize, usize),
    pub upsampled_dims: (usize, usize),
    pub target: RegistrationLabel,
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
        let bottom = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Channel weights = spatial mean of the gradients; map = ReLU(Σ_k w_k·A_k),
/// divided by its maximum when positive, then resized to `out_dims`.
pub fn grad_cam_from_maps(
    features: ArrayView3<f64>,
    gradients: ArrayView3<f64>,
    out_dims: (usize, usize),
    target: RegistrationLabel,
) -> Result<Heatmap> {
    if features.dim() != gradients.dim() {
        return Err(crate::error::invalid(
            "feature and gradient maps differ in shape",
        ));
    }
    let (_, h, w) = features.dim();
    let weights: Array1<f64> = gradients
        .mean_axis(Axis(2))
        .and_then(|m| m.mean_axis(Axis(1)))
        .expect("non-empty spatial dims");
    let mut map = Array2::<f64>::zeros((h, w));
    for (k, wk) in weights.iter().enumerate() {
        map.scaled_add(*wk, &features.index_axis(Axis(0), k));
    }
    map.mapv_inplace(|v| v.max(0.0));
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map /= max;
    }
    let grid = bilinear_resize(&map, out_dims.0, out_dims.1).mapv(|v| v.clamp(0.0, 1.0) as f32);
    Ok(Heatmap {
        grid,
        native: map,
        native_dims: (h, w),
        upsampled_dims: out_dims,
        target,
    })
}

/// Grad-CAM for `target` (the predicted class when `None`). The class score
/// is the logit for ACCEPT and its negation for REJECT.
pub fn grad_cam(
    model: &VerifierModel,
    pair: &ImagePair,
    target: Option<RegistrationLabel>,
) -> Result<Heatmap> {
    if !model.is_finite() {
        return Err(Error::InvalidState(
            "model parameters are not finite".into(),
        ));
    }
    pair.validate()?;
    let x = model.batch_input(&[pair])?;
    let (features, _) = model.backbone(&x, false);
    let (logits, cache) = model.head_forward(&features, &mut Mode::Eval)?;
    let target = target.unwrap_or(RegistrationLabel::from_accept(
        crate::model::sigmoid(logits[0]) >= 0.5,
    ));
    let sign = if target.is_accept() { 1.0 } else { -1.0 };
    let mut scratch = model.zeros_like();
    let d_features = model.head_backward(&cache.as_ref(), &Array1::from(vec![sign]), &mut scratch);
    grad_cam_from_maps(
        features.index_axis(Axis(0), 0),
        d_features.index_axis(Axis(0), 0),
        pair.dims(),
        target,
    )
}
