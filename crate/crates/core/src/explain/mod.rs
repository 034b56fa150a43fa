//! Explanations for verifier predictions: Grad-CAM heatmaps and conformal
//! prediction sets.

mod conformal;
mod gradcam;

pub use conformal::{
    calibrate, nonconformity, predict_set, predict_set_for, ConformalCalibration, LabelScores,
    PredictionSet, DEFAULT_ALPHA, MIN_CALIBRATION,
};
pub use gradcam::{bilinear_resize, grad_cam, grad_cam_from_maps, Heatmap};
