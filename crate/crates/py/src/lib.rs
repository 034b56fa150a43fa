//! Python bindings. Images are nested lists (or anything sequence-like,
//! including numpy arrays) of floats; structured results come back as
//! plain dicts.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use regverify_core::config::RunConfig;
use regverify_core::eval::{
    auc as auc_, run_cv, weighted_accuracy as weighted_accuracy_, PrevalenceWeights,
};
use regverify_core::explain::{grad_cam, predict_set as predict_set_, ConformalCalibration};
use regverify_core::model::{Checkpoint, CheckpointMeta, ModelConfig, VerifierModel};
use regverify_core::phantom::{build_dataset, ImagePair};
use regverify_core::pose::{classify as classify_, mtre as mtre_, LandmarkSet};
use regverify_core::{Error, RegistrationLabel, RigidTransform};
use serde::Serialize;

fn err(e: Error) -> PyErr {
    if e.is_validation() || matches!(e, Error::NotFound(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Serializes through JSON so every result is made of builtin types.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn grid(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows must have equal length"));
    }
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn pair(xray: Vec<Vec<f32>>, drr: Vec<Vec<f32>>) -> PyResult<ImagePair> {
    ImagePair::new(grid(xray)?, grid(drr)?).map_err(err)
}

fn label(s: &str) -> PyResult<RegistrationLabel> {
    match s.to_ascii_uppercase().as_str() {
        "ACCEPT" => Ok(RegistrationLabel::Accept),
        "REJECT" => Ok(RegistrationLabel::Reject),
        _ => Err(PyValueError::new_err(format!("unknown label {s:?}"))),
    }
}

/// `(rx, ry, rz, tx, ty, tz)`: axis-angle rotation in radians, translation in mm.
fn transform(t: [f64; 6]) -> PyResult<RigidTransform> {
    RigidTransform::new([t[0], t[1], t[2]], [t[3], t[4], t[5]]).map_err(err)
}

fn run_config(preset: &str, config_json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match (config_json, preset) {
        (Some(text), _) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        (None, "toy") => RunConfig::toy(),
        (None, "default") => RunConfig::default(),
        (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    cfg.resolve().map_err(err)
}

/// Mean target registration error between two transforms over `landmarks`.
#[pyfunction]
#[pyo3(signature = (estimated, landmarks, ground_truth = [0.0; 6]))]
fn mtre(estimated: [f64; 6], landmarks: Vec<[f64; 3]>, ground_truth: [f64; 6]) -> PyResult<f64> {
    let lm = LandmarkSet::new(landmarks).map_err(err)?;
    mtre_(&transform(estimated)?, &transform(ground_truth)?, &lm).map_err(err)
}

/// `"ACCEPT"` iff `mtre_mm` is strictly below the threshold.
#[pyfunction]
#[pyo3(signature = (mtre_mm, threshold_mm = 2.0))]
fn classify(mtre_mm: f64, threshold_mm: f64) -> PyResult<&'static str> {
    classify_(mtre_mm, threshold_mm)
        .map(RegistrationLabel::as_str)
        .map_err(err)
}

/// Area under the ROC curve of `scores` (higher = ACCEPT); None when one
/// class is absent.
#[pyfunction]
fn auc(scores: Vec<f64>, accept: Vec<bool>) -> PyResult<Option<f64>> {
    let truth: Vec<RegistrationLabel> = accept
        .into_iter()
        .map(RegistrationLabel::from_accept)
        .collect();
    auc_(&scores, &truth).map_err(err)
}

/// Prevalence-weighted accuracy of per-category fractions (TP, TN, FP, FN).
#[pyfunction]
#[pyo3(signature = (fractions, weights = None))]
fn weighted_accuracy(fractions: [f64; 4], weights: Option<[f64; 4]>) -> PyResult<f64> {
    let w = match weights {
        Some([tp, tn, fp, fn_]) => PrevalenceWeights::new(tp, tn, fp, fn_).map_err(err)?,
        None => PrevalenceWeights::reference(),
    };
    weighted_accuracy_(fractions, &w).map_err(err)
}

/// Conformal prediction set for a binary probability at a given threshold.
#[pyfunction]
fn predict_set(py: Python<'_>, threshold: f64, p_accept: f64) -> PyResult<Py<PyAny>> {
    let set = predict_set_(threshold, [p_accept, 1.0 - p_accept]).map_err(err)?;
    to_py(py, &set)
}

/// Writes a dataset under `out` and returns a summary.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, preset = "default", config_json = None))]
fn generate_dataset(
    py: Python<'_>,
    out: PathBuf,
    seed: u64,
    preset: &str,
    config_json: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let cfg = run_config(preset, config_json)?;
    let m = py
        .detach(|| build_dataset(&cfg.dataset, seed, &out))
        .map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "samples": m.samples.len(),
            "specimens": m.specimen_ids(),
            "accepted_prevalence": m.accepted_prevalence,
            "config_hash": m.config_hash,
        }),
    )
}

/// Leave-one-specimen-out cross-validation over a generated dataset.
#[pyfunction]
#[pyo3(signature = (data, out, preset = "default", config_json = None, folds = None))]
fn cross_validate(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    preset: &str,
    config_json: Option<&str>,
    folds: Option<Vec<usize>>,
) -> PyResult<Py<PyAny>> {
    let cfg = run_config(preset, config_json)?;
    let report = py
        .detach(|| {
            let manifest = regverify_core::phantom::DatasetManifest::load(&data)?;
            run_cv(
                &data,
                &manifest,
                &cfg.model,
                &cfg.train,
                cfg.alpha,
                &out,
                folds.as_deref(),
            )
        })
        .map_err(err)?;
    to_py(py, &report)
}

/// A trained (or freshly initialized) verifier.
#[pyclass(module = "regverify")]
struct Verifier {
    model: VerifierModel,
    meta: CheckpointMeta,
}

#[pymethods]
impl Verifier {
    /// Randomly initialized model with the default architecture.
    #[new]
    #[pyo3(signature = (seed = 0, input_size = 128))]
    fn new(seed: u64, input_size: usize) -> PyResult<Self> {
        let cfg = ModelConfig {
            input_size,
            ..ModelConfig::default()
        };
        Ok(Self {
            model: VerifierModel::new(cfg, seed).map_err(err)?,
            meta: CheckpointMeta::default(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            model: ckpt.model,
            meta: ckpt.meta,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            model: self.model.clone(),
            meta: self.meta.clone(),
        }
        .save(&path)
        .map_err(err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.model.config.input_size
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.meta)
    }

    /// `{"logit", "p_accept", "predicted"}` for one X-ray/DRR pair.
    fn predict(
        &self,
        py: Python<'_>,
        xray: Vec<Vec<f32>>,
        drr: Vec<Vec<f32>>,
    ) -> PyResult<Py<PyAny>> {
        let p = pair(xray, drr)?;
        let out = py.detach(|| self.model.forward(&p)).map_err(err)?;
        to_py(
            py,
            &serde_json::json!({
                "logit": out.logit,
                "p_accept": out.probability_accept,
                "predicted": out.predicted_label,
            }),
        )
    }

    /// Grad-CAM heatmap for `target` (default: the predicted label).
    #[pyo3(signature = (xray, drr, target = None))]
    fn explain(
        &self,
        py: Python<'_>,
        xray: Vec<Vec<f32>>,
        drr: Vec<Vec<f32>>,
        target: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let p = pair(xray, drr)?;
        let target = target.map(label).transpose()?;
        let heat = py
            .detach(|| grad_cam(&self.model, &p, target))
            .map_err(err)?;
        to_py(
            py,
            &serde_json::json!({
                "target": heat.target,
                "grid": heat.grid.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                "native": heat.native.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                "native_dims": heat.native_dims,
            }),
        )
    }
}

/// Split-conformal calibration.
#[pyclass(module = "regverify")]
struct Calibration(ConformalCalibration);

#[pymethods]
impl Calibration {
    #[staticmethod]
    #[pyo3(signature = (scores, alpha = 0.1))]
    fn from_scores(scores: Vec<f64>, alpha: f64) -> PyResult<Self> {
        ConformalCalibration::from_scores(scores, alpha)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ConformalCalibration::load(&path).map(Self).map_err(err)
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.0.threshold
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    fn predict(&self, py: Python<'_>, p_accept: f64) -> PyResult<Py<PyAny>> {
        let set = self.0.predict([p_accept, 1.0 - p_accept]).map_err(err)?;
        to_py(py, &set)
    }
}

#[pymodule]
fn regverify(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(mtre, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(predict_set, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_class::<Verifier>()?;
    m.add_class::<Calibration>()?;
    Ok(())
}
