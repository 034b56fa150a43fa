//! The pool of scored cases a review study draws from, with pre-rendered
//! image assets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::types::ReviewConfig;
use crate::error::{Error, Result};
use crate::eval::{balanced_subset, ErrorCategory};
use crate::explain::{grad_cam, ConformalCalibration};
use crate::imageio::{gray_png, heatmap_png};
use crate::model::{sigmoid, VerifierModel};
use crate::phantom::{ImagePair, RegistrationSample};
use crate::pose::RegistrationLabel;
use crate::rng::task_rng;

pub const XRAY_ASSET: &str = "xray.png";
pub const DRR_ASSET: &str = "drr.png";
pub const HEATMAP_ASSET: &str = "heatmap.png";
pub const ASSETS: [&str; 3] = [XRAY_ASSET, DRR_ASSET, HEATMAP_ASSET];
pub const BANK_FILE: &str = "cases.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankCase {
    pub case_id: String,
    /// Dataset sample uid; never sent to clients.
    pub source_uid: String,
    pub ground_truth: RegistrationLabel,
    pub category: ErrorCategory,
    pub ai_prediction: RegistrationLabel,
    pub ai_probability: f64,
    pub prediction_set: Vec<RegistrationLabel>,
    pub set_certain: bool,
    pub set_fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseBankMeta {
    pub held_out_specimen: Option<String>,
    pub alpha: Option<f64>,
    pub threshold: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseBank {
    pub meta: CaseBankMeta,
    pub cases: Vec<BankCase>,
    #[serde(skip)]
    root: Option<PathBuf>,
}

impl CaseBank {
    /// A bank without on-disk assets.
    pub fn in_memory(meta: CaseBankMeta, cases: Vec<BankCase>) -> Self {
        Self {
            meta,
            cases,
            root: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BANK_FILE);
        if !path.is_file() {
            return Err(Error::Dependency(vec![format!(
                "case bank {}",
                path.display()
            )]));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut bank: Self = serde_json::from_slice(&bytes)?;
        bank.root = Some(dir.to_path_buf());
        Ok(bank)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(BANK_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, case_id: &str) -> Option<&BankCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Case ids per category, sorted.
    pub fn by_category(&self) -> BTreeMap<ErrorCategory, Vec<String>> {
        let mut out: BTreeMap<ErrorCategory, Vec<String>> = BTreeMap::new();
        for c in &self.cases {
            out.entry(c.category).or_default().push(c.case_id.clone());
        }
        for v in out.values_mut() {
            v.sort();
        }
        out
    }

    pub fn asset(&self, case_id: &str, file: &str) -> Result<Vec<u8>> {
        if self.get(case_id).is_none() || !ASSETS.contains(&file) {
            return Err(Error::NotFound(format!("asset {case_id}/{file}")));
        }
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::NotFound(format!("asset {case_id}/{file}")))?;
        let path = root.join("assets").join(case_id).join(file);
        fs::read(&path).map_err(|_| Error::NotFound(format!("asset {case_id}/{file}")))
    }
}

/// Scores `samples`, draws a balanced subset large enough for the study
/// (disjoint lists need four times as many) and renders its assets.
pub fn build_case_bank(
    model: &VerifierModel,
    calibration: &ConformalCalibration,
    samples: &[RegistrationSample],
    cfg: &ReviewConfig,
    seed: u64,
    dir: &Path,
) -> Result<CaseBank> {
    let pairs: Vec<&ImagePair> = samples.iter().map(|s| &s.pair).collect();
    let logits = model.predict_logits(&pairs, 32)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let predicted: Vec<RegistrationLabel> = probs
        .iter()
        .map(|&p| RegistrationLabel::from_accept(p >= 0.5))
        .collect();
    let truth: Vec<RegistrationLabel> = samples.iter().map(|s| s.label).collect();
    let ids: Vec<String> = (0..samples.len()).map(|i| i.to_string()).collect();
    let per = cfg.cases_per_category * if cfg.share_cases { 1 } else { 4 };
    let mut rng = task_rng(seed, &[30]);
    let subset = balanced_subset(&ids, &predicted, &truth, per, &mut rng)?;
    let mut chosen: Vec<usize> = subset
        .ids()
        .iter()
        .map(|s| s.parse().expect("index ids"))
        .collect();
    chosen.shuffle(&mut rng);

    let assets = dir.join("assets");
    let mut cases = Vec::with_capacity(chosen.len());
    for (k, &i) in chosen.iter().enumerate() {
        let case_id = format!("case-{k:03}");
        let s = &samples[i];
        let set = calibration.predict([probs[i], 1.0 - probs[i]])?;
        let heat = grad_cam(model, &s.pair, Some(predicted[i]))?;
        let cdir = assets.join(&case_id);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        for (name, bytes) in [
            (XRAY_ASSET, gray_png(&s.pair.xray, cfg.window, cfg.level)),
            (DRR_ASSET, gray_png(&s.pair.drr, cfg.window, cfg.level)),
            (HEATMAP_ASSET, heatmap_png(&heat.grid, cfg.heatmap_alpha)),
        ] {
            let p = cdir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        cases.push(BankCase {
            case_id,
            source_uid: s.uid(),
            ground_truth: s.label,
            category: crate::eval::ErrorCategory::of(predicted[i], s.label),
            ai_prediction: predicted[i],
            ai_probability: probs[i],
            prediction_set: set.labels.clone(),
            set_certain: set.certain,
            set_fallback: set.fallback,
        });
    }
    let mut bank = CaseBank {
        meta: CaseBankMeta {
            held_out_specimen: samples.first().map(|s| s.specimen_id.clone()),
            alpha: Some(calibration.alpha),
            threshold: Some(calibration.threshold),
            seed,
        },
        cases,
        root: None,
    };
    bank.save(dir)?;
    bank.root = Some(dir.to_path_buf());
    Ok(bank)
}
