use std::collections::HashSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regverify_core::config::RunConfig;
use regverify_core::eval::{
    check_leakage, run_cv, split_fold, CALIBRATION_FILE, CHECKPOINT_FILE, HISTORY_FILE, SPLIT_FILE,
};
use regverify_core::explain::{calibrate, grad_cam, ConformalCalibration};
use regverify_core::imageio::heatmap_preview_png;
use regverify_core::model::{loso_split, train, write_history_csv, Checkpoint, CheckpointMeta};
use regverify_core::phantom::{build_dataset, DatasetManifest, RegistrationSample, SampleRecord};
use regverify_core::review::{
    build_case_bank, decisions_csv, summary_csv, surveys_csv, CaseBank, CaseBankMeta, ExportFilter,
    ReviewConfig, ReviewService, SystemClock, BANK_FILE,
};
use regverify_core::{config_hash, Error, RegistrationLabel};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::error::{validation, CliError};
use crate::manifest::{self, RunRecorder};

type Result<T, E = CliError> = std::result::Result<T, E>;

pub const BANK_DIR: &str = "bank";
pub const SESSIONS_DIR: &str = "sessions";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// One JSON line on stdout per command, for scripting.
fn report<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string(value).expect("serializable report")
    );
}

/// The configuration a dataset was generated with, if it was made by us.
fn inherited(data: &Path) -> Option<RunConfig> {
    manifest::load(&manifest::location("generate", data, true)).map(|m| m.config)
}

fn resolve(
    args: &ConfigArgs,
    inherit: Option<RunConfig>,
    apply: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &args.config {
        if !path.is_file() {
            return Err(validation(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        RunConfig::load(path)?
    } else {
        match args.preset {
            Some(Preset::Toy) => RunConfig::toy(),
            Some(Preset::Default) => RunConfig::default(),
            None => inherit.unwrap_or_default(),
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.threshold_mm {
        cfg.threshold_mm = t;
        cfg.dataset.threshold_mm = t;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    apply(&mut cfg);
    Ok(cfg.resolve()?)
}

fn apply_train(cfg: &mut RunConfig, t: &TrainOverrides) {
    if let Some(v) = t.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = t.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = t.patience {
        cfg.train.patience = v;
    }
}

fn load_dataset(data: &Path) -> Result<DatasetManifest> {
    if !data.is_dir() {
        return Err(validation(format!(
            "dataset directory {} does not exist",
            data.display()
        )));
    }
    Ok(DatasetManifest::load(data)?)
}

fn check_input_size(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    let (h, w) = manifest.image_dims();
    if h != cfg.model.input_size || w != cfg.model.input_size {
        return Err(validation(format!(
            "dataset images are {h}x{w} but model.input_size is {}; pass a matching --config or --preset",
            cfg.model.input_size
        )));
    }
    Ok(())
}

fn load_records(
    manifest: &DatasetManifest,
    root: &Path,
    ids: &[String],
) -> Result<Vec<RegistrationSample>> {
    let wanted: HashSet<&String> = ids.iter().collect();
    let recs: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| wanted.contains(&s.uid()))
        .collect();
    if recs.len() != wanted.len() {
        return Err(validation(format!(
            "{} of {} referenced samples are missing from the dataset",
            wanted.len() - recs.len(),
            wanted.len()
        )));
    }
    Ok(manifest.load_samples(root, recs)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(validation(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_calibration(
    explicit: Option<&Path>,
    ckpt: &Path,
) -> Result<(PathBuf, ConformalCalibration)> {
    let path = explicit.map_or_else(|| sibling(ckpt, CALIBRATION_FILE), Path::to_path_buf);
    if !path.is_file() {
        return Err(Error::Dependency(vec![format!(
            "calibration {} (run `regverify calibrate` first)",
            path.display()
        )])
        .into());
    }
    Ok((path.clone(), ConformalCalibration::load(&path)?))
}

/// Runs `body` and always records the run, successful or not.
fn recorded(mut rec: RunRecorder, body: impl FnOnce(&mut RunRecorder) -> Result<()>) -> Result<()> {
    let result = body(&mut rec);
    let written = rec.finish(&result);
    result.and(written)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = resolve(&args.config, None, |c| {
        if let Some(v) = args.specimens {
            c.dataset.specimens = v;
        }
        if let Some(v) = args.projections {
            c.dataset.projections_per_specimen = v;
        }
        if let Some(v) = args.samples_per_projection {
            c.dataset.samples_per_projection = v;
        }
    })?;
    let mut rec = RunRecorder::new("generate", &cfg);
    rec.path = Some(manifest::location("generate", &args.out, true));
    if let Some(p) = &args.config.config {
        rec.input("config", p);
    }
    recorded(rec, |rec| {
        let m = build_dataset(&cfg.dataset, cfg.seed, &args.out)?;
        rec.output(&args.out);
        report(&json!({
            "command": "generate",
            "out": args.out,
            "samples": m.samples.len(),
            "specimens": m.specimens.len(),
            "accepted_prevalence": m.accepted_prevalence,
            "dataset_config_hash": m.config_hash,
        }));
        Ok(())
    })
}

pub fn train_fold(args: TrainArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    let cfg = resolve(&args.config, inherited(&args.data), |c| {
        apply_train(c, &args.train)
    })?;
    check_input_size(&cfg, &manifest)?;
    let folds = loso_split(&manifest.specimen_ids())?;
    let fold = folds.get(args.fold).ok_or_else(|| {
        validation(format!(
            "fold {} out of range (0..{})",
            args.fold,
            folds.len()
        ))
    })?;

    let mut rec = RunRecorder::new("train", &cfg);
    rec.path = Some(manifest::location("train", &args.out, true));
    rec.input("data", &args.data);
    recorded(rec, |rec| {
        let split = split_fold(
            &manifest,
            fold,
            cfg.train.calibration_fraction,
            cfg.train.seed,
        )?;
        check_leakage(&split)?;
        let train_samples = load_records(&manifest, &args.data, &split.train_ids)?;
        let val_samples = load_records(&manifest, &args.data, &split.test_ids)?;
        log::info!(
            "fold {}: held out {}, {} train / {} validation samples",
            fold.index,
            fold.held_out_specimen,
            train_samples.len(),
            val_samples.len()
        );
        let outcome = train(train_samples, &val_samples, &cfg.model, &cfg.train)?;
        let best = outcome
            .history
            .iter()
            .find(|h| h.epoch == outcome.best_epoch)
            .cloned();
        let ckpt = Checkpoint {
            model: outcome.model,
            meta: CheckpointMeta {
                fold: Some(fold.index),
                held_out_specimen: Some(fold.held_out_specimen.clone()),
                train_specimens: fold.train_specimens.clone(),
                train_sample_ids: split.train_ids.clone(),
                calibration_sample_ids: split.calibration_ids.clone(),
                dataset_config_hash: Some(manifest.config_hash.clone()),
                train_config_hash: Some(config_hash(&cfg.train)),
                seed: cfg.train.seed,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.history.len(),
            },
        };
        create_dir(&args.out)?;
        let ckpt_path = args.out.join(CHECKPOINT_FILE);
        ckpt.save(&ckpt_path)?;
        write_history_csv(&args.out.join(HISTORY_FILE), &outcome.history)?;
        write_json(&args.out.join(SPLIT_FILE), &split)?;
        for f in [CHECKPOINT_FILE, HISTORY_FILE, SPLIT_FILE] {
            rec.output(&args.out.join(f));
        }
        report(&json!({
            "command": "train",
            "fold": fold.index,
            "held_out_specimen": fold.held_out_specimen,
            "best_epoch": outcome.best_epoch,
            "epochs_run": ckpt.meta.epochs_run,
            "best_val_loss": best.as_ref().map(|h| h.val_loss),
            "best_val_acc": best.as_ref().map(|h| h.val_acc),
            "checkpoint": ckpt_path,
        }));
        Ok(())
    })
}

pub fn calibrate_ckpt(args: CalibrateArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    let cfg = resolve(&args.config, inherited(&args.data), |_| {})?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    if ckpt.meta.calibration_sample_ids.is_empty() {
        return Err(validation("the checkpoint records no calibration split"));
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| sibling(&args.ckpt, CALIBRATION_FILE));
    let mut rec = RunRecorder::new("calibrate", &cfg);
    rec.path = Some(manifest::location("calibrate", &out, false));
    rec.input("data", &args.data);
    rec.input("checkpoint", &args.ckpt);
    recorded(rec, |rec| {
        let samples = load_records(&manifest, &args.data, &ckpt.meta.calibration_sample_ids)?;
        let training: HashSet<String> = ckpt.meta.train_sample_ids.iter().cloned().collect();
        let cal = calibrate(&ckpt.model, &samples, &training, cfg.alpha)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        cal.save(&out)?;
        rec.output(&out);
        report(&json!({
            "command": "calibrate",
            "alpha": cal.alpha,
            "threshold": cal.threshold,
            "n": cal.n,
            "calibration": out,
        }));
        Ok(())
    })
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    let cfg = resolve(&args.config, inherited(&args.data), |c| {
        apply_train(c, &args.train)
    })?;
    check_input_size(&cfg, &manifest)?;
    let mut rec = RunRecorder::new("evaluate", &cfg);
    rec.path = Some(manifest::location("evaluate", &args.out, true));
    rec.input("data", &args.data);
    recorded(rec, |rec| {
        let report_ = run_cv(
            &args.data,
            &manifest,
            &cfg.model,
            &cfg.train,
            cfg.alpha,
            &args.out,
            args.folds.as_deref(),
        )?;
        rec.output(&args.out);
        let agg = &report_.aggregate;
        report(&json!({
            "command": "evaluate",
            "folds": report_.folds.len(),
            "accuracy": agg.accuracy,
            "auc": agg.auc,
            "min_fold_val_acc": report_.folds.iter().map(|f| f.best_val_acc).fold(f64::INFINITY, f64::min),
            "coverage": report_.folds.iter().map(|f| f.coverage).collect::<Vec<_>>(),
            "out": args.out,
        }));
        Ok(())
    })
}

/// Accepts a full uid or, when unambiguous, a bare sample id.
fn find_case<'a>(manifest: &'a DatasetManifest, case: &str) -> Result<&'a SampleRecord> {
    if let Some(r) = manifest.samples.iter().find(|s| s.uid() == case) {
        return Ok(r);
    }
    let matches: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| s.sample_id == case)
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err(validation(format!("case {case:?} is not in the dataset"))),
        _ => Err(validation(format!(
            "case {case:?} is ambiguous; use the full specimen/projection/sample uid"
        ))),
    }
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let train_run = manifest::load(&manifest::location(
        "train",
        args.ckpt.parent().unwrap_or(Path::new(".")),
        true,
    ));
    let data = match (&args.data, &train_run) {
        (Some(d), _) => d.clone(),
        (None, Some(run)) => run
            .inputs
            .iter()
            .find(|i| i.role == "data")
            .map(|i| PathBuf::from(&i.path))
            .ok_or_else(|| {
                validation("no --data given and the training record names no dataset")
            })?,
        (None, None) => {
            return Err(validation(
                "no --data given and no training record next to the checkpoint",
            ))
        }
    };
    let manifest = load_dataset(&data)?;
    let (cal_path, cal) = load_calibration(args.calibration.as_deref(), &args.ckpt)?;
    let cfg = train_run.map(|r| r.config).unwrap_or_default();
    let json_out = args.out.with_extension("json");

    let mut rec = RunRecorder::new("explain", &cfg);
    rec.path = Some(manifest::location("explain", &args.out, false));
    rec.input("checkpoint", &args.ckpt);
    rec.input("calibration", &cal_path);
    rec.input("data", &data);
    recorded(rec, |rec| {
        let record = find_case(&manifest, &args.case)?;
        let sample = manifest.load_sample(&data, record)?;
        let out = ckpt.model.forward(&sample.pair)?;
        let probs = out.probabilities();
        let target = match args.target.as_deref() {
            Some("ACCEPT") => RegistrationLabel::Accept,
            Some(_) => RegistrationLabel::Reject,
            None => out.predicted_label,
        };
        let heat = grad_cam(&ckpt.model, &sample.pair, Some(target))?;
        let set = cal.predict(probs)?;
        if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        fs::write(&args.out, heatmap_preview_png(&heat.grid))
            .map_err(|e| CliError::io(&args.out, e))?;
        let held_out = ckpt.meta.held_out_specimen.as_deref() == Some(record.specimen_id.as_str());
        let in_training = ckpt
            .meta
            .train_sample_ids
            .iter()
            .any(|id| *id == record.uid());
        write_json(
            &json_out,
            &json!({
                "case": record.uid(),
                "ground_truth": record.label,
                "mtre_mm": record.mtre_mm,
                "held_out_specimen": held_out,
                "in_training_split": in_training,
                "logit": out.logit,
                "p_accept": probs[0],
                "predicted": out.predicted_label,
                "heatmap": {
                    "file": args.out,
                    "target": heat.target,
                    "native_dims": heat.native_dims,
                    "upsampled_dims": heat.upsampled_dims,
                    "native": heat.native.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                },
                "prediction_set": set,
                "calibration": { "alpha": cal.alpha, "threshold": cal.threshold, "n": cal.n },
            }),
        )?;
        rec.output(&args.out);
        rec.output(&json_out);
        report(&json!({
            "command": "explain",
            "case": record.uid(),
            "predicted": out.predicted_label,
            "prediction_set": set.labels,
            "certain": set.certain,
            "heatmap": args.out,
            "details": json_out,
        }));
        Ok(())
    })
}

/// Cases for the study come from data the model never saw: the held-out
/// specimen when the checkpoint names one, otherwise everything outside its
/// training and calibration splits.
fn study_samples(
    manifest: &DatasetManifest,
    root: &Path,
    meta: &CheckpointMeta,
) -> Result<Vec<RegistrationSample>> {
    let used: HashSet<&String> = meta
        .train_sample_ids
        .iter()
        .chain(&meta.calibration_sample_ids)
        .collect();
    let recs: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| match &meta.held_out_specimen {
            Some(h) => &s.specimen_id == h,
            None => !used.contains(&s.uid()),
        })
        .collect();
    if let Some(leak) = recs.iter().find(|s| used.contains(&s.uid())) {
        return Err(Error::DataLeakage(vec![leak.uid()]).into());
    }
    if recs.is_empty() {
        return Err(validation(
            "no held-out samples available for the review study",
        ));
    }
    Ok(manifest.load_samples(root, recs)?)
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    let cfg = resolve(&args.config, inherited(&args.data), |c| {
        if let Some(v) = args.cases_per_category {
            c.review.cases_per_category = v;
        }
        if args.share_cases {
            c.review.share_cases = true;
        }
    })?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| validation(format!("invalid --host/--port: {e}")))?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let (cal_path, cal) = load_calibration(args.calibration.as_deref(), &args.ckpt)?;
    let bank_dir = args.state.join(BANK_DIR);

    let mut rec = RunRecorder::new("serve", &cfg);
    rec.path = Some(manifest::location("serve", &args.state, true));
    rec.input("data", &args.data);
    rec.input("checkpoint", &args.ckpt);
    rec.input("calibration", &cal_path);
    let mut service = None;
    recorded(rec, |rec| {
        create_dir(&args.state)?;
        let bank = if bank_dir.join(BANK_FILE).is_file() {
            // sessions refer to case ids, so an existing bank is never rebuilt
            log::info!("reusing case bank in {}", bank_dir.display());
            CaseBank::load(&bank_dir)?
        } else {
            let samples = study_samples(&manifest, &args.data, &ckpt.meta)?;
            log::info!("building case bank from {} held-out samples", samples.len());
            build_case_bank(
                &ckpt.model,
                &cal,
                &samples,
                &cfg.review,
                cfg.seed,
                &bank_dir,
            )?
        };
        rec.output(&bank_dir);
        rec.output(&args.state.join(SESSIONS_DIR));
        let svc = ReviewService::open(
            bank,
            cfg.review.clone(),
            &args.state.join(SESSIONS_DIR),
            Arc::new(SystemClock),
        )?;
        service = Some(svc);
        Ok(())
    })?;
    let service = Arc::new(service.expect("service opened"));
    if args.prepare_only {
        report(
            &json!({ "command": "serve", "prepared": true, "cases": service.bank().cases.len(), "state": args.state }),
        );
        return Ok(());
    }
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_io()
        .build()
        .map_err(|e| CliError::io(Path::new("tokio runtime"), e))?;
    rt.block_on(async move {
        let listener = regverify_server::bind(addr).await.map_err(|e| CliError::io(Path::new(&addr.to_string()), e))?;
        let local = listener.local_addr().map_err(|e| CliError::io(Path::new("listener"), e))?;
        report(&json!({ "command": "serve", "listening": format!("http://{local}"), "cases": service.bank().cases.len() }));
        regverify_server::serve(service, listener)
            .await
            .map_err(|e| CliError::io(Path::new("server"), e))
    })
}

pub fn export(args: ExportArgs) -> Result<()> {
    if !args.state.is_dir() {
        return Err(validation(format!(
            "state directory {} does not exist",
            args.state.display()
        )));
    }
    let filter = ExportFilter {
        condition: args.condition.as_deref().map(str::parse).transpose()?,
        participant: args.participant.clone(),
        completed_only: args.completed_only,
    };
    let cfg = manifest::load(&manifest::location("serve", &args.state, true))
        .map(|m| m.config)
        .unwrap_or_default();
    let mut rec = RunRecorder::new("export", &cfg);
    rec.path = Some(manifest::location("export", &args.out, false));
    rec.input("state", &args.state.join(SESSIONS_DIR));
    recorded(rec, |rec| {
        let bank_dir = args.state.join(BANK_DIR);
        let bank = if bank_dir.join(BANK_FILE).is_file() {
            CaseBank::load(&bank_dir)?
        } else {
            CaseBank::in_memory(CaseBankMeta::default(), Vec::new())
        };
        let sessions = args.state.join(SESSIONS_DIR);
        let svc = ReviewService::open(
            bank,
            ReviewConfig::default(),
            &sessions,
            Arc::new(SystemClock),
        )?;
        let export = svc.export(&filter);
        let text = match (args.format, args.table) {
            (ExportFormat::Json, _) => {
                serde_json::to_string_pretty(&export).map_err(Error::from)?
            }
            (ExportFormat::Csv, ExportTable::Summary) => summary_csv(&export)?,
            (ExportFormat::Csv, ExportTable::Decisions) => decisions_csv(&export)?,
            (ExportFormat::Csv, ExportTable::Surveys) => surveys_csv(&export)?,
        };
        if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        fs::write(&args.out, text).map_err(|e| CliError::io(&args.out, e))?;
        rec.output(&args.out);
        report(&json!({
            "command": "export",
            "decisions": export.decisions.len(),
            "surveys": export.surveys.len(),
            "out": args.out,
        }));
        Ok(())
    })
}
