//! The experiment stages. Each reads its inputs from the experiment directory
//! and overwrites its outputs, so any stage can be rerun on its own.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use segsr_core::baselines::{nn_upsample, sbi_upsample};
use segsr_core::generator::{reconstruction_dice, EpochRecord};
use segsr_core::latent_opt::implied_scale;
use segsr_core::phantom::{generate_dataset, PhantomParams, Splits};
use segsr_core::{
    degrade, dice_report, load_model, load_volume, optimise, save_model, save_volume, DegradationSpec,
    GeneratorModel, LabelImage, LabelVolume, LatentVector, MotionParams, Regime, StopReason,
};

use crate::config::{derive_seed, ExperimentConfig, Method};
use crate::error::{CliError, CliResult};
use crate::layout::{read_json, subject_name, write_json, write_text, Layout};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub version: u32,
    pub subjects: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub label_names: Vec<String>,
    /// Generator parameters with the derived phantom seed filled in.
    pub phantom: PhantomParams,
    pub splits: Splits,
    pub files: Vec<String>,
}

/// Ground-truth displacement written next to each LR volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub subject: usize,
    pub regime: Regime,
    pub rng_seed: u64,
    /// Displacement per LR slice in LR in-plane voxels.
    pub d_true: MotionParams,
    /// Displacement magnitude per LR slice in mm.
    pub amplitude_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedMotion {
    pub subject: usize,
    pub d_hat: MotionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub heldout_subjects: usize,
    pub heldout_dice: f64,
    pub quality_gate: f64,
    pub passed: bool,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub seed: u64,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRun {
    pub subject: usize,
    pub stop_reason: Option<StopReason>,
    pub iterations: Option<usize>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperresSummary {
    pub regime: Regime,
    pub method: Method,
    pub subjects: Vec<SubjectRun>,
    /// Fraction of latent searches that met the convergence rule.
    pub converged_fraction: Option<f64>,
}

fn missing_hint(stage: &str) -> String {
    format!("run `segsr {stage}` first")
}

pub(crate) fn load_labels(stem: &Path, stage: &str) -> CliResult<LabelVolume> {
    let payload = stem.with_extension("segvol");
    if !payload.exists() {
        return Err(CliError::Missing { path: payload, hint: missing_hint(stage) });
    }
    Ok(load_volume(stem)?)
}

/// Runs `f` on `0..n` with up to `workers` threads; results keep index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<CliResult<T>>
where
    T: Send,
    F: Fn(usize) -> CliResult<T> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CliResult<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot poisoned").expect("every index visited"))
        .collect()
}

fn collect<T>(results: Vec<CliResult<T>>) -> CliResult<Vec<T>> {
    results.into_iter().collect()
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<DataManifest> {
    cfg.validate()?;
    let mut params = cfg.phantom.clone();
    params.rng_seed = cfg.stage_seed("gen-data");
    let n = cfg.dataset.subjects;
    info!("generating {n} phantoms into {}", layout.root().display());
    let data = generate_dataset(&params, n, cfg.dataset.split)?;
    let mut files = Vec::with_capacity(n);
    for (i, v) in data.volumes.iter().enumerate() {
        save_volume(v, layout.hr(i))?;
        files.push(format!("hr/{}.segvol", subject_name(i)));
    }
    let first = &data.volumes[0];
    let manifest = DataManifest {
        version: MANIFEST_VERSION,
        subjects: n,
        dims: first.dims(),
        spacing_mm: first.spacing(),
        label_names: first.label_names().to_vec(),
        phantom: params,
        splits: data.splits,
        files,
    };
    write_json(&layout.manifest(), &manifest)?;
    info!(
        "wrote manifest: {} train / {} val / {} test",
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len()
    );
    Ok(manifest)
}

pub fn load_manifest(layout: &Layout) -> CliResult<DataManifest> {
    let m: DataManifest = read_json(&layout.manifest(), &missing_hint("gen-data"))?;
    if m.version != MANIFEST_VERSION {
        return Err(CliError::Data(format!("manifest version {} is not supported", m.version)));
    }
    Ok(m)
}

fn load_subjects(layout: &Layout, m: &DataManifest, idx: &[usize]) -> CliResult<Vec<LabelVolume>> {
    idx.iter()
        .map(|&i| {
            let v = load_labels(&layout.hr(i), "gen-data")?;
            if v.dims() != m.dims {
                return Err(CliError::Data(format!(
                    "{}: dims {:?} differ from manifest {:?}",
                    subject_name(i),
                    v.dims(),
                    m.dims
                )));
            }
            Ok(v)
        })
        .collect()
}

fn history_row(r: &EpochRecord) -> String {
    let (vce, vkl, vtot) = match r.val {
        Some(v) => (v.ce.to_string(), v.kl.to_string(), v.total.to_string()),
        None => Default::default(),
    };
    format!("{},{},{},{},{vce},{vkl},{vtot}\n", r.epoch, r.train.ce, r.train.kl, r.train.total)
}

pub const LOSS_HISTORY_HEADER: &str = "epoch,train_ce,train_kl,train_total,val_ce,val_kl,val_total\n";

pub fn cmd_train_vae(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<TrainReport> {
    cfg.validate()?;
    let manifest = load_manifest(layout)?;
    let arch = &cfg.vae.arch;
    if manifest.dims != arch.input_dims {
        return Err(CliError::Data(format!(
            "manifest volumes are {:?} but the generator expects {:?}",
            manifest.dims, arch.input_dims
        )));
    }
    let train = load_subjects(layout, &manifest, &manifest.splits.train)?;
    let val = load_subjects(layout, &manifest, &manifest.splits.val)?;
    let test = load_subjects(layout, &manifest, &manifest.splits.test)?;

    let mut tcfg = cfg.vae.train.clone();
    tcfg.seed = cfg.stage_seed("train-vae");
    info!(
        "training on {} volumes ({} validation), {} parameters, up to {} epochs",
        train.len(),
        val.len(),
        arch.param_count()?,
        tcfg.epochs
    );

    let history_path = layout.loss_history();
    write_text(&history_path, LOSS_HISTORY_HEADER)?;
    let mut history = fs::OpenOptions::new()
        .append(true)
        .open(&history_path)
        .map_err(|e| CliError::io(&history_path, e))?;
    let mut write_err = None;
    let (model, _) = segsr_core::train_vae(&train, &val, arch, &tcfg, |r| {
        info!(
            "epoch {:>3}: train ce {:.5} kl {:.3}{}",
            r.epoch,
            r.train.ce,
            r.train.kl,
            r.val.map(|v| format!(", val ce {:.5}", v.ce)).unwrap_or_default()
        );
        if let Err(e) = history.write_all(history_row(r).as_bytes()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&history_path, e));
    }
    save_model(&model, layout.checkpoint())?;

    let heldout_dice = reconstruction_dice(&model, &test)?;
    let report = TrainReport {
        heldout_subjects: test.len(),
        heldout_dice,
        quality_gate: cfg.vae.quality_gate,
        passed: heldout_dice >= cfg.vae.quality_gate,
        epochs_run: model.training_meta.epochs_run,
        best_epoch: model.training_meta.best_epoch,
        seed: tcfg.seed,
        parameters: model.weights().len(),
    };
    write_json(&layout.train_report(), &report)?;
    if report.passed {
        info!("held-out reconstruction Dice {heldout_dice:.4}");
    } else {
        warn!("held-out reconstruction Dice {heldout_dice:.4} is below the gate {}", cfg.vae.quality_gate);
    }
    Ok(report)
}

fn regimes_or_all(cfg: &ExperimentConfig, regime: Option<Regime>) -> Vec<Regime> {
    regime.map_or_else(|| cfg.degrade.regimes.clone(), |r| vec![r])
}

pub fn degradation_seed(cfg: &ExperimentConfig, regime: Regime, subject: usize) -> u64 {
    derive_seed(cfg.stage_seed("degrade"), &format!("{}/{}", regime.name(), subject_name(subject)))
}

/// Degrades every test subject under each requested regime.
pub fn cmd_degrade(cfg: &ExperimentConfig, layout: &Layout, regime: Option<Regime>) -> CliResult<()> {
    cfg.validate()?;
    let manifest = load_manifest(layout)?;
    let test = &manifest.splits.test;
    for regime in regimes_or_all(cfg, regime) {
        info!("degrading {} test subjects under {regime}", test.len());
        let results = parallel_map(test.len(), cfg.workers, |k| {
            let subject = test[k];
            let hr = load_labels(&layout.hr(subject), "gen-data")?;
            let seed = degradation_seed(cfg, regime, subject);
            let mut spec = DegradationSpec::for_regime(regime, cfg.degrade.scale, seed);
            spec.label_flip_rate = cfg.degrade.label_flip_rate;
            let (lr, d_true) = degrade(&hr, &spec)?;
            let sp = lr.spacing();
            let amplitude_mm = d_true.shifts.iter().map(|[a, b]| (a * sp[1]).hypot(b * sp[2])).collect();
            save_volume(&lr, layout.lr(regime, subject))?;
            let record = MotionRecord { subject, regime, rng_seed: seed, d_true, amplitude_mm };
            write_json(&layout.lr_motion(regime, subject), &record)
        });
        collect(results)?;
    }
    Ok(())
}

pub fn load_motion(layout: &Layout, regime: Regime, subject: usize) -> CliResult<MotionRecord> {
    read_json(&layout.lr_motion(regime, subject), &missing_hint("degrade"))
}

fn superres_subject(
    cfg: &ExperimentConfig,
    layout: &Layout,
    model: Option<&GeneratorModel>,
    regime: Regime,
    method: Method,
    subject: usize,
) -> CliResult<SubjectRun> {
    let lr = load_labels(&layout.lr(regime, subject), "degrade")?;
    let hr_dims = cfg.phantom.dims;
    let scale = implied_scale(hr_dims, lr.dims())?;
    let mut run = SubjectRun { subject, stop_reason: None, iterations: None, final_loss: None };
    let sr = match method {
        Method::Nn => nn_upsample(&lr, &scale)?,
        Method::Sbi => sbi_upsample(&lr, &scale)?,
        Method::Lo | Method::LoMultiView => {
            let model = model.expect("latent methods load the generator");
            let la_target = if method == Method::LoMultiView {
                let hr = load_labels(&layout.hr(subject), "gen-data")?;
                Some(LabelImage::from_volume(&hr, cfg.la_plane)?)
            } else {
                None
            };
            let la = la_target.as_ref().map(|img| (cfg.la_plane, img));
            let res = optimise(model, &lr, la, &cfg.latent_opt)?;
            write_text(&layout.sr_file(regime, method, subject, "trace.csv"), &res.trace.to_csv())?;
            write_json(
                &layout.sr_file(regime, method, subject, "motion.json"),
                &EstimatedMotion { subject, d_hat: res.d_hat.clone() },
            )?;
            write_json(&layout.sr_file(regime, method, subject, "latent.json"), &res.z_hat)?;
            run.stop_reason = Some(res.trace.stop_reason);
            run.iterations = Some(res.trace.len());
            run.final_loss = res.trace.final_loss();
            res.sr
        }
    };
    save_volume(&sr, layout.sr(regime, method, subject))?;
    Ok(run)
}

/// Up-samples every test subject with each requested method and regime.
pub fn cmd_superres(
    cfg: &ExperimentConfig,
    layout: &Layout,
    regime: Option<Regime>,
    method: Option<Method>,
) -> CliResult<Vec<SuperresSummary>> {
    cfg.validate()?;
    let manifest = load_manifest(layout)?;
    let methods = method.map_or_else(|| cfg.methods.clone(), |m| vec![m]);
    let model = if methods.iter().any(Method::is_latent) {
        let path = layout.checkpoint();
        if !path.exists() {
            return Err(CliError::Missing { path, hint: missing_hint("train-vae") });
        }
        let model = load_model(&path)?;
        if model.output_dims() != cfg.phantom.dims {
            return Err(CliError::Data(format!(
                "checkpoint decodes {:?} volumes, phantoms are {:?}",
                model.output_dims(),
                cfg.phantom.dims
            )));
        }
        Some(model)
    } else {
        None
    };
    let test = &manifest.splits.test;
    let mut summaries = Vec::new();
    for regime in regimes_or_all(cfg, regime) {
        for &method in &methods {
            info!("super-resolving {} subjects: {regime} / {method}", test.len());
            let runs = collect(parallel_map(test.len(), cfg.workers, |k| {
                let run = superres_subject(cfg, layout, model.as_ref(), regime, method, test[k])?;
                if let Some(reason) = run.stop_reason {
                    info!(
                        "  {} {:?} after {} iterations",
                        subject_name(run.subject),
                        reason,
                        run.iterations.unwrap_or(0)
                    );
                }
                Ok(run)
            }))?;
            let converged_fraction = method.is_latent().then(|| {
                let c = runs.iter().filter(|r| r.stop_reason == Some(StopReason::Converged)).count();
                c as f64 / runs.len().max(1) as f64
            });
            let summary = SuperresSummary { regime, method, subjects: runs, converged_fraction };
            write_json(&layout.sr_dir(regime, method).join("summary.json"), &summary)?;
            summaries.push(summary);
        }
    }
    Ok(summaries)
}

pub fn load_estimated_motion(layout: &Layout, regime: Regime, method: Method, subject: usize) -> CliResult<MotionParams> {
    let e: EstimatedMotion =
        read_json(&layout.sr_file(regime, method, subject, "motion.json"), &missing_hint("superres"))?;
    Ok(e.d_hat)
}

pub fn load_latent(layout: &Layout, regime: Regime, method: Method, subject: usize) -> CliResult<LatentVector> {
    read_json(&layout.sr_file(regime, method, subject, "latent.json"), &missing_hint("superres"))
}

/// Dice of an SR volume against its HR reference.
pub fn subject_dice(sr: &LabelVolume, hr: &LabelVolume) -> CliResult<[f64; 3]> {
    let r = dice_report(sr, hr)?;
    let fg = r.foreground();
    if fg.len() != 3 {
        return Err(CliError::Data(format!("expected 3 foreground classes, found {}", fg.len())));
    }
    Ok([fg[0], fg[1], fg[2]])
}
