use std::fs;
use std::path::Path;
use std::process::Command;

use segsr_cli::config::Method;
use segsr_cli::error::CliError;
use segsr_cli::pipeline::{load_manifest, load_motion, LOSS_HISTORY_HEADER};
use segsr_cli::{cmd_degrade, cmd_evaluate, cmd_gen_data, cmd_superres, cmd_train_vae, ExperimentConfig, Layout};
use segsr_core::{dice_report, load_volume, save_volume, LabelVolume, Regime};

fn config(dir: &Path, subjects: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        methods: vec![Method::Nn, Method::Sbi],
        ..Default::default()
    };
    cfg.dataset.subjects = subjects;
    cfg
}

fn write_config(cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = cfg.output_dir.join("config.json");
    fs::create_dir_all(&cfg.output_dir).unwrap();
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn segsr(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_segsr"));
    cmd.args(args).env_remove("SEGSR_OUT").env("RUST_LOG", "warn");
    cmd
}

#[test]
fn default_dataset_has_documented_splits_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 300);
    let layout = Layout::new(dir.path());
    let m = cmd_gen_data(&cfg, &layout).unwrap();
    assert_eq!(m.subjects, 300);
    assert_eq!((m.splits.train.len(), m.splits.val.len(), m.splits.test.len()), (250, 25, 25));
    assert_eq!(m.files.len(), 300);
    assert!(layout.hr(299).with_extension("segvol").exists());
    let first = fs::read(layout.manifest()).unwrap();
    let vol = fs::read(layout.hr(17).with_extension("segvol")).unwrap();
    cmd_gen_data(&cfg, &layout).unwrap();
    assert_eq!(fs::read(layout.manifest()).unwrap(), first);
    assert_eq!(fs::read(layout.hr(17).with_extension("segvol")).unwrap(), vol);
    assert_eq!(load_manifest(&layout).unwrap(), m);
}

#[test]
fn two_subjects_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    assert!(matches!(cmd_gen_data(&cfg, &Layout::new(dir.path())), Err(CliError::Usage(_))));
    let path = write_config(&config(dir.path(), 3));
    let text = fs::read_to_string(&path).unwrap().replace("\"subjects\": 3", "\"subjects\": 2");
    fs::write(&path, text).unwrap();
    let out = segsr(&["gen-data", "--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_and_missing_config_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(&config(dir.path(), 3));
    let out = segsr(&["superres", "--config", path.to_str().unwrap(), "--method", "edsr"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = segsr(&["superres"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = segsr(&["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degrade_regimes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 300);
    let layout = Layout::new(dir.path());
    let m = cmd_gen_data(&cfg, &layout).unwrap();
    cmd_degrade(&cfg, &layout, None).unwrap();

    for &s in &m.splits.test {
        assert!(load_motion(&layout, Regime::NoMotion, s).unwrap().d_true.is_zero());
    }
    let amplitudes: Vec<f64> = m
        .splits
        .test
        .iter()
        .flat_map(|&s| load_motion(&layout, Regime::SevereMotion, s).unwrap().amplitude_mm)
        .collect();
    let mean = amplitudes.iter().sum::<f64>() / amplitudes.len() as f64;
    assert!((mean - 9.2).abs() < 0.5, "severe mean amplitude {mean}");

    let s = m.splits.test[3];
    let motion = fs::read(layout.lr_motion(Regime::NormalMotion, s)).unwrap();
    let lr = fs::read(layout.lr(Regime::NormalMotion, s).with_extension("segvol")).unwrap();
    let mut parallel = cfg.clone();
    parallel.workers = 3;
    cmd_degrade(&parallel, &layout, Some(Regime::NormalMotion)).unwrap();
    assert_eq!(fs::read(layout.lr_motion(Regime::NormalMotion, s)).unwrap(), motion);
    assert_eq!(fs::read(layout.lr(Regime::NormalMotion, s).with_extension("segvol")).unwrap(), lr);
}

/// Odd depth factors put each LR cell centre exactly on HR slice `k*s + s/2`,
/// so the degraded slice equals that HR slice; replicate it over the cell.
fn replicate_centre_slices(hr: &LabelVolume, s: usize) -> LabelVolume {
    let [d, h, w] = hr.dims();
    let mut out = hr.clone();
    for k in 0..d / s {
        for y in 0..h {
            for x in 0..w {
                let label = hr.get(k * s + s / 2, y, x);
                for z in k * s..(k + 1) * s {
                    out.set(z, y, x, label);
                }
            }
        }
    }
    out
}

#[test]
fn nearest_neighbour_without_motion_matches_centre_slice_replication() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 12);
    cfg.degrade.regimes = vec![Regime::NoMotion];
    let layout = Layout::new(dir.path());
    let m = cmd_gen_data(&cfg, &layout).unwrap();
    cmd_degrade(&cfg, &layout, None).unwrap();
    cmd_superres(&cfg, &layout, None, Some(Method::Nn)).unwrap();
    cfg.methods = vec![Method::Nn];
    let report = cmd_evaluate(&cfg, &layout).unwrap();
    for row in &report.per_subject {
        let hr = load_volume(layout.hr(row.subject)).unwrap();
        let expected = dice_report(&replicate_centre_slices(&hr, 5), &hr).unwrap().foreground();
        for (k, (got, want)) in row.dice.iter().zip(&expected).enumerate() {
            assert!((got - want).abs() < 1e-12, "subject {} class {k}", row.subject);
        }
    }
    assert_eq!(report.per_subject.len(), m.splits.test.len());
}

#[test]
fn ground_truth_scores_one_and_mean_column_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 12);
    let layout = Layout::new(dir.path());
    let m = cmd_gen_data(&cfg, &layout).unwrap();
    cmd_degrade(&cfg, &layout, None).unwrap();
    cmd_superres(&cfg, &layout, None, Some(Method::Sbi)).unwrap();
    // the "nn" outputs are replaced by the references themselves
    for &regime in &cfg.degrade.regimes {
        for &s in &m.splits.test {
            save_volume(&load_volume(layout.hr(s)).unwrap(), layout.sr(regime, Method::Nn, s)).unwrap();
        }
    }
    let report = cmd_evaluate(&cfg, &layout).unwrap();
    assert_eq!(report.missing_rows(), 0);
    for row in report.volume.iter().chain(&report.long_axis).filter(|r| r.method == Method::Nn) {
        for d in row.dice.unwrap() {
            assert_eq!((d.mean, d.std), (1.0, 0.0));
        }
        assert_eq!(row.dice_mean, Some(1.0));
    }

    let csv = fs::read_to_string(layout.metrics_dir().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..4], &["regime", "method", "subjects", "dice_lv_mean"]);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let v = |name: &str| f[col(name)].parse::<f64>().unwrap();
        let mean = (v("dice_lv_mean") + v("dice_myo_mean") + v("dice_rv_mean")) / 3.0;
        assert!((v("dice_mean") - mean).abs() < 1e-9);
        for name in ["dice_lv_mean", "dice_myo_mean", "dice_rv_mean"] {
            assert!((0.0..=1.0).contains(&v(name)));
        }
        assert!(v("dice_myo_std") >= 0.0);
        rows += 1;
    }
    assert_eq!(rows, cfg.degrade.regimes.len() * cfg.methods.len());
}

#[test]
fn missing_outputs_are_flagged_with_data_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 6);
    let path = write_config(&cfg);
    let layout = Layout::new(dir.path());
    cmd_gen_data(&cfg, &layout).unwrap();
    cmd_degrade(&cfg, &layout, None).unwrap();
    cmd_superres(&cfg, &layout, Some(Regime::NoMotion), None).unwrap();

    let report = cmd_evaluate(&cfg, &layout).unwrap();
    assert_eq!(report.missing_rows(), 4);
    let csv = fs::read_to_string(layout.metrics_dir().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.ends_with(",missing")).count(), 4);

    let out = segsr(&["evaluate", "--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = segsr(&["superres", "--config", path.to_str().unwrap(), "--method", "lo"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-vae"));
}

#[test]
fn output_directory_override() {
    let dir = tempfile::tempdir().unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let path = write_config(&config(dir.path(), 3));
    let status = segsr(&["gen-data", "--config", path.to_str().unwrap()])
        .env("SEGSR_OUT", elsewhere.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(Layout::new(elsewhere.path()).manifest().exists());
    assert!(!Layout::new(dir.path()).manifest().exists());
}

#[test]
fn short_training_and_latent_methods_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 6);
    cfg.methods = Method::ALL.to_vec();
    cfg.degrade.regimes = vec![Regime::NormalMotion];
    cfg.vae.train.epochs = 2;
    cfg.vae.train.batch_size = 2;
    cfg.latent_opt.max_iters = 4;
    let layout = Layout::new(dir.path());
    let m = cmd_gen_data(&cfg, &layout).unwrap();

    let report = cmd_train_vae(&cfg, &layout).unwrap();
    assert!((0.0..=1.0).contains(&report.heldout_dice));
    assert_eq!(report.passed, report.heldout_dice >= cfg.vae.quality_gate);
    let history = fs::read_to_string(layout.loss_history()).unwrap();
    assert!(history.starts_with(LOSS_HISTORY_HEADER));
    let rows: Vec<Vec<f64>> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!((r[3] - (r[1] + cfg.vae.train.beta * r[2])).abs() <= 1e-12 * r[3].abs().max(1.0));
    }
    cmd_train_vae(&cfg, &layout).unwrap();
    let again = fs::read_to_string(layout.loss_history()).unwrap();
    assert_eq!(again.lines().nth(1), history.lines().nth(1));

    cmd_degrade(&cfg, &layout, None).unwrap();
    let summaries = cmd_superres(&cfg, &layout, None, None).unwrap();
    assert_eq!(summaries.len(), 4);
    let s = m.splits.test[0];
    for method in [Method::Lo, Method::LoMultiView] {
        let trace = fs::read_to_string(layout.sr_file(Regime::NormalMotion, method, s, "trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 4);
        assert!(layout.sr_file(Regime::NormalMotion, method, s, "latent.json").exists());
        assert!(layout.sr_file(Regime::NormalMotion, method, s, "motion.json").exists());
        assert!(layout.sr_dir(Regime::NormalMotion, method).join("summary.json").exists());
    }
    let report = cmd_evaluate(&cfg, &layout).unwrap();
    assert_eq!(report.missing_rows(), 0);
    let lo = report.row(Regime::NormalMotion, Method::Lo).unwrap();
    assert!(lo.motion_error.unwrap().is_finite());
    assert!(report.row(Regime::NormalMotion, Method::Nn).unwrap().motion_error.is_none());
}
