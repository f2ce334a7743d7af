//! Evaluation tables: short-axis volume Dice, long-axis plane Dice and motion error.

use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use segsr_core::volume::dice_slices;
use segsr_core::{LabelImage, Regime};

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, CliResult};
use crate::layout::{write_json, write_text, Layout};
use crate::pipeline::{load_estimated_motion, load_labels, load_manifest, load_motion, subject_dice};

pub const STRUCTURES: [&str; 3] = ["lv", "myo", "rv"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and unbiased standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub regime: Regime,
    pub method: Method,
    pub subjects: usize,
    /// LV, MYO and RV, in that order.
    pub dice: Option<[MeanStd; 3]>,
    /// Mean of the three structure means.
    pub dice_mean: Option<f64>,
    /// Mean absolute per-component error of the recovered displacement, LR voxels.
    pub motion_error: Option<f64>,
    pub status: RowStatus,
}

impl MetricsRow {
    fn missing(regime: Regime, method: Method, subjects: usize) -> Self {
        Self { regime, method, subjects, dice: None, dice_mean: None, motion_error: None, status: RowStatus::Missing }
    }

    fn from_scores(regime: Regime, method: Method, scores: &[[f64; 3]], motion_error: Option<f64>) -> Self {
        let dice = [0, 1, 2].map(|k| MeanStd::of(&scores.iter().map(|s| s[k]).collect::<Vec<_>>()));
        let dice_mean = dice.iter().map(|d| d.mean).sum::<f64>() / 3.0;
        Self {
            regime,
            method,
            subjects: scores.len(),
            dice: Some(dice),
            dice_mean: Some(dice_mean),
            motion_error,
            status: RowStatus::Ok,
        }
    }

    pub fn structure_mean(&self, k: usize) -> Option<f64> {
        self.dice.map(|d| d[k].mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub regime: Regime,
    pub method: Method,
    pub subject: usize,
    pub dice: [f64; 3],
    pub la_dice: [f64; 3],
    pub motion_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Short-axis volume Dice per (regime, method).
    pub volume: Vec<MetricsRow>,
    /// Dice on the long-axis plane per (regime, method).
    pub long_axis: Vec<MetricsRow>,
    pub per_subject: Vec<SubjectMetrics>,
}

impl MetricsReport {
    pub fn missing_rows(&self) -> usize {
        self.volume.iter().filter(|r| r.status == RowStatus::Missing).count()
    }

    pub fn row(&self, regime: Regime, method: Method) -> Option<&MetricsRow> {
        self.volume.iter().find(|r| r.regime == regime && r.method == method)
    }

    pub fn la_row(&self, regime: Regime, method: Method) -> Option<&MetricsRow> {
        self.long_axis.iter().find(|r| r.regime == regime && r.method == method)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per (regime, method); numbers use the shortest round-trip form.
pub fn table_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "regime,method,subjects,dice_lv_mean,dice_lv_std,dice_myo_mean,dice_myo_std,dice_rv_mean,dice_rv_std,dice_mean,motion_error,status\n",
    );
    for r in rows {
        let _ = write!(out, "{},{},{}", r.regime, r.method, r.subjects);
        match r.dice {
            Some(d) => d.iter().for_each(|s| {
                let _ = write!(out, ",{},{}", s.mean, s.std);
            }),
            None => out.push_str(",,,,,,"),
        }
        let status = match r.status {
            RowStatus::Ok => "ok",
            RowStatus::Missing => "missing",
        };
        let _ = writeln!(out, ",{},{},{status}", opt(r.dice_mean), opt(r.motion_error));
    }
    out
}

pub fn per_subject_csv(rows: &[SubjectMetrics]) -> String {
    let mut out = String::from(
        "regime,method,subject,dice_lv,dice_myo,dice_rv,dice_mean,la_dice_lv,la_dice_myo,la_dice_rv,motion_error\n",
    );
    for r in rows {
        let mean = r.dice.iter().sum::<f64>() / 3.0;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{mean},{},{},{},{}",
            r.regime,
            r.method,
            r.subject,
            r.dice[0],
            r.dice[1],
            r.dice[2],
            r.la_dice[0],
            r.la_dice[1],
            r.la_dice[2],
            opt(r.motion_error)
        );
    }
    out
}

fn plane_dice(sr: &LabelImage, hr: &LabelImage) -> [f64; 3] {
    [1u8, 2, 3].map(|l| dice_slices(&sr.labels, &hr.labels, l))
}

fn evaluate_cell(
    cfg: &ExperimentConfig,
    layout: &Layout,
    regime: Regime,
    method: Method,
    test: &[usize],
) -> CliResult<Vec<SubjectMetrics>> {
    let mut out = Vec::with_capacity(test.len());
    for &subject in test {
        let hr = load_labels(&layout.hr(subject), "gen-data")?;
        let sr = load_labels(&layout.sr(regime, method, subject), "superres")?;
        let dice = subject_dice(&sr, &hr)?;
        let la_dice = plane_dice(
            &LabelImage::from_volume(&sr, cfg.la_plane)?,
            &LabelImage::from_volume(&hr, cfg.la_plane)?,
        );
        let motion_error = if method.is_latent() {
            let d_true = load_motion(layout, regime, subject)?.d_true;
            let d_hat = load_estimated_motion(layout, regime, method, subject)?;
            if d_hat.len() != d_true.len() {
                return Err(CliError::Data(format!(
                    "subject {subject}: {} estimated shifts for {} slices",
                    d_hat.len(),
                    d_true.len()
                )));
            }
            Some(d_hat.mean_abs_error(&d_true))
        } else {
            None
        };
        out.push(SubjectMetrics { regime, method, subject, dice, la_dice, motion_error });
    }
    Ok(out)
}

/// Scores every configured (regime, method) pair on the test split.
///
/// Pairs whose outputs cannot be read are reported as missing rather than
/// aborting the table; callers decide how to treat them.
pub fn cmd_evaluate(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<MetricsReport> {
    cfg.validate()?;
    let manifest = load_manifest(layout)?;
    let test = &manifest.splits.test;
    let mut report = MetricsReport { volume: Vec::new(), long_axis: Vec::new(), per_subject: Vec::new() };
    for &regime in &cfg.degrade.regimes {
        for &method in &cfg.methods {
            match evaluate_cell(cfg, layout, regime, method, test) {
                Ok(subjects) => {
                    let sa: Vec<[f64; 3]> = subjects.iter().map(|s| s.dice).collect();
                    let la: Vec<[f64; 3]> = subjects.iter().map(|s| s.la_dice).collect();
                    let motion = method.is_latent().then(|| {
                        subjects.iter().filter_map(|s| s.motion_error).sum::<f64>() / subjects.len() as f64
                    });
                    report.volume.push(MetricsRow::from_scores(regime, method, &sa, motion));
                    report.long_axis.push(MetricsRow::from_scores(regime, method, &la, None));
                    report.per_subject.extend(subjects);
                }
                Err(e) => {
                    warn!("{regime} / {method}: {e}");
                    report.volume.push(MetricsRow::missing(regime, method, test.len()));
                    report.long_axis.push(MetricsRow::missing(regime, method, test.len()));
                }
            }
        }
    }
    let dir = layout.metrics_dir();
    write_text(&dir.join("metrics.csv"), &table_csv(&report.volume))?;
    write_text(&dir.join("la_metrics.csv"), &table_csv(&report.long_axis))?;
    write_text(&dir.join("per_subject.csv"), &per_subject_csv(&report.per_subject))?;
    write_json(&dir.join("metrics.json"), &report)?;
    for r in &report.volume {
        match r.dice_mean {
            Some(m) => info!(
                "{:<14} {:<6} LV {:.4}  MYO {:.4}  RV {:.4}  mean {m:.4}",
                r.regime.name(),
                r.method.name(),
                r.structure_mean(0).unwrap_or(f64::NAN),
                r.structure_mean(1).unwrap_or(f64::NAN),
                r.structure_mean(2).unwrap_or(f64::NAN)
            ),
            None => info!("{:<14} {:<6} missing", r.regime.name(), r.method.name()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.4]).std, 0.0);
    }

    #[test]
    fn mean_column_is_mean_of_structures() {
        let scores = [[0.9, 0.5, 0.8], [0.7, 0.3, 0.6]];
        let r = MetricsRow::from_scores(Regime::NoMotion, Method::Nn, &scores, None);
        let expected = (0.8 + 0.4 + 0.7) / 3.0;
        assert!((r.dice_mean.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            MetricsRow::from_scores(Regime::SevereMotion, Method::Lo, &[[1.0, 1.0, 1.0]], Some(0.25)),
            MetricsRow::missing(Regime::SevereMotion, Method::Sbi, 4),
        ];
        let csv = table_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        let cols = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert_eq!(lines[1], "severe_motion,lo,1,1,0,1,0,1,0,1,0.25,ok");
        assert!(lines[2].ends_with(",missing"));
    }
}
