//! Categorical label volumes, per-voxel probability volumes, Dice, and the
//! `.segvol` + `.json` file pair.
//!
//! Axis order is always `(D, H, W)` with `W` varying fastest. Depth is the
//! stacking axis that the low-resolution acquisition undersamples.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_LABEL_NAMES: [&str; 4] = ["BG", "LV", "MYO", "RV"];
pub const VOLUME_FORMAT_VERSION: u32 = 1;

/// Categorical 3D segmentation with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
    label_names: Vec<String>,
}

impl LabelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        labels: Vec<u8>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if label_names.len() < 2 || label_names.len() > 256 {
            return Err(Error::InvalidVolume(format!(
                "need between 2 and 256 classes, got {}",
                label_names.len()
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(Error::SizeMismatch { expected: n, actual: labels.len() });
        }
        let classes = label_names.len();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidVolume(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { dims, spacing, labels, label_names })
    }

    /// Volume with the default `BG/LV/MYO/RV` class names.
    pub fn with_default_names(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, labels, default_label_names())
    }

    /// All-background volume.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], label_names: Vec<String>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![0; n], label_names)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.labels[self.index(d, h, w)]
    }

    /// Sets one voxel. Panics if `label` is not a valid class.
    pub fn set(&mut self, d: usize, h: usize, w: usize, label: u8) {
        assert!((label as usize) < self.num_classes(), "label {label} out of range");
        let i = self.index(d, h, w);
        self.labels[i] = label;
    }

    /// One depth slice as an `H x W` label image.
    pub fn depth_slice(&self, d: usize) -> &[u8] {
        let n = self.dims[1] * self.dims[2];
        &self.labels[d * n..(d + 1) * n]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub(crate) fn with_labels(&self, dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), dims.iter().product::<usize>());
        Self { dims, spacing, labels, label_names: self.label_names.clone() }
    }
}

pub fn default_label_names() -> Vec<String> {
    DEFAULT_LABEL_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Per-voxel class probabilities, stored `(C, D, H, W)` channel-major.
///
/// The same layout carries cotangents in the vector-Jacobian products, where the
/// simplex invariant does not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume<T = f32> {
    pub classes: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> ProbVolume<T> {
    pub fn zeros(classes: usize, dims: [usize; 3]) -> Self {
        Self { classes, dims, data: vec![T::zero(); classes * dims.iter().product::<usize>()] }
    }

    pub fn from_vec(classes: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = classes * dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::SizeMismatch { expected: n, actual: data.len() });
        }
        Ok(Self { classes, dims, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn shape(&self) -> (usize, [usize; 3]) {
        (self.classes, self.dims)
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[((c * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Largest deviation of a per-voxel channel sum from 1, or `None` if any value
    /// leaves `[0, 1]`.
    pub fn simplex_error(&self) -> Option<f64> {
        if self.data.iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
            return None;
        }
        let n = self.voxels();
        let mut worst = 0.0f64;
        for i in 0..n {
            let s: f64 = (0..self.classes).map(|c| self.data[c * n + i].as_f64()).sum();
            worst = worst.max((s - 1.0).abs());
        }
        Some(worst)
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.simplex_error().is_some_and(|e| e <= tol)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    }

    pub fn cast<U: Real>(&self) -> ProbVolume<U> {
        ProbVolume {
            classes: self.classes,
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Exact one-hot encoding of a label volume.
pub fn one_hot<T: Real>(v: &LabelVolume) -> ProbVolume<T> {
    let classes = v.num_classes();
    let mut out = ProbVolume::zeros(classes, v.dims());
    let n = v.len();
    for (i, &l) in v.labels().iter().enumerate() {
        out.data[l as usize * n + i] = T::one();
    }
    out
}

/// Per-voxel argmax; ties resolve to the lowest channel.
pub fn argmax_labels<T: Real>(
    p: &ProbVolume<T>,
    spacing: [f64; 3],
    label_names: Vec<String>,
) -> Result<LabelVolume> {
    if label_names.len() != p.classes {
        return Err(Error::dims(p.classes, label_names.len()));
    }
    let n = p.voxels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = p.data[i];
            for c in 1..p.classes {
                let v = p.data[c * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(p.dims, spacing, labels, label_names)
}

/// Dice overlap of one class between two label arrays of equal length. Both
/// empty counts as perfect agreement.
pub fn dice_slices(a: &[u8], b: &[u8], label: u8) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let ia = x == label;
        let ib = y == label;
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    Ok(dice_slices(a.labels(), b.labels(), label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// `(label name, score)` in class-id order, background included.
    pub per_label: Vec<(String, f64)>,
    /// Mean over the foreground labels.
    pub mean: f64,
}

impl DiceReport {
    pub fn from_scores(names: &[String], scores: Vec<f64>) -> Self {
        let per_label: Vec<(String, f64)> = names.iter().cloned().zip(scores).collect();
        let fg: Vec<f64> = per_label.iter().skip(1).map(|(_, s)| *s).collect();
        let mean = if fg.is_empty() { 0.0 } else { fg.iter().sum::<f64>() / fg.len() as f64 };
        Self { per_label, mean }
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.per_label.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn foreground(&self) -> Vec<f64> {
        self.per_label.iter().skip(1).map(|(_, s)| *s).collect()
    }
}

/// Dice for every class of `reference`; `mean` averages the non-background classes.
pub fn dice_report(prediction: &LabelVolume, reference: &LabelVolume) -> Result<DiceReport> {
    if prediction.dims() != reference.dims() {
        return Err(Error::dims(reference.dims(), prediction.dims()));
    }
    let scores = (0..reference.num_classes())
        .map(|l| dice_slices(prediction.labels(), reference.labels(), l as u8))
        .collect();
    Ok(DiceReport::from_scores(reference.label_names(), scores))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    version: u32,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    labels: Vec<String>,
}

fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("segvol"), path.with_extension("json"))
}

/// Writes `<path>.segvol` (raw `u8` labels, `W` fastest) and `<path>.json`.
pub fn save_volume(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let (payload_path, header_path) = volume_paths(path.as_ref());
    let header = VolumeHeader {
        version: VOLUME_FORMAT_VERSION,
        dims: v.dims,
        spacing_mm: v.spacing,
        labels: v.label_names.clone(),
    };
    if let Some(dir) = payload_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&header_path, serde_json::to_string(&header)?)
        .map_err(|e| Error::io(&header_path, e))?;
    fs::write(&payload_path, &v.labels).map_err(|e| Error::io(&payload_path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (payload_path, header_path) = volume_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let malformed = |reason: String| Error::MalformedHeader { path: header_path.clone(), reason };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing integer `version`".into()))?;
    if version != VOLUME_FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: VOLUME_FORMAT_VERSION,
        });
    }
    let header: VolumeHeader = serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = header.dims.iter().product::<usize>();
    if payload.len() != expected {
        return Err(Error::SizeMismatch { expected, actual: payload.len() });
    }
    LabelVolume::new(header.dims, header.spacing_mm, payload, header.labels)
}
