//! The degradation chain from a high-resolution segmentation to an acquired
//! low-resolution stack: per-slice in-plane motion, cell-centre down-sampling,
//! plane extraction and label noise.
//!
//! Every operator has a forward evaluation and an exact vector-Jacobian product
//! so that the chain can be differentiated with respect to both the probability
//! volume and the motion parameters.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{argmax_labels, one_hot, LabelVolume, ProbVolume};

/// Normal-motion amplitude statistics in mm.
pub const NORMAL_MOTION_MEAN_MM: f64 = 2.3;
pub const NORMAL_MOTION_STD_MM: f64 = 0.87;
/// Severe motion scales the normal statistics by this factor.
pub const SEVERE_MOTION_FACTOR: f64 = 4.0;

/// Per-slice in-plane displacements `(d_h, d_w)` in voxel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    #[serde(rename = "shifts_vox")]
    pub shifts: Vec<[f64; 2]>,
}

impl MotionParams {
    pub fn zeros(n: usize) -> Self {
        Self { shifts: vec![[0.0; 2]; n] }
    }

    pub fn new(shifts: Vec<[f64; 2]>) -> Result<Self> {
        if shifts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("motion shifts must be finite".into()));
        }
        Ok(Self { shifts })
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.shifts.iter().flatten().all(|&v| v == 0.0)
    }

    /// Repeats each entry `factor` times, e.g. from LR slices to the HR slices of each cell.
    pub fn broadcast(&self, factor: usize) -> Self {
        Self {
            shifts: self
                .shifts
                .iter()
                .flat_map(|s| std::iter::repeat_n(*s, factor))
                .collect(),
        }
    }

    /// Sums consecutive groups of `factor` entries (adjoint of [`broadcast`](Self::broadcast)).
    pub fn reduce(&self, factor: usize) -> Self {
        Self {
            shifts: self
                .shifts
                .chunks(factor)
                .map(|c| c.iter().fold([0.0; 2], |a, s| [a[0] + s[0], a[1] + s[1]]))
                .collect(),
        }
    }

    pub fn scaled(&self, sh: f64, sw: f64) -> Self {
        Self { shifts: self.shifts.iter().map(|s| [s[0] * sh, s[1] * sw]).collect() }
    }

    /// Mean absolute per-component difference.
    pub fn mean_abs_error(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        if self.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .shifts
            .iter()
            .zip(&other.shifts)
            .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
            .sum();
        total / (2 * self.len()) as f64
    }
}

/// HR-to-LR size ratio per axis `(s_d, s_h, s_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct ScaleFactor([f64; 3]);

impl ScaleFactor {
    pub fn new(s: [f64; 3]) -> Result<Self> {
        if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale factors must be positive, got {s:?}")));
        }
        if s.iter().any(|&v| v < 1.0) {
            return Err(Error::InvalidParameter(format!("scale factors must be >= 1, got {s:?}")));
        }
        Ok(Self(s))
    }

    pub fn identity() -> Self {
        Self([1.0; 3])
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }

    /// Integer factors, or an error when any component is fractional.
    pub fn integer(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, &v) in out.iter_mut().zip(&self.0) {
            if v.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!("scale {:?} is not integral", self.0)));
            }
            *o = v as usize;
        }
        Ok(out)
    }

    /// LR grid size for an HR grid.
    pub fn lr_dims(&self, hr: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = ((hr[a] as f64 / self.0[a]).floor() as usize).max(1);
        }
        out
    }

    pub fn check_divides(&self, hr: [usize; 3]) -> Result<[usize; 3]> {
        let lr = self.lr_dims(hr);
        for a in 0..3 {
            if (lr[a] as f64 * self.0[a] - hr[a] as f64).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "HR dims {hr:?} are not divisible by scale {:?}",
                    self.0
                )));
            }
        }
        Ok(lr)
    }
}

impl TryFrom<[f64; 3]> for ScaleFactor {
    type Error = Error;
    fn try_from(s: [f64; 3]) -> Result<Self> {
        Self::new(s)
    }
}

impl From<ScaleFactor> for [f64; 3] {
    fn from(s: ScaleFactor) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "none", alias = "no")]
    NoMotion,
    #[serde(alias = "normal")]
    NormalMotion,
    #[serde(alias = "severe")]
    SevereMotion,
    Custom,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::NoMotion => "no_motion",
            Regime::NormalMotion => "normal_motion",
            Regime::SevereMotion => "severe_motion",
            Regime::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "no_motion" | "none" | "no" => Some(Regime::NoMotion),
            "normal_motion" | "normal" => Some(Regime::NormalMotion),
            "severe_motion" | "severe" => Some(Regime::SevereMotion),
            "custom" => Some(Regime::Custom),
            _ => None,
        }
    }

    /// `(mean, std)` of the motion amplitude in mm; `None` for `Custom`.
    pub fn motion_stats(&self) -> Option<(f64, f64)> {
        match self {
            Regime::NoMotion => Some((0.0, 0.0)),
            Regime::NormalMotion => Some((NORMAL_MOTION_MEAN_MM, NORMAL_MOTION_STD_MM)),
            Regime::SevereMotion => Some((
                SEVERE_MOTION_FACTOR * NORMAL_MOTION_MEAN_MM,
                SEVERE_MOTION_FACTOR * NORMAL_MOTION_STD_MM,
            )),
            Regime::Custom => None,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub scale: ScaleFactor,
    pub motion_mean_mm: f64,
    pub motion_std_mm: f64,
    pub regime: Regime,
    #[serde(default)]
    pub label_flip_rate: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl DegradationSpec {
    pub fn for_regime(regime: Regime, scale: ScaleFactor, rng_seed: u64) -> Self {
        let (mean, std) = regime.motion_stats().unwrap_or((0.0, 0.0));
        Self {
            scale,
            motion_mean_mm: mean,
            motion_std_mm: std,
            regime,
            label_flip_rate: 0.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.motion_mean_mm >= 0.0) || !(self.motion_std_mm >= 0.0) {
            return bad("motion mean and std must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return bad(format!("label flip rate {} outside [0, 1)", self.label_flip_rate));
        }
        if let Some((mean, std)) = self.regime.motion_stats() {
            if (self.motion_mean_mm - mean).abs() > 1e-12 || (self.motion_std_mm - std).abs() > 1e-12 {
                return bad(format!(
                    "{} requires mean {mean} mm and std {std} mm, got {} / {}",
                    self.regime, self.motion_mean_mm, self.motion_std_mm
                ));
            }
        }
        Ok(())
    }
}

/// Axis-aligned extraction plane. `FixedH` yields a `D x W` image, `FixedW` a `D x H` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "index", rename_all = "snake_case")]
pub enum PlaneSpec {
    FixedH(usize),
    FixedW(usize),
}

impl PlaneSpec {
    pub fn image_dims(&self, dims: [usize; 3]) -> [usize; 2] {
        match self {
            PlaneSpec::FixedH(_) => [dims[0], dims[2]],
            PlaneSpec::FixedW(_) => [dims[0], dims[1]],
        }
    }

    pub fn check(&self, dims: [usize; 3]) -> Result<()> {
        let (index, bound) = match *self {
            PlaneSpec::FixedH(i) => (i, dims[1]),
            PlaneSpec::FixedW(i) => (i, dims[2]),
        };
        if index >= bound {
            return Err(Error::InvalidParameter(format!(
                "plane index {index} outside [0, {bound})"
            )));
        }
        Ok(())
    }

    /// Flat voxel index (within one channel) of image pixel `(a, b)`.
    #[inline]
    fn voxel(&self, dims: [usize; 3], a: usize, b: usize) -> usize {
        match *self {
            PlaneSpec::FixedH(h) => (a * dims[1] + h) * dims[2] + b,
            PlaneSpec::FixedW(w) => (a * dims[1] + b) * dims[2] + w,
        }
    }
}

/// `C x A x B` probability image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbImage<T = f32> {
    pub classes: usize,
    pub dims: [usize; 2],
    pub data: Vec<T>,
}

/// Categorical 2D image (e.g. a long-axis view).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelImage {
    pub dims: [usize; 2],
    pub labels: Vec<u8>,
}

impl LabelImage {
    /// Extracts a plane from a label volume.
    pub fn from_volume(v: &LabelVolume, plane: PlaneSpec) -> Result<Self> {
        plane.check(v.dims())?;
        let dims = plane.image_dims(v.dims());
        let mut labels = Vec::with_capacity(dims[0] * dims[1]);
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                labels.push(v.labels()[plane.voxel(v.dims(), a, b)]);
            }
        }
        Ok(Self { dims, labels })
    }
}

#[inline]
fn floor_frac(x: f64) -> (isize, f64) {
    let f = x.floor();
    (f as isize, x - f)
}

fn check_motion_len<T: Real>(p: &ProbVolume<T>, d: &MotionParams) -> Result<()> {
    if d.len() != p.dims[0] {
        return Err(Error::dims(format!("{} slice shifts", p.dims[0]), format!("{} slice shifts", d.len())));
    }
    if d.shifts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("motion shifts must be finite".into()));
    }
    Ok(())
}

/// Bilinear taps along one in-plane axis for output coordinate `o` shifted by `shift`.
#[inline]
fn taps(o: usize, shift: f64) -> (isize, f64) {
    floor_frac(o as f64 - shift)
}

/// Translates every depth slice by its `(d_h, d_w)`; samples falling outside the
/// slice read the background one-hot vector.
pub fn shift_slices<T: Real>(p: &ProbVolume<T>, d: &MotionParams) -> Result<ProbVolume<T>> {
    check_motion_len(p, d)?;
    let [_, height, width] = p.dims;
    let n = p.voxels();
    let plane = height * width;
    let mut out = ProbVolume::zeros(p.classes, p.dims);
    for (z, shift) in d.shifts.iter().enumerate() {
        let rows: Vec<(isize, f64)> = (0..height).map(|h| taps(h, shift[0])).collect();
        let cols: Vec<(isize, f64)> = (0..width).map(|w| taps(w, shift[1])).collect();
        for c in 0..p.classes {
            let bg = if c == 0 { T::one() } else { T::zero() };
            let src = &p.data[c * n + z * plane..c * n + (z + 1) * plane];
            let dst = &mut out.data[c * n + z * plane..c * n + (z + 1) * plane];
            let fetch = |y: isize, x: isize| -> T {
                if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                    src[y as usize * width + x as usize]
                } else {
                    bg
                }
            };
            for (h, &(y0, fy)) in rows.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (w, &(x0, fx)) in cols.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let top = fetch(y0, x0) * (T::one() - fx) + fetch(y0, x0 + 1) * fx;
                    let bottom = fetch(y0 + 1, x0) * (T::one() - fx) + fetch(y0 + 1, x0 + 1) * fx;
                    dst[h * width + w] = top * (T::one() - fy) + bottom * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`shift_slices`] with respect to the probabilities
/// and the per-slice shifts.
pub fn shift_slices_vjp<T: Real>(
    p: &ProbVolume<T>,
    d: &MotionParams,
    upstream: &ProbVolume<T>,
) -> Result<(ProbVolume<T>, MotionParams)> {
    check_motion_len(p, d)?;
    if upstream.shape() != p.shape() {
        return Err(Error::dims(p.shape(), upstream.shape()));
    }
    let [_, height, width] = p.dims;
    let n = p.voxels();
    let plane = height * width;
    let mut grad_p = ProbVolume::zeros(p.classes, p.dims);
    let mut grad_d = MotionParams::zeros(d.len());
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width;
    for (z, shift) in d.shifts.iter().enumerate() {
        let rows: Vec<(isize, f64)> = (0..height).map(|h| taps(h, shift[0])).collect();
        let cols: Vec<(isize, f64)> = (0..width).map(|w| taps(w, shift[1])).collect();
        let (mut gdh, mut gdw) = (T::zero(), T::zero());
        for c in 0..p.classes {
            let bg = if c == 0 { T::one() } else { T::zero() };
            let off = c * n + z * plane;
            let src = &p.data[off..off + plane];
            let up = &upstream.data[off..off + plane];
            let gp = &mut grad_p.data[off..off + plane];
            let fetch = |y: isize, x: isize| -> T {
                if inside(y, x) {
                    src[y as usize * width + x as usize]
                } else {
                    bg
                }
            };
            for (h, &(y0, fy)) in rows.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (w, &(x0, fx)) in cols.iter().enumerate() {
                    let u = up[h * width + w];
                    if u == T::zero() {
                        continue;
                    }
                    let fx = T::from_f64(fx);
                    let (v00, v01) = (fetch(y0, x0), fetch(y0, x0 + 1));
                    let (v10, v11) = (fetch(y0 + 1, x0), fetch(y0 + 1, x0 + 1));
                    let top = v00 * (T::one() - fx) + v01 * fx;
                    let bottom = v10 * (T::one() - fx) + v11 * fx;
                    let left = v00 * (T::one() - fy) + v10 * fy;
                    let right = v01 * (T::one() - fy) + v11 * fy;
                    // sample coordinate is (h - d_h, w - d_w)
                    gdh -= u * (bottom - top);
                    gdw -= u * (right - left);
                    for (y, x, wt) in [
                        (y0, x0, (T::one() - fy) * (T::one() - fx)),
                        (y0, x0 + 1, (T::one() - fy) * fx),
                        (y0 + 1, x0, fy * (T::one() - fx)),
                        (y0 + 1, x0 + 1, fy * fx),
                    ] {
                        if inside(y, x) {
                            gp[y as usize * width + x as usize] += wt * u;
                        }
                    }
                }
            }
        }
        grad_d.shifts[z] = [gdh.as_f64(), gdw.as_f64()];
    }
    Ok((grad_p, grad_d))
}

/// Linear interpolation taps `(i0, i1, w0, w1)` of each LR index on one axis
/// under the cell-centre convention, clamped to the HR extent.
fn axis_taps(hr: usize, lr: usize, s: f64) -> Vec<(usize, usize, f64, f64)> {
    (0..lr)
        .map(|k| {
            let x = ((k as f64 + 0.5) * s - 0.5).clamp(0.0, (hr - 1) as f64);
            let i0 = (x.floor() as usize).min(hr - 1);
            let i1 = (i0 + 1).min(hr - 1);
            let f = x - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

struct Resampler {
    lr: [usize; 3],
    taps: [Vec<(usize, usize, f64, f64)>; 3],
}

impl Resampler {
    fn new(hr: [usize; 3], s: &ScaleFactor) -> Self {
        let lr = s.lr_dims(hr);
        let sv = s.get();
        Self {
            lr,
            taps: [
                axis_taps(hr[0], lr[0], sv[0]),
                axis_taps(hr[1], lr[1], sv[1]),
                axis_taps(hr[2], lr[2], sv[2]),
            ],
        }
    }

    fn corners(&self, k: usize, j: usize, i: usize) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        let (d0, d1, dw0, dw1) = self.taps[0][k];
        let (h0, h1, hw0, hw1) = self.taps[1][j];
        let (w0, w1, ww0, ww1) = self.taps[2][i];
        [(d0, dw0), (d1, dw1)].into_iter().flat_map(move |(d, a)| {
            [(h0, hw0), (h1, hw1)].into_iter().flat_map(move |(h, b)| {
                [(w0, ww0), (w1, ww1)]
                    .into_iter()
                    .filter(move |&(_, c)| a * b * c != 0.0)
                    .map(move |(w, c)| ([d, h, w], a * b * c))
            })
        })
    }
}

/// Trilinear down-sampling with cell-centre alignment: LR index `k` samples the
/// HR coordinate `(k + 0.5) * s - 0.5` on each axis.
pub fn downsample<T: Real>(p: &ProbVolume<T>, s: &ScaleFactor) -> Result<ProbVolume<T>> {
    let rs = Resampler::new(p.dims, s);
    let [hd, hh, hw] = p.dims;
    let _ = hd;
    let n_hr = p.voxels();
    let mut out = ProbVolume::zeros(p.classes, rs.lr);
    let n_lr = out.voxels();
    let mut o = 0;
    for k in 0..rs.lr[0] {
        for j in 0..rs.lr[1] {
            for i in 0..rs.lr[2] {
                for ([d, h, w], wt) in rs.corners(k, j, i) {
                    let wt = T::from_f64(wt);
                    let src = (d * hh + h) * hw + w;
                    for c in 0..p.classes {
                        let v = out.data[c * n_lr + o] + wt * p.data[c * n_hr + src];
                        out.data[c * n_lr + o] = v;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample`] applied to an LR-shaped cotangent.
pub fn downsample_vjp<T: Real>(
    hr_dims: [usize; 3],
    s: &ScaleFactor,
    upstream: &ProbVolume<T>,
) -> Result<ProbVolume<T>> {
    let rs = Resampler::new(hr_dims, s);
    if upstream.dims != rs.lr {
        return Err(Error::dims(rs.lr, upstream.dims));
    }
    let [_, hh, hw] = hr_dims;
    let mut grad = ProbVolume::zeros(upstream.classes, hr_dims);
    let n_hr = grad.voxels();
    let n_lr = upstream.voxels();
    let mut o = 0;
    for k in 0..rs.lr[0] {
        for j in 0..rs.lr[1] {
            for i in 0..rs.lr[2] {
                for ([d, h, w], wt) in rs.corners(k, j, i) {
                    let wt = T::from_f64(wt);
                    let dst = (d * hh + h) * hw + w;
                    for c in 0..upstream.classes {
                        let u = upstream.data[c * n_lr + o];
                        grad.data[c * n_hr + dst] += wt * u;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(grad)
}

/// Extracts the probability image on an axis-aligned plane.
pub fn slice_plane<T: Real>(p: &ProbVolume<T>, plane: PlaneSpec) -> Result<ProbImage<T>> {
    plane.check(p.dims)?;
    let dims = plane.image_dims(p.dims);
    let n = p.voxels();
    let mut data = Vec::with_capacity(p.classes * dims[0] * dims[1]);
    for c in 0..p.classes {
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                data.push(p.data[c * n + plane.voxel(p.dims, a, b)]);
            }
        }
    }
    Ok(ProbImage { classes: p.classes, dims, data })
}

/// Adjoint of [`slice_plane`]: scatters the image cotangent into a zero volume.
pub fn slice_plane_vjp<T: Real>(
    vol_dims: [usize; 3],
    plane: PlaneSpec,
    upstream: &ProbImage<T>,
) -> Result<ProbVolume<T>> {
    plane.check(vol_dims)?;
    let dims = plane.image_dims(vol_dims);
    if upstream.dims != dims {
        return Err(Error::dims(dims, upstream.dims));
    }
    let mut grad = ProbVolume::zeros(upstream.classes, vol_dims);
    let n = grad.voxels();
    let mut i = 0;
    for c in 0..upstream.classes {
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                grad.data[c * n + plane.voxel(vol_dims, a, b)] = upstream.data[i];
                i += 1;
            }
        }
    }
    Ok(grad)
}

/// Draws one in-plane displacement per slice: amplitude from a normal
/// distribution truncated at zero (rejection), direction uniform on the circle.
/// `spacing_mm` is the in-plane `(h, w)` spacing used to convert mm to voxels.
pub fn sample_motion<R: Rng + ?Sized>(
    n_slices: usize,
    mean_mm: f64,
    std_mm: f64,
    spacing_mm: (f64, f64),
    rng: &mut R,
) -> Result<MotionParams> {
    if !(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "in-plane spacing must be positive, got {spacing_mm:?}"
        )));
    }
    if !(std_mm >= 0.0) || !mean_mm.is_finite() || !std_mm.is_finite() {
        return Err(Error::InvalidParameter(format!("invalid motion statistics {mean_mm} / {std_mm}")));
    }
    if mean_mm < 0.0 && std_mm == 0.0 {
        return Err(Error::InvalidParameter("negative amplitude with zero spread".into()));
    }
    let normal = if std_mm > 0.0 {
        Some(Normal::new(mean_mm, std_mm).map_err(|e| Error::InvalidParameter(e.to_string()))?)
    } else {
        None
    };
    let mut shifts = Vec::with_capacity(n_slices);
    for _ in 0..n_slices {
        let amplitude = match &normal {
            Some(dist) => loop {
                let a = dist.sample(rng);
                if a >= 0.0 {
                    break a;
                }
            },
            None => mean_mm,
        };
        let theta = rng.random::<f64>() * TAU;
        shifts.push([
            amplitude * theta.sin() / spacing_mm.0,
            amplitude * theta.cos() / spacing_mm.1,
        ]);
    }
    Ok(MotionParams { shifts })
}

/// Simulated acquisition of an HR segmentation.
///
/// Motion is drawn once per LR slice and applied to every HR slice of that LR
/// cell, then the volume is down-sampled, hardened by argmax, and each voxel is
/// flipped to a uniformly chosen other class with probability `label_flip_rate`.
/// The returned motion has one entry per LR slice in LR in-plane voxels.
pub fn degrade(hr: &LabelVolume, spec: &DegradationSpec) -> Result<(LabelVolume, MotionParams)> {
    spec.validate()?;
    let lr_dims = spec.scale.check_divides(hr.dims())?;
    let [sd, sh, sw] = spec.scale.get();
    let spacing = hr.spacing();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let hr_motion = sample_motion(
        lr_dims[0],
        spec.motion_mean_mm,
        spec.motion_std_mm,
        (spacing[1], spacing[2]),
        &mut rng,
    )?;
    let per_hr_slice = hr_motion.broadcast(sd as usize);

    let p = one_hot::<f32>(hr);
    let moved = if per_hr_slice.is_zero() { p } else { shift_slices(&p, &per_hr_slice)? };
    let lr_prob = downsample(&moved, &spec.scale)?;
    let lr_spacing = [spacing[0] * sd, spacing[1] * sh, spacing[2] * sw];
    let mut lr = argmax_labels(&lr_prob, lr_spacing, hr.label_names().to_vec())?;

    if spec.label_flip_rate > 0.0 {
        let classes = lr.num_classes() as u8;
        let mut labels = lr.labels().to_vec();
        for l in labels.iter_mut() {
            if rng.random::<f64>() < spec.label_flip_rate {
                let other = rng.random_range(0..classes - 1);
                *l = if other >= *l { other + 1 } else { other };
            }
        }
        lr = LabelVolume::new(lr.dims(), lr_spacing, labels, hr.label_names().to_vec())?;
    }
    Ok((lr, hr_motion.scaled(1.0 / sh, 1.0 / sw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::default_label_names;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random_prob(classes: usize, dims: [usize; 3], seed: u64) -> ProbVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; classes * n];
        for i in 0..n {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..classes {
                data[c * n + i] = raw[c] / s;
            }
        }
        ProbVolume::from_vec(classes, dims, data).unwrap()
    }

    fn random_field(classes: usize, dims: [usize; 3], seed: u64) -> ProbVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = classes * dims.iter().product::<usize>();
        ProbVolume::from_vec(classes, dims, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn random_motion(n: usize, amp: f64, seed: u64) -> MotionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionParams {
            shifts: (0..n)
                .map(|_| [(rng.random::<f64>() * 2.0 - 1.0) * amp, (rng.random::<f64>() * 2.0 - 1.0) * amp])
                .collect(),
        }
    }

    fn single_voxel(dims: [usize; 3], at: [usize; 3]) -> ProbVolume<f64> {
        let mut v = LabelVolume::zeros(dims, [1.0; 3], default_label_names()).unwrap();
        v.set(at[0], at[1], at[2], 1);
        one_hot(&v)
    }

    #[test]
    fn zero_shift_is_identity() {
        let p = random_prob(4, [3, 5, 6], 1);
        let out = shift_slices(&p, &MotionParams::zeros(3)).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn integer_shift_translates_with_background_fill() {
        let p = single_voxel([1, 4, 4], [0, 0, 2]);
        let out = shift_slices(&p, &MotionParams { shifts: vec![[1.0, 0.0]] }).unwrap();
        let expected = single_voxel([1, 4, 4], [0, 1, 2]);
        assert_eq!(out, expected);
        // vacated first row is background
        for w in 0..4 {
            assert_eq!(out.at(0, 0, 0, w), 1.0);
        }
    }

    #[test]
    fn half_shift_splits_mass() {
        let p = single_voxel([1, 5, 5], [0, 2, 2]);
        let out = shift_slices(&p, &MotionParams { shifts: vec![[0.5, 0.0]] }).unwrap();
        assert_eq!(out.at(1, 0, 2, 2), 0.5);
        assert_eq!(out.at(1, 0, 3, 2), 0.5);
        let total: f64 = out.channel(1).iter().sum();
        assert_eq!(total, 1.0);
        assert!(out.is_simplex(1e-12));
    }

    #[test]
    fn shift_rejects_wrong_motion_length() {
        let p = random_prob(4, [3, 4, 4], 2);
        assert!(matches!(shift_slices(&p, &MotionParams::zeros(2)), Err(Error::DimensionMismatch { .. })));
        let u = random_field(4, [3, 4, 5], 0);
        assert!(shift_slices_vjp(&p, &MotionParams::zeros(3), &u).is_err());
    }

    #[test]
    fn shift_gradient_matches_finite_differences() {
        let p = random_prob(4, [4, 8, 8], 3);
        let d = random_motion(4, 1.7, 4);
        let u = random_field(4, [4, 8, 8], 5);
        let (_, grad_d) = shift_slices_vjp(&p, &d, &u).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for z in 0..4 {
            for a in 0..2 {
                let mut dp = d.clone();
                dp.shifts[z][a] += h;
                let mut dm = d.clone();
                dm.shifts[z][a] -= h;
                let fp = shift_slices(&p, &dp).unwrap().dot(&u);
                let fm = shift_slices(&p, &dm).unwrap().dot(&u);
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((fd - grad_d.shifts[z][a]).abs());
                scale = scale.max(fd.abs());
            }
        }
        assert!(worst / scale < 1e-5, "relative error {}", worst / scale);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_prob(4, [2, 4, 4], 6);
        let d = random_motion(2, 2.0, 7);
        let (gp, gd) = shift_slices_vjp(&p, &d, &ProbVolume::zeros(4, [2, 4, 4])).unwrap();
        assert!(gp.data.iter().all(|&v| v == 0.0));
        assert!(gd.is_zero());
    }

    #[test]
    fn integer_shift_gradient_is_reverse_translation() {
        let p = random_prob(2, [1, 5, 5], 8);
        let u = random_field(2, [1, 5, 5], 9);
        let d = MotionParams { shifts: vec![[1.0, -2.0]] };
        let (gp, _) = shift_slices_vjp(&p, &d, &u).unwrap();
        for c in 0..2 {
            for y in 0..5isize {
                for x in 0..5isize {
                    // source (y, x) lands on output (y + 1, x - 2)
                    let (h, w) = (y + 1, x - 2);
                    let expected = if (0..5).contains(&h) && (0..5).contains(&w) {
                        u.at(c, 0, h as usize, w as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(gp.at(c, 0, y as usize, x as usize), expected);
                }
            }
        }
    }

    #[test]
    fn downsample_identity_and_constant() {
        let p = random_prob(3, [4, 6, 5], 10);
        assert_eq!(downsample(&p, &ScaleFactor::identity()).unwrap(), p);
        let n = 4 * 8 * 8;
        let mut data = vec![0.2f64; n];
        data.extend(vec![0.8; n]);
        let c = ProbVolume::from_vec(2, [4, 8, 8], data).unwrap();
        let s = ScaleFactor::new([2.0, 4.0, 1.0]).unwrap();
        let out = downsample(&c, &s).unwrap();
        assert_eq!(out.dims, [2, 2, 8]);
        for (i, v) in out.data.iter().enumerate() {
            let expected = if i < 32 { 0.2 } else { 0.8 };
            assert!((v - expected).abs() < 1e-15);
        }
    }

    /// Direct evaluation of the trilinear interpolant at an arbitrary point.
    fn trilinear_at(p: &ProbVolume<f64>, c: usize, x: [f64; 3]) -> f64 {
        let mut total = 0.0;
        for corner in 0..8 {
            let mut idx = [0usize; 3];
            let mut wt = 1.0;
            for a in 0..3 {
                let n = p.dims[a];
                let xa = x[a].clamp(0.0, (n - 1) as f64);
                let lo = xa.floor();
                let hi = (lo + 1.0).min((n - 1) as f64);
                let f = xa - lo;
                if corner >> a & 1 == 1 {
                    idx[a] = hi as usize;
                    wt *= f;
                } else {
                    idx[a] = lo as usize;
                    wt *= 1.0 - f;
                }
            }
            total += wt * p.at(c, idx[0], idx[1], idx[2]);
        }
        total
    }

    #[test]
    fn downsample_matches_dense_trilinear_oracle() {
        // channel 1 alternates 0/1 along depth
        let dims = [6, 4, 4];
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; 2 * n];
        for d in 0..6 {
            for i in 0..16 {
                let v = (d % 2) as f64;
                data[n + d * 16 + i] = v;
                data[d * 16 + i] = 1.0 - v;
            }
        }
        let p = ProbVolume::from_vec(2, dims, data).unwrap();
        let s = ScaleFactor::new([2.0, 1.0, 1.0]).unwrap();
        let out = downsample(&p, &s).unwrap();
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..4 {
                    let x = [(k as f64 + 0.5) * 2.0 - 0.5, j as f64, i as f64];
                    assert!((out.at(1, k, j, i) - trilinear_at(&p, 1, x)).abs() < 1e-15);
                    assert!((out.at(1, k, j, i) - 0.5).abs() < 1e-15);
                }
            }
        }
        // a fractional, anisotropic case against the same oracle
        let p = random_prob(3, [7, 9, 5], 11);
        let s = ScaleFactor::new([2.5, 1.5, 1.0]).unwrap();
        let out = downsample(&p, &s).unwrap();
        for c in 0..3 {
            for k in 0..out.dims[0] {
                for j in 0..out.dims[1] {
                    for i in 0..out.dims[2] {
                        let x = [(k as f64 + 0.5) * 2.5 - 0.5, (j as f64 + 0.5) * 1.5 - 0.5, i as f64];
                        assert!((out.at(c, k, j, i) - trilinear_at(&p, c, x)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_vjp_matches_finite_differences() {
        let p = random_prob(2, [4, 8, 8], 12);
        let s = ScaleFactor::new([2.0, 2.0, 1.0]).unwrap();
        let u = random_field(2, s.lr_dims([4, 8, 8]), 13);
        let g = downsample_vjp([4, 8, 8], &s, &u).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in (0..p.data.len()).step_by(7) {
            let mut pp = p.clone();
            pp.data[i] += h;
            let mut pm = p.clone();
            pm.data[i] -= h;
            let fd = (downsample(&pp, &s).unwrap().dot(&u) - downsample(&pm, &s).unwrap().dot(&u)) / (2.0 * h);
            worst = worst.max((fd - g.data[i]).abs());
            scale = scale.max(fd.abs());
        }
        assert!(worst / scale < 1e-5);
        let id = downsample_vjp([4, 8, 8], &ScaleFactor::identity(), &p).unwrap();
        assert_eq!(id, p);
    }

    #[test]
    fn slice_plane_selects_and_is_deterministic() {
        let mut v = LabelVolume::zeros([3, 4, 5], [1.0; 3], default_label_names()).unwrap();
        v.set(1, 2, 3, 2);
        let p = one_hot::<f64>(&v);
        let img = slice_plane(&p, PlaneSpec::FixedW(3)).unwrap();
        assert_eq!(img.dims, [3, 4]);
        // one-hot columns
        for a in 0..3 {
            for b in 0..4 {
                let vals: Vec<f64> = (0..4).map(|c| img.data[(c * 3 + a) * 4 + b]).collect();
                assert_eq!(vals.iter().sum::<f64>(), 1.0);
                let expected = if (a, b) == (1, 2) { 2 } else { 0 };
                assert_eq!(vals[expected], 1.0);
            }
        }
        assert_eq!(slice_plane(&p, PlaneSpec::FixedW(3)).unwrap(), img);
        assert!(slice_plane(&p, PlaneSpec::FixedH(4)).is_err());
        assert!(slice_plane(&p, PlaneSpec::FixedW(5)).is_err());
    }

    #[test]
    fn degrade_identity_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let labels = (0..4 * 6 * 6).map(|_| rng.random_range(0..4u8)).collect();
        let hr = LabelVolume::with_default_names([4, 6, 6], [2.0, 1.25, 1.25], labels).unwrap();
        let spec = DegradationSpec::for_regime(Regime::NoMotion, ScaleFactor::identity(), 1);
        let (lr, d) = degrade(&hr, &spec).unwrap();
        assert_eq!(lr, hr);
        assert!(d.is_zero());
        assert_eq!(d.len(), 4);
    }

    #[test]
    fn degrade_is_seeded() {
        let mut hr = LabelVolume::zeros([10, 12, 12], [2.0, 1.25, 1.25], default_label_names()).unwrap();
        for d in 2..8 {
            for h in 3..9 {
                for w in 4..8 {
                    hr.set(d, h, w, 1 + (h % 3) as u8);
                }
            }
        }
        let spec = DegradationSpec::for_regime(Regime::NormalMotion, ScaleFactor::new([5.0, 1.0, 1.0]).unwrap(), 99);
        let a = degrade(&hr, &spec).unwrap();
        let b = degrade(&hr, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.dims(), [hr.dims()[0] / 5, hr.dims()[1], hr.dims()[2]]);
        let other = DegradationSpec { rng_seed: 100, ..spec };
        assert_ne!(degrade(&hr, &other).unwrap().1, a.1);
    }

    #[test]
    fn degrade_rejects_indivisible_dims() {
        let hr = LabelVolume::zeros([7, 4, 4], [1.0; 3], default_label_names()).unwrap();
        let spec = DegradationSpec::for_regime(Regime::NoMotion, ScaleFactor::new([5.0, 1.0, 1.0]).unwrap(), 0);
        assert!(degrade(&hr, &spec).is_err());
    }

    #[test]
    fn label_flip_rate_monte_carlo() {
        let dims = [10, 100, 100];
        let hr = LabelVolume::new(dims, [1.0; 3], vec![0; 100_000], vec!["A".into(), "B".into()]).unwrap();
        let spec = DegradationSpec {
            label_flip_rate: 0.5,
            ..DegradationSpec::for_regime(Regime::NoMotion, ScaleFactor::identity(), 5)
        };
        let (lr, _) = degrade(&hr, &spec).unwrap();
        let frac = lr.count(1) as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.02, "flip fraction {frac}");
    }

    #[test]
    fn regime_constraints() {
        let s = ScaleFactor::identity();
        let mut spec = DegradationSpec::for_regime(Regime::SevereMotion, s, 0);
        assert!((spec.motion_mean_mm - 9.2).abs() < 1e-12);
        assert!((spec.motion_std_mm - 3.48).abs() < 1e-12);
        spec.motion_mean_mm = 2.3;
        assert!(spec.validate().is_err());
        let custom = DegradationSpec { regime: Regime::Custom, ..spec };
        assert!(custom.validate().is_ok());
    }

    #[test]
    fn sample_motion_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_motion(16, 2.3, 0.0, (1.25, 1.25), &mut rng).unwrap();
        for s in &m.shifts {
            assert!((s[0].hypot(s[1]) - 1.84).abs() < 1e-12);
        }
        let z = sample_motion(5, 0.0, 0.0, (1.25, 1.25), &mut rng).unwrap();
        assert!(z.is_zero());
        assert!(sample_motion(5, 1.0, 1.0, (0.0, 1.25), &mut rng).is_err());
        assert!(sample_motion(5, 1.0, -1.0, (1.0, 1.25), &mut rng).is_err());
    }

    #[test]
    fn sample_motion_amplitude_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = sample_motion(100_000, 2.3, 0.87, (1.0, 1.0), &mut rng).unwrap();
        let mean = m.shifts.iter().map(|s| s[0].hypot(s[1])).sum::<f64>() / 100_000.0;
        assert!((mean - 2.3).abs() < 0.02, "mean amplitude {mean}");
    }

    #[test]
    fn motion_json_format() {
        let m = MotionParams { shifts: vec![[0.5, -1.0]] };
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"shifts_vox":[[0.5,-1.0]]}"#);
    }

    #[test]
    fn scale_factor_validation() {
        assert!(ScaleFactor::new([0.0, 1.0, 1.0]).is_err());
        assert!(ScaleFactor::new([-2.0, 1.0, 1.0]).is_err());
        assert!(ScaleFactor::new([0.5, 1.0, 1.0]).is_err());
        assert!(ScaleFactor::new([2.5, 1.0, 1.0]).unwrap().integer().is_err());
        assert!(serde_json::from_str::<ScaleFactor>("[0.0,1.0,1.0]").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn operators_satisfy_adjoint_identity(seed in any::<u64>(), amp in 0.0f64..4.0,
                                              sd in 1u32..4, sh in 1u32..3) {
            let dims = [4, 6, 7];
            let p = random_prob(3, dims, seed);
            let zero = ProbVolume::<f64>::zeros(3, dims);
            let u = random_field(3, dims, seed ^ 0xabc);
            let d = random_motion(4, amp, seed ^ 0x123);
            // the background fill makes the shift affine; check its linear part
            let lin = {
                let mut f = shift_slices(&p, &d).unwrap();
                let f0 = shift_slices(&zero, &d).unwrap();
                for (a, b) in f.data.iter_mut().zip(&f0.data) { *a -= b; }
                f
            };
            let (gp, _) = shift_slices_vjp(&p, &d, &u).unwrap();
            prop_assert!((lin.dot(&u) - p.dot(&gp)).abs() < 1e-10);

            let s = ScaleFactor::new([sd as f64, sh as f64, 1.0]).unwrap();
            let ul = random_field(3, s.lr_dims(dims), seed ^ 0x77);
            let lhs = downsample(&p, &s).unwrap().dot(&ul);
            let rhs = p.dot(&downsample_vjp(dims, &s, &ul).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10);

            for plane in [PlaneSpec::FixedH(2), PlaneSpec::FixedW(5)] {
                let img = slice_plane(&p, plane).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ui = ProbImage { classes: 3, dims: img.dims,
                    data: (0..img.data.len()).map(|_| rng.random::<f64>()).collect() };
                let lhs: f64 = img.data.iter().zip(&ui.data).map(|(a, b)| a * b).sum();
                let rhs = p.dot(&slice_plane_vjp(dims, plane, &ui).unwrap());
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn operators_preserve_simplex(seed in any::<u64>(), amp in 0.0f64..6.0, sd in 1u32..4) {
            let dims = [3, 6, 6];
            let p = random_prob(4, dims, seed).cast::<f32>();
            let d = random_motion(3, amp, seed ^ 5);
            prop_assert!(shift_slices(&p, &d).unwrap().is_simplex(1e-5));
            let s = ScaleFactor::new([sd as f64, 2.0, 1.0]).unwrap();
            prop_assert!(downsample(&p, &s).unwrap().is_simplex(1e-5));
        }
    }
}
