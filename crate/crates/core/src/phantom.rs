//! Randomised cardiac-like label phantoms: an LV ellipsoid truncated at a basal
//! plane, a myocardial shell around it, and an RV crescent hugging the shell on
//! one side. The long axis runs along depth; pose jitter is an in-plane
//! rotation and translation.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{default_label_names, LabelVolume};

pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const MYO: u8 = 2;
pub const RV: u8 = 3;

/// Closed interval `[lo, hi]` sampled uniformly; `lo == hi` is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // always consume one draw so that fixing a span does not shift the others
        let u: f64 = rng.random();
        self.lo + u * (self.hi - self.lo)
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

impl From<[f64; 2]> for Span {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.lo, s.hi]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// LV semi-axes along h and w before rotation, and along depth.
    pub lv_semi_h_mm: Span,
    pub lv_semi_w_mm: Span,
    pub lv_semi_d_mm: Span,
    pub myo_thickness_mm: Span,
    /// Half of the angle the RV crescent subtends around the LV axis.
    pub rv_half_angle_deg: Span,
    pub rv_thickness_mm: Span,
    /// RV depth semi-axis as a fraction of the LV depth semi-axis.
    pub rv_depth_fraction: Span,
    /// Fraction of the LV depth semi-axis removed on the basal side.
    pub basal_cut: Span,
    /// Depth of the basal plane below the first slice.
    pub base_depth_mm: f64,
    pub rotation_deg: Span,
    pub translation_mm: Span,
    pub rng_seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [40, 64, 64],
            spacing_mm: [2.0, 1.25, 1.25],
            lv_semi_h_mm: Span::new(11.0, 15.0),
            lv_semi_w_mm: Span::new(11.0, 15.0),
            lv_semi_d_mm: Span::new(26.0, 32.0),
            myo_thickness_mm: Span::new(4.0, 6.5),
            rv_half_angle_deg: Span::new(50.0, 75.0),
            rv_thickness_mm: Span::new(7.0, 12.0),
            rv_depth_fraction: Span::new(0.7, 0.9),
            basal_cut: Span::new(0.2, 0.35),
            base_depth_mm: 6.0,
            rotation_deg: Span::new(-15.0, 15.0),
            translation_mm: Span::new(-4.0, 4.0),
            rng_seed: 0,
        }
    }
}

/// Shape parameters of one phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomShape {
    pub lv_semi_mm: [f64; 3],
    pub myo_thickness_mm: f64,
    pub rv_half_angle_rad: f64,
    pub rv_thickness_mm: f64,
    pub rv_depth_mm: f64,
    pub basal_cut: f64,
    pub rotation_rad: f64,
    pub translation_mm: [f64; 2],
}

impl PhantomShape {
    /// Analytic LV volume in mm^3: the ellipsoid minus its basal cap.
    pub fn lv_volume_mm3(&self) -> f64 {
        let [a, b, c] = self.lv_semi_mm;
        let keep = 1.0 - self.basal_cut;
        // integral of pi*a*b*(1 - x^2) over x in [-keep, 1], times c
        PI * a * b * c * ((1.0 + keep) - (1.0 + keep.powi(3)) / 3.0)
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("phantom: {m}")));
        if self.dims.iter().any(|&d| d < 3) || self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("grid {:?} / spacing {:?}", self.dims, self.spacing_mm));
        }
        let spans = [
            ("lv_semi_h_mm", self.lv_semi_h_mm),
            ("lv_semi_w_mm", self.lv_semi_w_mm),
            ("lv_semi_d_mm", self.lv_semi_d_mm),
            ("myo_thickness_mm", self.myo_thickness_mm),
            ("rv_half_angle_deg", self.rv_half_angle_deg),
            ("rv_thickness_mm", self.rv_thickness_mm),
            ("rv_depth_fraction", self.rv_depth_fraction),
            ("basal_cut", self.basal_cut),
            ("rotation_deg", self.rotation_deg),
            ("translation_mm", self.translation_mm),
        ];
        for (name, s) in spans {
            if !s.valid() {
                return bad(format!("{name} range {:?} is not an ordered finite interval", [s.lo, s.hi]));
            }
        }
        for (name, s) in &spans[..6] {
            if !(s.lo > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.rv_half_angle_deg.hi > 180.0 {
            return bad("rv_half_angle_deg must not exceed 180".into());
        }
        if !(self.rv_depth_fraction.hi <= 1.0 && self.rv_depth_fraction.lo > 0.0) {
            return bad("rv_depth_fraction must lie in (0, 1]".into());
        }
        if !(self.basal_cut.lo >= 0.0 && self.basal_cut.hi < 1.0) {
            return bad("basal_cut must lie in [0, 1)".into());
        }
        if !(self.base_depth_mm >= 0.0) {
            return bad("base_depth_mm must be non-negative".into());
        }

        // worst case extents, keeping one voxel of background on every side
        let [sd, sh, sw] = self.spacing_mm;
        let depth = self.dims[0] as f64 * sd;
        let apex = self.base_depth_mm
            + (1.0 - self.basal_cut.lo) * self.lv_semi_d_mm.hi
            + self.lv_semi_d_mm.hi
            + self.myo_thickness_mm.hi;
        if apex > depth - sd {
            return Err(Error::PhantomFit(format!("apex reaches {apex:.1} mm of a {depth:.1} mm deep grid")));
        }
        if self.base_depth_mm < sd {
            return Err(Error::PhantomFit("basal plane must leave one empty slice".into()));
        }
        let outer = self.lv_semi_h_mm.hi.max(self.lv_semi_w_mm.hi) + self.myo_thickness_mm.hi;
        let reach = outer + self.rv_thickness_mm.hi;
        let shift = self.translation_mm.lo.abs().max(self.translation_mm.hi.abs());
        let half = (self.dims[1] as f64 * sh).min(self.dims[2] as f64 * sw) / 2.0 - sh.max(sw);
        if reach + shift > half {
            return Err(Error::PhantomFit(format!(
                "in-plane reach {:.1} mm exceeds the {half:.1} mm available",
                reach + shift
            )));
        }
        Ok(())
    }

    /// Shape parameters of phantom `index`, deterministic per `(rng_seed, index)`.
    pub fn sample_shape(&self, index: u64) -> PhantomShape {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(index);
        let a = self.lv_semi_h_mm.sample(&mut rng);
        let b = self.lv_semi_w_mm.sample(&mut rng);
        let c = self.lv_semi_d_mm.sample(&mut rng);
        let t = self.myo_thickness_mm.sample(&mut rng);
        let half_angle = self.rv_half_angle_deg.sample(&mut rng).to_radians();
        let rv_t = self.rv_thickness_mm.sample(&mut rng);
        let rv_depth = self.rv_depth_fraction.sample(&mut rng) * c;
        let cut = self.basal_cut.sample(&mut rng);
        let rot = self.rotation_deg.sample(&mut rng).to_radians();
        let th = self.translation_mm.sample(&mut rng);
        let tw = self.translation_mm.sample(&mut rng);
        PhantomShape {
            lv_semi_mm: [a, b, c],
            myo_thickness_mm: t,
            rv_half_angle_rad: half_angle,
            rv_thickness_mm: rv_t,
            rv_depth_mm: rv_depth,
            basal_cut: cut,
            rotation_rad: rot,
            translation_mm: [th, tw],
        }
    }
}

/// Rasterises a shape by sampling voxel centres.
pub fn rasterise(p: &PhantomParams, shape: &PhantomShape) -> Result<LabelVolume> {
    let [nd, nh, nw] = p.dims;
    let [sd, sh, sw] = p.spacing_mm;
    let [a, b, c] = shape.lv_semi_mm;
    let t = shape.myo_thickness_mm;
    let (oa, ob, oc) = (a + t, b + t, c + t);
    let z0 = p.base_depth_mm + (1.0 - shape.basal_cut) * c;
    let base = -(1.0 - shape.basal_cut) * c;
    let ch = nh as f64 * sh / 2.0 + shape.translation_mm[0];
    let cw = nw as f64 * sw / 2.0 + shape.translation_mm[1];
    let (sin_r, cos_r) = shape.rotation_rad.sin_cos();

    let mut labels = vec![BACKGROUND; nd * nh * nw];
    for z in 0..nd {
        let dz = (z as f64 + 0.5) * sd - z0;
        if dz < base || dz > oc {
            continue;
        }
        let lv_k = 1.0 - (dz / c).powi(2);
        let outer_k = 1.0 - (dz / oc).powi(2);
        let rv_on = dz.abs() <= shape.rv_depth_mm && outer_k > 0.0;
        let rv_taper = if dz > 0.0 { (1.0 - (dz / shape.rv_depth_mm).powi(2)).max(0.0).sqrt() } else { 1.0 };
        let (ea, eb) = (oa * outer_k.max(0.0).sqrt(), ob * outer_k.max(0.0).sqrt());
        for y in 0..nh {
            let py = (y as f64 + 0.5) * sh - ch;
            for x in 0..nw {
                let px = (x as f64 + 0.5) * sw - cw;
                // phantom frame: rotate the offset back by the pose angle
                let u = cos_r * py + sin_r * px;
                let v = -sin_r * py + cos_r * px;
                let label = if (u / a).powi(2) + (v / b).powi(2) <= lv_k {
                    LV
                } else if (u / oa).powi(2) + (v / ob).powi(2) <= outer_k {
                    MYO
                } else if rv_on {
                    let phi = v.atan2(u);
                    if phi.abs() <= shape.rv_half_angle_rad {
                        let r = u.hypot(v);
                        let rim = ea * eb / ((eb * phi.cos()).powi(2) + (ea * phi.sin()).powi(2)).sqrt();
                        let profile = (FRAC_PI_2 * phi / shape.rv_half_angle_rad).cos().max(0.0).sqrt();
                        if r <= rim + shape.rv_thickness_mm * rv_taper * profile {
                            RV
                        } else {
                            BACKGROUND
                        }
                    } else {
                        BACKGROUND
                    }
                } else {
                    BACKGROUND
                };
                labels[(z * nh + y) * nw + x] = label;
            }
        }
    }
    LabelVolume::new(p.dims, p.spacing_mm, labels, default_label_names())
}

/// Phantom `index` of the family described by `p`.
pub fn generate_phantom(p: &PhantomParams, index: u64) -> Result<LabelVolume> {
    p.validate()?;
    let v = rasterise(p, &p.sample_shape(index))?;
    for (label, name) in [(LV, "LV"), (MYO, "MYO"), (RV, "RV")] {
        if v.count(label) == 0 {
            return Err(Error::PhantomFit(format!("phantom {index} has no {name} voxels")));
        }
    }
    Ok(v)
}

/// Subject indices per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Random disjoint partition of `0..n` with sizes rounded from `ratios`
/// (train, val, test); each split gets at least one subject.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 subjects to split, got {n}")));
    }
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n_train = ((n as f64 * ratios[0]).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * ratios[1]).round() as usize).clamp(1, n - 1 - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

pub const DEFAULT_SPLIT: [f64; 3] = [250.0 / 300.0, 25.0 / 300.0, 25.0 / 300.0];

/// `n` phantoms (index `i` is phantom `i` of the family) and their split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub volumes: Vec<LabelVolume>,
    pub splits: Splits,
}

impl Dataset {
    pub fn subset(&self, idx: &[usize]) -> Vec<LabelVolume> {
        idx.iter().map(|&i| self.volumes[i].clone()).collect()
    }
}

pub fn generate_dataset(p: &PhantomParams, n: usize, ratios: [f64; 3]) -> Result<Dataset> {
    let splits = split_indices(n, ratios, p.rng_seed)?;
    let volumes = (0..n as u64).map(|i| generate_phantom(p, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { volumes, splits })
}
