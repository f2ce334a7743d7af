//! Joint search over the latent code `z` and per-slice displacements `d` so
//! that the degraded decode reproduces the acquired LR labels (and optionally
//! a long-axis view).
//!
//! The forward chain is `decode(z) -> shift_slices(., d) -> downsample(., s)`,
//! scored by clipped cross-entropy against the LR labels. `d` holds one
//! in-plane displacement per LR slice, in HR in-plane voxels, shared by every
//! HR slice of that LR cell, mirroring the simulator in [`crate::degrade`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::degrade::{
    downsample, downsample_vjp, shift_slices, shift_slices_vjp, slice_plane, slice_plane_vjp, LabelImage,
    MotionParams, PlaneSpec, ProbImage, ScaleFactor,
};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, LatentVector, Network};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::volume::{argmax_labels, LabelVolume, ProbVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentOptConfig {
    pub lr: f64,
    /// Weight of the long-axis term; ignored when no long-axis target is given.
    pub gamma: f64,
    pub rel_change_tol: f64,
    pub rel_change_window: usize,
    pub max_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub prob_clip: f64,
}

impl Default for LatentOptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            gamma: 1.0,
            rel_change_tol: 0.05,
            rel_change_window: 10,
            max_iters: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            prob_clip: 1e-7,
        }
    }
}

impl LatentOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("latent search: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be non-negative");
        }
        if !(self.rel_change_tol > 0.0 && self.rel_change_tol < 1.0) {
            return bad("rel_change_tol must lie in (0, 1)");
        }
        if self.rel_change_window == 0 || self.max_iters == 0 {
            return bad("window and max_iters must be at least 1");
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return bad("prob_clip must lie in (0, 0.5)");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_sa: f64,
    pub loss_la: f64,
    pub grad_z_norm: f64,
    pub grad_d_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub records: Vec<IterRecord>,
    pub stop_reason: StopReason,
}

impl OptTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss_total)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss_total,loss_sa,loss_la,grad_z_norm,grad_d_norm\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.loss_total, r.loss_sa, r.loss_la, r.grad_z_norm, r.grad_d_norm
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SuperResolveResult {
    pub sr: LabelVolume,
    pub sr_prob: ProbVolume<f32>,
    /// Estimated displacement per LR slice in LR in-plane voxels.
    pub d_hat: MotionParams,
    pub z_hat: LatentVector,
    pub trace: OptTrace,
}

/// Loss value with gradients; `grad_d` is empty for terms that do not depend on motion.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_z: LatentVector,
    pub grad_d: MotionParams,
}

#[cfg(test)]
thread_local! {
    static LA_EVALUATIONS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Voxel-mean cross-entropy of clipped probabilities against hard labels, and
/// its cotangent with respect to the unclipped probabilities.
fn clipped_ce<T: Real>(probs: &[T], classes: usize, labels: &[u8], clip: f64) -> (f64, Vec<T>) {
    let n = labels.len();
    let hi = 1.0 - (classes - 1) as f64 * clip;
    let mut grad = vec![T::zero(); probs.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let k = y as usize * n + i;
        let q = probs[k].as_f64();
        let qc = q.clamp(clip, hi);
        loss -= qc.ln();
        if q > clip && q < hi {
            grad[k] = T::from_f64(-1.0 / (qc * n as f64));
        }
    }
    (loss / n as f64, grad)
}

fn check_labels(classes: usize, labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidVolume(format!("label {bad} outside the model's {classes} classes")));
    }
    Ok(())
}

/// LR shift vector broadcast to the HR slices.
fn hr_motion(d: &MotionParams, depth_factor: usize) -> MotionParams {
    d.broadcast(depth_factor)
}

fn depth_factor(s: &ScaleFactor) -> Result<usize> {
    Ok(s.integer()?[0])
}

/// Short-axis term evaluated on an HR probability volume: loss, HR cotangent and `d` gradient.
fn sa_term<T: Real>(
    p: &ProbVolume<T>,
    d: &MotionParams,
    s: &ScaleFactor,
    target: &LabelVolume,
    clip: f64,
) -> Result<(f64, ProbVolume<T>, MotionParams)> {
    let lr_dims = s.check_divides(p.dims)?;
    if lr_dims != target.dims() {
        return Err(Error::dims(target.dims(), lr_dims));
    }
    if d.len() != lr_dims[0] {
        return Err(Error::dims(format!("{} slice shifts", lr_dims[0]), format!("{} slice shifts", d.len())));
    }
    check_labels(p.classes, target.labels())?;
    let sd = depth_factor(s)?;
    let motion = hr_motion(d, sd);
    let q = downsample(&shift_slices(p, &motion)?, s)?;
    let (loss, g_q) = clipped_ce(&q.data, q.classes, target.labels(), clip);
    let (g_p, g_d) = sa_backward(p, &motion, s, &ProbVolume::from_vec(q.classes, q.dims, g_q)?)?;
    Ok((loss, g_p, g_d))
}

/// Pulls an LR cotangent back to the HR probabilities and the per-LR-slice shifts.
fn sa_backward<T: Real>(
    p: &ProbVolume<T>,
    hr_motion: &MotionParams,
    s: &ScaleFactor,
    g_q: &ProbVolume<T>,
) -> Result<(ProbVolume<T>, MotionParams)> {
    let g_moved = downsample_vjp(p.dims, s, g_q)?;
    let (g_p, g_motion) = shift_slices_vjp(p, hr_motion, &g_moved)?;
    Ok((g_p, g_motion.reduce(depth_factor(s)?)))
}

/// Long-axis term on an HR probability volume: loss and HR cotangent.
fn la_term<T: Real>(p: &ProbVolume<T>, plane: PlaneSpec, target: &LabelImage, clip: f64) -> Result<(f64, ProbVolume<T>)> {
    #[cfg(test)]
    LA_EVALUATIONS.with(|c| c.set(c.get() + 1));
    plane.check(p.dims)?;
    let dims = plane.image_dims(p.dims);
    if dims != target.dims {
        return Err(Error::dims(dims, target.dims));
    }
    check_labels(p.classes, &target.labels)?;
    let img = slice_plane(p, plane)?;
    let (loss, g) = clipped_ce(&img.data, img.classes, &target.labels, clip);
    let g_img = ProbImage { classes: img.classes, dims, data: g };
    Ok((loss, slice_plane_vjp(p.dims, plane, &g_img)?))
}

/// `CE(downsample(shift_slices(decode(z), d)), target)` with gradients in `z` and `d`.
pub fn sa_loss<T: Real>(
    net: &Network<T>,
    z: &LatentVector,
    d: &MotionParams,
    s: &ScaleFactor,
    target: &LabelVolume,
    prob_clip: f64,
) -> Result<LossGrad> {
    let state = net.decode_taped(z)?;
    let (loss, g_p, grad_d) = sa_term(&state.probs, d, s, target, prob_clip)?;
    let grad_z = net.decode_backward(&state, &g_p)?;
    Ok(LossGrad { loss, grad_z, grad_d })
}

/// `CE(slice_plane(decode(z)), target)` with its `z` gradient.
pub fn la_loss<T: Real>(
    net: &Network<T>,
    z: &LatentVector,
    plane: PlaneSpec,
    target: &LabelImage,
    prob_clip: f64,
) -> Result<LossGrad> {
    let state = net.decode_taped(z)?;
    let (loss, g_p) = la_term(&state.probs, plane, target, prob_clip)?;
    let grad_z = net.decode_backward(&state, &g_p)?;
    Ok(LossGrad { loss, grad_z, grad_d: MotionParams::zeros(0) })
}

/// Every term of the objective at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub sa: f64,
    pub la: f64,
    pub grad_z: LatentVector,
    pub grad_d: MotionParams,
}

/// `L_SA + gamma * L_LA`, with one decoder backward pass for the summed cotangent.
/// The long-axis term is only evaluated when `la` is given and `gamma > 0`.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real>(
    net: &Network<T>,
    z: &LatentVector,
    d: &MotionParams,
    s: &ScaleFactor,
    target: &LabelVolume,
    la: Option<(PlaneSpec, &LabelImage)>,
    gamma: f64,
    prob_clip: f64,
) -> Result<Objective> {
    let state = net.decode_taped(z)?;
    let (sa, mut g_p, grad_d) = sa_term(&state.probs, d, s, target, prob_clip)?;
    let mut la_value = 0.0;
    if let Some((plane, img)) = la.filter(|_| gamma > 0.0) {
        let (l, g_la) = la_term(&state.probs, plane, img, prob_clip)?;
        let g = T::from_f64(gamma);
        for (a, &b) in g_p.data.iter_mut().zip(&g_la.data) {
            *a += g * b;
        }
        la_value = l;
    }
    let grad_z = net.decode_backward(&state, &g_p)?;
    Ok(Objective { total: sa + gamma * la_value, sa, la: la_value, grad_z, grad_d })
}

/// HR/LR ratio implied by the model grid and the LR target.
pub fn implied_scale(hr: [usize; 3], lr: [usize; 3]) -> Result<ScaleFactor> {
    if (0..3).any(|a| lr[a] == 0 || !hr[a].is_multiple_of(lr[a])) {
        return Err(Error::DimensionMismatch {
            expected: format!("an integer fraction of {hr:?}"),
            actual: format!("{lr:?}"),
        });
    }
    ScaleFactor::new([0, 1, 2].map(|a| (hr[a] / lr[a]) as f64))
}

fn converged(losses: &[f64], window: usize, tol: f64) -> bool {
    if losses.len() <= window {
        return false;
    }
    let tail = &losses[losses.len() - window - 1..];
    let mean: f64 = tail.windows(2).map(|w| (w[1] - w[0]).abs() / w[0].abs().max(f64::MIN_POSITIVE)).sum::<f64>()
        / window as f64;
    mean < tol
}

/// Adam search over `(z, d)` from zero.
///
/// At each iteration the objective is evaluated at the current iterate and
/// recorded; the search stops once the mean relative loss change over the
/// trailing window falls below the tolerance or `max_iters` evaluations have
/// been made, otherwise both blocks take one shared Adam step. The returned
/// iterate is therefore the one whose loss is recorded last.
pub fn optimise(
    m: &GeneratorModel,
    lr_target: &LabelVolume,
    la: Option<(PlaneSpec, &LabelImage)>,
    cfg: &LatentOptConfig,
) -> Result<SuperResolveResult> {
    optimise_with(m.network(), lr_target, la, cfg)
}

/// [`optimise`] on a network of any precision.
pub fn optimise_with<T: Real>(
    net: &Network<T>,
    lr_target: &LabelVolume,
    la: Option<(PlaneSpec, &LabelImage)>,
    cfg: &LatentOptConfig,
) -> Result<SuperResolveResult> {
    cfg.validate()?;
    let hr_dims = net.output_dims();
    let s = implied_scale(hr_dims, lr_target.dims())?;
    if let Some((plane, img)) = la {
        plane.check(hr_dims)?;
        if plane.image_dims(hr_dims) != img.dims {
            return Err(Error::dims(plane.image_dims(hr_dims), img.dims));
        }
    }
    let la = if cfg.gamma > 0.0 { la } else { None };
    let m = net.latent_dim();
    let n_slices = lr_target.dims()[0];

    let mut x = vec![0.0f64; m + 2 * n_slices];
    let mut adam = Adam::<f64>::new(x.len(), cfg.adam());
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let split = |x: &[f64]| {
        let z = LatentVector(x[..m].to_vec());
        let d = MotionParams { shifts: x[m..].chunks(2).map(|c| [c[0], c[1]]).collect() };
        (z, d)
    };

    let stop_reason = loop {
        let iter = records.len() + 1;
        let (z, d) = split(&x);
        let obj = objective(net, &z, &d, &s, lr_target, la, cfg.gamma, cfg.prob_clip)?;
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|g| g * g).sum::<f64>().sqrt();
        let record = IterRecord {
            iter,
            loss_total: obj.total,
            loss_sa: obj.sa,
            loss_la: obj.la,
            grad_z_norm: norm(&mut obj.grad_z.0.iter().copied()),
            grad_d_norm: norm(&mut obj.grad_d.shifts.iter().flatten().copied()),
        };
        let finite = [record.loss_total, record.grad_z_norm, record.grad_d_norm].iter().all(|v| v.is_finite());
        records.push(record);
        if !finite {
            return Err(Error::Diverged {
                iteration: iter,
                trace: Box::new(OptTrace { records, stop_reason: StopReason::MaxIters }),
            });
        }
        losses.push(obj.total);
        if converged(&losses, cfg.rel_change_window, cfg.rel_change_tol) {
            break StopReason::Converged;
        }
        if iter >= cfg.max_iters {
            break StopReason::MaxIters;
        }
        let grads: Vec<f64> = obj.grad_z.0.iter().copied().chain(obj.grad_d.shifts.iter().flatten().copied()).collect();
        adam.update(&mut x, &grads);
        log::trace!("latent search iter {iter}: loss {}", obj.total);
    };

    let (z_hat, d_hr) = split(&x);
    let sr_prob: ProbVolume<f32> = net.decode(&z_hat)?.cast();
    let lr_spacing = lr_target.spacing();
    let sc = s.get();
    let hr_spacing = [0, 1, 2].map(|a| lr_spacing[a] / sc[a]);
    let sr = argmax_labels(&sr_prob, hr_spacing, lr_target.label_names().to_vec())?;
    Ok(SuperResolveResult {
        sr,
        sr_prob,
        d_hat: d_hr.scaled(1.0 / sc[1], 1.0 / sc[2]),
        z_hat,
        trace: OptTrace { records, stop_reason },
    })
}
