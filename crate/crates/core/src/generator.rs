//! The anatomical prior: a 3D β-VAE whose decoder maps a latent code to a
//! per-voxel class distribution over the HR grid.
//!
//! The encoder is a stack of strided convolutions followed by one dense layer
//! emitting the posterior mean and log-variance. The decoder mirrors it with a
//! dense layer back to the bottleneck grid, strided transposed convolutions,
//! and a final `1x1x1` convolution with a channel softmax. All of it is generic
//! over [`Real`] so the same checkpoint can be evaluated in 64-bit arithmetic
//! for gradient verification.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvGeom, Shape, Stack, StackBuilder, Tape};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::volume::{argmax_labels, dice_report, one_hot, LabelVolume, ProbVolume};

pub const DEFAULT_LATENT_DIM: usize = 64;
pub const DEFAULT_BETA: f64 = 0.001;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "segsr-vae";

/// Latent code `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Standard-normal draw, i.e. a sample from the prior.
    pub fn sample_prior<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One convolutional stage: output channels plus kernel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Stage {
    pub const fn new(channels: usize, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { channels, kernel, stride, pad }
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom { kernel: self.kernel, stride: self.stride, pad: self.pad }
    }
}

/// Self-describing network layout stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub input_dims: [usize; 3],
    pub classes: usize,
    pub latent_dim: usize,
    pub encoder: Vec<Stage>,
    pub decoder: Vec<Stage>,
    pub activation: Activation,
    /// Multiplier on the initial weight bound of the posterior head.
    #[serde(default = "default_head_gain")]
    pub head_init_gain: f64,
}

fn default_head_gain() -> f64 {
    0.1
}

impl ArchDescriptor {
    /// Desk-scale network for `40 x 64 x 64` four-class volumes.
    pub fn desk_scale() -> Self {
        Self {
            input_dims: [40, 64, 64],
            classes: 4,
            latent_dim: DEFAULT_LATENT_DIM,
            encoder: vec![
                Stage::new(16, [3; 3], [2; 3], [1; 3]),
                Stage::new(32, [3; 3], [2; 3], [1; 3]),
                Stage::new(64, [3; 3], [2; 3], [1; 3]),
                Stage::new(128, [3; 3], [1, 2, 2], [1; 3]),
            ],
            decoder: vec![
                Stage::new(64, [3, 4, 4], [1, 2, 2], [1; 3]),
                Stage::new(32, [4; 3], [2; 3], [1; 3]),
                Stage::new(16, [4; 3], [2; 3], [1; 3]),
                Stage::new(8, [2; 3], [2; 3], [0; 3]),
            ],
            activation: Activation::Silu,
            head_init_gain: default_head_gain(),
        }
    }

    /// Two-stage network on an `8^3` grid with 8 latent dimensions.
    pub fn downsized(classes: usize) -> Self {
        Self {
            input_dims: [8, 8, 8],
            classes,
            latent_dim: 8,
            encoder: vec![Stage::new(4, [3; 3], [2; 3], [1; 3]), Stage::new(8, [3; 3], [2; 3], [1; 3])],
            decoder: vec![Stage::new(6, [4; 3], [2; 3], [1; 3]), Stage::new(4, [4; 3], [2; 3], [1; 3])],
            activation: Activation::Silu,
            head_init_gain: 1.0,
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.classes, self.input_dims)
    }

    /// Builds encoder and decoder stacks over one parameter vector and returns
    /// them with the total parameter count.
    fn build(&self) -> Result<(Stack, Stack, usize)> {
        let bad = |m: String| Error::InvalidParameter(format!("architecture: {m}"));
        if self.classes < 2 || self.latent_dim == 0 || self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(bad("need >= 2 classes, a latent dimension and at least one stage each way".into()));
        }
        if self.input_dims.contains(&0) {
            return Err(bad(format!("input dims {:?}", self.input_dims)));
        }
        let mut enc = StackBuilder::new(self.input_shape(), 0);
        for s in &self.encoder {
            let at = enc.shape();
            enc.conv(s.channels, s.geom())
                .ok_or_else(|| bad(format!("encoder stage {s:?} does not fit {at:?}")))?
                .act(self.activation);
        }
        let bottleneck = enc.shape();
        enc.dense(2 * self.latent_dim);
        let (encoder, offset) = enc.build();

        let mut dec = StackBuilder::new(Shape::new(self.latent_dim, [1, 1, 1]), offset);
        dec.dense(bottleneck.len()).act(self.activation).reshape(bottleneck);
        for s in &self.decoder {
            let at = dec.shape();
            dec.conv_transpose(s.channels, s.geom())
                .ok_or_else(|| bad(format!("decoder stage {s:?} does not fit {at:?}")))?
                .act(self.activation);
        }
        let pointwise = ConvGeom { kernel: [1; 3], stride: [1; 3], pad: [0; 3] };
        dec.conv(self.classes, pointwise).expect("pointwise conv always fits");
        if dec.shape().dims != self.input_dims {
            return Err(bad(format!(
                "decoder produces {:?}, expected {:?}",
                dec.shape().dims,
                self.input_dims
            )));
        }
        let (decoder, total) = dec.build();
        Ok((encoder, decoder, total))
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.build()?.2)
    }
}

/// Reconstruction cross-entropy (nats per voxel), KL (nats) and
/// `total = ce + beta * kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossReport {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

impl VaeLossReport {
    pub fn new(ce: f64, kl: f64, beta: f64) -> Self {
        Self { ce, kl, total: ce + beta * kl }
    }
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal, summed over dimensions.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    assert_eq!(mu.len(), logvar.len());
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Evaluated network: stacks plus weights in a chosen precision.
#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: ArchDescriptor,
    encoder: Stack,
    decoder: Stack,
    params: Vec<T>,
}

/// Forward state of a decode kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeTape<T> {
    tape: Tape<T>,
    pub probs: ProbVolume<T>,
}

fn softmax_channels<T: Real>(logits: &[T], classes: usize, voxels: usize) -> Vec<T> {
    let mut mx = logits[..voxels].to_vec();
    for c in 1..classes {
        for (m, &l) in mx.iter_mut().zip(&logits[c * voxels..(c + 1) * voxels]) {
            *m = m.max(l);
        }
    }
    let mut out = vec![T::zero(); logits.len()];
    let mut sum = vec![T::zero(); voxels];
    for c in 0..classes {
        let range = c * voxels..(c + 1) * voxels;
        for ((o, &l), (&m, s)) in out[range.clone()].iter_mut().zip(&logits[range]).zip(mx.iter().zip(sum.iter_mut())) {
            *o = (l - m).exp_fast();
            *s += *o;
        }
    }
    for s in sum.iter_mut() {
        *s = T::one() / *s;
    }
    for c in 0..classes {
        for (o, &r) in out[c * voxels..(c + 1) * voxels].iter_mut().zip(&sum) {
            *o *= r;
        }
    }
    out
}

/// Pulls a probability cotangent back through the channel softmax.
fn softmax_backward<T: Real>(probs: &[T], upstream: &[T], classes: usize, voxels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); probs.len()];
    for i in 0..voxels {
        let mut dot = T::zero();
        for c in 0..classes {
            dot += probs[c * voxels + i] * upstream[c * voxels + i];
        }
        for c in 0..classes {
            let k = c * voxels + i;
            out[k] = probs[k] * (upstream[k] - dot);
        }
    }
    out
}

impl<T: Real> Network<T> {
    pub fn new(arch: ArchDescriptor, params: Vec<T>) -> Result<Self> {
        let (encoder, decoder, total) = arch.build()?;
        if params.len() != total {
            return Err(Error::SizeMismatch { expected: total, actual: params.len() });
        }
        Ok(Self { arch, encoder, decoder, params })
    }

    /// Freshly initialised network.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        let (encoder, decoder, total) = arch.build()?;
        let mut params = vec![T::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder.init_params(&mut params, &mut rng, 1.0);
        encoder.scale_last_weights(&mut params, arch.head_init_gain);
        decoder.init_params(&mut params, &mut rng, 1.0);
        Ok(Self { arch, encoder, decoder, params })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn output_dims(&self) -> [usize; 3] {
        self.arch.input_dims
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    fn check_latent(&self, z: &LatentVector) -> Result<Vec<T>> {
        if z.len() != self.arch.latent_dim {
            return Err(Error::dims(self.arch.latent_dim, z.len()));
        }
        if !z.is_finite() {
            return Err(Error::InvalidParameter("latent vector must be finite".into()));
        }
        Ok(z.0.iter().map(|&v| T::from_f64(v)).collect())
    }

    fn decode_logits(&self, z: &[T], tape: Option<&mut Tape<T>>) -> Vec<T> {
        self.decoder.forward(&self.params, z, tape)
    }

    pub fn decode(&self, z: &LatentVector) -> Result<ProbVolume<T>> {
        let z = self.check_latent(z)?;
        let logits = self.decode_logits(&z, None);
        let voxels = self.arch.input_dims.iter().product();
        let probs = softmax_channels(&logits, self.arch.classes, voxels);
        ProbVolume::from_vec(self.arch.classes, self.arch.input_dims, probs)
    }

    /// Decode that records the activations needed by [`decode_backward`](Self::decode_backward).
    pub fn decode_taped(&self, z: &LatentVector) -> Result<DecodeTape<T>> {
        let z = self.check_latent(z)?;
        let mut tape = Tape::default();
        let logits = self.decode_logits(&z, Some(&mut tape));
        let voxels = self.arch.input_dims.iter().product();
        let probs = softmax_channels(&logits, self.arch.classes, voxels);
        Ok(DecodeTape { tape, probs: ProbVolume::from_vec(self.arch.classes, self.arch.input_dims, probs)? })
    }

    /// Latent gradient for a probability cotangent, weights held fixed.
    pub fn decode_backward(&self, state: &DecodeTape<T>, upstream: &ProbVolume<T>) -> Result<LatentVector> {
        if upstream.shape() != state.probs.shape() {
            return Err(Error::dims(state.probs.shape(), upstream.shape()));
        }
        let voxels = state.probs.voxels();
        let g_logits = softmax_backward(&state.probs.data, &upstream.data, self.arch.classes, voxels);
        let gz = self.decoder.backward(&self.params, &state.tape, &g_logits, None);
        Ok(LatentVector(gz.iter().map(|v| v.as_f64()).collect()))
    }

    pub fn decode_vjp(&self, z: &LatentVector, upstream: &ProbVolume<T>) -> Result<LatentVector> {
        let state = self.decode_taped(z)?;
        self.decode_backward(&state, upstream)
    }

    fn check_input(&self, p: &ProbVolume<T>) -> Result<()> {
        if p.classes != self.arch.classes || p.dims != self.arch.input_dims {
            return Err(Error::dims((self.arch.classes, self.arch.input_dims), (p.classes, p.dims)));
        }
        Ok(())
    }

    /// Posterior mean and log-variance.
    pub fn encode(&self, p: &ProbVolume<T>) -> Result<(LatentVector, LatentVector)> {
        self.check_input(p)?;
        let out = self.encoder.forward(&self.params, &p.data, None);
        let m = self.arch.latent_dim;
        let mu = out[..m].iter().map(|v| v.as_f64()).collect();
        let lv = out[m..].iter().map(|v| v.as_f64()).collect();
        Ok((LatentVector(mu), LatentVector(lv)))
    }

    /// One training example: forward through the reparameterised path,
    /// accumulate `weight *` parameter gradients into `grads`, and report the loss.
    fn train_step(
        &self,
        x: &ProbVolume<T>,
        target: &[u8],
        eps: &[f64],
        beta: f64,
        weight: f64,
        grads: &mut [T],
    ) -> VaeLossReport {
        let m = self.arch.latent_dim;
        let classes = self.arch.classes;
        let voxels = x.voxels();

        let mut enc_tape = Tape::default();
        let enc = self.encoder.forward(&self.params, &x.data, Some(&mut enc_tape));
        let mu: Vec<f64> = enc[..m].iter().map(|v| v.as_f64()).collect();
        let logvar: Vec<f64> = enc[m..].iter().map(|v| v.as_f64()).collect();
        let std: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<T> = (0..m).map(|i| T::from_f64(mu[i] + std[i] * eps[i])).collect();

        let mut dec_tape = Tape::default();
        let logits = self.decode_logits(&z, Some(&mut dec_tape));
        let probs = softmax_channels(&logits, classes, voxels);

        let mut ce = 0.0f64;
        let inv = T::from_f64(weight / voxels as f64);
        let mut g_logits: Vec<T> = probs.iter().map(|&p| p * inv).collect();
        for (i, &y) in target.iter().enumerate() {
            let k = y as usize * voxels + i;
            ce -= probs[k].as_f64().max(1e-30).ln();
            g_logits[k] -= inv;
        }
        ce /= voxels as f64;
        let kl = kl_divergence(&mu, &logvar);

        let gz = self.decoder.backward(&self.params, &dec_tape, &g_logits, Some(grads));
        let mut g_enc = vec![T::zero(); 2 * m];
        for i in 0..m {
            let gzi = gz[i].as_f64();
            g_enc[i] = T::from_f64(gzi + weight * beta * mu[i]);
            g_enc[m + i] = T::from_f64(
                gzi * eps[i] * 0.5 * std[i] + weight * beta * 0.5 * (logvar[i].exp() - 1.0),
            );
        }
        self.encoder.backward(&self.params, &enc_tape, &g_enc, Some(grads));
        VaeLossReport::new(ce, kl, beta)
    }

    /// Deterministic evaluation: CE of `decode(mu)` plus KL of the posterior.
    fn eval_loss(&self, x: &ProbVolume<T>, target: &[u8], beta: f64) -> VaeLossReport {
        let m = self.arch.latent_dim;
        let enc = self.encoder.forward(&self.params, &x.data, None);
        let mu: Vec<f64> = enc[..m].iter().map(|v| v.as_f64()).collect();
        let logvar: Vec<f64> = enc[m..].iter().map(|v| v.as_f64()).collect();
        let logits = self.decode_logits(&enc[..m], None);
        let voxels = x.voxels();
        let probs = softmax_channels(&logits, self.arch.classes, voxels);
        let ce = target
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[y as usize * voxels + i].as_f64().max(1e-30).ln())
            .sum::<f64>()
            / voxels as f64;
        VaeLossReport::new(ce, kl_divergence(&mu, &logvar), beta)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub seed: u64,
    pub final_train: Option<VaeLossReport>,
    pub final_val: Option<VaeLossReport>,
}

/// Trained prior: architecture, 32-bit weights, KL weight and training provenance.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub beta: f64,
    pub training_meta: TrainingMeta,
    net: Network<f32>,
}

impl PartialEq for GeneratorModel {
    fn eq(&self, other: &Self) -> bool {
        self.beta == other.beta
            && self.training_meta == other.training_meta
            && self.net.arch == other.net.arch
            && self.net.params == other.net.params
    }
}

impl GeneratorModel {
    pub fn new(arch: ArchDescriptor, weights: Vec<f32>, beta: f64, training_meta: TrainingMeta) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta, training_meta, net: Network::new(arch, weights)? })
    }

    /// Untrained model with seeded initial weights.
    pub fn init(arch: ArchDescriptor, beta: f64, seed: u64) -> Result<Self> {
        let net = Network::init(arch, seed)?;
        Self::new(net.arch.clone(), net.params, beta, TrainingMeta { seed, ..Default::default() })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.net.arch
    }

    pub fn weights(&self) -> &[f32] {
        &self.net.params
    }

    pub fn latent_dim(&self) -> usize {
        self.net.arch.latent_dim
    }

    pub fn classes(&self) -> usize {
        self.net.arch.classes
    }

    pub fn output_dims(&self) -> [usize; 3] {
        self.net.arch.input_dims
    }

    /// Production (32-bit) network.
    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    /// The same weights evaluated in 64-bit arithmetic.
    pub fn network_f64(&self) -> Network<f64> {
        self.net.cast()
    }

    pub fn decode(&self, z: &LatentVector) -> Result<ProbVolume<f32>> {
        self.net.decode(z)
    }

    pub fn decode_vjp(&self, z: &LatentVector, upstream: &ProbVolume<f32>) -> Result<LatentVector> {
        self.net.decode_vjp(z, upstream)
    }

    pub fn encode(&self, p: &ProbVolume<f32>) -> Result<(LatentVector, LatentVector)> {
        self.net.encode(p)
    }

    /// `argmax(decode(encode_mean(v)))`.
    pub fn reconstruct(&self, v: &LabelVolume) -> Result<LabelVolume> {
        let (mu, _) = self.encode(&one_hot(v))?;
        let p = self.decode(&mu)?;
        argmax_labels(&p, v.spacing(), v.label_names().to_vec())
    }

    /// Deterministic loss of one volume under the posterior mean.
    pub fn evaluate(&self, v: &LabelVolume) -> Result<VaeLossReport> {
        let x = one_hot::<f32>(v);
        self.net.check_input(&x)?;
        Ok(self.net.eval_loss(&x, v.labels(), self.beta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub beta: f64,
    /// Stop after this many epochs without a validation CE improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            adam: AdamConfig::default(),
            beta: DEFAULT_BETA,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: VaeLossReport,
    pub val: Option<VaeLossReport>,
}

fn check_dataset(data: &[LabelVolume], arch: &ArchDescriptor) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if v.dims() != arch.input_dims || v.num_classes() != arch.classes {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?} with {} classes", arch.input_dims, arch.classes),
                actual: format!("volume {i}: {:?} with {} classes", v.dims(), v.num_classes()),
            });
        }
    }
    Ok(())
}

/// Trains the β-VAE with Adam on shuffled mini-batches.
///
/// Each epoch visits every training volume once; the reported training loss is
/// the mean over examples of the reparameterised objective. When a validation
/// set is given, the parameters with the lowest validation CE are kept and
/// training stops after `patience` epochs without improvement. `on_epoch` sees
/// every record as it is produced.
pub fn train_vae(
    train: &[LabelVolume],
    val: &[LabelVolume],
    arch: &ArchDescriptor,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(GeneratorModel, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.beta > 0.0) || !(cfg.adam.lr > 0.0) {
        return Err(Error::InvalidParameter(format!("invalid training config {cfg:?}")));
    }
    check_dataset(train, arch)?;
    check_dataset(val, arch)?;

    let mut net = Network::<f32>::init(arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1e);
    let mut adam = Adam::new(net.params.len(), cfg.adam);
    let mut grads = vec![0.0f32; net.params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let m = arch.latent_dim;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut kl) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let eps: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                let x = one_hot::<f32>(&train[i]);
                let r = net.train_step(&x, train[i].labels(), &eps, cfg.beta, weight, &mut grads);
                ce += r.ce;
                kl += r.kl;
            }
            adam.update(&mut net.params, &grads);
        }
        let n = train.len() as f64;
        let train_report = VaeLossReport::new(ce / n, kl / n, cfg.beta);
        let val_report = if val.is_empty() {
            None
        } else {
            let (mut vce, mut vkl) = (0.0, 0.0);
            for v in val {
                let r = net.eval_loss(&one_hot(v), v.labels(), cfg.beta);
                vce += r.ce;
                vkl += r.kl;
            }
            let k = val.len() as f64;
            Some(VaeLossReport::new(vce / k, vkl / k, cfg.beta))
        };
        if !train_report.total.is_finite() {
            return Err(Error::InvalidParameter(format!("training diverged at epoch {epoch}")));
        }
        let record = EpochRecord { epoch, train: train_report, val: val_report };
        on_epoch(&record);
        history.push(record);

        if let Some(v) = val_report {
            let improved = best.as_ref().is_none_or(|(b, _, _)| v.ce < *b);
            if improved {
                best = Some((v.ce, epoch, net.params.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                break;
            }
        }
    }

    let last = history.last().cloned().expect("at least one epoch");
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (last.epoch, net.params),
    };
    let best_record = &history[best_epoch - 1];
    let meta = TrainingMeta {
        epochs_run: last.epoch,
        best_epoch,
        seed: cfg.seed,
        final_train: Some(best_record.train),
        final_val: best_record.val,
    };
    let model = GeneratorModel::new(arch.clone(), params, cfg.beta, meta)?;
    Ok((model, history))
}

/// Mean foreground Dice of `argmax(decode(encode_mean(v)))` against `v`.
pub fn reconstruction_dice(model: &GeneratorModel, data: &[LabelVolume]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("no volumes to reconstruct".into()));
    }
    let mut total = 0.0;
    for v in data {
        total += dice_report(&model.reconstruct(v)?, v)?.mean;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    arch: ArchDescriptor,
    beta: f64,
    latent_dim: usize,
    weight_count: usize,
    training_meta: TrainingMeta,
    payload_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a single JSON header line followed by the little-endian `f32` weights.
pub fn save_model(m: &GeneratorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob: Vec<u8> = m.weights().iter().flat_map(|w| w.to_le_bytes()).collect();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: m.arch().clone(),
        beta: m.beta,
        latent_dim: m.latent_dim(),
        weight_count: m.weights().len(),
        training_meta: m.training_meta.clone(),
        payload_sha256: sha256_hex(&blob),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');
    f.write_all(&line).and_then(|_| f.write_all(&blob)).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GeneratorModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader { path: path.to_path_buf(), reason };
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("missing header line".into()))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..split]).map_err(|e| malformed(e.to_string()))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(malformed("not a segsr checkpoint".into()));
    }
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
    let blob = &bytes[split + 1..];
    if blob.len() != header.weight_count * 4 {
        return Err(Error::SizeMismatch { expected: header.weight_count * 4, actual: blob.len() });
    }
    let digest = sha256_hex(blob);
    if digest != header.payload_sha256 {
        return Err(Error::ChecksumMismatch { expected: header.payload_sha256, actual: digest });
    }
    if header.latent_dim != header.arch.latent_dim {
        return Err(malformed("latent_dim disagrees with arch".into()));
    }
    let weights = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    GeneratorModel::new(header.arch, weights, header.beta, header.training_meta)
}
