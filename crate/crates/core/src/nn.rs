//! Minimal reverse-mode building blocks for the generative prior: 3D
//! convolutions (im2col + gemm), transposed convolutions, dense layers and
//! pointwise activations, composed as a sequential stack over a flat parameter
//! vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::{gemm, Mat, Real};

/// Shape of one activation tensor: `channels x D x H x W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub dims: [usize; 3],
}

impl Shape {
    pub fn new(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output size of a strided convolution, `None` if the kernel does not fit.
    pub fn conv_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Output size of the transposed convolution.
    pub fn transposed_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.pad[a] {
                return None;
            }
            out[a] = full - 2 * self.pad[a];
        }
        Some(out)
    }
}

/// Output positions `lo..hi` along one axis whose tap `k` lands inside the input.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad <= k { 0 } else { ((in_len - 1 + pad - k) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

/// Gathers the receptive fields of a strided convolution into a
/// `(channels * taps) x out_voxels` matrix. Padding reads zero.
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    in_dims: [usize; 3],
    g: &ConvGeom,
    out_dims: [usize; 3],
    cols: &mut [T],
) {
    let [id, ih, iw] = in_dims;
    let [od, oh, ow] = out_dims;
    let p = od * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let sz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        let z_ok = sz >= 0 && (sz as usize) < id;
                        for y in 0..oh {
                            let sy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if !z_ok || sy < 0 || sy as usize >= ih {
                                dst[o..o + ow].fill(T::zero());
                                o += ow;
                                continue;
                            }
                            let base = (sz as usize * ih + sy as usize) * iw;
                            let (lo, hi) = valid_range(ow, iw, g.stride[2], e, g.pad[2]);
                            let row_out = &mut dst[o..o + ow];
                            row_out[..lo].fill(T::zero());
                            row_out[hi..].fill(T::zero());
                            let sx0 = lo * g.stride[2] + e - g.pad[2];
                            if g.stride[2] == 1 {
                                row_out[lo..hi].copy_from_slice(&xc[base + sx0..base + sx0 + (hi - lo)]);
                            } else {
                                for (j, v) in row_out[lo..hi].iter_mut().enumerate() {
                                    *v = xc[base + sx0 + j * g.stride[2]];
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    in_dims: [usize; 3],
    g: &ConvGeom,
    out_dims: [usize; 3],
    x: &mut [T],
) {
    let [id, ih, iw] = in_dims;
    let [od, oh, ow] = out_dims;
    let p = od * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let sz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        let z_ok = sz >= 0 && (sz as usize) < id;
                        for y in 0..oh {
                            let sy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if !z_ok || sy < 0 || sy as usize >= ih {
                                o += ow;
                                continue;
                            }
                            let base = (sz as usize * ih + sy as usize) * iw;
                            let (lo, hi) = valid_range(ow, iw, g.stride[2], e, g.pad[2]);
                            let sx0 = lo * g.stride[2] + e - g.pad[2];
                            for (j, &v) in src[o + lo..o + hi].iter().enumerate() {
                                xc[base + sx0 + j * g.stride[2]] += v;
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`; smooth, so finite-difference checks stay meaningful.
    Silu,
    Identity,
}

impl Activation {
    fn forward<T: Real>(&self, x: &[T], y: &mut [T]) {
        match self {
            Activation::Silu => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = v / (T::one() + (-v).exp_fast());
                }
            }
            Activation::Identity => y.copy_from_slice(x),
        }
    }

    fn backward<T: Real>(&self, x: &[T], gy: &[T], gx: &mut [T]) {
        match self {
            Activation::Silu => {
                for ((o, &v), &g) in gx.iter_mut().zip(x).zip(gy) {
                    let s = T::one() / (T::one() + (-v).exp_fast());
                    *o = g * s * (T::one() + v * (T::one() - s));
                }
            }
            Activation::Identity => gx.copy_from_slice(gy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv { geom: ConvGeom },
    ConvTranspose { geom: ConvGeom },
    Dense,
    Act(Activation),
    Reshape,
}

/// One layer bound to its slot in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
    weight_offset: usize,
    bias_offset: usize,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        let (cin, cout) = (self.input.channels, self.output.channels);
        match self.kind {
            LayerKind::Conv { geom } | LayerKind::ConvTranspose { geom } => cin * cout * geom.taps() + cout,
            LayerKind::Dense => self.input.len() * self.output.len() + self.output.len(),
            LayerKind::Act(_) | LayerKind::Reshape => 0,
        }
    }

    fn weight_len(&self) -> usize {
        self.bias_offset - self.weight_offset
    }

    /// Effective fan-in used to scale the initial weights.
    fn fan_in(&self) -> usize {
        let cin = self.input.channels;
        match self.kind {
            LayerKind::Conv { geom } => cin * geom.taps(),
            LayerKind::ConvTranspose { geom } => {
                let stride: usize = geom.stride.iter().product();
                (cin * geom.taps() / stride).max(1)
            }
            LayerKind::Dense => self.input.len(),
            _ => 1,
        }
    }

    fn forward<T: Real>(&self, params: &[T], x: &[T], y: &mut [T], scratch: &mut Vec<T>) {
        let w = &params[self.weight_offset..self.bias_offset];
        let bias = || &params[self.bias_offset..self.bias_offset + self.output.channels];
        match self.kind {
            LayerKind::Conv { geom } => {
                let cin = self.input.channels;
                let cout = self.output.channels;
                let p = self.output.voxels();
                let k = cin * geom.taps();
                for (c, &b) in bias().iter().enumerate() {
                    y[c * p..(c + 1) * p].fill(b);
                }
                if geom.is_pointwise() {
                    gemm(Mat::new(w, cout, k), Mat::new(x, k, p), T::one(), y);
                    return;
                }
                scratch.resize(k * p, T::zero());
                im2col(x, cin, self.input.dims, &geom, self.output.dims, scratch);
                gemm(Mat::new(w, cout, k), Mat::new(scratch, k, p), T::one(), y);
            }
            LayerKind::ConvTranspose { geom } => {
                let cin = self.input.channels;
                let cout = self.output.channels;
                let p_in = self.input.voxels();
                let p_out = self.output.voxels();
                let k = cout * geom.taps();
                scratch.resize(k * p_in, T::zero());
                gemm(Mat::new(w, cin, k).t(), Mat::new(x, cin, p_in), T::zero(), scratch);
                for (c, &b) in bias().iter().enumerate() {
                    y[c * p_out..(c + 1) * p_out].fill(b);
                }
                col2im(scratch, cout, self.output.dims, &geom, self.input.dims, y);
            }
            LayerKind::Dense => {
                let n_in = self.input.len();
                let n_out = self.output.len();
                let b = &params[self.bias_offset..self.bias_offset + n_out];
                y.copy_from_slice(b);
                gemm(Mat::new(w, n_out, n_in), Mat::new(x, n_in, 1), T::one(), y);
            }
            LayerKind::Act(act) => act.forward(x, y),
            LayerKind::Reshape => y.copy_from_slice(x),
        }
    }

    /// Writes the input gradient into `gx` (when requested) and accumulates
    /// parameter gradients into `gparams` (when requested).
    fn backward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        gy: &[T],
        gx: Option<&mut [T]>,
        gparams: Option<&mut [T]>,
        scratch: &mut Vec<T>,
    ) {
        let w = &params[self.weight_offset..self.bias_offset];
        match self.kind {
            LayerKind::Conv { geom } => {
                let cin = self.input.channels;
                let cout = self.output.channels;
                let p = self.output.voxels();
                let k = cin * geom.taps();
                if geom.is_pointwise() {
                    if let Some(gp) = gparams {
                        let (gw, gb) = gp[self.weight_offset..].split_at_mut(self.weight_len());
                        gemm(Mat::new(gy, cout, p), Mat::new(x, k, p).t(), T::one(), gw);
                        for c in 0..cout {
                            gb[c] += gy[c * p..(c + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    if let Some(gx) = gx {
                        gemm(Mat::new(w, cout, k).t(), Mat::new(gy, cout, p), T::zero(), gx);
                    }
                    return;
                }
                scratch.resize(k * p, T::zero());
                if let Some(gp) = gparams {
                    im2col(x, cin, self.input.dims, &geom, self.output.dims, scratch);
                    let (gw, gb) = gp[self.weight_offset..].split_at_mut(self.weight_len());
                    gemm(Mat::new(gy, cout, p), Mat::new(scratch, k, p).t(), T::one(), gw);
                    for c in 0..cout {
                        gb[c] += gy[c * p..(c + 1) * p].iter().copied().sum::<T>();
                    }
                }
                if let Some(gx) = gx {
                    gemm(Mat::new(w, cout, k).t(), Mat::new(gy, cout, p), T::zero(), scratch);
                    gx.fill(T::zero());
                    col2im(scratch, cin, self.input.dims, &geom, self.output.dims, gx);
                }
            }
            LayerKind::ConvTranspose { geom } => {
                let cin = self.input.channels;
                let cout = self.output.channels;
                let p_in = self.input.voxels();
                let p_out = self.output.voxels();
                let k = cout * geom.taps();
                scratch.resize(k * p_in, T::zero());
                im2col(gy, cout, self.output.dims, &geom, self.input.dims, scratch);
                if let Some(gp) = gparams {
                    let (gw, gb) = gp[self.weight_offset..].split_at_mut(self.weight_len());
                    gemm(Mat::new(x, cin, p_in), Mat::new(scratch, k, p_in).t(), T::one(), gw);
                    for c in 0..cout {
                        gb[c] += gy[c * p_out..(c + 1) * p_out].iter().copied().sum::<T>();
                    }
                }
                if let Some(gx) = gx {
                    gemm(Mat::new(w, cin, k), Mat::new(scratch, k, p_in), T::zero(), gx);
                }
            }
            LayerKind::Dense => {
                let n_in = self.input.len();
                let n_out = self.output.len();
                if let Some(gp) = gparams {
                    let (gw, gb) = gp[self.weight_offset..].split_at_mut(self.weight_len());
                    gemm(Mat::new(gy, n_out, 1), Mat::new(x, n_in, 1).t(), T::one(), gw);
                    for (b, &g) in gb[..n_out].iter_mut().zip(gy) {
                        *b += g;
                    }
                }
                if let Some(gx) = gx {
                    gemm(Mat::new(w, n_out, n_in).t(), Mat::new(gy, n_out, 1), T::zero(), gx);
                }
            }
            LayerKind::Act(act) => {
                if let Some(gx) = gx {
                    act.backward(x, gy, gx);
                }
            }
            LayerKind::Reshape => {
                if let Some(gx) = gx {
                    gx.copy_from_slice(gy);
                }
            }
        }
    }
}

/// Builder that lays layers out back to back in a shared parameter vector.
#[derive(Debug, Clone)]
pub struct StackBuilder {
    layers: Vec<Layer>,
    current: Shape,
    offset: usize,
}

impl StackBuilder {
    pub fn new(input: Shape, param_offset: usize) -> Self {
        Self { layers: Vec::new(), current: input, offset: param_offset }
    }

    pub fn shape(&self) -> Shape {
        self.current
    }

    fn push(&mut self, kind: LayerKind, output: Shape, weights: usize, biases: usize) -> &mut Self {
        let layer = Layer {
            kind,
            input: self.current,
            output,
            weight_offset: self.offset,
            bias_offset: self.offset + weights,
        };
        self.offset += weights + biases;
        self.current = output;
        self.layers.push(layer);
        self
    }

    pub fn conv(&mut self, out_channels: usize, geom: ConvGeom) -> Option<&mut Self> {
        let dims = geom.conv_out(self.current.dims)?;
        let w = self.current.channels * out_channels * geom.taps();
        Some(self.push(LayerKind::Conv { geom }, Shape::new(out_channels, dims), w, out_channels))
    }

    pub fn conv_transpose(&mut self, out_channels: usize, geom: ConvGeom) -> Option<&mut Self> {
        let dims = geom.transposed_out(self.current.dims)?;
        let w = self.current.channels * out_channels * geom.taps();
        Some(self.push(LayerKind::ConvTranspose { geom }, Shape::new(out_channels, dims), w, out_channels))
    }

    pub fn dense(&mut self, outputs: usize) -> &mut Self {
        let w = self.current.len() * outputs;
        self.push(LayerKind::Dense, Shape::new(outputs, [1, 1, 1]), w, outputs)
    }

    pub fn act(&mut self, act: Activation) -> &mut Self {
        let s = self.current;
        self.push(LayerKind::Act(act), s, 0, 0)
    }

    pub fn reshape(&mut self, to: Shape) -> &mut Self {
        assert_eq!(to.len(), self.current.len(), "reshape must preserve size");
        self.push(LayerKind::Reshape, to, 0, 0)
    }

    pub fn build(self) -> (Stack, usize) {
        (Stack { layers: self.layers }, self.offset)
    }
}

/// Activations recorded by a forward pass; `inputs[i]` is the input of layer `i`.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    inputs: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn input(&self) -> Shape {
        self.layers[0].input
    }

    pub fn output(&self) -> Shape {
        self.layers.last().expect("empty stack").output
    }

    /// Initialises weights uniformly in `±gain * sqrt(3 / fan_in)`; biases zero.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, params: &mut [T], rng: &mut R, gain: f64) {
        for l in &self.layers {
            if l.param_count() == 0 {
                continue;
            }
            let bound = gain * (3.0 / l.fan_in() as f64).sqrt();
            for w in &mut params[l.weight_offset..l.bias_offset] {
                *w = T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound);
            }
            let end = l.weight_offset + l.param_count();
            params[l.bias_offset..end].fill(T::zero());
        }
    }

    /// Scales the weights of the final parameterised layer, e.g. to start a
    /// log-variance head near zero.
    pub fn scale_last_weights<T: Real>(&self, params: &mut [T], factor: f64) {
        if let Some(l) = self.layers.iter().rev().find(|l| l.param_count() > 0) {
            for w in &mut params[l.weight_offset..l.bias_offset] {
                *w *= T::from_f64(factor);
            }
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], tape: Option<&mut Tape<T>>) -> Vec<T> {
        let mut scratch = Vec::new();
        let mut cur = x.to_vec();
        let mut inputs = Vec::new();
        let record = tape.is_some();
        for l in &self.layers {
            let mut y = vec![T::zero(); l.output.len()];
            l.forward(params, &cur, &mut y, &mut scratch);
            if record {
                inputs.push(std::mem::replace(&mut cur, y));
            } else {
                cur = y;
            }
        }
        if let Some(t) = tape {
            t.inputs = inputs;
        }
        cur
    }

    /// Back-propagates `grad_out`; returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        tape: &Tape<T>,
        grad_out: &[T],
        mut gparams: Option<&mut [T]>,
    ) -> Vec<T> {
        assert_eq!(tape.inputs.len(), self.layers.len(), "tape does not match stack");
        let mut scratch = Vec::new();
        let mut g = grad_out.to_vec();
        for (l, x) in self.layers.iter().zip(&tape.inputs).rev() {
            let mut gx = vec![T::zero(); l.input.len()];
            l.backward(params, x, &g, Some(&mut gx), gparams.as_deref_mut(), &mut scratch);
            g = gx;
        }
        g
    }
}
