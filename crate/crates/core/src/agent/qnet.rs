//! Convolutional Q-network in double precision with hand-written backprop.
//!
//! Input is `channels x height x width` (worker groups x time slots x
//! features), preprocessed with `ln(1 + x)`. Each conv layer uses 4x4
//! kernels with "same" padding, a rectifier and a 2x2 max-pool (ceil mode),
//! followed by a hidden affine layer with a rectifier and the output layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StateTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl NetShape {
    /// Default architecture for a state tensor of the given shape.
    pub fn for_state(features: usize, groups: usize, slots: usize, actions: usize) -> Self {
        NetShape {
            channels: groups,
            height: slots,
            width: features,
            conv: vec![8, 16, 32],
            kernel: 4,
            hidden: 256,
            actions,
        }
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `(channels, height, width)` entering each conv layer, then the flattened output.
    fn conv_dims(&self) -> (Vec<(usize, usize, usize)>, usize) {
        let mut dims = Vec::with_capacity(self.conv.len());
        let (mut c, mut h, mut w) = (self.channels, self.height, self.width);
        for &out in &self.conv {
            dims.push((c, h, w));
            c = out;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (dims, c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.height == 0
            || self.width == 0
            || self.kernel == 0
            || self.hidden == 0
            || self.actions == 0
            || self.conv.contains(&0)
        {
            return Err(Error::Validation(vec!["network dimensions must be positive".into()]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone)]
struct Layout {
    conv_w: Vec<Span>,
    conv_b: Vec<Span>,
    hidden_w: Span,
    hidden_b: Span,
    out_w: Span,
    out_b: Span,
    total: usize,
}

impl Layout {
    fn new(shape: &NetShape) -> Self {
        let mut next = 0;
        let mut take = |len| {
            let s = Span { start: next, len };
            next += len;
            s
        };
        let k2 = shape.kernel * shape.kernel;
        let (dims, flat) = shape.conv_dims();
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for (&(c_in, _, _), &c_out) in dims.iter().zip(&shape.conv) {
            conv_w.push(take(c_out * c_in * k2));
            conv_b.push(take(c_out));
        }
        let hidden_w = take(shape.hidden * flat);
        let hidden_b = take(shape.hidden);
        let out_w = take(shape.actions * shape.hidden);
        let out_b = take(shape.actions);
        Layout {
            conv_w,
            conv_b,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            total: next,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QNetwork {
    shape: NetShape,
    layout: Layout,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    padded: Vec<Vec<f64>>,
    activated: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    flat: Vec<f64>,
    hidden: Vec<f64>,
}

/// Maps a state tensor to the network input layout with `ln(1 + x)`.
pub fn prepare_input(state: &StateTensor) -> Vec<f64> {
    let (features, groups, slots) = state.shape();
    let mut input = vec![0.0; features * groups * slots];
    for g in 0..groups {
        for t in 0..slots {
            for f in 0..features {
                input[(g * slots + t) * features + f] = state.get(f, g, t).max(0.0).ln_1p();
            }
        }
    }
    input
}

impl QNetwork {
    /// He-initialized weights, zero biases.
    pub fn new<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.total];
        let k2 = shape.kernel * shape.kernel;
        let (dims, flat) = shape.conv_dims();
        let mut fill = |span: Span, fan_in: usize, params: &mut Vec<f64>| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[span.range()] {
                *p = normal.sample(rng);
            }
        };
        for (l, &(c_in, _, _)) in dims.iter().enumerate() {
            fill(layout.conv_w[l], c_in * k2, &mut params);
        }
        fill(layout.hidden_w, flat, &mut params);
        fill(layout.out_w, shape.hidden, &mut params);
        Ok(QNetwork { shape, layout, params })
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(QNetwork { shape, layout, params })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn q_values(&self, state: &StateTensor) -> Result<Vec<f64>> {
        let (features, groups, slots) = state.shape();
        if (groups, slots, features) != (self.shape.channels, self.shape.height, self.shape.width) {
            return Err(Error::Shape {
                expected: (self.shape.width, self.shape.channels, self.shape.height),
                got: state.shape(),
            });
        }
        Ok(self.forward(&prepare_input(state)))
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).0
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, Cache) {
        assert_eq!(input.len(), self.shape.input_len(), "input length");
        let k = self.shape.kernel;
        let (dims, flat_len) = self.shape.conv_dims();
        let mut cache = Cache::default();
        let mut x = input.to_vec();
        for (l, &(c_in, h, w)) in dims.iter().enumerate() {
            let c_out = self.shape.conv[l];
            let weights = &self.params[self.layout.conv_w[l].range()];
            let bias = &self.params[self.layout.conv_b[l].range()];
            let padded = pad(&x, c_in, h, w, k);
            let mut out = conv_forward(&padded, c_in, h, w, weights, bias, c_out, k);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            let (pooled, argmax) = max_pool(&out, c_out, h, w);
            cache.padded.push(padded);
            cache.activated.push(out);
            cache.argmax.push(argmax);
            x = pooled;
        }
        debug_assert_eq!(x.len(), flat_len);
        let hidden_w = &self.params[self.layout.hidden_w.range()];
        let hidden_b = &self.params[self.layout.hidden_b.range()];
        let mut hidden = affine(hidden_w, hidden_b, &x);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let out_w = &self.params[self.layout.out_w.range()];
        let out_b = &self.params[self.layout.out_b.range()];
        let q = affine(out_w, out_b, &hidden);
        cache.flat = x;
        cache.hidden = hidden;
        (q, cache)
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to the outputs is `dq`.
    pub fn backward(&self, cache: &Cache, dq: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.layout.total);
        let k = self.shape.kernel;
        let (dims, _) = self.shape.conv_dims();
        let hidden = self.shape.hidden;
        let flat = cache.flat.len();

        // Output layer.
        let out_w = &self.params[self.layout.out_w.range()];
        let mut dhidden = vec![0.0; hidden];
        for (a, &d) in dq.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[self.layout.out_b.start + a] += d;
            let gw = &mut grad[self.layout.out_w.start + a * hidden..][..hidden];
            for j in 0..hidden {
                gw[j] += d * cache.hidden[j];
                dhidden[j] += d * out_w[a * hidden + j];
            }
        }
        // Hidden layer through its rectifier.
        let hidden_w = &self.params[self.layout.hidden_w.range()];
        let mut dx = vec![0.0; flat];
        for j in 0..hidden {
            let d = if cache.hidden[j] > 0.0 { dhidden[j] } else { 0.0 };
            if d == 0.0 {
                continue;
            }
            grad[self.layout.hidden_b.start + j] += d;
            let gw = &mut grad[self.layout.hidden_w.start + j * flat..][..flat];
            let w = &hidden_w[j * flat..][..flat];
            for i in 0..flat {
                gw[i] += d * cache.flat[i];
                dx[i] += d * w[i];
            }
        }
        // Conv stack, last layer first.
        for l in (0..dims.len()).rev() {
            let (c_in, h, w) = dims[l];
            let c_out = self.shape.conv[l];
            let mut dout = vec![0.0; c_out * h * w];
            for (i, &src) in cache.argmax[l].iter().enumerate() {
                if cache.activated[l][src] > 0.0 {
                    dout[src] += dx[i];
                }
            }
            let weights = &self.params[self.layout.conv_w[l].range()];
            let need_input_grad = l > 0;
            let (gw, gb) = {
                let (head, tail) = grad.split_at_mut(self.layout.conv_b[l].start);
                (&mut head[self.layout.conv_w[l].range()], &mut tail[..c_out])
            };
            dx = conv_backward(
                &cache.padded[l],
                &dout,
                c_in,
                h,
                w,
                weights,
                c_out,
                k,
                gw,
                gb,
                need_input_grad,
            );
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(j, bj)| bj + w[j * n..][..n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn pad_before(k: usize) -> usize {
    (k - 1) / 2
}

fn pad(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (hp, wp) = (h + k - 1, w + k - 1);
    let p = pad_before(k);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..][..w];
            out[(ch * hp + y + p) * wp + p..][..w].copy_from_slice(src);
        }
    }
    out
}

// Convolutions run over the padded width: output row `y` is computed for
// `wp` columns and the `k - 1` trailing ones are discarded. This keeps the
// inner loops long and contiguous.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    padded: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let (hp, wp) = (h + k - 1, w + k - 1);
    // Last valid index + 1 in the wide layout.
    let span = (h - 1) * wp + w;
    let mut wide = vec![0.0; span];
    let mut out = vec![0.0; c_out * h * w];
    for oc in 0..c_out {
        wide.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..c_in {
            let plane = &padded[ic * hp * wp..][..hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((oc * c_in + ic) * k + ky) * k + kx];
                    let src = &plane[ky * wp + kx..][..span];
                    for (d, s) in wide.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
        for y in 0..h {
            out[(oc * h + y) * w..][..w].copy_from_slice(&wide[y * wp..][..w]);
        }
    }
    out
}

/// Returns the gradient with respect to the unpadded input when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    padded: &[f64],
    dout: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    k: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    input_grad: bool,
) -> Vec<f64> {
    let (hp, wp) = (h + k - 1, w + k - 1);
    let span = (h - 1) * wp + w;
    let mut dpadded = if input_grad { vec![0.0; c_in * hp * wp] } else { Vec::new() };
    // Output gradient in the wide layout, zero in the discarded columns.
    let mut wide = vec![0.0; span];
    for oc in 0..c_out {
        let d = &dout[oc * h * w..][..h * w];
        gb[oc] += d.iter().sum::<f64>();
        for y in 0..h {
            wide[y * wp..][..w].copy_from_slice(&d[y * w..][..w]);
        }
        for ic in 0..c_in {
            let plane = &padded[ic * hp * wp..][..hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let idx = ((oc * c_in + ic) * k + ky) * k + kx;
                    let off = ky * wp + kx;
                    let src = &plane[off..][..span];
                    gw[idx] += dot(&wide, src);
                    if input_grad {
                        let wv = weights[idx];
                        let dst = &mut dpadded[ic * hp * wp + off..][..span];
                        for (p, g) in dst.iter_mut().zip(&wide) {
                            *p += wv * g;
                        }
                    }
                }
            }
        }
    }
    if !input_grad {
        return Vec::new();
    }
    let p = pad_before(k);
    let mut dx = vec![0.0; c_in * h * w];
    for ic in 0..c_in {
        for y in 0..h {
            let src = &dpadded[(ic * hp + y + p) * wp + p..][..w];
            dx[(ic * h + y) * w..][..w].copy_from_slice(src);
        }
    }
    dx
}

/// 2x2 max-pool, ceil mode. Returns the pooled map and the source index of each output.
fn max_pool(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = (ch * h + y) * w + xx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
