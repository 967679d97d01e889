//! Forward kernels and their adjoints.
//!
//! Spatial tensors are `[C, H, W]`; every kernel is a plain loop over the
//! row-major buffer.

use super::graph::LayerKind;
use super::Tensor;

/// Valid output range `[lo, hi)` for one kernel tap along an axis.
#[inline]
fn tap_range(
    tap: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    // input index = o * stride + tap - pad must lie in [0, in_len)
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > tap {
        ((in_len + pad - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn forward(
    kind: &LayerKind,
    inputs: &[&Tensor],
    params: &[f64],
    out_shape: &[usize],
) -> Tensor {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let x = inputs[0];
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let kk = kernel * kernel;
            let weight = &params[..out_channels * in_channels * kk];
            let mut out = vec![0.0; out_channels * oh * ow];
            for o in 0..out_channels {
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                if bias {
                    plane.fill(params[out_channels * in_channels * kk + o]);
                }
                for i in 0..in_channels {
                    let src = &x.data()[i * h * w..(i + 1) * h * w];
                    for ky in 0..kernel {
                        let (y0, y1) = tap_range(ky, padding, stride, h, oh);
                        for kx in 0..kernel {
                            let wv = weight[((o * in_channels + i) * kernel + ky) * kernel + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (x0, x1) = tap_range(kx, padding, stride, w, ow);
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - padding;
                                let row = &src[iy * w..(iy + 1) * w];
                                let dst = &mut plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let off = kx as isize - padding as isize;
                                    for ox in x0..x1 {
                                        dst[ox] += wv * row[(ox as isize + off) as usize];
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        dst[ox] += wv * row[ox * stride + kx - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::Dense {
            in_features,
            out_features,
            ..
        } => {
            let x = inputs[0].data();
            let (weight, b) = params.split_at(in_features * out_features);
            let out = (0..out_features)
                .map(|o| {
                    let row = &weight[o * in_features..(o + 1) * in_features];
                    b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::Batchnorm { channels, eps } => {
            let x = inputs[0];
            let per = x.len() / channels;
            let (gamma, rest) = params.split_at(channels);
            let (beta, rest) = rest.split_at(channels);
            let (mean, var) = rest.split_at(channels);
            let mut out = x.data().to_vec();
            for c in 0..channels {
                let scale = gamma[c] / (var[c] + eps).sqrt();
                let shift = beta[c] - mean[c] * scale;
                for v in &mut out[c * per..(c + 1) * per] {
                    *v = *v * scale + shift;
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::Relu => map(inputs[0], |v| v.max(0.0)),
        LayerKind::Sigmoid => map(inputs[0], sigmoid),
        LayerKind::Tanh => map(inputs[0], f64::tanh),
        LayerKind::Avgpool { kernel, stride } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                let src = &x.data()[ch * h * w..];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..kernel {
                            let row = (oy * stride + ky) * w + ox * stride;
                            s += src[row..row + kernel].iter().sum::<f64>();
                        }
                        out[(ch * oh + oy) * ow + ox] = s * norm;
                    }
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::Maxpool { kernel, stride } => {
            let x = inputs[0];
            let argmax = maxpool_argmax(x, kernel, stride, out_shape);
            let out = argmax.iter().map(|&i| x.data()[i]).collect();
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::GlobalAvgPool => {
            let x = inputs[0];
            let c = x.shape()[0];
            let per = x.len() / c;
            let out = x
                .data()
                .chunks(per)
                .map(|p| p.iter().sum::<f64>() / per as f64)
                .collect();
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::Concat => {
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for x in inputs {
                out.extend_from_slice(x.data());
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::UpsampleNearest { factor } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (h * factor, w * factor);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    let src = &x.data()[(ch * h + oy / factor) * w..];
                    let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox / factor];
                    }
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        LayerKind::Unsupported => unreachable!("unsupported layers are rejected at compile time"),
    }
}

/// Propagates `grad_out` to each input. When `grad_params` is given, parameter
/// gradients are accumulated into it (same layout as `params`).
pub(crate) fn backward(
    kind: &LayerKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad_out: &Tensor,
    params: &[f64],
    grad_params: Option<&mut [f64]>,
) -> Vec<Tensor> {
    let g = grad_out.data();
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let x = inputs[0];
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let (oh, ow) = (output.shape()[1], output.shape()[2]);
            let kk = kernel * kernel;
            let n_weight = out_channels * in_channels * kk;
            let weight = &params[..n_weight];
            let mut gx = vec![0.0; x.len()];
            let mut gp = grad_params;
            for o in 0..out_channels {
                let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                if let Some(gp) = gp.as_deref_mut() {
                    if bias {
                        gp[n_weight + o] += gplane.iter().sum::<f64>();
                    }
                }
                for i in 0..in_channels {
                    let src = &x.data()[i * h * w..(i + 1) * h * w];
                    let dsrc = &mut gx[i * h * w..(i + 1) * h * w];
                    for ky in 0..kernel {
                        let (y0, y1) = tap_range(ky, padding, stride, h, oh);
                        for kx in 0..kernel {
                            let widx = ((o * in_channels + i) * kernel + ky) * kernel + kx;
                            let wv = weight[widx];
                            let (x0, x1) = tap_range(kx, padding, stride, w, ow);
                            let mut gw = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - padding;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in x0..x1 {
                                    let ix = iy * w + ox * stride + kx - padding;
                                    gw += src[ix] * grow[ox];
                                    dsrc[ix] += wv * grow[ox];
                                }
                            }
                            if let Some(gp) = gp.as_deref_mut() {
                                gp[widx] += gw;
                            }
                        }
                    }
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::Dense {
            in_features,
            out_features,
            ..
        } => {
            let x = inputs[0];
            let weight = &params[..in_features * out_features];
            let mut gx = vec![0.0; in_features];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &weight[o * in_features..(o + 1) * in_features];
                for (d, w) in gx.iter_mut().zip(row) {
                    *d += w * go;
                }
            }
            if let Some(gp) = grad_params {
                let (gw, gb) = gp.split_at_mut(in_features * out_features);
                for (o, &go) in g.iter().enumerate() {
                    gb[o] += go;
                    for (d, v) in gw[o * in_features..(o + 1) * in_features]
                        .iter_mut()
                        .zip(x.data())
                    {
                        *d += go * v;
                    }
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::Batchnorm { channels, eps } => {
            let x = inputs[0];
            let per = x.len() / channels;
            let gamma = &params[..channels];
            let mean = &params[2 * channels..3 * channels];
            let var = &params[3 * channels..];
            let mut gx = vec![0.0; x.len()];
            let mut gp = grad_params;
            for c in 0..channels {
                let inv = 1.0 / (var[c] + eps).sqrt();
                let scale = gamma[c] * inv;
                let range = c * per..(c + 1) * per;
                for (d, &go) in gx[range.clone()].iter_mut().zip(&g[range.clone()]) {
                    *d = go * scale;
                }
                if let Some(gp) = gp.as_deref_mut() {
                    let mut g_gamma = 0.0;
                    let mut g_beta = 0.0;
                    for (&go, &v) in g[range.clone()].iter().zip(&x.data()[range]) {
                        g_gamma += go * (v - mean[c]) * inv;
                        g_beta += go;
                    }
                    gp[c] += g_gamma;
                    gp[channels + c] += g_beta;
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::Relu => {
            let gx = inputs[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &go)| if v > 0.0 { go } else { 0.0 });
            vec![Tensor::from_parts(inputs[0].shape().to_vec(), gx.collect())]
        }
        LayerKind::Sigmoid => {
            let gx = output
                .data()
                .iter()
                .zip(g)
                .map(|(&s, &go)| go * s * (1.0 - s));
            vec![Tensor::from_parts(output.shape().to_vec(), gx.collect())]
        }
        LayerKind::Tanh => {
            let gx = output
                .data()
                .iter()
                .zip(g)
                .map(|(&t, &go)| go * (1.0 - t * t));
            vec![Tensor::from_parts(output.shape().to_vec(), gx.collect())]
        }
        LayerKind::Avgpool { kernel, stride } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (output.shape()[1], output.shape()[2]);
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut gx = vec![0.0; x.len()];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(ch * oh + oy) * ow + ox] * norm;
                        for ky in 0..kernel {
                            let row = ch * h * w + (oy * stride + ky) * w + ox * stride;
                            for d in &mut gx[row..row + kernel] {
                                *d += go;
                            }
                        }
                    }
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::Maxpool { kernel, stride } => {
            let x = inputs[0];
            let argmax = maxpool_argmax(x, kernel, stride, output.shape());
            let mut gx = vec![0.0; x.len()];
            for (&i, &go) in argmax.iter().zip(g) {
                gx[i] += go;
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::GlobalAvgPool => {
            let x = inputs[0];
            let per = x.len() / x.shape()[0];
            let mut gx = Vec::with_capacity(x.len());
            for &go in g {
                gx.extend(std::iter::repeat_n(go / per as f64, per));
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|x| {
                    let part = g[offset..offset + x.len()].to_vec();
                    offset += x.len();
                    Tensor::from_parts(x.shape().to_vec(), part)
                })
                .collect()
        }
        LayerKind::UpsampleNearest { factor } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (h * factor, w * factor);
            let mut gx = vec![0.0; x.len()];
            for ch in 0..c {
                for oy in 0..oh {
                    let dst = (ch * h + oy / factor) * w;
                    for ox in 0..ow {
                        gx[dst + ox / factor] += g[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        LayerKind::Unsupported => unreachable!("unsupported layers are rejected at compile time"),
    }
}

/// Flat input index of each window maximum; ties resolve to the first element.
pub(crate) fn maxpool_argmax(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    out_shape: &[usize],
) -> Vec<usize> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}
