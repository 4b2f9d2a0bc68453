use crate::{Result, Tensor, TensorNetError};
use rayon::prelude::*;

const K: usize = 3; // all convolutions use 3x3x3 kernels

/// Layer vocabulary. Weighted variants own their parameter tensors.
///
/// Convolutions use "same" padding: output spatial extent is
/// `ceil(in / stride)` per axis; transposed convolutions invert that map,
/// producing `in * stride`.
#[derive(Clone, Debug)]
pub enum Layer {
    /// Named graph input with a fixed per-sample shape.
    Input { shape: Vec<usize> },
    /// Fully connected: `w` is `[out, in]`, `b` is `[out]`.
    Dense { w: Tensor, b: Tensor },
    /// 3D convolution, kernel 3, stride 1 or 2. `w` is `[oc, ic, 3, 3, 3]`.
    Conv3 { w: Tensor, b: Tensor, stride: usize },
    /// Transposed 3D convolution (adjoint of `Conv3` with the same stride).
    ConvT3 { w: Tensor, b: Tensor, stride: usize },
    Elu,
    Relu,
    Sigmoid,
    /// Per-feature batch normalization. For rank-5 inputs the feature axis is
    /// the channel axis; statistics pool over batch and spatial axes.
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: f64,
        eps: f64,
    },
    Flatten,
    /// Concatenation of rank-2 features along the feature axis.
    Concat,
}

/// Per-node data captured during forward that backward needs beyond the
/// activations themselves.
#[derive(Clone, Debug)]
pub enum Aux {
    None,
    BatchNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Dense { .. } => "dense",
            Layer::Conv3 { .. } => "conv3",
            Layer::ConvT3 { .. } => "convt3",
            Layer::Elu => "elu",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Flatten => "flatten",
            Layer::Concat => "concat",
        }
    }

    /// Trainable parameter tensors, in a fixed slot order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { w, b } | Layer::Conv3 { w, b, .. } | Layer::ConvT3 { w, b, .. } => {
                vec![w, b]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { w, b } | Layer::Conv3 { w, b, .. } | Layer::ConvT3 { w, b, .. } => {
                vec![w, b]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    /// Per-sample output shape given per-sample input shapes.
    pub fn out_shape(&self, inputs: &[&[usize]], ctx: &str) -> Result<Vec<usize>> {
        let one = |idx: usize| -> Result<&[usize]> {
            inputs.get(idx).copied().ok_or_else(|| TensorNetError::ConfigError(format!(
                "{ctx}: layer `{}` missing input {idx}",
                self.kind()
            )))
        };
        let mismatch = |expected: Vec<usize>, got: &[usize]| TensorNetError::ShapeMismatch {
            context: format!("{ctx} ({})", self.kind()),
            expected,
            got: got.to_vec(),
        };
        match self {
            Layer::Input { shape } => Ok(shape.clone()),
            Layer::Dense { w, .. } => {
                let x = one(0)?;
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                if x != [inp] {
                    return Err(mismatch(vec![inp], x));
                }
                Ok(vec![out])
            }
            Layer::Conv3 { w, stride, .. } => {
                let x = one(0)?;
                let (oc, ic) = (w.shape()[0], w.shape()[1]);
                if x.len() != 4 || x[0] != ic {
                    return Err(mismatch(vec![ic, 0, 0, 0], x));
                }
                let s = *stride;
                Ok(vec![oc, x[1].div_ceil(s), x[2].div_ceil(s), x[3].div_ceil(s)])
            }
            Layer::ConvT3 { w, stride, .. } => {
                let x = one(0)?;
                let (oc, ic) = (w.shape()[0], w.shape()[1]);
                if x.len() != 4 || x[0] != ic {
                    return Err(mismatch(vec![ic, 0, 0, 0], x));
                }
                let s = *stride;
                Ok(vec![oc, x[1] * s, x[2] * s, x[3] * s])
            }
            Layer::Elu | Layer::Relu | Layer::Sigmoid => Ok(one(0)?.to_vec()),
            Layer::BatchNorm { gamma, .. } => {
                let x = one(0)?;
                let feats = gamma.shape()[0];
                let got = x[0];
                if x.is_empty() || got != feats {
                    return Err(mismatch(vec![feats], x));
                }
                Ok(x.to_vec())
            }
            Layer::Flatten => Ok(vec![one(0)?.iter().product()]),
            Layer::Concat => {
                let mut total = 0;
                for (i, s) in inputs.iter().enumerate() {
                    if s.len() != 1 {
                        return Err(TensorNetError::ConfigError(format!(
                            "{ctx}: concat input {i} must be rank-1 per sample, got {s:?}"
                        )));
                    }
                    total += s[0];
                }
                Ok(vec![total])
            }
        }
    }

    /// Forward pass. `train_stats` selects batch statistics for `BatchNorm`;
    /// the computed statistics come back in `Aux` so the caller can fold them
    /// into the running buffers (this keeps forward free of mutation).
    pub fn forward(&self, inputs: &[&Tensor], train_stats: bool) -> Result<(Tensor, Aux)> {
        match self {
            Layer::Input { .. } => Ok((inputs[0].clone(), Aux::None)),
            Layer::Dense { w, b } => Ok((dense_forward(inputs[0], w, b), Aux::None)),
            Layer::Conv3 { w, b, stride } => {
                Ok((conv3_forward(inputs[0], w, b, *stride), Aux::None))
            }
            Layer::ConvT3 { w, b, stride } => {
                Ok((convt3_forward(inputs[0], w, b, *stride), Aux::None))
            }
            Layer::Elu => Ok((map_unary(inputs[0], elu), Aux::None)),
            Layer::Relu => Ok((map_unary(inputs[0], |v| v.max(0.0)), Aux::None)),
            Layer::Sigmoid => Ok((map_unary(inputs[0], sigmoid), Aux::None)),
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                ..
            } => {
                let x = inputs[0];
                let (mean, var) = if train_stats {
                    batch_stats(x, gamma.numel())
                } else {
                    (running_mean.data().to_vec(), running_var.data().to_vec())
                };
                let y = bn_apply(x, &mean, &var, gamma.data(), beta.data(), *eps);
                Ok((
                    y,
                    Aux::BatchNorm {
                        mean,
                        var,
                        batch_stats: train_stats,
                    },
                ))
            }
            Layer::Flatten => {
                let x = inputs[0];
                let n = x.batch();
                let f: usize = x.sample_shape().iter().product();
                Ok((x.clone().reshaped(&[n, f])?, Aux::None))
            }
            Layer::Concat => {
                let n = inputs[0].batch();
                let feats: Vec<usize> = inputs.iter().map(|t| t.sample_shape()[0]).collect();
                let total: usize = feats.iter().sum();
                let mut out = Tensor::zeros(&[n, total]);
                let od = out.data_mut();
                for row in 0..n {
                    let mut off = 0;
                    for (t, f) in inputs.iter().zip(&feats) {
                        od[row * total + off..row * total + off + f]
                            .copy_from_slice(&t.data()[row * f..(row + 1) * f]);
                        off += f;
                    }
                }
                Ok((out, Aux::None))
            }
        }
    }

    /// Reverse pass: gradients w.r.t. parameters (slot order of `params`)
    /// and w.r.t. every input.
    pub fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        aux: &Aux,
        grad_out: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        match self {
            Layer::Input { .. } => Ok((vec![], vec![grad_out.clone()])),
            Layer::Dense { w, .. } => {
                let (gx, gw, gb) = dense_backward(inputs[0], w, grad_out);
                Ok((vec![gw, gb], vec![gx]))
            }
            Layer::Conv3 { w, stride, .. } => {
                let (gx, gw, gb) = conv3_backward(inputs[0], w, *stride, grad_out);
                Ok((vec![gw, gb], vec![gx]))
            }
            Layer::ConvT3 { w, stride, .. } => {
                let (gx, gw, gb) = convt3_backward(inputs[0], w, *stride, grad_out);
                Ok((vec![gw, gb], vec![gx]))
            }
            Layer::Elu => {
                // d/dx elu(x) = 1 for x > 0, elu(x) + 1 otherwise
                let gx = map_binary(output, grad_out, |y, g| if y > 0.0 { g } else { g * (y + 1.0) });
                Ok((vec![], vec![gx]))
            }
            Layer::Relu => {
                let gx = map_binary(output, grad_out, |y, g| if y > 0.0 { g } else { 0.0 });
                Ok((vec![], vec![gx]))
            }
            Layer::Sigmoid => {
                let gx = map_binary(output, grad_out, |y, g| g * y * (1.0 - y));
                Ok((vec![], vec![gx]))
            }
            Layer::BatchNorm { gamma, eps, .. } => {
                let Aux::BatchNorm {
                    mean,
                    var,
                    batch_stats,
                } = aux
                else {
                    return Err(TensorNetError::ConfigError(
                        "batch norm backward without cached statistics".into(),
                    ));
                };
                let (gx, gg, gb) = bn_backward(
                    inputs[0],
                    mean,
                    var,
                    gamma.data(),
                    *eps,
                    grad_out,
                    *batch_stats,
                );
                Ok((vec![gg, gb], vec![gx]))
            }
            Layer::Flatten => {
                let gx = grad_out.clone().reshaped(inputs[0].shape())?;
                Ok((vec![], vec![gx]))
            }
            Layer::Concat => {
                let n = inputs[0].batch();
                let feats: Vec<usize> = inputs.iter().map(|t| t.sample_shape()[0]).collect();
                let total: usize = feats.iter().sum();
                let g = grad_out.data();
                let mut grads = Vec::with_capacity(inputs.len());
                let mut off = 0;
                for f in &feats {
                    let mut gi = Tensor::zeros(&[n, *f]);
                    let gd = gi.data_mut();
                    for row in 0..n {
                        gd[row * f..(row + 1) * f]
                            .copy_from_slice(&g[row * total + off..row * total + off + f]);
                    }
                    grads.push(gi);
                    off += f;
                }
                Ok((vec![], grads))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

fn map_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.batch();
    let inp = w.shape()[1];
    let out = w.shape()[0];
    let mut y = Tensor::zeros(&[n, out]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    y.data_mut()
        .par_chunks_mut(out)
        .enumerate()
        .for_each(|(row, yrow)| {
            let xrow = &xd[row * inp..(row + 1) * inp];
            for o in 0..out {
                let wrow = &wd[o * inp..(o + 1) * inp];
                let mut acc = bd[o];
                for i in 0..inp {
                    acc += wrow[i] * xrow[i];
                }
                yrow[o] = acc;
            }
        });
    y
}

fn dense_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.batch();
    let inp = w.shape()[1];
    let out = w.shape()[0];
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());

    let mut gx = Tensor::zeros(&[n, inp]);
    gx.data_mut()
        .par_chunks_mut(inp)
        .enumerate()
        .for_each(|(row, gxrow)| {
            let grow = &gyd[row * out..(row + 1) * out];
            for o in 0..out {
                let g = grow[o];
                if g == 0.0 {
                    continue;
                }
                let wrow = &wd[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gxrow[i] += g * wrow[i];
                }
            }
        });

    let mut gw = Tensor::zeros(&[out, inp]);
    gw.data_mut()
        .par_chunks_mut(inp)
        .enumerate()
        .for_each(|(o, gwrow)| {
            for row in 0..n {
                let g = gyd[row * out + o];
                if g == 0.0 {
                    continue;
                }
                let xrow = &xd[row * inp..(row + 1) * inp];
                for i in 0..inp {
                    gwrow[i] += g * xrow[i];
                }
            }
        });

    let mut gb = Tensor::zeros(&[out]);
    let gbd = gb.data_mut();
    for row in 0..n {
        for o in 0..out {
            gbd[o] += gyd[row * out + o];
        }
    }
    (gx, gw, gb)
}

/// "Same" padding before the first element for a given axis.
fn pad_begin(in_dim: usize, stride: usize) -> isize {
    let out = in_dim.div_ceil(stride);
    let total = ((out - 1) * stride + K).saturating_sub(in_dim);
    (total / 2) as isize
}

fn conv3_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (n, ic) = (x.shape()[0], x.shape()[1]);
    let (id, ih, iw) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let oc = w.shape()[0];
    let (od, oh, ow) = (id.div_ceil(stride), ih.div_ceil(stride), iw.div_ceil(stride));
    let (pz, py, px) = (pad_begin(id, stride), pad_begin(ih, stride), pad_begin(iw, stride));
    let mut y = Tensor::zeros(&[n, oc, od, oh, ow]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let s = stride as isize;

    y.data_mut()
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(chunk, out)| {
            let (bn, o) = (chunk / oc, chunk % oc);
            out.fill(bd[o]);
            for c in 0..ic {
                let xch = &xd[(bn * ic + c) * id * ih * iw..(bn * ic + c + 1) * id * ih * iw];
                let wch = &wd[(o * ic + c) * K * K * K..(o * ic + c + 1) * K * K * K];
                for zo in 0..od {
                    for kz in 0..K {
                        let zi = zo as isize * s + kz as isize - pz;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for yo in 0..oh {
                            for ky in 0..K {
                                let yi = yo as isize * s + ky as isize - py;
                                if yi < 0 || yi >= ih as isize {
                                    continue;
                                }
                                let xrow = &xch[(zi as usize * ih + yi as usize) * iw..][..iw];
                                let wrow = &wch[(kz * K + ky) * K..][..K];
                                let orow = &mut out[(zo * oh + yo) * ow..][..ow];
                                for (xo, oval) in orow.iter_mut().enumerate() {
                                    let xi0 = xo as isize * s - px;
                                    let mut acc = 0.0;
                                    for (kx, &wv) in wrow.iter().enumerate() {
                                        let xi = xi0 + kx as isize;
                                        if xi >= 0 && xi < iw as isize {
                                            acc += wv * xrow[xi as usize];
                                        }
                                    }
                                    *oval += acc;
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

fn conv3_backward(x: &Tensor, w: &Tensor, stride: usize, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, ic) = (x.shape()[0], x.shape()[1]);
    let (id, ih, iw) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let oc = w.shape()[0];
    let (od, oh, ow) = (gy.shape()[2], gy.shape()[3], gy.shape()[4]);
    let (pz, py, px) = (pad_begin(id, stride), pad_begin(ih, stride), pad_begin(iw, stride));
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    let s = stride as isize;
    let in_spatial = id * ih * iw;
    let out_spatial = od * oh * ow;

    // grad wrt input: scatter the adjoint, parallel over (batch, in-channel)
    let mut gx = Tensor::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(chunk, gxc)| {
            let (bn, c) = (chunk / ic, chunk % ic);
            for o in 0..oc {
                let gych = &gyd[(bn * oc + o) * out_spatial..(bn * oc + o + 1) * out_spatial];
                let wch = &wd[(o * ic + c) * K * K * K..(o * ic + c + 1) * K * K * K];
                for zo in 0..od {
                    for kz in 0..K {
                        let zi = zo as isize * s + kz as isize - pz;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for yo in 0..oh {
                            for ky in 0..K {
                                let yi = yo as isize * s + ky as isize - py;
                                if yi < 0 || yi >= ih as isize {
                                    continue;
                                }
                                let grow = &gych[(zo * oh + yo) * ow..][..ow];
                                let wrow = &wch[(kz * K + ky) * K..][..K];
                                let gxrow =
                                    &mut gxc[(zi as usize * ih + yi as usize) * iw..][..iw];
                                for (xo, &g) in grow.iter().enumerate() {
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let xi0 = xo as isize * s - px;
                                    for (kx, &wv) in wrow.iter().enumerate() {
                                        let xi = xi0 + kx as isize;
                                        if xi >= 0 && xi < iw as isize {
                                            gxrow[xi as usize] += g * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // grad wrt weights: parallel over out-channel, batch summed sequentially
    let mut gw = Tensor::zeros(w.shape());
    gw.data_mut()
        .par_chunks_mut(ic * K * K * K)
        .enumerate()
        .for_each(|(o, gwc)| {
            for bn in 0..n {
                let gych = &gyd[(bn * oc + o) * out_spatial..(bn * oc + o + 1) * out_spatial];
                for c in 0..ic {
                    let xch = &xd[(bn * ic + c) * in_spatial..(bn * ic + c + 1) * in_spatial];
                    let gwch = &mut gwc[c * K * K * K..(c + 1) * K * K * K];
                    for zo in 0..od {
                        for kz in 0..K {
                            let zi = zo as isize * s + kz as isize - pz;
                            if zi < 0 || zi >= id as isize {
                                continue;
                            }
                            for yo in 0..oh {
                                for ky in 0..K {
                                    let yi = yo as isize * s + ky as isize - py;
                                    if yi < 0 || yi >= ih as isize {
                                        continue;
                                    }
                                    let grow = &gych[(zo * oh + yo) * ow..][..ow];
                                    let xrow =
                                        &xch[(zi as usize * ih + yi as usize) * iw..][..iw];
                                    let gwrow = &mut gwch[(kz * K + ky) * K..][..K];
                                    for (xo, &g) in grow.iter().enumerate() {
                                        if g == 0.0 {
                                            continue;
                                        }
                                        let xi0 = xo as isize * s - px;
                                        for (kx, gwv) in gwrow.iter_mut().enumerate() {
                                            let xi = xi0 + kx as isize;
                                            if xi >= 0 && xi < iw as isize {
                                                *gwv += g * xrow[xi as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut gb = Tensor::zeros(&[oc]);
    let gbd = gb.data_mut();
    for bn in 0..n {
        for o in 0..oc {
            let base = (bn * oc + o) * out_spatial;
            gbd[o] += gyd[base..base + out_spatial].iter().sum::<f64>();
        }
    }
    (gx, gw, gb)
}

fn convt3_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (n, ic) = (x.shape()[0], x.shape()[1]);
    let (id, ih, iw) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let oc = w.shape()[0];
    let (od, oh, ow) = (id * stride, ih * stride, iw * stride);
    // padding of the conv this layer is the adjoint of (output -> input)
    let (pz, py, px) = (pad_begin(od, stride), pad_begin(oh, stride), pad_begin(ow, stride));
    let mut y = Tensor::zeros(&[n, oc, od, oh, ow]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let s = stride as isize;
    let in_spatial = id * ih * iw;

    y.data_mut()
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(chunk, out)| {
            let (bn, o) = (chunk / oc, chunk % oc);
            out.fill(bd[o]);
            for c in 0..ic {
                let xch = &xd[(bn * ic + c) * in_spatial..(bn * ic + c + 1) * in_spatial];
                let wch = &wd[(o * ic + c) * K * K * K..(o * ic + c + 1) * K * K * K];
                for zi in 0..id {
                    for kz in 0..K {
                        let zo = zi as isize * s + kz as isize - pz;
                        if zo < 0 || zo >= od as isize {
                            continue;
                        }
                        for yi in 0..ih {
                            for ky in 0..K {
                                let yo = yi as isize * s + ky as isize - py;
                                if yo < 0 || yo >= oh as isize {
                                    continue;
                                }
                                let xrow = &xch[(zi * ih + yi) * iw..][..iw];
                                let wrow = &wch[(kz * K + ky) * K..][..K];
                                let orow =
                                    &mut out[(zo as usize * oh + yo as usize) * ow..][..ow];
                                for (xi, &xv) in xrow.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let xo0 = xi as isize * s - px;
                                    for (kx, &wv) in wrow.iter().enumerate() {
                                        let xo = xo0 + kx as isize;
                                        if xo >= 0 && xo < ow as isize {
                                            orow[xo as usize] += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

fn convt3_backward(x: &Tensor, w: &Tensor, stride: usize, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, ic) = (x.shape()[0], x.shape()[1]);
    let (id, ih, iw) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let oc = w.shape()[0];
    let (od, oh, ow) = (gy.shape()[2], gy.shape()[3], gy.shape()[4]);
    let (pz, py, px) = (pad_begin(od, stride), pad_begin(oh, stride), pad_begin(ow, stride));
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    let s = stride as isize;
    let in_spatial = id * ih * iw;
    let out_spatial = od * oh * ow;

    // grad wrt input behaves like a strided conv gathering from gy
    let mut gx = Tensor::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(chunk, gxc)| {
            let (bn, c) = (chunk / ic, chunk % ic);
            for o in 0..oc {
                let gych = &gyd[(bn * oc + o) * out_spatial..(bn * oc + o + 1) * out_spatial];
                let wch = &wd[(o * ic + c) * K * K * K..(o * ic + c + 1) * K * K * K];
                for zi in 0..id {
                    for kz in 0..K {
                        let zo = zi as isize * s + kz as isize - pz;
                        if zo < 0 || zo >= od as isize {
                            continue;
                        }
                        for yi in 0..ih {
                            for ky in 0..K {
                                let yo = yi as isize * s + ky as isize - py;
                                if yo < 0 || yo >= oh as isize {
                                    continue;
                                }
                                let grow =
                                    &gych[(zo as usize * oh + yo as usize) * ow..][..ow];
                                let wrow = &wch[(kz * K + ky) * K..][..K];
                                let gxrow = &mut gxc[(zi * ih + yi) * iw..][..iw];
                                for (xi, gxv) in gxrow.iter_mut().enumerate() {
                                    let xo0 = xi as isize * s - px;
                                    let mut acc = 0.0;
                                    for (kx, &wv) in wrow.iter().enumerate() {
                                        let xo = xo0 + kx as isize;
                                        if xo >= 0 && xo < ow as isize {
                                            acc += wv * grow[xo as usize];
                                        }
                                    }
                                    *gxv += acc;
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut gw = Tensor::zeros(w.shape());
    gw.data_mut()
        .par_chunks_mut(ic * K * K * K)
        .enumerate()
        .for_each(|(o, gwc)| {
            for bn in 0..n {
                let gych = &gyd[(bn * oc + o) * out_spatial..(bn * oc + o + 1) * out_spatial];
                for c in 0..ic {
                    let xch = &xd[(bn * ic + c) * in_spatial..(bn * ic + c + 1) * in_spatial];
                    let gwch = &mut gwc[c * K * K * K..(c + 1) * K * K * K];
                    for zi in 0..id {
                        for kz in 0..K {
                            let zo = zi as isize * s + kz as isize - pz;
                            if zo < 0 || zo >= od as isize {
                                continue;
                            }
                            for yi in 0..ih {
                                for ky in 0..K {
                                    let yo = yi as isize * s + ky as isize - py;
                                    if yo < 0 || yo >= oh as isize {
                                        continue;
                                    }
                                    let grow =
                                        &gych[(zo as usize * oh + yo as usize) * ow..][..ow];
                                    let xrow = &xch[(zi * ih + yi) * iw..][..iw];
                                    let gwrow = &mut gwch[(kz * K + ky) * K..][..K];
                                    for (xi, &xv) in xrow.iter().enumerate() {
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let xo0 = xi as isize * s - px;
                                        for (kx, gwv) in gwrow.iter_mut().enumerate() {
                                            let xo = xo0 + kx as isize;
                                            if xo >= 0 && xo < ow as isize {
                                                *gwv += xv * grow[xo as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut gb = Tensor::zeros(&[oc]);
    let gbd = gb.data_mut();
    for bn in 0..n {
        for o in 0..oc {
            let base = (bn * oc + o) * out_spatial;
            gbd[o] += gyd[base..base + out_spatial].iter().sum::<f64>();
        }
    }
    (gx, gw, gb)
}

/// Number of pooled elements per feature and the (mean, biased variance).
fn batch_stats(x: &Tensor, feats: usize) -> (Vec<f64>, Vec<f64>) {
    let xd = x.data();
    let n = x.batch();
    let spatial: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; feats];
    let mut var = vec![0.0; feats];
    for bn in 0..n {
        for f in 0..feats {
            let base = (bn * feats + f) * spatial;
            mean[f] += xd[base..base + spatial].iter().sum::<f64>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for bn in 0..n {
        for f in 0..feats {
            let base = (bn * feats + f) * spatial;
            var[f] += xd[base..base + spatial]
                .iter()
                .map(|&v| (v - mean[f]) * (v - mean[f]))
                .sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

fn bn_apply(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let feats = mean.len();
    let n = x.batch();
    let spatial: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let mut y = Tensor::zeros(x.shape());
    let (xd, yd) = (x.data(), y.data_mut());
    for bn in 0..n {
        for f in 0..feats {
            let inv = 1.0 / (var[f] + eps).sqrt();
            let base = (bn * feats + f) * spatial;
            for i in base..base + spatial {
                yd[i] = gamma[f] * (xd[i] - mean[f]) * inv + beta[f];
            }
        }
    }
    y
}

fn bn_backward(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    gy: &Tensor,
    batch_stats: bool,
) -> (Tensor, Tensor, Tensor) {
    let feats = mean.len();
    let n = x.batch();
    let spatial: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let m = (n * spatial) as f64;
    let (xd, gyd) = (x.data(), gy.data());

    let mut ggamma = vec![0.0; feats];
    let mut gbeta = vec![0.0; feats];
    let mut sum_g = vec![0.0; feats]; // sum of gy per feature
    let mut sum_gx = vec![0.0; feats]; // sum of gy * xhat per feature
    for bn in 0..n {
        for f in 0..feats {
            let inv = 1.0 / (var[f] + eps).sqrt();
            let base = (bn * feats + f) * spatial;
            for i in base..base + spatial {
                let xhat = (xd[i] - mean[f]) * inv;
                ggamma[f] += gyd[i] * xhat;
                gbeta[f] += gyd[i];
                sum_g[f] += gyd[i];
                sum_gx[f] += gyd[i] * xhat;
            }
        }
    }

    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for bn in 0..n {
        for f in 0..feats {
            let inv = 1.0 / (var[f] + eps).sqrt();
            let base = (bn * feats + f) * spatial;
            if batch_stats {
                for i in base..base + spatial {
                    let xhat = (xd[i] - mean[f]) * inv;
                    gxd[i] = gamma[f] * inv / m * (m * gyd[i] - sum_g[f] - xhat * sum_gx[f]);
                }
            } else {
                for i in base..base + spatial {
                    gxd[i] = gamma[f] * inv * gyd[i];
                }
            }
        }
    }
    (
        gx,
        Tensor::from_vec(&[feats], ggamma).unwrap(),
        Tensor::from_vec(&[feats], gbeta).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let layer = Layer::Sigmoid;
        let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let (y, _) = layer.forward(&[&x], false).unwrap();
        assert_eq!(y.data()[0], 0.5);
    }

    #[test]
    fn elu_matches_definition_at_minus_one() {
        let layer = Layer::Elu;
        let x = Tensor::from_vec(&[1, 1], vec![-1.0]).unwrap();
        let (y, _) = layer.forward(&[&x], false).unwrap();
        let expected = (-1.0f64).exp() - 1.0; // about -0.6321
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn conv3_ones_kernel_marks_27_neighbors() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5, 5]);
        x.data_mut()[(2 * 5 + 2) * 5 + 2] = 1.0; // interior voxel
        let w = Tensor::filled(&[1, 1, 3, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let layer = Layer::Conv3 { w, b, stride: 1 };
        let (y, _) = layer.forward(&[&x], false).unwrap();
        let ones: Vec<usize> = y
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones.len(), 27);
        for idx in ones {
            let (z, r) = (idx / 25, idx % 25);
            let (yy, xx) = (r / 5, r % 5);
            assert!((1..=3).contains(&z) && (1..=3).contains(&yy) && (1..=3).contains(&xx));
            assert_eq!(y.data()[idx], 1.0);
        }
    }

    #[test]
    fn conv3_stride2_output_dims_are_ceil_half() {
        for dim in [5usize, 6, 7, 8, 16, 32] {
            let x = Tensor::zeros(&[1, 2, dim, dim, dim]);
            let w = Tensor::zeros(&[3, 2, 3, 3, 3]);
            let b = Tensor::zeros(&[3]);
            let layer = Layer::Conv3 { w, b, stride: 2 };
            let (y, _) = layer.forward(&[&x], false).unwrap();
            assert_eq!(y.shape()[2..], [dim.div_ceil(2); 3]);
        }
    }

    #[test]
    fn dense_input_grad_is_w_transpose_times_g() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let layer = Layer::Dense { w, b };
        let (y, aux) = layer.forward(&[&x], false).unwrap();
        let g = Tensor::from_vec(&[1, 2], vec![0.7, -0.3]).unwrap();
        let (_, input_grads) = layer.backward(&[&x], &y, &aux, &g).unwrap();
        // W^T g
        let expected = [
            1.0 * 0.7 + 4.0 * -0.3,
            2.0 * 0.7 + 5.0 * -0.3,
            3.0 * 0.7 + 6.0 * -0.3,
        ];
        for (a, e) in input_grads[0].data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let w = Tensor::filled(&[2, 2], 1.5);
        let b = Tensor::filled(&[2], 0.5);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let layer = Layer::Dense { w, b };
        let (y, aux) = layer.forward(&[&x], false).unwrap();
        let g = Tensor::zeros(&[1, 2]);
        let (param_grads, input_grads) = layer.backward(&[&x], &y, &aux, &g).unwrap();
        assert!(param_grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(input_grads[0].data().iter().all(|&v| v == 0.0));
    }
}
