//! Layers: linear, conv2d (im2col), batchnorm2d, RePU, max-pool and flatten.
//!
//! All activations are batch-major (`[batch × ...]`). Convolutions are valid
//! (no padding) and carry no bias. `conv2d` has no backward pass: it is only
//! ever trained by a local rule, so asking for its gradient is an error.

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use crate::error::{HebbError, Result};
use crate::tensor::{matmul, matmul_block, matmul_nt, RngState, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`backward`] calls made on the current thread so far.
pub fn backward_invocations() -> u64 {
    BACKWARD_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Repu {
        power: u32,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Repu { .. } => "repu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub params: BTreeMap<String, Tensor>,
    pub frozen: bool,
}

impl LayerNode {
    /// A layer with zero weights, unit batchnorm scale and unit running variance.
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Result<Self> {
        let name = name.into();
        let mut params = BTreeMap::new();
        match &kind {
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                params.insert("weight".into(), Tensor::zeros(&[*out_features, *in_features]));
                if *bias {
                    params.insert("bias".into(), Tensor::zeros(&[*out_features]));
                }
            }
            LayerKind::Conv2d {
                in_channels,
                filters,
                kernel,
                stride,
            } => {
                if *stride == 0 {
                    return Err(HebbError::Config(format!("{name}: conv stride must be >= 1")));
                }
                params.insert(
                    "weight".into(),
                    Tensor::zeros(&[*filters, *in_channels, kernel.0, kernel.1]),
                );
            }
            LayerKind::BatchNorm2d { channels, eps, .. } => {
                if *eps <= 0.0 {
                    return Err(HebbError::Config(format!("{name}: batchnorm eps must be > 0")));
                }
                params.insert("gamma".into(), Tensor::full(&[*channels], 1.0));
                params.insert("beta".into(), Tensor::zeros(&[*channels]));
                params.insert("running_mean".into(), Tensor::zeros(&[*channels]));
                params.insert("running_var".into(), Tensor::full(&[*channels], 1.0));
            }
            LayerKind::Repu { power } => {
                if *power == 0 {
                    return Err(HebbError::Config(format!("{name}: RePU power must be >= 1")));
                }
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(HebbError::Config(format!("{name}: pool kernel and stride must be >= 1")));
                }
            }
            LayerKind::Flatten => {}
        }
        Ok(LayerNode {
            name,
            kind,
            params,
            frozen: false,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| HebbError::Config(format!("layer {} has no parameter {name}", self.name)))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let layer = self.name.clone();
        self.params
            .get_mut(name)
            .ok_or_else(|| HebbError::Config(format!("layer {layer} has no parameter {name}")))
    }

    /// Parameters updated by backprop (running statistics excluded).
    pub fn trainable_param_names(&self) -> Vec<&'static str> {
        match self.kind {
            LayerKind::Linear { bias: true, .. } => vec!["weight", "bias"],
            LayerKind::Linear { bias: false, .. } | LayerKind::Conv2d { .. } => vec!["weight"],
            LayerKind::BatchNorm2d { .. } => vec!["gamma", "beta"],
            _ => vec![],
        }
    }

    pub fn has_params(&self) -> bool {
        !self.params.is_empty()
    }

    /// Weights viewed as `[units × inputs]`, the shape the learning rule works on.
    pub fn weight_matrix(&self) -> Result<Tensor> {
        Ok(self.param("weight")?.clone().flatten_rows())
    }

    /// Every weight i.i.d. standard normal.
    pub fn init_standard_normal(&mut self, rng: &mut RngState) {
        for (name, t) in self.params.iter_mut() {
            if name == "weight" {
                for v in t.data_mut() {
                    *v = rng.normal();
                }
            }
        }
    }

    /// Weights normal with std `1/√fan_in`, zero bias, batchnorm reset to identity.
    pub fn init_scaled(&mut self, rng: &mut RngState) {
        for (name, t) in self.params.iter_mut() {
            match name.as_str() {
                "weight" => {
                    let scale = 1.0 / (t.row_len() as f64).sqrt();
                    for v in t.data_mut() {
                        *v = rng.normal() * scale;
                    }
                }
                "gamma" | "running_var" => t.data_mut().fill(1.0),
                _ => t.data_mut().fill(0.0),
            }
        }
    }
}

/// Valid-window output extent: `floor((input − kernel) / stride) + 1`.
pub fn window_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(HebbError::Geometry("stride must be >= 1".into()));
    }
    if kernel == 0 || kernel > input {
        return Err(HebbError::Geometry(format!(
            "kernel extent {kernel} does not fit input extent {input}"
        )));
    }
    Ok((input - kernel) / stride + 1)
}

fn dims4(t: &Tensor, context: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(HebbError::dim(context, format!("expected [b×c×h×w], got {s:?}"))),
    }
}

/// Every kernel-sized window of every image, one flattened patch per row.
///
/// Rows are ordered image-major, then raster order over window positions;
/// each row lists channel, then window row, then window column.
pub fn extract_patches(images: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4(images, "extract_patches")?;
    let oh = window_extent(h, kh, stride)?;
    let ow = window_extent(w, kw, stride)?;
    let positions = oh * ow;
    let d = c * kh * kw;
    let src = images.data();
    let mut out = vec![0.0; b * positions * d];
    out.par_chunks_mut(positions * d).enumerate().for_each(|(n, dst)| {
        let img = &src[n * c * h * w..(n + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut dst[(oy * ow + ox) * d..(oy * ow + ox + 1) * d];
                let mut o = 0;
                for ch in 0..c {
                    for dy in 0..kh {
                        let base = ch * h * w + (oy * stride + dy) * w + ox * stride;
                        row[o..o + kw].copy_from_slice(&img[base..base + kw]);
                        o += kw;
                    }
                }
            }
        }
    });
    Tensor::new(vec![b * positions, d], out)
}

/// Saved state for [`backward`].
#[derive(Debug, Clone)]
pub enum ForwardCache {
    Linear { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
    Repu { input: Tensor },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// Output shape (without the batch axis) for a given input shape.
pub fn output_shape(layer: &LayerNode, input: &[usize]) -> Result<Vec<usize>> {
    let mismatch = |detail: String| HebbError::dim(format!("layer {}", layer.name), detail);
    match &layer.kind {
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => {
            let width: usize = input.iter().product();
            if width != *in_features {
                return Err(mismatch(format!("expects {in_features} input features, got {input:?}")));
            }
            Ok(vec![*out_features])
        }
        LayerKind::Conv2d {
            in_channels,
            filters,
            kernel,
            stride,
        } => match input {
            [c, h, w] if c == in_channels => Ok(vec![
                *filters,
                window_extent(*h, kernel.0, *stride)?,
                window_extent(*w, kernel.1, *stride)?,
            ]),
            _ => Err(mismatch(format!("expects [{in_channels}×h×w], got {input:?}"))),
        },
        LayerKind::BatchNorm2d { channels, .. } => match input {
            [c, _, _] if c == channels => Ok(input.to_vec()),
            _ => Err(mismatch(format!("expects [{channels}×h×w], got {input:?}"))),
        },
        LayerKind::MaxPool2d { kernel, stride } => match input {
            [c, h, w] => Ok(vec![
                *c,
                window_extent(*h, *kernel, *stride)?,
                window_extent(*w, *kernel, *stride)?,
            ]),
            _ => Err(mismatch(format!("expects [c×h×w], got {input:?}"))),
        },
        LayerKind::Repu { .. } => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

fn check_input(layer: &LayerNode, input: &Tensor) -> Result<Vec<usize>> {
    if input.rank() < 2 {
        return Err(HebbError::dim(
            format!("layer {}", layer.name),
            format!("input must be batched, got {:?}", input.shape()),
        ));
    }
    let out = output_shape(layer, &input.shape()[1..])?;
    let mut full = vec![input.rows()];
    full.extend(out);
    Ok(full)
}

struct Forward {
    output: Tensor,
    cache: Option<ForwardCache>,
    running: Option<(Vec<f64>, Vec<f64>)>,
}

/// Train-mode forward. Batchnorm running statistics are updated in place.
pub fn forward(layer: &mut LayerNode, input: &Tensor, mode: Mode) -> Result<(Tensor, Option<ForwardCache>)> {
    let f = forward_impl(layer, input, mode)?;
    if let Some((mean, var)) = f.running {
        let LayerKind::BatchNorm2d { momentum, .. } = layer.kind else {
            unreachable!()
        };
        for (r, m) in layer.param_mut("running_mean")?.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in layer.param_mut("running_var")?.data_mut().iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
    Ok((f.output, f.cache))
}

/// Train-mode forward (batch statistics, cache kept) that leaves running
/// statistics untouched; used for frozen layers inside the supervised head.
pub fn forward_frozen(layer: &LayerNode, input: &Tensor) -> Result<(Tensor, Option<ForwardCache>)> {
    let f = forward_impl(layer, input, Mode::Train)?;
    Ok((f.output, f.cache))
}

/// Eval-mode forward; never mutates the layer.
pub fn forward_eval(layer: &LayerNode, input: &Tensor) -> Result<Tensor> {
    Ok(forward_impl(layer, input, Mode::Eval)?.output)
}

fn forward_impl(layer: &LayerNode, input: &Tensor, mode: Mode) -> Result<Forward> {
    let out_shape = check_input(layer, input)?;
    let train = mode == Mode::Train;
    let plain = |output: Tensor, cache: Option<ForwardCache>| Forward {
        output,
        cache: if train { cache } else { None },
        running: None,
    };
    match &layer.kind {
        LayerKind::Linear { .. } => {
            let x = input.clone().flatten_rows();
            let mut y = matmul_nt(&x, layer.param("weight")?)?;
            if let Some(b) = layer.params.get("bias") {
                let n = b.len();
                y.data_mut().par_chunks_mut(n).for_each(|row| {
                    for (v, bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                });
            }
            Ok(plain(y, Some(ForwardCache::Linear { input: x })))
        }
        LayerKind::Conv2d { kernel, stride, .. } => {
            let weight = layer.weight_matrix()?;
            let output = conv2d_im2col(input, &weight, *kernel, *stride, &out_shape)?;
            Ok(plain(output, None))
        }
        LayerKind::BatchNorm2d { eps, .. } => batchnorm_forward(layer, input, *eps, train),
        LayerKind::Repu { power } => {
            let n = *power as i32;
            let mut out = input.clone();
            out.data_mut()
                .par_chunks_mut(4096)
                .for_each(|c| c.iter_mut().for_each(|v| *v = if *v > 0.0 { v.powi(n) } else { 0.0 }));
            let cache = train.then(|| ForwardCache::Repu { input: input.clone() });
            Ok(plain(out, cache))
        }
        LayerKind::MaxPool2d { kernel, stride } => {
            let (output, argmax) = maxpool_forward(input, *kernel, *stride, &out_shape)?;
            Ok(plain(
                output,
                Some(ForwardCache::MaxPool {
                    argmax,
                    input_shape: input.shape().to_vec(),
                }),
            ))
        }
        LayerKind::Flatten => Ok(plain(
            input.clone().flatten_rows(),
            Some(ForwardCache::Flatten {
                input_shape: input.shape().to_vec(),
            }),
        )),
    }
}

/// Convolution as `filters · columns` per image, where the columns of an
/// image are its patches transposed (`[c·kh·kw × positions]`).
pub fn conv2d_im2col(
    input: &Tensor,
    filters: &Tensor,
    kernel: (usize, usize),
    stride: usize,
    out_shape: &[usize],
) -> Result<Tensor> {
    let (b, c, h, w) = dims4(input, "conv2d")?;
    let (kh, kw) = kernel;
    let (f, d) = filters.dims2("conv2d filters")?;
    if d != c * kh * kw {
        return Err(HebbError::dim("conv2d", format!("filters {:?} for {c}×{kh}×{kw} patches", filters.shape())));
    }
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let positions = oh * ow;
    let src = input.data();
    let mut out = vec![0.0; b * f * positions];
    out.par_chunks_mut(f * positions)
        .enumerate()
        .for_each_init(
            || vec![0.0; d * positions],
            |cols, (n, dst)| {
                let img = &src[n * c * h * w..(n + 1) * c * h * w];
                let mut l = 0;
                for ch in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let col = &mut cols[l * positions..(l + 1) * positions];
                            for oy in 0..oh {
                                let base = ch * h * w + (oy * stride + dy) * w + dx;
                                for ox in 0..ow {
                                    col[oy * ow + ox] = img[base + ox * stride];
                                }
                            }
                            l += 1;
                        }
                    }
                }
                matmul_block(filters.data(), cols, dst, f, d, positions);
            },
        );
    Tensor::new(out_shape.to_vec(), out)
}

fn batchnorm_forward(layer: &LayerNode, input: &Tensor, eps: f64, train: bool) -> Result<Forward> {
    let (b, c, h, w) = dims4(input, &format!("layer {}", layer.name))?;
    let hw = h * w;
    let count = (b * hw) as f64;
    let gamma = layer.param("gamma")?.data();
    let beta = layer.param("beta")?.data();
    let x = input.data();

    let (mean, var): (Vec<f64>, Vec<f64>) = if train {
        (0..c)
            .into_par_iter()
            .map(|ch| {
                let plane = |n: usize| &x[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                let mean = (0..b).map(|n| plane(n).iter().sum::<f64>()).sum::<f64>() / count;
                let var = (0..b)
                    .map(|n| plane(n).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                (mean, var)
            })
            .unzip()
    } else {
        (
            layer.param("running_mean")?.data().to_vec(),
            layer.param("running_var")?.data().to_vec(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    xhat.par_chunks_mut(hw)
        .zip(out.par_chunks_mut(hw))
        .enumerate()
        .for_each(|(plane, (xh, o))| {
            let ch = plane % c;
            let src = &x[plane * hw..(plane + 1) * hw];
            for i in 0..hw {
                xh[i] = (src[i] - mean[ch]) * inv_std[ch];
                o[i] = gamma[ch] * xh[i] + beta[ch];
            }
        });
    let shape = input.shape().to_vec();
    if !train {
        return Ok(Forward {
            output: Tensor::new(shape, out)?,
            cache: None,
            running: None,
        });
    }
    // running variance uses the unbiased estimate
    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    let running_var = var.iter().map(|v| v * unbias).collect();
    Ok(Forward {
        output: Tensor::new(shape.clone(), out)?,
        cache: Some(ForwardCache::BatchNorm {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        }),
        running: Some((mean, running_var)),
    })
}

fn maxpool_forward(input: &Tensor, k: usize, s: usize, out_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let (_, _, h, w) = dims4(input, "maxpool2d")?;
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = vec![0.0; out_shape.iter().product()];
    let mut arg = vec![0usize; out.len()];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, a))| {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = base + oy * s * w + ox * s;
                    for dy in 0..k {
                        for dx in 0..k {
                            let at = base + (oy * s + dy) * w + ox * s + dx;
                            if x[at] > best {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    o[oy * ow + ox] = best;
                    a[oy * ow + ox] = best_at;
                }
            }
        });
    Ok((Tensor::new(out_shape.to_vec(), out)?, arg))
}

/// Gradient of the layer input and of each trainable parameter.
pub fn backward(
    layer: &LayerNode,
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
    let (dx, grads) = backward_impl(layer, cache, grad_out, true)?;
    Ok((dx.expect("input gradient requested"), grads))
}

/// Parameter gradients only, skipping the input gradient where that saves work.
pub fn backward_params(
    layer: &LayerNode,
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<BTreeMap<String, Tensor>> {
    Ok(backward_impl(layer, cache, grad_out, false)?.1)
}

type Grads = (Option<Tensor>, BTreeMap<String, Tensor>);

fn backward_impl(layer: &LayerNode, cache: &ForwardCache, grad_out: &Tensor, want_input: bool) -> Result<Grads> {
    BACKWARD_CALLS.with(|c| c.set(c.get() + 1));
    let mut grads = BTreeMap::new();
    let ctx = || format!("backward of layer {}", layer.name);
    match (&layer.kind, cache) {
        (LayerKind::Conv2d { .. }, _) => Err(HebbError::Unsupported(format!(
            "conv2d layer {} has no backward pass; it can only be trained by a local rule",
            layer.name
        ))),
        (LayerKind::Linear { .. }, ForwardCache::Linear { input }) => {
            let weight = layer.param("weight")?;
            let g = grad_out.clone().flatten_rows();
            if g.shape() != [input.rows(), weight.rows()] {
                return Err(HebbError::dim(ctx(), format!("grad_out {:?}", grad_out.shape())));
            }
            grads.insert("weight".into(), matmul(&g.transpose()?, input)?);
            if layer.params.contains_key("bias") {
                let n = weight.rows();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads.insert("bias".into(), Tensor::new(vec![n], db)?);
            }
            let dx = if want_input { Some(matmul(&g, weight)?) } else { None };
            Ok((dx, grads))
        }
        (LayerKind::BatchNorm2d { .. }, ForwardCache::BatchNorm { xhat, inv_std }) => {
            if grad_out.shape() != xhat.shape() {
                return Err(HebbError::dim(ctx(), format!("grad_out {:?}", grad_out.shape())));
            }
            let (b, c, h, w) = dims4(xhat, "batchnorm backward")?;
            let hw = h * w;
            let count = (b * hw) as f64;
            let g = grad_out.data();
            let xh = xhat.data();
            let (dgamma, dbeta): (Vec<f64>, Vec<f64>) = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for n in 0..b {
                        let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                        for (gv, xv) in g[r.clone()].iter().zip(&xh[r]) {
                            dg += gv * xv;
                            db += gv;
                        }
                    }
                    (dg, db)
                })
                .unzip();
            let gamma = layer.param("gamma")?.data();
            let (dgamma, dbeta) = (Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?);
            if !want_input {
                grads.insert("gamma".into(), dgamma);
                grads.insert("beta".into(), dbeta);
                return Ok((None, grads));
            }
            let (dg, db) = (dgamma.data(), dbeta.data());
            let mut dx = vec![0.0; g.len()];
            dx.par_chunks_mut(hw).enumerate().for_each(|(plane, d)| {
                let ch = plane % c;
                let scale = gamma[ch] * inv_std[ch] / count;
                let r = plane * hw..(plane + 1) * hw;
                for ((dv, gv), xv) in d.iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                    *dv = scale * (count * gv - db[ch] - xv * dg[ch]);
                }
            });
            grads.insert("gamma".into(), dgamma);
            grads.insert("beta".into(), dbeta);
            Ok((Some(Tensor::new(xhat.shape().to_vec(), dx)?), grads))
        }
        (LayerKind::Repu { power }, ForwardCache::Repu { input }) => {
            if grad_out.shape() != input.shape() {
                return Err(HebbError::dim(ctx(), format!("grad_out {:?}", grad_out.shape())));
            }
            let n = *power as i32;
            let nf = *power as f64;
            let mut dx = grad_out.clone();
            dx.data_mut()
                .par_chunks_mut(4096)
                .zip(input.data().par_chunks(4096))
                .for_each(|(d, x)| {
                    for (dv, &xv) in d.iter_mut().zip(x) {
                        *dv *= if xv > 0.0 { nf * xv.powi(n - 1) } else { 0.0 };
                    }
                });
            Ok((Some(dx), grads))
        }
        (LayerKind::MaxPool2d { .. }, ForwardCache::MaxPool { argmax, input_shape }) => {
            if grad_out.len() != argmax.len() {
                return Err(HebbError::dim(ctx(), format!("grad_out {:?}", grad_out.shape())));
            }
            let mut dx = Tensor::zeros(input_shape);
            let d = dx.data_mut();
            for (&at, &gv) in argmax.iter().zip(grad_out.data()) {
                d[at] += gv;
            }
            Ok((Some(dx), grads))
        }
        (LayerKind::Flatten, ForwardCache::Flatten { input_shape }) => {
            Ok((Some(grad_out.clone().reshape(input_shape.clone())?), grads))
        }
        _ => Err(HebbError::Config(format!("{}: cache from a different layer kind", ctx()))),
    }
}

/// An ordered stack of layers applied to `[c × h × w]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<LayerNode>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl Model {
    /// Validates unique names and shape compatibility of every adjacent pair.
    pub fn new(layers: Vec<LayerNode>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(HebbError::Config(format!("duplicate layer name {}", l.name)));
            }
        }
        let model = Model {
            layers,
            input_shape,
            classes,
        };
        let out = model.shapes()?.pop().expect("input shape present");
        if !model.layers.is_empty() && out != [classes] {
            return Err(HebbError::Config(format!(
                "model output shape {out:?} does not match class count {classes}"
            )));
        }
        Ok(model)
    }

    /// Per-sample shapes: the input, then the output of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = output_shape(l, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| HebbError::Config(format!("no layer named {name}")))
    }

    pub fn layer(&self, name: &str) -> Result<&LayerNode> {
        Ok(&self.layers[self.index_of(name)?])
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut LayerNode> {
        let i = self.index_of(name)?;
        Ok(&mut self.layers[i])
    }

    /// Eval-mode pass through layers `range`.
    pub fn forward_range(&self, input: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        let mut x = input.clone();
        for l in &self.layers[range] {
            x = forward_eval(l, &x)?;
        }
        Ok(x)
    }

    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_range(input, 0..self.layers.len())
    }

    /// `(layer.param, tensor)` pairs in layer order, then parameter-name order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(move |(p, t)| (format!("{}.{}", l.name, p), t)))
            .collect()
    }
}
