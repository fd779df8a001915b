//! Oracles and fixtures shared by the integration tests. Everything here is
//! written independently of the library's kernels: plain loops, no matmul.

#![allow(dead_code)]

use std::path::PathBuf;

use hebb::layers::{backward, forward, LayerKind, LayerNode, Mode};
use hebb::{RngState, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn uniform(rng: &mut RngState, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.index(1 << 30) as f64 / (1u64 << 30) as f64)
}

/// Dataset root: `$HEBB_DATA_DIR`, else `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("HEBB_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn have(rel: &str) -> bool {
    data_dir().join(rel).exists()
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Per-sample Krotov-Hopfield update, accumulated over the batch, then one
/// max-abs normalization.
pub fn krotov_oracle(w: &[Vec<f64>], v: &[Vec<f64>], p: f64, k: usize, delta: f64, precision: f64) -> Vec<Vec<f64>> {
    let units = w.len();
    let d = w[0].len();
    let mut raw = vec![vec![0.0; d]; units];
    for sample in v {
        let mut current = vec![0.0; units];
        for mu in 0..units {
            for i in 0..d {
                current[mu] += w[mu][i].abs().powf(p - 2.0) * w[mu][i] * sample[i];
            }
        }
        let mut order: Vec<usize> = (0..units).collect();
        order.sort_by(|&a, &b| current[b].partial_cmp(&current[a]).unwrap().then(a.cmp(&b)));
        let mut g = vec![0.0; units];
        g[order[k - 1]] = -delta;
        g[order[0]] = 1.0;
        for mu in 0..units {
            if g[mu] != 0.0 {
                for i in 0..d {
                    raw[mu][i] += g[mu] * (sample[i] - current[mu] * w[mu][i]);
                }
            }
        }
    }
    let m = raw.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    let scale = m.max(precision);
    raw.iter().map(|r| r.iter().map(|x| x / scale).collect()).collect()
}

/// Direct nested-loop valid convolution: `[b×c×h×w] ⊛ [f×c×kh×kw]`.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let [b, c, h, wd] = x.shape().try_into().unwrap();
    let [f, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h - kh) / stride + 1;
    let ow = (wd - kw) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; b * f * oh * ow];
    for n in 0..b {
        for o in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                acc += xv[((n * c + ch) * h + y * stride + dy) * wd + xx * stride + dx]
                                    * wv[((o * c + ch) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((n * f + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, f, oh, ow], out).unwrap()
}

/// Error metric for gradient checks: largest `|a − n| / max(|a|, |n|, floor)`.
/// The floor sits well above central-difference roundoff (about 1e-10 here).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-5;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn projected(layer: &LayerNode, x: &Tensor, r: &Tensor) -> f64 {
    let mut l = layer.clone();
    let (y, _) = forward(&mut l, x, Mode::Train).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks one layer's input and parameter gradients for the scalar loss
/// `Σ forward(x) ⊙ r` against central differences. Returns the worst
/// relative error seen.
pub fn check_layer_gradients(layer: &LayerNode, x: &Tensor, rng: &mut RngState) -> f64 {
    let mut l = layer.clone();
    let (y, cache) = forward(&mut l, x, Mode::Train).unwrap();
    let r = random_tensor(y.shape(), rng);
    let (gin, pgrads) = backward(layer, cache.as_ref().unwrap(), &r).unwrap();
    assert_eq!(gin.shape(), x.shape());

    let mut worst = 0.0f64;
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        numeric[i] = (projected(layer, &xp, &r) - projected(layer, &xm, &r)) / (2.0 * FD_STEP);
    }
    worst = worst.max(max_rel_err(gin.data(), &numeric));

    for name in layer.trainable_param_names() {
        let g = &pgrads[name];
        let p = layer.param(name).unwrap();
        let mut numeric = vec![0.0; p.len()];
        for i in 0..p.len() {
            let mut lp = layer.clone();
            lp.param_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let mut lm = layer.clone();
            lm.param_mut(name).unwrap().data_mut()[i] -= FD_STEP;
            numeric[i] = (projected(&lp, x, &r) - projected(&lm, x, &r)) / (2.0 * FD_STEP);
        }
        worst = worst.max(max_rel_err(g.data(), &numeric));
    }
    worst
}

/// Random values whose pairwise gaps are all at least `gap`, shuffled.
pub fn separated_values(n: usize, gap: f64, rng: &mut RngState) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap + 0.3 * gap).collect();
    rng.shuffle(&mut v);
    v
}

/// Values at least `margin` away from zero.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut RngState) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + v.abs() };
        }
    }
    t
}

pub fn linear(name: &str, i: usize, o: usize, bias: bool) -> LayerNode {
    LayerNode::new(
        name,
        LayerKind::Linear {
            in_features: i,
            out_features: o,
            bias,
        },
    )
    .unwrap()
}

pub fn conv(name: &str, c: usize, f: usize, k: usize, stride: usize) -> LayerNode {
    LayerNode::new(
        name,
        LayerKind::Conv2d {
            in_channels: c,
            filters: f,
            kernel: (k, k),
            stride,
        },
    )
    .unwrap()
}

pub fn batchnorm(name: &str, c: usize) -> LayerNode {
    LayerNode::new(
        name,
        LayerKind::BatchNorm2d {
            channels: c,
            eps: hebb::layers::BN_EPS,
            momentum: hebb::layers::BN_MOMENTUM,
        },
    )
    .unwrap()
}

pub fn repu(name: &str, n: u32) -> LayerNode {
    LayerNode::new(name, LayerKind::Repu { power: n }).unwrap()
}

pub fn maxpool(name: &str, k: usize, s: usize) -> LayerNode {
    LayerNode::new(name, LayerKind::MaxPool2d { kernel: k, stride: s }).unwrap()
}

pub fn flatten(name: &str) -> LayerNode {
    LayerNode::new(name, LayerKind::Flatten).unwrap()
}

/// Randomizes every parameter; batchnorm scales stay positive.
pub fn randomize(layer: &mut LayerNode, rng: &mut RngState) {
    for (name, t) in layer.params.iter_mut() {
        for v in t.data_mut() {
            *v = match name.as_str() {
                "gamma" | "running_var" => 0.5 + uniform(rng, 0.0, 1.0),
                _ => rng.normal(),
            };
        }
    }
}

/// Worst relative error over `instances` random gradient checks of one layer
/// kind: `linear`, `batchnorm2d`, `repu1`, `repu2`, `repu3`, `maxpool2d`,
/// `flatten`, or `head` (batchnorm → RePU → pool → flatten → linear under
/// softmax cross-entropy, behind a frozen conv layer).
pub fn gradient_suite(kind: &str, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = RngState::new(1000 + seed);
        let err = match kind {
            "linear" => {
                let (i, o, b) = (1 + rng.index(6), 1 + rng.index(5), 1 + rng.index(5));
                let mut l = linear("fc", i, o, seed % 2 == 0);
                randomize(&mut l, &mut rng);
                let x = random_tensor(&[b, i], &mut rng);
                check_layer_gradients(&l, &x, &mut rng)
            }
            "batchnorm2d" => {
                let (h, w) = (1 + rng.index(3), 1 + rng.index(3));
                let mut l = batchnorm("bn", 3);
                randomize(&mut l, &mut rng);
                let mut x = random_tensor(&[8, 3, h, w], &mut rng);
                for v in x.data_mut() {
                    *v = *v * 2.0 + 0.5;
                }
                check_layer_gradients(&l, &x, &mut rng)
            }
            "repu1" | "repu2" | "repu3" => {
                let n = kind[4..].parse().unwrap();
                let shape = [1 + rng.index(4), 1 + rng.index(3), 1 + rng.index(4), 1 + rng.index(4)];
                let x = away_from_zero(&shape, 1e-2, &mut rng);
                check_layer_gradients(&repu("act", n), &x, &mut rng)
            }
            "maxpool2d" => {
                let (k, s) = if seed % 2 == 0 { (2, 2) } else { (3, 1) };
                let (b, c, h, w) = (1 + rng.index(3), 1 + rng.index(3), 4 + rng.index(3), 4 + rng.index(3));
                let mut data = vec![];
                for _ in 0..b * c {
                    data.extend(separated_values(h * w, 1e-2, &mut rng));
                }
                let x = Tensor::new(vec![b, c, h, w], data).unwrap();
                check_layer_gradients(&maxpool("pool", k, s), &x, &mut rng)
            }
            "flatten" => {
                let x = random_tensor(&[1 + rng.index(3), 2, 1 + rng.index(3), 3], &mut rng);
                check_layer_gradients(&flatten("flat"), &x, &mut rng)
            }
            "head" => check_head_once(&mut rng),
            other => panic!("unknown gradient suite {other}"),
        };
        worst = worst.max(err);
    }
    worst
}

fn check_head_once(rng: &mut RngState) -> f64 {
    use hebb::engine::head_gradients;
    use hebb::layers::Model;

    let mut c = conv("conv", 2, 3, 3, 1);
    randomize(&mut c, rng);
    c.frozen = true;
    let mut bn = batchnorm("bn", 3);
    randomize(&mut bn, rng);
    let mut fc = linear("fc", 12, 4, true);
    // fan-in scaled, as a real head starts; unit-variance weights saturate the softmax
    fc.init_scaled(rng);
    for b in fc.param_mut("bias").unwrap().data_mut() {
        *b = 0.1 * rng.normal();
    }
    let layers = vec![c, bn, repu("act", 2), maxpool("pool", 2, 2), flatten("flat"), fc];
    let model = Model::new(layers, vec![2, 6, 6], 4).unwrap();
    let x = random_tensor(&[6, 2, 6, 6], rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.index(4)).collect();

    let loss = |m: &Model| head_gradients(&mut m.clone(), 1, &x, &labels).unwrap().0;
    let (_, _, grads) = head_gradients(&mut model.clone(), 1, &x, &labels).unwrap();
    assert_eq!(grads.len(), 4, "bn gamma/beta and fc weight/bias");
    let mut worst = 0.0f64;
    for (layer, param, g) in grads {
        let mut numeric = vec![0.0; g.len()];
        for i in 0..g.len() {
            let mut mp = model.clone();
            mp.layer_mut(&layer).unwrap().param_mut(&param).unwrap().data_mut()[i] += FD_STEP;
            let mut mm = model.clone();
            mm.layer_mut(&layer).unwrap().param_mut(&param).unwrap().data_mut()[i] -= FD_STEP;
            numeric[i] = (loss(&mp) - loss(&mm)) / (2.0 * FD_STEP);
        }
        worst = worst.max(max_rel_err(g.data(), &numeric));
    }
    worst
}

/// Worst |library − oracle| over random Krotov draws with p ∈ {2, 3, 4}.
pub fn krotov_suite(draws: u64) -> f64 {
    use hebb::rules::{krotov_update, KrotovParams};
    let mut worst = 0.0f64;
    for seed in 0..draws {
        let mut rng = RngState::new(5000 + seed);
        let units = 1 + rng.index(12);
        let d = 1 + rng.index(20);
        let b = 1 + rng.index(9);
        let params = KrotovParams {
            p: [2.0, 3.0, 4.0][seed as usize % 3],
            k: 1 + rng.index(units),
            delta: uniform(&mut rng, 0.0, 1.0),
            precision: 1e-30,
        };
        let w = random_tensor(&[units, d], &mut rng);
        let v = random_tensor(&[b, d], &mut rng).map(f64::abs);
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let expected = krotov_oracle(&rows(&w), &rows(&v), params.p, params.k, params.delta, params.precision);
        let got = krotov_update(&w, &v, &params).unwrap();
        for (r, row) in expected.iter().enumerate() {
            for (i, e) in row.iter().enumerate() {
                worst = worst.max((got.delta_w.row(r)[i] - e).abs());
            }
        }
    }
    worst
}

/// Trains a single unit on one fixed positive input with linearly decaying
/// steps and returns the final `|Σ|W|^p − 1|`.
pub fn fixed_point_residual(p: f64) -> f64 {
    use hebb::optim::LocalOptimizer;
    use hebb::rules::{krotov_update, KrotovParams};
    let mut rng = RngState::new(77);
    let d = 16;
    let v = Tensor::new(vec![1, d], (0..d).map(|_| uniform(&mut rng, 0.1, 1.0)).collect()).unwrap();
    let mut w = random_tensor(&[1, d], &mut rng).map(|x| 0.3 * x);
    let params = KrotovParams {
        p,
        k: 1,
        delta: 0.0,
        precision: 1e-30,
    };
    let steps = 4000;
    let mut opt = LocalOptimizer::new(steps);
    opt.register("unit", 0.02);
    for t in 0..steps {
        let up = krotov_update(&w, &v, &params).unwrap();
        opt.step("unit", &mut w, &up.delta_w, t).unwrap();
    }
    (w.data().iter().map(|x| x.abs().powf(p)).sum::<f64>() - 1.0).abs()
}

/// Worst |im2col conv − direct loops| over random geometries, including the
/// 2×3×8×8 input with 4 filters.
pub fn conv_suite(draws: u64) -> f64 {
    use hebb::layers::forward_eval;
    let mut worst = 0.0f64;
    for seed in 0..draws {
        let mut rng = RngState::new(7000 + seed);
        let (b, c, f) = if seed == 0 {
            (2, 3, 4)
        } else {
            (1 + rng.index(3), 1 + rng.index(3), 1 + rng.index(5))
        };
        let k = 1 + rng.index(4);
        let stride = 1 + rng.index(3);
        let (h, w) = (k + rng.index(7), k + rng.index(7));
        let (h, w) = if seed == 0 { (8, 8) } else { (h, w) };
        let mut layer = conv("conv", c, f, k, stride);
        randomize(&mut layer, &mut rng);
        let x = random_tensor(&[b, c, h, w], &mut rng);
        let got = forward_eval(&layer, &x).unwrap();
        let want = conv_oracle(&x, layer.param("weight").unwrap(), stride);
        assert_eq!(got.shape(), want.shape());
        for (a, e) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - e).abs());
        }
    }
    worst
}

/// Whether `extract_patches` matches direct indexing on every draw.
pub fn patch_suite(draws: u64) -> bool {
    use hebb::layers::extract_patches;
    (0..draws).all(|seed| {
        let mut rng = RngState::new(9000 + seed);
        let (b, c) = (1 + rng.index(3), 1 + rng.index(3));
        let (kh, kw) = (1 + rng.index(4), 1 + rng.index(4));
        let stride = 1 + rng.index(3);
        let (h, w) = (kh + rng.index(6), kw + rng.index(6));
        let x = random_tensor(&[b, c, h, w], &mut rng);
        let got = extract_patches(&x, kh, kw, stride).unwrap();
        let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        if got.shape() != [b * oh * ow, c * kh * kw] {
            return false;
        }
        let xv = x.data();
        let mut ok = true;
        for n in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let row = got.row((n * oh + y) * ow + xx);
                    let mut col = 0;
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let src = xv[((n * c + ch) * h + y * stride + dy) * w + xx * stride + dx];
                                ok &= row[col].to_bits() == src.to_bits();
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        ok
    })
}

/// Small labelled image set: class `c` lights up row band `c` of a 1×6×6
/// image, plus uniform noise. Pixels stay in [0, 1].
pub fn toy_dataset(n: usize, classes: usize, seed: u64) -> hebb::data::Dataset {
    let mut rng = RngState::new(seed);
    let mut data = Vec::with_capacity(n * 36);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let c = s % classes;
        labels.push(c);
        for y in 0..6 {
            for _ in 0..6 {
                let base = if y * classes / 6 == c { 0.8 } else { 0.0 };
                data.push((base + uniform(&mut rng, 0.0, 0.2)).min(1.0));
            }
        }
    }
    hebb::data::Dataset::new(Tensor::new(vec![n, 1, 6, 6], data).unwrap(), labels).unwrap()
}
