//! Shared helpers for the integration tests and the acceptance runner:
//! independent brute-force oracles, finite-difference checks, tiny models
//! and data fixtures.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use protonet::dataset::Dataset;
use protonet::loss::{self, Hyperparams};
use protonet::model::{self, Activation, HeadMode, LayerSpec, ModelConfig, NetworkParams, WMode};
use protonet::tensor::{self, grad_check, ConvSpec, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.05, 1]` and random sign; keeps finite
/// differences away from the kinks of ReLU-type functions.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Direct nested-loop strided cross-correlation, padding computed from
/// first principles.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Tensor {
    let [n, h, w, cin] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let (kh, kw, s, cout) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.out_channels);
    let extent = |len: usize, k: usize| match spec.padding {
        Padding::Same => len.div_ceil(s),
        Padding::Valid => (len - k) / s + 1,
    };
    let (oh, ow) = (extent(h, kh), extent(w, kw));
    let before = |len: usize, out: usize, k: usize| match spec.padding {
        Padding::Same => ((out - 1) * s + k).saturating_sub(len) / 2,
        Padding::Valid => 0,
    };
    let (pt, pl) = (before(h, oh, kh), before(w, ow, kw));
    let x = |b: usize, i: isize, j: isize, c: usize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            input.data()[((b * h + i as usize) * w + j as usize) * cin + c]
        }
    };
    let k = |a: usize, b: usize, ci: usize, co: usize| kernel.data()[((a * kw + b) * cin + ci) * cout + co];
    let mut out = Tensor::zeros(&[n, oh, ow, cout]);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for a in 0..kh {
                        for bb in 0..kw {
                            for ci in 0..cin {
                                let iy = (oy * s + a) as isize - pt as isize;
                                let ix = (ox * s + bb) as isize - pl as isize;
                                acc += x(b, iy, ix, ci) * k(a, bb, ci, co);
                            }
                        }
                    }
                    out.data_mut()[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution: every input cell adds
/// `value · kernel` into the window it would have been computed from.
pub fn naive_deconv(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: &ConvSpec, target: (usize, usize)) -> Tensor {
    let (h, w) = target;
    let [n, oh, ow, cout] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let (kh, kw, s, cin) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.in_channels);
    let before = |len: usize, out: usize, k: usize| match spec.padding {
        Padding::Same => ((out - 1) * s + k).saturating_sub(len) / 2,
        Padding::Valid => 0,
    };
    let (pt, pl) = (before(h, oh, kh), before(w, ow, kw));
    let mut out = Tensor::from_fn(&[n, h, w, cin], |i| bias.data()[i % cin]);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let v = input.data()[((b * oh + oy) * ow + ox) * cout + co];
                    for a in 0..kh {
                        for bb in 0..kw {
                            let iy = (oy * s + a) as isize - pt as isize;
                            let ix = (ox * s + bb) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let kv = kernel.data()[((a * kw + bb) * cin + ci) * cout + co];
                                out.data_mut()[((b * h + iy as usize) * w + ix as usize) * cin + ci] += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn naive_sq_dist(z: &Tensor, p: &Tensor) -> Vec<Vec<f64>> {
    let q = z.dim(1);
    (0..z.dim(0))
        .map(|i| {
            (0..p.dim(0))
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..q {
                        let d = z.data()[i * q + k] - p.data()[j * q + k];
                        s += d * d;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn brute_r1(p: &Tensor, z: &Tensor) -> f64 {
    let d = naive_sq_dist(z, p);
    let m = p.dim(0);
    (0..m)
        .map(|j| d.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / m as f64
}

pub fn brute_r2(p: &Tensor, z: &Tensor) -> f64 {
    let d = naive_sq_dist(z, p);
    d.iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / d.len() as f64
}

pub fn naive_cross_entropy(probs: &Tensor, labels: &[usize]) -> f64 {
    let k = probs.dim(1);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.data()[i * k + y].max(1e-12).ln())
        .sum::<f64>()
        / labels.len() as f64
}

pub fn naive_reconstruction(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.dim(0);
    let per = a.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..per {
            let d = a.data()[i * per + k] - b.data()[i * per + k];
            s += d * d;
        }
        total += s;
    }
    total / n as f64
}

pub fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

// ---------------------------------------------------------------------------
// Small models
// ---------------------------------------------------------------------------

fn layer(k: usize, stride: usize, padding: Padding, cin: usize, cout: usize, activation: Activation) -> LayerSpec {
    LayerSpec {
        conv: ConvSpec::square(k, stride, padding, cin, cout),
        activation,
    }
}

/// Two same-padding sigmoid layers on 6×6×1 (q = 8, m = 4, K = 3).
pub fn tiny_same() -> ModelConfig {
    let sig = Activation::Sigmoid;
    let encoder = vec![
        layer(3, 2, Padding::Same, 1, 3, sig),
        layer(3, 2, Padding::Same, 3, 2, sig),
    ];
    let decoder = vec![
        LayerSpec {
            conv: encoder[1].conv,
            activation: sig,
        },
        LayerSpec {
            conv: encoder[0].conv,
            activation: sig,
        },
    ];
    ModelConfig {
        name: "tiny-same".into(),
        input_shape: [6, 6, 1],
        encoder,
        decoder,
        n_prototypes: 4,
        n_classes: 3,
        w_mode: WMode::Learned,
        head_mode: HeadMode::Prototype,
        autoencoder_enabled: true,
        conv_bias: true,
    }
}

/// Valid-padding leaky/sigmoid stack on 7×7×2, shaped like the car preset.
/// The slope is larger than the preset default so that gradients through
/// the negative branch stay well above finite-difference roundoff.
pub fn tiny_valid() -> ModelConfig {
    let leaky = Activation::LeakyRelu { slope: 0.2 };
    let sig = Activation::Sigmoid;
    let encoder = vec![
        layer(3, 2, Padding::Valid, 2, 3, leaky),
        layer(2, 1, Padding::Valid, 3, 2, sig),
    ];
    let decoder = vec![
        LayerSpec {
            conv: encoder[1].conv,
            activation: leaky,
        },
        LayerSpec {
            conv: encoder[0].conv,
            activation: sig,
        },
    ];
    ModelConfig {
        name: "tiny-valid".into(),
        input_shape: [7, 7, 2],
        encoder,
        decoder,
        n_prototypes: 3,
        n_classes: 3,
        w_mode: WMode::Learned,
        head_mode: HeadMode::Prototype,
        autoencoder_enabled: true,
        conv_bias: true,
    }
}

pub fn random_batch(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let [h, w, c] = cfg.input_shape;
    let x = uniform(&[b, h, w, c], 0.0, 1.0, rng);
    let labels = (0..b).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    (x, labels)
}

/// Parameters with larger-than-default weights so every path carries a
/// gradient well above finite-difference noise.
pub fn lively_params(cfg: &ModelConfig, seed: u64) -> NetworkParams {
    let mut p = model::init_params(cfg, seed).expect("valid config");
    let mut r = rng(seed ^ 0xABCD);
    for (name, t) in p.named_mut() {
        if name == "weights" || name.ends_with(".bias") || name == "head_bias" {
            *t = uniform(t.shape(), -1.0, 1.0, &mut r);
        }
    }
    p
}

// ---------------------------------------------------------------------------
// Finite-difference checks; each returns the worst relative error.
// ---------------------------------------------------------------------------

fn check(f: impl FnMut(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> f64 {
    grad_check(f, x, analytic, EPS).expect("finite gradients")
}

fn weighted_sum(t: &Tensor, c: &Tensor) -> f64 {
    t.dot(c)
}

/// A spread of conv geometries: same/valid, strides 1-2, odd/even sizes.
pub fn conv_case(seed: u64) -> (ConvSpec, usize, usize) {
    let specs = [
        (ConvSpec::square(3, 2, Padding::Same, 2, 3), 7, 6),
        (ConvSpec::square(3, 1, Padding::Same, 1, 2), 5, 5),
        (ConvSpec::square(5, 2, Padding::Valid, 2, 2), 9, 8),
        (
            ConvSpec {
                kernel_h: 2,
                kernel_w: 3,
                ..ConvSpec::square(1, 1, Padding::Valid, 3, 2)
            },
            5,
            6,
        ),
        (ConvSpec::square(2, 2, Padding::Same, 2, 2), 5, 4),
    ];
    specs[seed as usize % specs.len()]
}

pub fn gc_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (spec, h, w) = conv_case(seed);
    let x = uniform(&[2, h, w, spec.in_channels], -1.0, 1.0, &mut r);
    let k = uniform(&spec.kernel_shape(), -1.0, 1.0, &mut r);
    let b = uniform(&[spec.out_channels], -1.0, 1.0, &mut r);
    let y = tensor::conv2d(&x, &k, &b, &spec).unwrap();
    let c = uniform(y.shape(), -1.0, 1.0, &mut r);
    let g = tensor::conv2d_backward(&x, &k, &spec, &c).unwrap();
    let e1 = check(
        |t| weighted_sum(&tensor::conv2d(t, &k, &b, &spec).unwrap(), &c),
        &x,
        &g.input,
    );
    let e2 = check(
        |t| weighted_sum(&tensor::conv2d(&x, t, &b, &spec).unwrap(), &c),
        &k,
        &g.kernel,
    );
    let e3 = check(
        |t| weighted_sum(&tensor::conv2d(&x, &k, t, &spec).unwrap(), &c),
        &b,
        &g.bias,
    );
    e1.max(e2).max(e3)
}

pub fn gc_deconv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (spec, h, w) = conv_case(seed);
    let (oh, ow) = spec.output_hw(h, w).unwrap();
    let x = uniform(&[2, oh, ow, spec.out_channels], -1.0, 1.0, &mut r);
    let k = uniform(&spec.kernel_shape(), -1.0, 1.0, &mut r);
    let b = uniform(&[spec.in_channels], -1.0, 1.0, &mut r);
    let y = tensor::deconv2d(&x, &k, &b, &spec, (h, w)).unwrap();
    let c = uniform(y.shape(), -1.0, 1.0, &mut r);
    let g = tensor::deconv2d_backward(&x, &k, &spec, &c).unwrap();
    let f = |x: &Tensor, k: &Tensor, b: &Tensor| weighted_sum(&tensor::deconv2d(x, k, b, &spec, (h, w)).unwrap(), &c);
    let e1 = check(|t| f(t, &k, &b), &x, &g.input);
    let e2 = check(|t| f(&x, t, &b), &k, &g.kernel);
    let e3 = check(|t| f(&x, &k, t), &b, &g.bias);
    e1.max(e2).max(e3)
}

pub fn gc_activations(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = away_from_zero(&[3, 4, 5], &mut r);
    let x = x.map(|v| v * 4.0);
    let c = uniform(x.shape(), -1.0, 1.0, &mut r);
    let slope = r.random_range(0.01..0.3);
    let y = tensor::sigmoid(&x);
    let e1 = check(
        |t| weighted_sum(&tensor::sigmoid(t), &c),
        &x,
        &tensor::sigmoid_backward(&y, &c),
    );
    let e2 = check(
        |t| weighted_sum(&tensor::leaky_relu(t, slope), &c),
        &x,
        &tensor::leaky_relu_backward(&x, slope, &c),
    );
    let e3 = check(
        |t| weighted_sum(&tensor::relu(t), &c),
        &x,
        &tensor::relu_backward(&x, &c),
    );
    e1.max(e2).max(e3)
}

pub fn gc_softmax_ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, k) = (4, 6);
    let v = uniform(&[b, k], -3.0, 3.0, &mut r);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
    let p = tensor::softmax_rows(&v).unwrap();
    let c = uniform(&[b, k], -1.0, 1.0, &mut r);
    let e1 = check(
        |t| weighted_sum(&tensor::softmax_rows(t).unwrap(), &c),
        &v,
        &tensor::softmax_rows_backward(&p, &c),
    );
    let e2 = check(
        |t| loss::cross_entropy(&tensor::softmax_rows(t).unwrap(), &labels).unwrap(),
        &v,
        &loss::cross_entropy_logit_grad(&p, &labels),
    );
    e1.max(e2)
}

pub fn gc_pairwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let z = uniform(&[5, 3], -1.0, 1.0, &mut r);
    let p = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let c = uniform(&[5, 4], -1.0, 1.0, &mut r);
    let (dz, dp) = tensor::pairwise_sq_dist_backward(&z, &p, &c);
    let e1 = check(|t| weighted_sum(&tensor::pairwise_sq_dist(t, &p).unwrap(), &c), &z, &dz);
    let e2 = check(|t| weighted_sum(&tensor::pairwise_sq_dist(&z, t).unwrap(), &c), &p, &dp);
    e1.max(e2)
}

pub fn gc_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[4, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 5], -1.0, 1.0, &mut r);
    let c = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let (dx, dw) = tensor::matmul_transposed_backward(&x, &w, &c);
    let e1 = check(
        |t| weighted_sum(&tensor::matmul_transposed(t, &w).unwrap(), &c),
        &x,
        &dx,
    );
    let e2 = check(
        |t| weighted_sum(&tensor::matmul_transposed(&x, t).unwrap(), &c),
        &w,
        &dw,
    );
    e1.max(e2)
}

pub fn gc_r1_r2(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = uniform(&[4, 3], 0.0, 1.0, &mut r);
    let z = uniform(&[6, 3], 0.0, 1.0, &mut r);
    let (dp1, dz1) = loss::r1_grad(&p, &z).unwrap();
    let (dp2, dz2) = loss::r2_grad(&p, &z).unwrap();
    [
        check(|t| loss::r1(t, &z).unwrap(), &p, &dp1),
        check(|t| loss::r1(&p, t).unwrap(), &z, &dz1),
        check(|t| loss::r2(t, &z).unwrap(), &p, &dp2),
        check(|t| loss::r2(&p, t).unwrap(), &z, &dz2),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Smallest analytic gradient magnitude accepted by [`gc_total_loss`].
/// With a loss around 10, central differences at `EPS` carry roughly 1e-10
/// of roundoff, so a coordinate that happens to cancel below this cannot be
/// compared at 1e-5 relative precision.
pub const MIN_GRAD: f64 = 2e-5;

/// Gradient of the total objective w.r.t. every parameter tensor of `cfg`.
/// All term weights are 1 so each term contributes an O(1) gradient.
///
/// A draw whose analytic gradient has a coordinate below [`MIN_GRAD`] is
/// replaced by the next sub-seed (the rule looks only at the analytic
/// gradient, never at the comparison). Returns the worst error, the tensor
/// it occurred in and the number of redraws.
pub fn gc_total_loss(cfg: &ModelConfig, seed: u64) -> (f64, String, usize) {
    let hyper = Hyperparams {
        lambda_r: 1.0,
        lambda_1: 1.0,
        lambda_2: 1.0,
        ..Hyperparams::default()
    };
    for attempt in 0..100u64 {
        let sub = seed.wrapping_mul(1000).wrapping_add(attempt);
        let mut r = rng(sub);
        let params = lively_params(cfg, sub);
        let (x, labels) = random_batch(cfg, 3, &mut r);
        let (_, grads, _) = loss::loss_and_grad(&params, cfg, &x, &labels, &hyper).unwrap();
        let smallest = grads
            .named()
            .iter()
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min);
        if smallest < MIN_GRAD {
            continue;
        }
        let mut worst = (0.0, String::new(), attempt as usize);
        for (name, analytic) in grads.named() {
            let point = params.named().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
            let err = check(
                |t| {
                    let mut q = params.clone();
                    for (n, slot) in q.named_mut() {
                        if n == name {
                            *slot = t.clone();
                        }
                    }
                    loss::loss_only(&q, cfg, &x, &labels, &hyper).unwrap().total
                },
                &point,
                analytic,
            );
            if err > worst.0 {
                worst = (err, name, attempt as usize);
            }
        }
        return worst;
    }
    panic!("no well-conditioned draw for seed {seed}");
}

// ---------------------------------------------------------------------------
// Data fixtures
// ---------------------------------------------------------------------------

/// Official MNIST IDX directory: `$PROTONET_MNIST_DIR`, else
/// `<workspace>/data/mnist`, if the training images are present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("PROTONET_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

/// Random dataset whose pixels are exact multiples of 1/255, so IDX
/// round-trips are lossless.
pub fn synthetic_dataset(n: usize, h: usize, w: usize, k: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let images = Tensor::from_fn(&[n, h, w, 1], |_| r.random_range(0..=255u32) as f64 / 255.0);
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    Dataset::new("synthetic", images, labels, k).unwrap()
}

/// Renders a flat-shaded box seen at azimuth `deg` (−75..75) as a 64×64
/// RGB image: the side face is `color`, the front face a darker shade, and
/// their widths follow |cos| and |sin| of the angle.
pub fn render_car(deg: f64, color: [u8; 3]) -> image::RgbImage {
    let t = deg.to_radians();
    let side = (36.0 * t.cos().abs()).round() as i64;
    let front = (18.0 * t.sin().abs()).round() as i64;
    let total = side + front;
    let left = 32 - total / 2;
    let (top, bottom) = (24, 44);
    let dark = color.map(|c| c / 2);
    image::RgbImage::from_fn(64, 64, |x, y| {
        let (x, y) = (x as i64, y as i64);
        if y < top || y >= bottom || x < left || x >= left + total {
            return image::Rgb([235, 235, 235]);
        }
        // facing right for positive angles
        let in_front = if deg >= 0.0 { x >= left + side } else { x < left + front };
        image::Rgb(if in_front { dark } else { color })
    })
}

/// Writes `cars` cars × 11 azimuths under `dir` with a manifest per split.
/// Returns `(train_manifest, test_manifest)`.
pub fn car_fixture(dir: &Path, train_cars: usize, test_cars: usize) -> (PathBuf, PathBuf) {
    let write_split = |name: &str, cars: std::ops::Range<usize>| {
        let mut manifest = String::from("path,label\n");
        for car in cars {
            let color = [
                (40 + 53 * car % 200) as u8,
                (90 + 31 * car % 150) as u8,
                (20 + 71 * car % 220) as u8,
            ];
            for label in 0..11 {
                let rel = format!("{name}/car{car:03}_{label:02}.png");
                let path = dir.join(&rel);
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                render_car(-75.0 + 15.0 * label as f64, color).save(&path).unwrap();
                manifest.push_str(&format!("{rel},{label}\n"));
            }
        }
        let m = dir.join(format!("{name}.csv"));
        std::fs::write(&m, manifest).unwrap();
        m
    };
    let train = write_split("train", 0..train_cars);
    let test = write_split("test", train_cars..train_cars + test_cars);
    (train, test)
}
