//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srnas::searchspace::{OpKind, RedOpKind, CONV_GROUPS, INV_EXPANSION};
use srnas::tensorkit::{Layer, Tensor, GATE_REDUCTION};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Five-point stencil step for layers that are polynomial, or nearly so,
/// in each coordinate (conv, linear, unit-slope PReLU stacks; spectral norm
/// in eval mode, where one weight moves sigma by at most `|u_r v_c| h`).
pub const STEP_POLY: f64 = 1e-1;
/// Stencil step for the remaining smooth layers (sigmoid, batch norm).
pub const STEP_SMOOTH: f64 = 5e-2;
/// Floor for the elementwise diagnostic.
pub const GRAD_FLOOR: f64 = 1e-2;

/// Result of one finite-difference check.
///
/// `max_rel` is the norm-wise relative error `|a - n| / max(|a|, |n|)` of
/// each checked tensor (input gradient, each parameter gradient), maximised
/// over tensors. `max_elem` is the elementwise error with an absolute floor
/// of [`GRAD_FLOOR`], kept as a diagnostic.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub max_elem: f64,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, what: &str, pairs: &[(f64, f64)]) {
        let sq = |f: &dyn Fn(&(f64, f64)) -> f64| pairs.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
        let diff = sq(&|&(a, n)| a - n);
        let scale = sq(&|&(a, _)| a).max(sq(&|&(_, n)| n));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        self.checked += pairs.len();
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{what} (|g| = {scale:.3e})");
        }
        for &(a, n) in pairs {
            self.max_elem = self.max_elem.max((a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_elem = self.max_elem.max(other.max_elem);
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

fn loss(layer: &mut dyn Layer, x: &Tensor, r: &[f32]) -> f64 {
    let y = layer.forward(x).expect("forward");
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Five-point central difference of `f` at `v`. Exact for polynomials of
/// degree four, so conv/linear stacks carry only rounding error.
fn central(f: &mut dyn FnMut(f32) -> f64, v: f32, h: f64) -> f64 {
    let mut at = |d: f64| f((v as f64 + d) as f32);
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

/// Compares the layer's analytic gradients (input and every parameter) of
/// `L = sum(y * r)` for a random `r` against central differences on up to
/// `per_tensor` random coordinates per tensor.
pub fn gradcheck(layer: &mut dyn Layer, x: &Tensor, step: f64, seed: u64, per_tensor: usize) -> GradReport {
    let mut rng = rng(seed ^ 0x5eed);
    let y = layer.forward(x).expect("forward");
    let r: Vec<f32> = (0..y.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    layer.zero_grad();
    layer.forward(x).expect("forward");
    let gx = layer.backward(&Tensor::from_vec(y.shape(), r.clone()).unwrap()).expect("backward");
    let param_grads: Vec<(String, Vec<f32>)> =
        layer.params().iter().map(|p| (p.name.clone(), p.grad.data().to_vec())).collect();

    let mut report = GradReport::default();
    let mut xp = x.clone();
    let mut pairs = Vec::new();
    for i in pick(x.len(), per_tensor, &mut rng) {
        let v = xp.data()[i];
        let mut f = |t: f32| {
            xp.data_mut()[i] = t;
            loss(layer, &xp, &r)
        };
        let numeric = central(&mut f, v, step);
        xp.data_mut()[i] = v;
        pairs.push((gx.data()[i] as f64, numeric));
    }
    report.record("input", &pairs);
    for (pi, (name, grad)) in param_grads.iter().enumerate() {
        let mut pairs = Vec::new();
        for i in pick(grad.len(), per_tensor, &mut rng) {
            let v = layer.params()[pi].value.data()[i];
            let mut f = |t: f32| {
                layer.params_mut()[pi].value.data_mut()[i] = t;
                loss(layer, x, &r)
            };
            let numeric = central(&mut f, v, step);
            layer.params_mut()[pi].value.data_mut()[i] = v;
            pairs.push((grad[i] as f64, numeric));
        }
        report.record(name, &pairs);
    }
    report
}

fn pick(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Counts multiplies while executing layers naively.
#[derive(Debug, Default)]
pub struct Counter {
    pub mults: u64,
}

impl Counter {
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.mults += 1;
        a * b
    }
}

/// Feature map `(c, h, w)` in `f64`.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn random(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        Map { c, h, w, v: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.v[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

/// Textbook zero-padded convolution (padding `(k - 1) / 2`), multiplying
/// every kernel tap including those that land on padding. Returns the
/// output together with the bias-free result in `(cout, oh, ow)` layout.
pub fn naive_conv(x: &Map, weight: &[f64], cout: usize, k: usize, groups: usize, stride: usize, counter: &mut Counter) -> Map {
    let pad = (k as isize - 1) / 2;
    let oh = (x.h + 2 * pad as usize - k) / stride + 1;
    let ow = (x.w + 2 * pad as usize - k) / stride + 1;
    let cin_g = x.c / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let g = co / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for cl in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let xv = x.at(g * cin_g + cl, (oy * stride + ky) as isize - pad, (ox * stride + kx) as isize - pad);
                            acc += counter.mul(weight[((co * cin_g + cl) * k + ky) * k + kx], xv);
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Map { c: cout, h: oh, w: ow, v: out }
}

pub fn naive_linear(x: &[f64], fout: usize, counter: &mut Counter, rng: &mut impl Rng) -> Vec<f64> {
    (0..fout)
        .map(|_| x.iter().map(|&v| counter.mul(rng.random_range(-1.0..1.0), v)).sum())
        .collect()
}

fn random_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv_counted(x: &Map, cout: usize, k: usize, groups: usize, stride: usize, counter: &mut Counter, rng: &mut impl Rng) -> Map {
    let w = random_weights(cout * (x.c / groups) * k * k, rng);
    naive_conv(x, &w, cout, k, groups, stride, counter)
}

/// Multiplies performed by conv and linear layers when running `op` on a
/// `(c, h, w)` map, by direct execution.
pub fn count_op(op: OpKind, c: usize, h: usize, w: usize, seed: u64) -> u64 {
    let mut rng = rng(seed);
    let x = Map::random(c, h, w, &mut rng);
    let mut n = Counter::default();
    match op {
        OpKind::Conv { k } => {
            conv_counted(&x, c, k, 1, 1, &mut n, &mut rng);
        }
        OpKind::GroupConv { k } => {
            conv_counted(&x, c, k, CONV_GROUPS, 1, &mut n, &mut rng);
        }
        OpKind::DSep { k } => {
            let d = conv_counted(&x, c, k, c, 1, &mut n, &mut rng);
            conv_counted(&d, c, 1, 1, 1, &mut n, &mut rng);
        }
        OpKind::InvBlock { k } => {
            let e = conv_counted(&x, c * INV_EXPANSION, 1, 1, 1, &mut n, &mut rng);
            let d = conv_counted(&e, c * INV_EXPANSION, k, c * INV_EXPANSION, 1, &mut n, &mut rng);
            conv_counted(&d, c, 1, 1, 1, &mut n, &mut rng);
        }
        OpKind::SeBlock | OpKind::CaBlock => {
            let pooled: Vec<f64> = (0..c).map(|ch| x.v[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
            let hidden = naive_linear(&pooled, (c / GATE_REDUCTION).max(1), &mut n, &mut rng);
            naive_linear(&hidden, c, &mut n, &mut rng);
        }
        OpKind::Identity => {}
    }
    n.mults
}

/// Multiplies of a stride-2 channel-doubling reduction, by direct execution.
pub fn count_reduction(op: RedOpKind, c: usize, h: usize, w: usize, seed: u64) -> u64 {
    let mut rng = rng(seed);
    let x = Map::random(c, h, w, &mut rng);
    let mut n = Counter::default();
    conv_counted(&x, 2 * c, op.kernel(), op.groups(), 2, &mut n, &mut rng);
    n.mults
}

pub struct ZooEntry {
    pub name: String,
    pub layer: Box<dyn Layer>,
    pub input: Tensor,
    pub step: f64,
}

impl ZooEntry {
    fn new(name: String, layer: Box<dyn Layer>, input: Tensor) -> Self {
        let smooth = ["sigmoid", "batchnorm", "channel_gate"].iter().any(|s| name.contains(s));
        let step = if smooth { STEP_SMOOTH } else { STEP_POLY };
        ZooEntry { name, layer, input, step }
    }
}

/// Every layer type in the toolkit with a matching random input, set up so
/// no ReLU/PReLU kink falls inside the stencil. Layers with spectral
/// normalisation are put in eval mode so the power-iteration vectors stay
/// fixed across finite-difference evaluations.
pub fn layer_zoo(seed: u64) -> Vec<ZooEntry> {
    use srnas::tensorkit::*;
    let mut r = rng(seed);
    let c = 4;
    let (n, h, w) = (2, 6, 5);
    let geo = |cin, cout, k, stride, groups| ConvGeometry { in_channels: cin, out_channels: cout, kernel: k, stride, groups };
    let mut zoo: Vec<(String, Box<dyn Layer>)> = Vec::new();
    for (k, stride, groups) in [(1, 1, 1), (3, 1, 1), (5, 2, 1), (7, 1, 1), (3, 1, 4), (3, 2, 4), (5, 1, 4)] {
        let conv = Conv2d::new("conv", geo(c, 8, k, stride, groups), true, &mut r).unwrap();
        zoo.push((format!("conv{k}_s{stride}_g{groups}"), Box::new(conv)));
    }
    zoo.push(("depthwise3".into(), Box::new(Conv2d::new("dw", geo(c, c, 3, 1, c), false, &mut r).unwrap())));
    let mut sn = Conv2d::new("sn", geo(c, 8, 3, 2, 1), true, &mut r).unwrap().with_spectral_norm(&mut r);
    warm_up(&mut sn, &[n, c, h, w], &mut r);
    zoo.push(("conv3_spectral".into(), Box::new(sn)));
    zoo.push(("dsep5".into(), Box::new(DepthwiseSeparable::new("dsep", 5, c, c, &mut r).unwrap())));
    // Unit PReLU slopes keep the block smooth; the slope gradients are still checked.
    let mut inv = InvertedBottleneck::new("inv", 3, c, c, 2, &mut r).unwrap();
    for p in inv.params_mut().into_iter().filter(|p| p.name.contains(".act")) {
        p.value.fill(1.0);
    }
    zoo.push(("invblock3".into(), Box::new(inv)));
    // A positive squeeze bias keeps the inner ReLU away from its kink.
    let mut gate = ChannelGate::new("gate", 8, &mut r);
    gate.squeeze.bias.value.fill(2.0);
    zoo.push(("channel_gate".into(), Box::new(gate)));
    zoo.push(("prelu".into(), Box::new(PRelu::new("prelu", c))));
    zoo.push(("relu".into(), Box::new(Relu::default())));
    zoo.push(("sigmoid".into(), Box::new(Sigmoid::default())));
    zoo.push(("batchnorm".into(), Box::new(BatchNorm2d::new("bn", c))));
    zoo.push(("pixel_shuffle".into(), Box::new(PixelShuffle::new(2))));
    zoo.push(("global_avg_pool".into(), Box::new(GlobalAvgPool::default())));
    zoo.push(("flatten".into(), Box::new(Flatten::default())));
    zoo.push(("identity".into(), Box::new(Identity::default())));
    let mut out = Vec::new();
    for (name, layer) in zoo {
        let input = match name.as_str() {
            "channel_gate" => Tensor::randn(&[n, 8, h, w], 1.0, &mut r),
            // |x| >= 0.25 exceeds the stencil half-width
            "prelu" | "relu" => Tensor::randn(&[n, c, h, w], 1.0, &mut r).map(|v| v + 0.25 * v.signum()),
            _ => Tensor::randn(&[n, c, h, w], 1.0, &mut r),
        };
        out.push(ZooEntry::new(name, layer, input));
    }
    let lin = Linear::new("fc", 12, 5, &mut r);
    out.push(ZooEntry::new("linear".into(), Box::new(lin), Tensor::randn(&[3, 12], 1.0, &mut r)));
    let mut lin_sn = Linear::new("fc_sn", 12, 5, &mut r).with_spectral_norm(&mut r);
    warm_up(&mut lin_sn, &[3, 12], &mut r);
    out.push(ZooEntry::new("linear_spectral".into(), Box::new(lin_sn), Tensor::randn(&[3, 12], 1.0, &mut r)));
    out
}

/// Converges the power iteration, then freezes it (eval mode).
fn warm_up(layer: &mut dyn Layer, shape: &[usize], r: &mut impl Rng) {
    let x = Tensor::randn(shape, 1.0, r);
    for _ in 0..30 {
        layer.forward(&x).unwrap();
    }
    layer.set_training(false);
}

/// Multiplies of a plain stride-1 conv, by direct execution.
pub fn count_conv(cin: usize, cout: usize, k: usize, h: usize, w: usize, seed: u64) -> u64 {
    let mut rng = rng(seed);
    let x = Map::random(cin, h, w, &mut rng);
    let mut n = Counter::default();
    conv_counted(&x, cout, k, 1, 1, &mut n, &mut rng);
    n.mults
}

/// Multiplies of a whole generator on an `(h, w)` low-resolution input,
/// executing head, nodes, post, upsampling convs and tail naively.
pub fn count_generator(ops: &[OpKind], n: usize, stages: usize, h: usize, w: usize, seed: u64) -> u64 {
    let mut total = count_conv(3, n, 3, h, w, seed);
    for (i, &op) in ops.iter().enumerate() {
        total += count_op(op, n, h, w, seed + 1 + i as u64);
    }
    total += count_conv(n, n, 3, h, w, seed);
    let (mut h, mut w) = (h, w);
    for _ in 0..stages {
        total += count_conv(n, 4 * n, 3, h, w, seed);
        h *= 2;
        w *= 2;
    }
    total + count_conv(n, 3, 3, h, w, seed)
}
