//! Primitive layers with hand-written reverse passes.
//!
//! Every layer caches what its backward pass needs during `forward`. Calling
//! `backward` without a preceding `forward` is a [`Error::State`]. Parameter
//! gradients accumulate until zeroed.

use rand::Rng;

use super::spectral::PowerIteration;
use super::{Param, Tensor};
use crate::error::{Error, Result};

/// A differentiable layer with cached forward state.
pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor>;

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Switches train/eval behaviour (batch norm statistics, power iteration).
    fn set_training(&mut self, _training: bool) {}

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

fn take_cache<T>(slot: &mut Option<T>, layer: &str) -> Result<T> {
    slot.take()
        .ok_or_else(|| Error::State(format!("{layer}: backward called before forward")))
}

fn cached<'a, T>(slot: &'a Option<T>, layer: &str) -> Result<&'a T> {
    slot.as_ref()
        .ok_or_else(|| Error::State(format!("{layer}: backward called before forward")))
}

/// Passes its input through untouched.
#[derive(Debug, Default)]
pub struct Identity {
    seen: bool,
}

impl Layer for Identity {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.seen = true;
        Ok(x.clone())
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if !self.seen {
            return Err(Error::State("identity: backward called before forward".into()));
        }
        Ok(grad.clone())
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0
            || self.stride == 0
            || self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::shape(
                "odd kernel, stride >= 1, channels divisible by groups",
                format!("{self:?}"),
            ));
        }
        Ok(())
    }
}

/// Range of output columns whose tap `k` lands inside `[0, size)`.
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride).min(out) };
    let hi = if size + pad > k {
        ((size - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c != g.in_channels {
        return Err(Error::shape(
            format!("{} input channels", g.in_channels),
            format!("{:?}", x.shape()),
        ));
    }
    let (oh, ow) = g.output_hw(h, w);
    let (k, s, p) = (g.kernel, g.stride, g.padding());
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..g.out_channels {
            let grp = co / cout_g;
            let plane = &mut od[((b * g.out_channels + co) * oh * ow)..][..oh * ow];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xin = &xd[((b * c + ci) * h * w)..][..h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ky, p, s, h, oh);
                    for kx in 0..k {
                        let wv = weight[((co * cin_g + cil) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, p, s, w, ow);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let start = ox_lo + kx - p;
                                for (o, &i) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[start..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns the input gradient and accumulates weight/bias gradients.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &[f32],
    grad_out: &Tensor,
    g: &ConvGeometry,
    grad_weight: &mut [f32],
    grad_bias: Option<&mut [f32]>,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = g.output_hw(h, w);
    grad_out.ensure_shape(&[n, g.out_channels, oh, ow])?;
    let (k, s, p) = (g.kernel, g.stride, g.padding());
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let mut gx = Tensor::zeros(x.shape());
    let xd = x.data();
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    if let Some(gb) = grad_bias {
        for b in 0..n {
            for (co, gbv) in gb.iter_mut().enumerate() {
                let plane = &gd[((b * g.out_channels + co) * oh * ow)..][..oh * ow];
                *gbv += plane.iter().sum::<f32>();
            }
        }
    }
    for b in 0..n {
        for co in 0..g.out_channels {
            let grp = co / cout_g;
            let gplane = &gd[((b * g.out_channels + co) * oh * ow)..][..oh * ow];
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xoff = (b * c + ci) * h * w;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ky, p, s, h, oh);
                    for kx in 0..k {
                        let widx = ((co * cin_g + cil) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, p, s, w, ow);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let row_off = xoff + iy * w;
                            if s == 1 {
                                let start = row_off + ox_lo + kx - p;
                                let len = ox_hi - ox_lo;
                                let irow = &xd[start..start + len];
                                let gxrow = &mut gxd[start..start + len];
                                for ((gxv, &iv), &gv) in
                                    gxrow.iter_mut().zip(irow).zip(&grow[ox_lo..ox_hi])
                                {
                                    acc += gv * iv;
                                    *gxv += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = row_off + ox * s + kx - p;
                                    acc += grow[ox] * xd[ix];
                                    gxd[ix] += wv * grow[ox];
                                }
                            }
                        }
                        grad_weight[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// He-normal initialization for a weight with the given fan-in.
pub fn he_std(fan_in: usize) -> f32 {
    (2.0 / fan_in.max(1) as f32).sqrt()
}

/// 2-D convolution with zero padding `(k - 1) / 2`, optional bias and groups,
/// optionally spectrally normalized.
#[derive(Debug)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Option<Param>,
    spectral: Option<PowerIteration>,
    training: bool,
    cache: Option<(Tensor, Tensor)>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        geometry.validate()?;
        let shape = geometry.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = Param::new(
            format!("{name}.weight"),
            Tensor::randn(&shape, he_std(fan_in), rng),
        );
        let bias = bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                Tensor::zeros(&[geometry.out_channels]),
            )
        });
        Ok(Conv2d {
            geometry,
            weight,
            bias,
            spectral: None,
            training: true,
            cache: None,
        })
    }

    pub fn with_spectral_norm(mut self, rng: &mut impl Rng) -> Self {
        let rows = self.geometry.out_channels;
        let cols = self.weight.numel() / rows;
        self.spectral = Some(PowerIteration::new(rows, cols, rng));
        self
    }

    pub fn spectral(&self) -> Option<&PowerIteration> {
        self.spectral.as_ref()
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let effective = match self.spectral.as_mut() {
            Some(pi) => pi.normalized(&self.weight.value, self.training),
            None => self.weight.value.clone(),
        };
        let out = conv2d_forward(
            x,
            effective.data(),
            self.bias.as_ref().map(|b| b.value.data()),
            &self.geometry,
        )?;
        self.cache = Some((x.clone(), effective));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, effective) = take_cache(&mut self.cache, "conv2d")?;
        let mut gw = vec![0.0f32; effective.len()];
        let gx = conv2d_backward(
            &x,
            effective.data(),
            grad,
            &self.geometry,
            &mut gw,
            self.bias.as_mut().map(|b| b.grad.data_mut()),
        )?;
        let gw = Tensor::from_vec(effective.shape(), gw)?;
        let gw = match &self.spectral {
            Some(pi) => pi.backward(&self.weight.value, &gw),
            None => gw,
        };
        self.weight.grad.add_assign(&gw)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }
}

/// Fully connected layer `(N, F) -> (N, O)`, optionally spectrally normalized.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    spectral: Option<PowerIteration>,
    training: bool,
    cache: Option<(Tensor, Tensor)>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features.max(1) as f32).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[out_features, in_features], -bound, bound, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            spectral: None,
            training: true,
            cache: None,
        }
    }

    pub fn with_spectral_norm(mut self, rng: &mut impl Rng) -> Self {
        let s = self.weight.value.shape();
        self.spectral = Some(PowerIteration::new(s[0], s[1], rng));
        self
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        let (o, fi) = (self.out_features(), self.in_features());
        if f != fi {
            return Err(Error::shape(format!("(N, {fi})"), format!("{:?}", x.shape())));
        }
        let effective = match self.spectral.as_mut() {
            Some(pi) => pi.normalized(&self.weight.value, self.training),
            None => self.weight.value.clone(),
        };
        let wd = effective.data();
        let mut out = Tensor::zeros(&[n, o]);
        for b in 0..n {
            let xr = &x.data()[b * f..(b + 1) * f];
            for j in 0..o {
                let wr = &wd[j * f..(j + 1) * f];
                out.data_mut()[b * o + j] =
                    self.bias.value.data()[j] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f32>();
            }
        }
        self.cache = Some((x.clone(), effective));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, effective) = take_cache(&mut self.cache, "linear")?;
        let (n, f) = x.dims2()?;
        let o = self.out_features();
        grad.ensure_shape(&[n, o])?;
        let wd = effective.data();
        let mut gx = Tensor::zeros(&[n, f]);
        let mut gw = vec![0.0f32; o * f];
        for b in 0..n {
            let xr = &x.data()[b * f..(b + 1) * f];
            for j in 0..o {
                let g = grad.data()[b * o + j];
                self.bias.grad.data_mut()[j] += g;
                let gxr = &mut gx.data_mut()[b * f..(b + 1) * f];
                let wr = &wd[j * f..(j + 1) * f];
                let gwr = &mut gw[j * f..(j + 1) * f];
                for i in 0..f {
                    gxr[i] += g * wr[i];
                    gwr[i] += g * xr[i];
                }
            }
        }
        let gw = Tensor::from_vec(&[o, f], gw)?;
        let gw = match &self.spectral {
            Some(pi) => pi.backward(&self.weight.value, &gw),
            None => gw,
        };
        self.weight.grad.add_assign(&gw)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }
}

/// Parametric ReLU with one learned slope per channel (initialized to 0.25).
/// Works on `(N, C, H, W)` and `(N, C)` inputs.
#[derive(Debug)]
pub struct PRelu {
    pub slope: Param,
    cache: Option<Tensor>,
}

pub const PRELU_INIT: f32 = 0.25;

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        PRelu {
            slope: Param::new(format!("{name}.slope"), Tensor::full(&[channels], PRELU_INIT)),
            cache: None,
        }
    }

    fn plane(x: &Tensor) -> Result<(usize, usize, usize)> {
        match *x.shape() {
            [n, c, h, w] => Ok((n, c, h * w)),
            [n, c] => Ok((n, c, 1)),
            _ => Err(Error::shape("(N, C, H, W) or (N, C)", format!("{:?}", x.shape()))),
        }
    }
}

impl Layer for PRelu {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, hw) = Self::plane(x)?;
        if c != self.slope.numel() {
            return Err(Error::shape(
                format!("{} channels", self.slope.numel()),
                format!("{:?}", x.shape()),
            ));
        }
        let mut out = x.clone();
        let a = self.slope.value.data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= a[(i / hw) % c];
            }
        }
        let _ = n;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_cache(&mut self.cache, "prelu")?;
        grad.ensure_shape(x.shape())?;
        let (_, c, hw) = Self::plane(&x)?;
        let mut gx = grad.clone();
        let a = self.slope.value.data().to_vec();
        let ga = self.slope.grad.data_mut();
        for (i, (g, &xv)) in gx.data_mut().iter_mut().zip(x.data()).enumerate() {
            if xv <= 0.0 {
                let ch = (i / hw) % c;
                ga[ch] += *g * xv;
                *g *= a[ch];
            }
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.slope]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.slope]
    }
}

#[derive(Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(x.map(|v| v.max(0.0)))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_cache(&mut self.cache, "relu")?;
        grad.ensure_shape(x.shape())?;
        let mut gx = grad.clone();
        for (g, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
            if xv <= 0.0 {
                *g = 0.0;
            }
        }
        Ok(gx)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = x.map(sigmoid);
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = take_cache(&mut self.cache, "sigmoid")?;
        grad.ensure_shape(y.shape())?;
        let mut gx = grad.clone();
        for (g, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
            *g *= yv * (1.0 - yv);
        }
        Ok(gx)
    }
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    training: bool,
    cache: Option<BnCache>,
}

#[derive(Debug)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            training: true,
            cache: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.numel() {
            return Err(Error::shape(
                format!("{} channels", self.gamma.numel()),
                format!("{:?}", x.shape()),
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        if self.training {
            for ch in 0..c {
                let mut s = 0.0f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    for &v in &x.data()[((b * c + ch) * hw)..][..hw] {
                        s += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let mu = s / m;
                let vr = (sq / m - mu * mu).max(0.0);
                mean[ch] = mu as f32;
                var[ch] = vr as f32;
                let unbiased = if m > 1.0 { vr * m / (m - 1.0) } else { vr };
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mu as f32;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased as f32;
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = x.clone();
        let mut out = x.clone();
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for (i, (xh, o)) in x_hat.data_mut().iter_mut().zip(out.data_mut()).enumerate() {
            let ch = (i / hw) % c;
            *xh = (*xh - mean[ch]) * inv_std[ch];
            *o = gamma[ch] * *xh + beta[ch];
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            batch_stats: self.training,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = take_cache(&mut self.cache, "batchnorm")?;
        let (n, c, h, w) = cache.x_hat.dims4()?;
        grad.ensure_shape(cache.x_hat.shape())?;
        let hw = h * w;
        let m = (n * hw) as f32;
        let mut sum_g = vec![0.0f32; c];
        let mut sum_gx = vec![0.0f32; c];
        for (i, (&g, &xh)) in grad.data().iter().zip(cache.x_hat.data()).enumerate() {
            let ch = (i / hw) % c;
            sum_g[ch] += g;
            sum_gx[ch] += g * xh;
        }
        for ch in 0..c {
            self.beta.grad.data_mut()[ch] += sum_g[ch];
            self.gamma.grad.data_mut()[ch] += sum_gx[ch];
        }
        let gamma = self.gamma.value.data();
        let mut gx = grad.clone();
        for (i, (g, &xh)) in gx.data_mut().iter_mut().zip(cache.x_hat.data()).enumerate() {
            let ch = (i / hw) % c;
            let scale = gamma[ch] * cache.inv_std[ch];
            *g = if cache.batch_stats {
                scale / m * (m * *g - sum_g[ch] - xh * sum_gx[ch])
            } else {
                scale * *g
            };
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }
}

/// Sub-pixel rearrangement `(N, C*r*r, H, W) -> (N, C, r*H, r*W)`.
#[derive(Debug)]
pub struct PixelShuffle {
    pub factor: usize,
    in_shape: Option<Vec<usize>>,
}

impl PixelShuffle {
    pub fn new(factor: usize) -> Self {
        PixelShuffle {
            factor,
            in_shape: None,
        }
    }

    /// Maps each output index to its source index in the input.
    fn for_each_pair(&self, n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
        let r = self.factor;
        let (oh, ow) = (h * r, w * r);
        for b in 0..n {
            for co in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let ci = co * r * r + (oy % r) * r + (ox % r);
                        let src = ((b * c * r * r + ci) * h + oy / r) * w + ox / r;
                        let dst = ((b * c + co) * oh + oy) * ow + ox;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

impl Layer for PixelShuffle {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, cr, h, w) = x.dims4()?;
        let r2 = self.factor * self.factor;
        if cr % r2 != 0 {
            return Err(Error::shape(
                format!("channels divisible by {r2}"),
                format!("{:?}", x.shape()),
            ));
        }
        let c = cr / r2;
        let mut out = Tensor::zeros(&[n, c, h * self.factor, w * self.factor]);
        let (src, dst) = (x.data(), out.data_mut());
        self.for_each_pair(n, c, h, w, |d, s| dst[d] = src[s]);
        self.in_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = cached(&self.in_shape, "pixelshuffle")?.clone();
        let (n, cr, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let c = cr / (self.factor * self.factor);
        grad.ensure_shape(&[n, c, h * self.factor, w * self.factor])?;
        let mut gx = Tensor::zeros(&shape);
        let (g, dst) = (grad.data(), gx.data_mut());
        self.for_each_pair(n, c, h, w, |d, s| dst[s] = g[d]);
        Ok(gx)
    }
}

/// `(N, C, H, W) -> (N, C)` spatial mean.
#[derive(Debug, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        self.in_shape = Some(x.shape().to_vec());
        Tensor::from_vec(&[n, c], data)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = cached(&self.in_shape, "gap")?.clone();
        let hw = shape[2] * shape[3];
        grad.ensure_shape(&shape[..2])?;
        let mut gx = Tensor::zeros(&shape);
        for (plane, &g) in gx.data_mut().chunks_mut(hw).zip(grad.data()) {
            plane.iter_mut().for_each(|v| *v = g / hw as f32);
        }
        Ok(gx)
    }
}

/// `(N, C, H, W) -> (N, C*H*W)`.
#[derive(Debug, Default)]
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        self.in_shape = Some(x.shape().to_vec());
        x.clone().reshape(&[n, c * h * w])
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = cached(&self.in_shape, "flatten")?.clone();
        grad.clone().reshape(&shape)
    }
}

/// Elementwise sum of branch outputs; the gradient of the sum flows to every branch unchanged.
pub fn add_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("at least one operand", "none"))?;
    let mut out = (*first).clone();
    for p in &parts[1..] {
        out.add_assign(p)?;
    }
    Ok(out)
}

pub fn add_backward(grad: &Tensor, arity: usize) -> Vec<Tensor> {
    vec![grad.clone(); arity]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_all_ones_kernel_on_constant_input() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            groups: 1,
        };
        let mut conv = Conv2d::new("c", g, false, &mut rng()).unwrap();
        conv.weight.value.fill(1.0);
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let y = conv.forward(&x).unwrap();
        let d = y.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[4], 4.0);
        assert_eq!(d[2], 6.0);
        assert_eq!(d[12], 9.0);
        assert_eq!(d[24], 4.0);
    }

    #[test]
    fn kernel_wider_than_input_matches_padded_sum() {
        for (size, stride) in [(1, 1), (2, 1), (2, 2), (3, 2)] {
            let g = ConvGeometry { in_channels: 2, out_channels: 3, kernel: 7, stride, groups: 1 };
            let mut conv = Conv2d::new("c", g, false, &mut rng()).unwrap();
            let x = Tensor::randn(&[1, 2, size, size], 1.0, &mut rng());
            let y = conv.forward(&x).unwrap();
            let (oh, _) = g.output_hw(size, size);
            let w = conv.weight.value.data();
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..oh {
                        let mut acc = 0.0f32;
                        for ci in 0..2 {
                            for ky in 0..7 {
                                for kx in 0..7 {
                                    let iy = (oy * stride + ky) as isize - 3;
                                    let ix = (ox * stride + kx) as isize - 3;
                                    if (0..size as isize).contains(&iy) && (0..size as isize).contains(&ix) {
                                        let xv = x.data()[(ci * size + iy as usize) * size + ix as usize];
                                        acc += w[((co * 2 + ci) * 7 + ky) * 7 + kx] * xv;
                                    }
                                }
                            }
                        }
                        let got = y.data()[(co * oh + oy) * oh + ox];
                        assert!((got - acc).abs() < 1e-5, "size {size} stride {stride}: {got} vs {acc}");
                    }
                }
            }
            conv.backward(&Tensor::full(y.shape(), 1.0)).unwrap();
        }
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        for k in [1, 3, 5, 7] {
            let g = ConvGeometry {
                in_channels: 4,
                out_channels: 8,
                kernel: k,
                stride: 2,
                groups: 4,
            };
            assert_eq!(g.output_hw(8, 6), (4, 3));
        }
    }

    #[test]
    fn pixel_shuffle_interleaves_channel_planes() {
        let mut data = Vec::new();
        for c in 0..4 {
            data.extend(std::iter::repeat_n(c as f32, 9));
        }
        let x = Tensor::from_vec(&[1, 4, 3, 3], data).unwrap();
        let y = PixelShuffle::new(2).forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        for oy in 0..6 {
            for ox in 0..6 {
                let expected = ((oy % 2) * 2 + ox % 2) as f32;
                assert_eq!(y.data()[oy * 6 + ox], expected);
            }
        }
    }

    #[test]
    fn identity_is_bitwise() {
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng());
        let mut id = Identity::default();
        assert_eq!(id.forward(&x).unwrap(), x);
        assert_eq!(id.backward(&x).unwrap(), x);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let g = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(Relu::default().backward(&g), Err(Error::State(_))));
        assert!(matches!(
            BatchNorm2d::new("bn", 1).backward(&g),
            Err(Error::State(_))
        ));
        assert!(matches!(PixelShuffle::new(2).backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn batchnorm_inference_with_unit_stats_is_identity() {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.eps = 0.0;
        bn.set_training(false);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng());
        assert_eq!(bn.forward(&x).unwrap(), x);
    }

    #[test]
    fn prelu_with_unit_slope_is_identity() {
        let mut p = PRelu::new("p", 3);
        p.slope.value.fill(1.0);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng());
        assert_eq!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn add_backward_copies_upstream() {
        let g = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng());
        for part in add_backward(&g, 3) {
            assert_eq!(part, g);
        }
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let g = ConvGeometry {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            groups: 1,
        };
        let mut conv = Conv2d::new("c", g, true, &mut rng()).unwrap();
        let err = conv.forward(&Tensor::zeros(&[1, 2, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
