//! Composite blocks used as searchable operations.

use rand::Rng;

use super::layers::{Conv2d, ConvGeometry, GlobalAvgPool, Layer, Linear, PRelu, Relu, Sigmoid};
use super::{Param, Tensor};
use crate::error::{Error, Result};

/// Channel reduction ratio of the squeeze/excitation paths.
pub const GATE_REDUCTION: usize = 4;

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1` projection.
#[derive(Debug)]
pub struct DepthwiseSeparable {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DepthwiseSeparable {
    pub fn new(name: &str, kernel: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DepthwiseSeparable {
            depthwise: Conv2d::new(
                &format!("{name}.dw"),
                ConvGeometry {
                    in_channels: cin,
                    out_channels: cin,
                    kernel,
                    stride: 1,
                    groups: cin,
                },
                true,
                rng,
            )?,
            pointwise: Conv2d::new(
                &format!("{name}.pw"),
                ConvGeometry {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 1,
                    stride: 1,
                    groups: 1,
                },
                true,
                rng,
            )?,
        })
    }

    pub fn with_spectral_norm(self, rng: &mut impl Rng) -> Self {
        DepthwiseSeparable {
            depthwise: self.depthwise.with_spectral_norm(rng),
            pointwise: self.pointwise.with_spectral_norm(rng),
        }
    }
}

impl Layer for DepthwiseSeparable {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.depthwise.forward(x)?;
        self.pointwise.forward(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.pointwise.backward(grad)?;
        self.depthwise.backward(&g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.depthwise.params();
        p.extend(self.pointwise.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.depthwise.params_mut();
        p.extend(self.pointwise.params_mut());
        p
    }

    fn set_training(&mut self, training: bool) {
        self.depthwise.set_training(training);
        self.pointwise.set_training(training);
    }
}

/// Inverted bottleneck: expand `1 x 1` to `e * cin`, PReLU, depthwise `k x k`,
/// PReLU, project `1 x 1` to `cout`. No internal residual.
#[derive(Debug)]
pub struct InvertedBottleneck {
    pub expand: Conv2d,
    pub act1: PRelu,
    pub depthwise: Conv2d,
    pub act2: PRelu,
    pub project: Conv2d,
}

impl InvertedBottleneck {
    pub fn new(
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = cin * expansion;
        let pw = |in_channels, out_channels| ConvGeometry {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            groups: 1,
        };
        Ok(InvertedBottleneck {
            expand: Conv2d::new(&format!("{name}.expand"), pw(cin, hidden), true, rng)?,
            act1: PRelu::new(&format!("{name}.act1"), hidden),
            depthwise: Conv2d::new(
                &format!("{name}.dw"),
                ConvGeometry {
                    in_channels: hidden,
                    out_channels: hidden,
                    kernel,
                    stride: 1,
                    groups: hidden,
                },
                true,
                rng,
            )?,
            act2: PRelu::new(&format!("{name}.act2"), hidden),
            project: Conv2d::new(&format!("{name}.project"), pw(hidden, cout), true, rng)?,
        })
    }

    pub fn with_spectral_norm(self, rng: &mut impl Rng) -> Self {
        InvertedBottleneck {
            expand: self.expand.with_spectral_norm(rng),
            depthwise: self.depthwise.with_spectral_norm(rng),
            project: self.project.with_spectral_norm(rng),
            ..self
        }
    }
}

impl Layer for InvertedBottleneck {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.expand.forward(x)?;
        let h = self.act1.forward(&h)?;
        let h = self.depthwise.forward(&h)?;
        let h = self.act2.forward(&h)?;
        self.project.forward(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.project.backward(grad)?;
        let g = self.act2.backward(&g)?;
        let g = self.depthwise.backward(&g)?;
        let g = self.act1.backward(&g)?;
        self.expand.backward(&g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.expand.params();
        p.extend(self.act1.params());
        p.extend(self.depthwise.params());
        p.extend(self.act2.params());
        p.extend(self.project.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.expand.params_mut();
        p.extend(self.act1.params_mut());
        p.extend(self.depthwise.params_mut());
        p.extend(self.act2.params_mut());
        p.extend(self.project.params_mut());
        p
    }

    fn set_training(&mut self, training: bool) {
        self.expand.set_training(training);
        self.depthwise.set_training(training);
        self.project.set_training(training);
    }
}

/// Squeeze-and-excitation style channel gate: global average pool, two
/// fully connected transforms (ratio 4, ReLU between), sigmoid, channelwise
/// rescale of the input. Serves both the SE and the channel-attention op.
#[derive(Debug)]
pub struct ChannelGate {
    pool: GlobalAvgPool,
    pub squeeze: Linear,
    relu: Relu,
    pub excite: Linear,
    sigmoid: Sigmoid,
    cache: Option<(Tensor, Tensor)>,
}

impl ChannelGate {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / GATE_REDUCTION).max(1);
        ChannelGate {
            pool: GlobalAvgPool::default(),
            squeeze: Linear::new(&format!("{name}.squeeze"), channels, hidden, rng),
            relu: Relu::default(),
            excite: Linear::new(&format!("{name}.excite"), hidden, channels, rng),
            sigmoid: Sigmoid::default(),
            cache: None,
        }
    }

    pub fn with_spectral_norm(self, rng: &mut impl Rng) -> Self {
        ChannelGate {
            squeeze: self.squeeze.with_spectral_norm(rng),
            excite: self.excite.with_spectral_norm(rng),
            ..self
        }
    }
}

impl Layer for ChannelGate {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let s = self.pool.forward(x)?;
        let s = self.squeeze.forward(&s)?;
        let s = self.relu.forward(&s)?;
        let s = self.excite.forward(&s)?;
        let gate = self.sigmoid.forward(&s)?;
        let hw = h * w;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= gate.data()[i / hw];
        }
        self.cache = Some((x.clone(), gate));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, gate) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("channel gate: backward called before forward".into()))?;
        grad.ensure_shape(x.shape())?;
        let (_, _, h, w) = x.dims4()?;
        let hw = h * w;
        let mut ggate = Tensor::zeros(gate.shape());
        let mut gx = grad.clone();
        for (i, (g, &xv)) in gx.data_mut().iter_mut().zip(x.data()).enumerate() {
            ggate.data_mut()[i / hw] += *g * xv;
            *g *= gate.data()[i / hw];
        }
        let g = self.sigmoid.backward(&ggate)?;
        let g = self.excite.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.squeeze.backward(&g)?;
        let g = self.pool.backward(&g)?;
        gx.add_assign(&g)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.squeeze.params();
        p.extend(self.excite.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.squeeze.params_mut();
        p.extend(self.excite.params_mut());
        p
    }

    fn set_training(&mut self, training: bool) {
        self.squeeze.set_training(training);
        self.excite.set_training(training);
    }
}
