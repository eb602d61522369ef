//! Training and evaluation loops: L1 distortion training scored by PSNR,
//! and adversarial fine-tuning scored by a frozen-feature distance.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pair_batch, sample_patch_batch, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::modelbuilder::{DiscriminatorNet, FrozenExtractor, GeneratorNet};
use crate::tensorkit::{AdamState, Layer, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Smallest argument passed to a logarithm in the adversarial losses.
pub const LOG_FLOOR: f64 = 1e-12;
/// Epochs considered when picking the GAN stage's result.
pub const SMOOTHING_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub lr_patch: usize,
    pub lr: f64,
    /// The learning rate drops to `lr_after` from this epoch on.
    pub lr_decay_epoch: usize,
    pub lr_after: f64,
    pub augment: bool,
    pub seed: u64,
}

impl DistortionConfig {
    pub fn proxy() -> Self {
        DistortionConfig {
            epochs: 50,
            steps_per_epoch: 1,
            batch: 64,
            lr_patch: 12,
            lr: 1e-4,
            lr_decay_epoch: 200,
            lr_after: 5e-5,
            augment: true,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        DistortionConfig { epochs: 450, batch: 16, lr_patch: 48, ..Self::proxy() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr_after
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr_patch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch, lr_patch and steps_per_epoch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self::proxy()
    }
}

/// Weights of the generator's composite loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.01, lambda: 1.0, gamma: 0.005 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    /// HR patch side; must be a multiple of 32 for the discriminator.
    pub patch: usize,
    pub weights: LossWeights,
    /// Extractor depth used by the feature loss and metric (2 proxy, 3 full).
    pub feature_depth: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_after: f64,
    pub augment: bool,
    pub seed: u64,
}

impl GanConfig {
    pub fn proxy() -> Self {
        GanConfig {
            epochs: 10,
            steps_per_epoch: 1,
            batch: 16,
            patch: 32,
            weights: LossWeights::default(),
            feature_depth: 2,
            d_steps: 1,
            g_lr: 1e-4,
            d_lr: 1e-4,
            lr_decay_epoch: 200,
            lr_after: 5e-5,
            augment: true,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        GanConfig { epochs: 450, patch: 64, feature_depth: 3, ..Self::proxy() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if !(w.alpha > 0.0 && w.lambda > 0.0 && w.gamma > 0.0) {
            return Err(Error::Config("loss weights alpha, lambda, gamma must be positive".into()));
        }
        self.validate_loops()
    }

    /// Checks everything except loss-weight positivity (ablations zero them).
    pub fn validate_loops(&self) -> Result<()> {
        if self.batch == 0 || self.steps_per_epoch == 0 || self.d_steps == 0 {
            return Err(Error::Config("batch, steps_per_epoch and d_steps must be positive".into()));
        }
        if !(1..=3).contains(&self.feature_depth) {
            return Err(Error::Config("feature_depth must be 1, 2 or 3".into()));
        }
        Ok(())
    }
}

impl Default for GanConfig {
    fn default() -> Self {
        Self::proxy()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    /// Peak signal-to-noise ratio in dB; higher is better.
    Psnr,
    /// Frozen-feature distance; lower is better.
    FeatDist,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feat_dist: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricName,
    pub value: f64,
    pub trace: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    Ok(())
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut sum = 0f64;
    let mut grad = Tensor::zeros(pred.shape());
    let inv = (1.0 / n) as f32;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d.abs() as f64;
        *g = if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut sum = 0f64;
    let mut grad = Tensor::zeros(pred.shape());
    let k = (2.0 / n) as f32;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += (d as f64) * (d as f64);
        *g = k * d;
    }
    Ok((sum / n, grad))
}

/// PSNR of `(N, C, H, W)` batches after dropping `shave` border pixels.
pub fn psnr(pred: &Tensor, target: &Tensor, range: f64, shave: usize) -> Result<f64> {
    same_shape(pred, target)?;
    let (n, c, h, w) = pred.dims4()?;
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::shape(format!("H, W > {}", 2 * shave), format!("{h}x{w}")));
    }
    let mut sum = 0f64;
    let mut count = 0usize;
    for plane in 0..n * c {
        for y in shave..h - shave {
            let off = (plane * h + y) * w;
            for x in shave..w - shave {
                let d = (pred.data()[off + x] - target.data()[off + x]) as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP))
}

/// `-log(sigmoid(x))` evaluated stably, with its argument floored at
/// [`LOG_FLOOR`]. Returns the value and its derivative in `x`.
pub fn neg_log_sigmoid(x: f64) -> (f64, f64) {
    let v = x.min(0.0) - (-x.abs()).exp().ln_1p();
    let floor = LOG_FLOOR.ln();
    if v < floor {
        (-floor, 0.0)
    } else {
        (-v, -(1.0 - sigmoid_f64(x)))
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discriminator loss `-log s(real) - log(1 - s(fake))`, batch-averaged per
/// term, with gradients for both logit tensors.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> (f64, Tensor, Tensor) {
    let nr = real_logits.len().max(1) as f64;
    let nf = fake_logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut gr = Tensor::zeros(real_logits.shape());
    let mut gf = Tensor::zeros(fake_logits.shape());
    for (g, &l) in gr.data_mut().iter_mut().zip(real_logits.data()) {
        let (v, d) = neg_log_sigmoid(l as f64);
        loss += v / nr;
        *g = (d / nr) as f32;
    }
    for (g, &l) in gf.data_mut().iter_mut().zip(fake_logits.data()) {
        // -log(1 - s(x)) = -log s(-x)
        let (v, d) = neg_log_sigmoid(-(l as f64));
        loss += v / nf;
        *g = (-d / nf) as f32;
    }
    (loss, gr, gf)
}

/// Components of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub l1: f64,
    pub feature: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Squared feature difference through the extractor and its gradient with
/// respect to `sr`.
pub fn feature_loss(sr: &Tensor, hr: &Tensor, phi: &mut FrozenExtractor, depth: usize) -> Result<(f64, Tensor)> {
    same_shape(sr, hr)?;
    let target = phi.features(hr, depth)?;
    let feats = phi.features(sr, depth)?;
    let (loss, g) = mse_loss(&feats, &target)?;
    Ok((loss, phi.backward(&g)?))
}

/// Generator objective `alpha*L1 + lambda*L_feat + gamma*L_adv` and its
/// gradient with respect to `sr`. Discriminator gradients produced along
/// the way are discarded.
pub fn generator_objective(
    sr: &Tensor,
    hr: &Tensor,
    d: &mut DiscriminatorNet,
    phi: &mut FrozenExtractor,
    weights: LossWeights,
    depth: usize,
) -> Result<(GanLosses, Tensor)> {
    let (l1, g_l1) = l1_loss(sr, hr)?;
    let (feature, g_feat) = feature_loss(sr, hr, phi, depth)?;
    let logits = d.forward(sr)?;
    let nb = logits.len().max(1) as f64;
    let mut adversarial = 0.0;
    let mut g_logits = Tensor::zeros(logits.shape());
    for (g, &l) in g_logits.data_mut().iter_mut().zip(logits.data()) {
        let (v, dv) = neg_log_sigmoid(l as f64);
        adversarial += v / nb;
        *g = (dv / nb) as f32;
    }
    let g_adv = d.backward(&g_logits)?;
    d.zero_grad();
    let mut grad = g_l1.scale(weights.alpha as f32);
    grad.add_assign(&g_feat.scale(weights.lambda as f32))?;
    grad.add_assign(&g_adv.scale(weights.gamma as f32))?;
    let total = weights.alpha * l1 + weights.lambda * feature + weights.gamma * adversarial;
    Ok((GanLosses { l1, feature, adversarial, total }, grad))
}

/// Loss values only; see [`generator_objective`].
pub fn gan_losses(
    sr: &Tensor,
    hr: &Tensor,
    d: &mut DiscriminatorNet,
    phi: &mut FrozenExtractor,
    weights: LossWeights,
    depth: usize,
) -> Result<GanLosses> {
    generator_objective(sr, hr, d, phi, weights, depth).map(|(l, _)| l)
}

fn normalize_channels(f: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = f.dims4()?;
    let hw = h * w;
    let mut out = f.clone();
    let d = out.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let norm = (0..c)
                .map(|ch| {
                    let v = d[(b * c + ch) * hw + p] as f64;
                    v * v
                })
                .sum::<f64>()
                .sqrt()
                + 1e-10;
            for ch in 0..c {
                let i = (b * c + ch) * hw + p;
                d[i] = (d[i] as f64 / norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Perceptual distance: mean squared difference of channel-normalized
/// extractor features over whole images (no border shaving).
pub fn feature_distance(a: &Tensor, b: &Tensor, phi: &mut FrozenExtractor, depth: usize) -> Result<f64> {
    same_shape(a, b)?;
    let fa = normalize_channels(&phi.features(a, depth)?)?;
    let fb = normalize_channels(&phi.features(b, depth)?)?;
    let n = fa.len().max(1) as f64;
    Ok(fa
        .data()
        .iter()
        .zip(fb.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Best value over the last `window` entries of a per-epoch trace.
pub fn windowed_best(values: &[f64], window: usize, lower_is_better: bool) -> Option<f64> {
    let start = values.len().saturating_sub(window.max(1));
    let tail = values[start..].iter().copied();
    if lower_is_better {
        tail.reduce(f64::min)
    } else {
        tail.reduce(f64::max)
    }
}

fn eval_pairs(ds: &Dataset) -> &[ImagePair] {
    if ds.val.is_empty() {
        &ds.train
    } else {
        &ds.val
    }
}

/// Mean validation PSNR, shaving `scale` border pixels.
pub fn validate_psnr(gen: &mut GeneratorNet, ds: &Dataset) -> Result<f64> {
    let pairs = eval_pairs(ds);
    let mut total = 0.0;
    for p in pairs {
        let (lr, hr) = pair_batch(p, ds.mean_rgb)?;
        let sr = gen.forward(&lr)?;
        if !sr.is_finite() {
            return Err(Error::Diverged("non-finite generator output".into()));
        }
        total += psnr(&sr, &hr, 1.0, ds.scale)?;
    }
    Ok(total / pairs.len() as f64)
}

fn add_mean(t: &Tensor, mean: [f32; 3]) -> Tensor {
    let plane = t.len() / (t.shape()[0] * 3).max(1);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += mean[(i / plane) % 3];
    }
    out
}

/// Mean validation feature distance on whole images in `[0, 1]` range.
pub fn validate_feature_distance(gen: &mut GeneratorNet, ds: &Dataset, phi: &mut FrozenExtractor, depth: usize) -> Result<f64> {
    let pairs = eval_pairs(ds);
    let mut total = 0.0;
    for p in pairs {
        let (lr, hr) = pair_batch(p, ds.mean_rgb)?;
        let sr = gen.forward(&lr)?;
        if !sr.is_finite() {
            return Err(Error::Diverged("non-finite generator output".into()));
        }
        total += feature_distance(&add_mean(&sr, ds.mean_rgb), &add_mean(&hr, ds.mean_rgb), phi, depth)?;
    }
    Ok(total / pairs.len() as f64)
}

fn write_trace(out: &mut Option<&mut dyn Write>, rec: &EpochRecord) -> Result<()> {
    if let Some(w) = out.as_mut() {
        let line = serde_json::to_string(rec).expect("trace record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("training trace", e))?;
    }
    Ok(())
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} became {v}")))
    }
}

fn adam(net: &mut dyn Layer, state: &mut AdamState, lr: f64) -> Result<()> {
    let mut params = net.params_mut();
    state.step(&mut params, lr as f32)
}

/// Trains with L1 and Adam; reports mean validation PSNR after the last
/// epoch. Non-finite losses surface as [`Error::Diverged`].
pub fn train_distortion(
    gen: &mut GeneratorNet,
    ds: &Dataset,
    cfg: &DistortionConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if gen.scale != ds.scale {
        return Err(Error::Config(format!("generator scale {} but dataset scale {}", gen.scale, ds.scale)));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let (lr, hr) = sample_patch_batch(&ds.train, ds.scale, cfg.batch, cfg.lr_patch, cfg.augment, ds.mean_rgb, &mut rng)?;
            gen.zero_grad();
            let sr = gen.forward(&lr)?;
            let (loss, g) = l1_loss(&sr, &hr)?;
            check_finite("L1 loss", loss)?;
            gen.backward(&g)?;
            adam(gen, &mut opt, cfg.lr_at(epoch))?;
            loss_sum += loss;
        }
        let rec = EpochRecord { epoch: epoch + 1, loss: loss_sum / cfg.steps_per_epoch as f64, ..Default::default() };
        write_trace(&mut trace, &rec)?;
        records.push(rec);
    }
    let value = validate_psnr(gen, ds)?;
    check_finite("validation PSNR", value)?;
    if let Some(last) = records.last_mut() {
        last.psnr = Some(value);
    }
    Ok(EvalReport {
        metric: MetricName::Psnr,
        value,
        trace: records,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// One discriminator update on `hr` versus detached `sr`; returns `L_D`.
pub fn discriminator_step(
    d: &mut DiscriminatorNet,
    opt: &mut AdamState,
    hr: &Tensor,
    sr: &Tensor,
    lr: f64,
) -> Result<f64> {
    let both = Tensor::concat_batch(&[hr, sr])?;
    d.zero_grad();
    let logits = d.forward(&both)?;
    let nb = hr.shape()[0];
    let (real, fake) = logits.split_batch(nb)?;
    let (loss, gr, gf) = discriminator_loss(&real, &fake);
    check_finite("discriminator loss", loss)?;
    let g = Tensor::concat_batch(&[&gr, &gf])?;
    d.backward(&g)?;
    adam(d, opt, lr)?;
    Ok(loss)
}

/// Fraction of held-out samples the discriminator classifies correctly
/// (logit > 0 means real), in evaluation mode.
pub fn discriminator_accuracy(d: &mut DiscriminatorNet, real: &Tensor, fake: &Tensor) -> Result<f64> {
    d.set_training(false);
    let r = d.forward(real);
    let f = d.forward(fake);
    d.set_training(true);
    let (r, f) = (r?, f?);
    let correct = r.data().iter().filter(|&&v| v > 0.0).count() + f.data().iter().filter(|&&v| v <= 0.0).count();
    Ok(correct as f64 / (r.len() + f.len()) as f64)
}

/// Adversarial fine-tuning: per batch one (or `d_steps`) discriminator
/// update followed by one generator update. Each epoch ends with a
/// validation pass; the reported value is the best feature distance over
/// the last three epochs.
pub fn train_gan(
    gen: &mut GeneratorNet,
    d: &mut DiscriminatorNet,
    phi: &mut FrozenExtractor,
    ds: &Dataset,
    cfg: &GanConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<EvalReport> {
    cfg.validate_loops()?;
    if cfg.patch % ds.scale != 0 || cfg.patch != d.patch {
        return Err(Error::Config(format!(
            "GAN patch {} must match the discriminator ({}) and be divisible by scale {}",
            cfg.patch, d.patch, ds.scale
        )));
    }
    let start = Instant::now();
    let lr_patch = cfg.patch / ds.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g_opt = AdamState::new();
    let mut d_opt = AdamState::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let lr_at = |epoch: usize, base: f64| if epoch >= cfg.lr_decay_epoch { cfg.lr_after.min(base) } else { base };
    for epoch in 0..cfg.epochs {
        let (mut g_sum, mut d_sum) = (0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            let (lr, hr) = sample_patch_batch(&ds.train, ds.scale, cfg.batch, lr_patch, cfg.augment, ds.mean_rgb, &mut rng)?;
            gen.zero_grad();
            let sr = gen.forward(&lr)?;
            if !sr.is_finite() {
                return Err(Error::Diverged("non-finite generator output".into()));
            }
            for _ in 0..cfg.d_steps {
                d_sum += discriminator_step(d, &mut d_opt, &hr, &sr, lr_at(epoch, cfg.d_lr))? / cfg.d_steps as f64;
            }
            let (losses, g) = generator_objective(&sr, &hr, d, phi, cfg.weights, cfg.feature_depth)?;
            check_finite("generator loss", losses.total)?;
            gen.backward(&g)?;
            adam(gen, &mut g_opt, lr_at(epoch, cfg.g_lr))?;
            g_sum += losses.total;
        }
        let steps = cfg.steps_per_epoch as f64;
        let feat = validate_feature_distance(gen, ds, phi, cfg.feature_depth)?;
        let ps = validate_psnr(gen, ds)?;
        check_finite("validation feature distance", feat)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: g_sum / steps,
            d_loss: Some(d_sum / steps),
            psnr: Some(ps),
            feat_dist: Some(feat),
        };
        write_trace(&mut trace, &rec)?;
        records.push(rec);
    }
    let series: Vec<f64> = records.iter().filter_map(|r| r.feat_dist).collect();
    let value = match windowed_best(&series, SMOOTHING_WINDOW, true) {
        Some(v) => v,
        None => validate_feature_distance(gen, ds, phi, cfg.feature_depth)?,
    };
    Ok(EvalReport {
        metric: MetricName::FeatDist,
        value,
        trace: records,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
