//! Synthetic super-resolution data: procedural HR textures, bicubic LR
//! degradation, patch sampling with flip/rotate augmentation.
//!
//! Images are `(3, H, W)` tensors with values in `[0, 1]`. Batches are
//! `(B, 3, h, w)` with the dataset's mean RGB subtracted.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

/// Cubic convolution coefficient.
pub const BICUBIC_A: f64 = -0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hr: Tensor,
    pub lr: Tensor,
}

/// Relative weights of the procedural texture families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureMix {
    pub gradients: f64,
    pub checkers: f64,
    pub blobs: f64,
    pub noise: f64,
}

impl Default for TextureMix {
    fn default() -> Self {
        TextureMix { gradients: 1.0, checkers: 1.0, blobs: 1.0, noise: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count_train: usize,
    pub count_val: usize,
    /// HR image side length in pixels.
    pub image_size: usize,
    pub scale: usize,
    #[serde(default)]
    pub mix: TextureMix,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count_train: 32,
            count_val: 4,
            image_size: 48,
            scale: 2,
            mix: TextureMix::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.image_size == 0 || self.image_size % self.scale != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of scale {}",
                self.image_size, self.scale
            )));
        }
        if self.count_train == 0 {
            return Err(Error::Config("count_train must be at least 1".into()));
        }
        let m = self.mix;
        let w = [m.gradients, m.checkers, m.blobs, m.noise];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("texture mix weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count_train: usize,
    pub count_val: usize,
    pub image_size: usize,
    pub scale: usize,
    pub mean_rgb: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scale: usize,
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    /// Mean RGB over the training HR images.
    pub mean_rgb: [f32; 3],
    pub spec: Option<DatasetSpec>,
}

impl Dataset {
    /// Builds a dataset from existing pairs, computing the training mean.
    pub fn from_pairs(scale: usize, train: Vec<ImagePair>, val: Vec<ImagePair>) -> Self {
        let mean_rgb = mean_rgb(&train);
        Dataset { scale, train, val, mean_rgb, spec: None }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let (seed, image_size) = match &self.spec {
            Some(s) => (s.seed, s.image_size),
            None => (0, self.train.first().map_or(0, |p| p.hr.shape()[1])),
        };
        DatasetManifest {
            seed,
            count_train: self.train.len(),
            count_val: self.val.len(),
            image_size,
            scale: self.scale,
            mean_rgb: self.mean_rgb,
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn mean_rgb(pairs: &[ImagePair]) -> [f32; 3] {
    let mut sum = [0f64; 3];
    let mut count = 0usize;
    for p in pairs {
        let (_, h, w) = dims3(&p.hr).expect("pair images are (3, H, W)");
        for (c, s) in sum.iter_mut().enumerate() {
            *s += p.hr.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>();
        }
        count += h * w;
    }
    if count == 0 {
        return [0.0; 3];
    }
    sum.map(|s| (s / count as f64) as f32)
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("(C, H, W)", format!("{:?}", t.shape()))),
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Gradient,
    Checkers,
    Blobs,
    Noise,
}

fn pick_texture(mix: &TextureMix, rng: &mut ChaCha8Rng) -> Texture {
    let w = [mix.gradients, mix.checkers, mix.blobs, mix.noise];
    let mut r = rng.random_range(0.0..w.iter().sum::<f64>());
    for (i, &wi) in w.iter().enumerate() {
        if r < wi {
            return [Texture::Gradient, Texture::Checkers, Texture::Blobs, Texture::Noise][i];
        }
        r -= wi;
    }
    Texture::Noise
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Adds one texture layer with the given opacity onto `img` (3, s, s).
fn paint(img: &mut [f32], s: usize, tex: Texture, opacity: f32, rng: &mut ChaCha8Rng) {
    let plane = s * s;
    let mut layer = vec![0f32; 3 * plane];
    match tex {
        Texture::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let norm = (dx.abs() + dy.abs()) * s as f32;
            for y in 0..s {
                for x in 0..s {
                    let t = ((x as f32 * dx + y as f32 * dy) / norm + 0.5).clamp(0.0, 1.0);
                    for c in 0..3 {
                        layer[c * plane + y * s + x] = a[c] + t * (b[c] - a[c]);
                    }
                }
            }
        }
        Texture::Checkers => {
            let (a, b) = (color(rng), color(rng));
            let period = rng.random_range(3..=12usize);
            let (ox, oy) = (rng.random_range(0..period), rng.random_range(0..period));
            for y in 0..s {
                for x in 0..s {
                    let on = ((x + ox) / period + (y + oy) / period) % 2 == 0;
                    let col = if on { a } else { b };
                    for c in 0..3 {
                        layer[c * plane + y * s + x] = col[c];
                    }
                }
            }
        }
        Texture::Blobs => {
            let base = color(rng);
            for c in 0..3 {
                layer[c * plane..(c + 1) * plane].fill(base[c] * 0.5);
            }
            for _ in 0..rng.random_range(2..=6) {
                let col = color(rng);
                let (cx, cy) = (rng.random_range(0.0..s as f32), rng.random_range(0.0..s as f32));
                let sigma = rng.random_range(0.05..0.3) * s as f32;
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        for c in 0..3 {
                            layer[c * plane + y * s + x] += g * (col[c] - 0.5);
                        }
                    }
                }
            }
        }
        Texture::Noise => {
            let base = color(rng);
            for c in 0..3 {
                layer[c * plane..(c + 1) * plane].fill(base[c]);
            }
            let max_freq = 0.25f32;
            for _ in 0..8 {
                let (fx, fy) = (rng.random_range(-max_freq..max_freq), rng.random_range(-max_freq..max_freq));
                let phase = rng.random_range(0.0..std::f32::consts::TAU);
                let amp: [f32; 3] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
                for y in 0..s {
                    for x in 0..s {
                        let v = (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + phase).sin();
                        for c in 0..3 {
                            layer[c * plane + y * s + x] += amp[c] * v;
                        }
                    }
                }
            }
        }
    }
    for (d, l) in img.iter_mut().zip(&layer) {
        *d = *d * (1.0 - opacity) + l * opacity;
    }
}

/// One procedural HR image; a pure function of `(seed, stream)`.
pub fn procedural_image(size: usize, mix: &TextureMix, seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut img = vec![0f32; 3 * size * size];
    let layers = rng.random_range(1..=3);
    for l in 0..layers {
        let tex = pick_texture(mix, &mut rng);
        let opacity = if l == 0 { 1.0 } else { rng.random_range(0.3..0.7) };
        paint(&mut img, size, tex, opacity, &mut rng);
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[3, size, size], img).expect("length matches shape")
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |prefix: &str, count: usize, offset: u64| -> Result<Vec<ImagePair>> {
        (0..count)
            .map(|i| {
                let hr = procedural_image(spec.image_size, &spec.mix, spec.seed, offset + i as u64);
                let lr = bicubic_downsample(&hr, spec.scale)?;
                Ok(ImagePair { id: format!("{prefix}-{i:04}"), hr, lr })
            })
            .collect()
    };
    let train = make("train", spec.count_train, 0)?;
    let val = make("val", spec.count_val, spec.count_train as u64)?;
    let mut ds = Dataset::from_pairs(spec.scale, train, val);
    ds.spec = Some(spec.clone());
    Ok(ds)
}

/// Cubic convolution kernel with coefficient [`BICUBIC_A`].
pub fn cubic_kernel(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Taps `(source index, weight)` for each output sample along one axis.
fn axis_taps(n_in: usize, scale: usize) -> Vec<Vec<(usize, f32)>> {
    (0..n_in / scale)
        .map(|i| {
            let x = (i as f64 + 0.5) * scale as f64 - 0.5;
            let base = x.floor() as isize;
            (base - 1..=base + 2)
                .map(|j| (reflect(j, n_in), cubic_kernel(x - j as f64) as f32))
                .filter(|(_, w)| *w != 0.0)
                .collect()
        })
        .collect()
}

/// Plain separable bicubic downsampling of a `(C, H, W)` image by `scale`.
pub fn bicubic_downsample(hr: &Tensor, scale: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(hr)?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!("H and W divisible by {scale}"), format!("{h}x{w}")));
    }
    let (oh, ow) = (h / scale, w / scale);
    let tx = axis_taps(w, scale);
    let ty = axis_taps(h, scale);
    let mut rows = vec![0f32; c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            let src = &hr.data()[(ch * h + y) * w..][..w];
            for (x, taps) in tx.iter().enumerate() {
                rows[(ch * h + y) * ow + x] = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
            }
        }
    }
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = taps.iter().map(|&(j, wt)| wt * rows[(ch * h + j) * ow + x]).sum();
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// An element of the dihedral group of the square: rotate by
/// `rot * 90` degrees counter-clockwise after an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct D4 {
    pub flip: bool,
    pub rot: u8,
}

impl D4 {
    pub const IDENTITY: D4 = D4 { flip: false, rot: 0 };

    pub fn all() -> [D4; 8] {
        let mut out = [D4::IDENTITY; 8];
        for (i, o) in out.iter_mut().enumerate() {
            *o = D4 { flip: i >= 4, rot: (i % 4) as u8 };
        }
        out
    }

    pub fn random(rng: &mut impl Rng) -> D4 {
        D4::all()[rng.random_range(0..8)]
    }

    /// Maps output coordinates of an `n x n` image to source coordinates:
    /// undo the rotation, then the flip.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        for _ in 0..self.rot {
            (y, x) = (x, n - 1 - y);
        }
        if self.flip {
            x = n - 1 - x;
        }
        (y, x)
    }

    /// Applies the transform to a square `(C, n, n)` image.
    pub fn apply(self, img: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(img)?;
        if h != w {
            return Err(Error::shape("square image", format!("{h}x{w}")));
        }
        let n = h;
        let mut out = Tensor::zeros(img.shape());
        let src = img.data();
        let dst = out.data_mut();
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(y, x, n);
                for ch in 0..c {
                    dst[(ch * n + y) * n + x] = src[(ch * n + sy) * n + sx];
                }
            }
        }
        Ok(out)
    }

    /// `self` applied after `first`.
    pub fn compose(self, first: D4) -> D4 {
        // F R^k = R^-k F
        let rot = if self.flip {
            (4 + self.rot as i32 - first.rot as i32).rem_euclid(4)
        } else {
            (self.rot as i32 + first.rot as i32).rem_euclid(4)
        };
        D4 { flip: self.flip ^ first.flip, rot: rot as u8 }
    }

    pub fn inverse(self) -> D4 {
        if self.flip {
            self
        } else {
            D4 { flip: false, rot: (4 - self.rot) % 4 }
        }
    }
}

fn crop(img: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let (c, h, w) = dims3(img).expect("pair images are (3, H, W)");
    let _ = h;
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            out.extend_from_slice(&img.data()[(ch * h + y) * w + x0..][..size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out).expect("crop length matches")
}

fn subtract_mean(img: &mut Tensor, mean: [f32; 3]) {
    let plane = img.len() / 3;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v -= mean[i / plane];
    }
}

/// Random co-located LR/HR patches as `(B, 3, p, p)` and `(B, 3, p*s, p*s)`.
pub fn sample_patch_batch(
    pairs: &[ImagePair],
    scale: usize,
    batch: usize,
    lr_patch: usize,
    augment: bool,
    mean: [f32; 3],
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    if pairs.is_empty() {
        return Err(Error::Config("no image pairs to sample from".into()));
    }
    let hp = lr_patch * scale;
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let (_, lh, lw) = dims3(&pair.lr)?;
        if lr_patch == 0 || lr_patch > lh || lr_patch > lw {
            return Err(Error::shape(format!("LR patch <= {lh}x{lw}"), lr_patch.to_string()));
        }
        let y = rng.random_range(0..=lh - lr_patch);
        let x = rng.random_range(0..=lw - lr_patch);
        let mut lr = crop(&pair.lr, y, x, lr_patch);
        let mut hr = crop(&pair.hr, y * scale, x * scale, hp);
        if augment {
            let t = D4::random(rng);
            lr = t.apply(&lr)?;
            hr = t.apply(&hr)?;
        }
        subtract_mean(&mut lr, mean);
        subtract_mean(&mut hr, mean);
        lrs.push(lr.reshape(&[1, 3, lr_patch, lr_patch])?);
        hrs.push(hr.reshape(&[1, 3, hp, hp])?);
    }
    let lr = Tensor::concat_batch(&lrs.iter().collect::<Vec<_>>())?;
    let hr = Tensor::concat_batch(&hrs.iter().collect::<Vec<_>>())?;
    Ok((lr, hr))
}

/// A whole pair as a single-item batch, mean subtracted.
pub fn pair_batch(pair: &ImagePair, mean: [f32; 3]) -> Result<(Tensor, Tensor)> {
    let mut lr = pair.lr.clone();
    let mut hr = pair.hr.clone();
    subtract_mean(&mut lr, mean);
    subtract_mean(&mut hr, mean);
    let (_, lh, lw) = dims3(&lr)?;
    let (_, hh, hw) = dims3(&hr)?;
    Ok((lr.reshape(&[1, 3, lh, lw])?, hr.reshape(&[1, 3, hh, hw])?))
}

/// Reads every `*.png` in `dir` (sorted by name) as an HR image, cropping
/// to a multiple of `scale`, and derives its LR counterpart.
pub fn load_png_folder(dir: &Path, scale: usize) -> Result<Vec<ImagePair>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let hr = read_png(p, scale)?;
            let lr = bicubic_downsample(&hr, scale)?;
            let id = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok(ImagePair { id, hr, lr })
        })
        .collect()
}

/// Loads an 8-bit RGB PNG as `(3, H, W)`, cropped to multiples of `multiple`.
pub fn read_png(path: &Path, multiple: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .to_rgb8();
    let m = multiple.max(1);
    let (w, h) = (img.width() as usize / m * m, img.height() as usize / m * m);
    if w == 0 || h == 0 {
        return Err(Error::shape(format!("image at least {m}x{m}"), format!("{}x{}", img.width(), img.height())));
    }
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a `(3, H, W)` image in `[0, 1]` as an 8-bit PNG.
pub fn write_png(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = dims3(img)?;
    if c != 3 {
        return Err(Error::shape("3 channels", c.to_string()));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|ch| (img.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec { count_train: 8, count_val: 2, image_size: 32, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let a = generate_dataset(&spec()).unwrap();
        let b = generate_dataset(&spec()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let ids: std::collections::BTreeSet<_> = a.train.iter().chain(&a.val).map(|p| p.id.clone()).collect();
        assert_eq!(ids.len(), 10);
        for p in a.train.iter().chain(&a.val) {
            assert!(p.hr.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::full(&[3, 16, 12], 0.37);
        for s in [1, 2, 4] {
            let lr = bicubic_downsample(&img, s).unwrap();
            assert!(lr.data().iter().all(|v| (v - 0.37).abs() <= 1e-6));
        }
    }

    #[test]
    fn kernel_weights_at_half_offsets() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(0.5), 0.5625);
        assert_eq!(cubic_kernel(1.5), -0.0625);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn d4_group_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[3, 5, 5], 1.0, &mut rng);
        for a in D4::all() {
            assert_eq!(a.inverse().apply(&a.apply(&img).unwrap()).unwrap(), img);
            for b in D4::all() {
                let two = a.apply(&b.apply(&img).unwrap()).unwrap();
                assert_eq!(two, a.compose(b).apply(&img).unwrap(), "{a:?} after {b:?}");
            }
        }
        let distinct: std::collections::HashSet<Vec<u32>> = D4::all()
            .iter()
            .map(|t| t.apply(&img).unwrap().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn patch_batch_is_reproducible() {
        let ds = generate_dataset(&spec()).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_patch_batch(&ds.train, 2, 4, 6, false, ds.mean_rgb, &mut rng).unwrap()
        };
        let (lr, hr) = draw(3);
        assert_eq!(lr.shape(), &[4, 3, 6, 6]);
        assert_eq!(hr.shape(), &[4, 3, 12, 12]);
        assert_eq!(draw(3), (lr, hr));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_image(16, &TextureMix::default(), 1, 0);
        write_png(&img, &dir.path().join("a.png")).unwrap();
        let pairs = load_png_folder(dir.path(), 2).unwrap();
        assert_eq!(pairs.len(), 1);
        let back = &pairs[0].hr;
        let err = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
        assert_eq!(pairs[0].lr.shape(), &[3, 8, 8]);
    }
}
