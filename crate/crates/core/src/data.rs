//! Synthetic training data and the degradation operators used to build it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::Task;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

pub const SR_FACTOR: usize = 4;
pub const DENOISE_SIGMA: f64 = 25.0;
pub const MULTIFOCUS_SIGMA: f64 = 2.0;
pub const MULTIFOCUS_RADIUS: usize = 5;
const TEXTURE_AMPLITUDE: f64 = 0.03;
const BICUBIC_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GuidedSr,
    GuidedDenoise,
    #[serde(rename = "multifocus-fuse")]
    Multifocus,
}

impl DatasetKind {
    pub fn task(self) -> Task {
        match self {
            DatasetKind::GuidedSr | DatasetKind::GuidedDenoise => Task::Mir,
            DatasetKind::Multifocus => Task::Mif,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::GuidedSr => "guided-sr",
            DatasetKind::GuidedDenoise => "guided-denoise",
            DatasetKind::Multifocus => "multifocus-fuse",
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided-sr" => Ok(DatasetKind::GuidedSr),
            "guided-denoise" => Ok(DatasetKind::GuidedDenoise),
            "multifocus-fuse" | "multifocus" => Ok(DatasetKind::Multifocus),
            other => Err(crate::Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Input `x`, guidance or second source `y`, and target `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub z: Tensor<T>,
    pub kind: DatasetKind,
    pub warning: Option<String>,
}

impl<T: Real> SamplePair<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>, z: Tensor<T>, kind: DatasetKind) -> Result<Self> {
        let hw = |t: &Tensor<T>| (t.height(), t.width());
        ensure!(
            hw(&x) == hw(&y) && hw(&x) == hw(&z),
            "x, y, z differ in spatial size: {:?} {:?} {:?}",
            x.shape(),
            y.shape(),
            z.shape()
        );
        ensure!(x.channels() == z.channels(), "x and z differ in channel count");
        Ok(Self { x, y, z, kind, warning: None })
    }

    pub fn cast<U: Real>(&self) -> SamplePair<U> {
        SamplePair {
            x: self.x.cast(),
            y: self.y.cast(),
            z: self.z.cast(),
            kind: self.kind,
            warning: self.warning.clone(),
        }
    }
}

/// Positive rational resampling factor `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub num: usize,
    pub den: usize,
}

impl Scale {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        ensure!(num > 0 && den > 0, "scale {num}/{den} must be positive");
        Ok(Self { num, den })
    }

    pub fn up(factor: usize) -> Self {
        Self { num: factor, den: 1 }
    }

    pub fn down(factor: usize) -> Self {
        Self { num: 1, den: factor }
    }
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Clamped taps and normalized weights for every output index along one
/// axis. When shrinking, the kernel is stretched by the inverse scale.
fn resample_taps(n_in: usize, n_out: usize, scale: Scale) -> Vec<Vec<(usize, f64)>> {
    let ratio = scale.den as f64 / scale.num as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    let last = n_in as isize - 1;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (src - support).floor() as isize;
            let hi = (src + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|p| (p.clamp(0, last) as usize, cubic_kernel((src - p as f64) / stretch)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resampling with half-pixel centers and clamped edges,
/// antialiased when shrinking.
/// Output size is `floor(h·num/den) × floor(w·num/den)`.
pub fn bicubic_resize<T: Real>(img: &Tensor<T>, scale: Scale) -> Result<Tensor<T>> {
    ensure!(scale.num > 0 && scale.den > 0, "scale must be positive");
    let (h, w, c) = img.shape();
    let oh = h * scale.num / scale.den;
    let ow = w * scale.num / scale.den;
    ensure!(oh >= 1 && ow >= 1, "resampling {h}x{w} by {}/{} leaves no pixels", scale.num, scale.den);
    let rows = resample_taps(h, oh, scale);
    let cols = resample_taps(w, ow, scale);
    let mut mid = vec![0.0f64; h * ow * c];
    for i in 0..h {
        for (j, taps) in cols.iter().enumerate() {
            for ch in 0..c {
                mid[(i * ow + j) * c + ch] = taps.iter().map(|&(s, wt)| wt * img.get(i, s, ch).as_f64()).sum();
            }
        }
    }
    Ok(Tensor::from_fn(oh, ow, c, |i, j, ch| {
        T::lit(rows[i].iter().map(|&(s, wt)| wt * mid[(s * ow + j) * c + ch]).sum())
    }))
}

/// Bicubic downsample by `factor`, then bicubic upsample back.
pub fn degrade_sr<T: Real>(hr: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    ensure!(factor >= 2, "SR factor must be at least 2, got {factor}");
    ensure!(
        hr.height().is_multiple_of(factor) && hr.width().is_multiple_of(factor),
        "image {}x{} is not divisible by SR factor {factor}",
        hr.height(),
        hr.width()
    );
    let lr = bicubic_resize(hr, Scale::down(factor))?;
    bicubic_resize(&lr, Scale::up(factor))
}

/// Adds i.i.d. `N(0, (sigma/255)²)` noise. No clipping.
pub fn add_gaussian_noise<T: Real>(img: &Tensor<T>, sigma_255: f64, rng: &mut SeededRng) -> Result<Tensor<T>> {
    ensure!(sigma_255 >= 0.0 && sigma_255.is_finite(), "noise sigma must be nonnegative, got {sigma_255}");
    if sigma_255 == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma_255 / 255.0).expect("positive finite sigma");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = T::lit(v.as_f64() + normal.sample(rng));
    }
    Ok(out)
}

/// Normalized Gaussian taps on `[−radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as f64;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|t| {
            let d = t as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable truncated Gaussian blur with clamped edges.
pub fn gaussian_blur<T: Real>(img: &Tensor<T>, sigma: f64, radius: usize) -> Result<Tensor<T>> {
    ensure!(sigma > 0.0 && sigma.is_finite(), "blur sigma must be positive, got {sigma}");
    ensure!(radius >= 1, "blur radius must be at least 1");
    let kernel = gaussian_kernel(sigma, radius);
    let (h, w, c) = img.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let r = radius as isize;
    let mut mid = vec![0.0f64; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                mid[(i * w + j) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| k * img.get(i, clamp(j as isize + t as isize - r, w), ch).as_f64())
                    .sum();
            }
        }
    }
    Ok(Tensor::from_fn(h, w, c, |i, j, ch| {
        T::lit(
            kernel
                .iter()
                .enumerate()
                .map(|(t, &k)| k * mid[(clamp(i as isize + t as isize - r, h) * w + j) * c + ch])
                .sum(),
        )
    }))
}

/// `x` is blurred where `mask == 1`, `y` where `mask == 0`. The blend uses
/// the mask blurred by the same kernel.
pub fn make_multifocus_pair<T: Real>(
    img: &Tensor<T>,
    mask: &Tensor<T>,
    sigma: f64,
    radius: usize,
) -> Result<SamplePair<T>> {
    ensure!(
        mask.channels() == 1 && mask.height() == img.height() && mask.width() == img.width(),
        "mask must be a single-channel {}x{} image, got {:?}",
        img.height(),
        img.width(),
        mask.shape()
    );
    ensure!(mask.data().iter().all(|&v| v == T::zero() || v == T::one()), "mask values must be 0 or 1");
    let blurred = gaussian_blur(img, sigma, radius)?;
    let soft = gaussian_blur(mask, sigma, radius)?;
    let one = T::one();
    let x = Tensor::from_fn(img.height(), img.width(), img.channels(), |i, j, c| {
        let m = soft.get(i, j, 0);
        img.get(i, j, c) * (one - m) + blurred.get(i, j, c) * m
    });
    let y = Tensor::from_fn(img.height(), img.width(), img.channels(), |i, j, c| {
        let m = soft.get(i, j, 0);
        img.get(i, j, c) * m + blurred.get(i, j, c) * (one - m)
    });
    let mut pair = SamplePair::new(x, y, img.clone(), DatasetKind::Multifocus)?;
    let ones = mask.count_nonzero();
    if ones == 0 || ones == mask.len() {
        pair.warning = Some(format!("degenerate focus mask ({ones} of {} pixels set)", mask.len()));
    }
    Ok(pair)
}

/// Top-left corners of every `size×size` window at `stride`, row-major.
pub fn patch_offsets(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    ensure!(size >= 1 && stride >= 1, "patch size and stride must be at least 1");
    ensure!(size <= h && size <= w, "patch size {size} exceeds image {h}x{w}");
    let rows = (h - size) / stride + 1;
    let cols = (w - size) / stride + 1;
    Ok((0..rows).flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride))).collect())
}

pub fn extract_patches<T: Real>(pair: &SamplePair<T>, size: usize, stride: usize) -> Result<Vec<SamplePair<T>>> {
    patch_offsets(pair.x.height(), pair.x.width(), size, stride)?
        .into_iter()
        .map(|(top, left)| {
            Ok(SamplePair {
                x: pair.x.crop(top, left, size, size)?,
                y: pair.y.crop(top, left, size, size)?,
                z: pair.z.crop(top, left, size, size)?,
                kind: pair.kind,
                warning: pair.warning.clone(),
            })
        })
        .collect()
}

/// BT.601 luminance of an RGB image. Single-channel input is returned as is.
pub fn to_luminance<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => Ok(Tensor::from_fn(img.height(), img.width(), 1, |i, j, _| {
            T::lit(0.299) * img.get(i, j, 0) + T::lit(0.587) * img.get(i, j, 1) + T::lit(0.114) * img.get(i, j, 2)
        })),
        c => Err(crate::Error::Contract(format!("luminance needs 1 or 3 channels, got {c}"))),
    }
}

/// Random ellipses and star polygons painted over a background. Label 0 is
/// the background, shape `n` paints label `n`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub size: usize,
    pub labels: Vec<usize>,
    pub regions: usize,
}

impl Scene {
    pub fn random(size: usize, rng: &mut SeededRng) -> Self {
        let shapes = rng.gen_range(3..=6);
        let mut labels = vec![0usize; size * size];
        let s = size as f64;
        for n in 1..=shapes {
            let cy = rng.gen_range(0.1..0.9) * s;
            let cx = rng.gen_range(0.1..0.9) * s;
            let r0 = rng.gen_range(0.12..0.35) * s;
            let inside: Box<dyn Fn(f64, f64) -> bool> = if rng.gen_bool(0.5) {
                let ry = r0;
                let rx = r0 * rng.gen_range(0.5..1.5);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (sn, cs) = phi.sin_cos();
                Box::new(move |py, px| {
                    let (dy, dx) = (py - cy, px - cx);
                    let u = cs * dx + sn * dy;
                    let v = -sn * dx + cs * dy;
                    (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
                })
            } else {
                let points = rng.gen_range(4..=7) as f64;
                let inner = rng.gen_range(0.4..0.8);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Box::new(move |py, px| {
                    let (dy, dx) = (py - cy, px - cx);
                    let ang = dy.atan2(dx) - phi;
                    let wave = 0.5 + 0.5 * (points * ang).cos();
                    dy.hypot(dx) <= r0 * (inner + (1.0 - inner) * wave)
                })
            };
            for i in 0..size {
                for j in 0..size {
                    if inside(i as f64 + 0.5, j as f64 + 0.5) {
                        labels[i * size + j] = n;
                    }
                }
            }
        }
        Self { size, labels, regions: shapes + 1 }
    }

    /// Piecewise-constant image with one value per label.
    pub fn paint(&self, values: &[f64]) -> Tensor<f64> {
        Tensor::from_fn(self.size, self.size, 1, |i, j, _| values[self.labels[i * self.size + j]])
    }

    pub fn mask(&self, label: usize) -> Tensor<f64> {
        self.paint(&(0..self.regions).map(|l| if l == label { 1.0 } else { 0.0 }).collect::<Vec<_>>())
    }
}

/// Evenly spaced distinct levels in `[0.15, 0.85]`, shuffled.
fn albedo_levels(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut levels: Vec<f64> = (0..n).map(|i| 0.15 + 0.7 * i as f64 / (n - 1).max(1) as f64).collect();
    levels.shuffle(rng);
    levels
}

/// Low-amplitude plane wave added to an intensity rendering.
fn add_texture(img: &mut Tensor<f64>, amplitude: f64, rng: &mut SeededRng) {
    let fy = rng.gen_range(0.05..0.3);
    let fx = rng.gen_range(0.05..0.3);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for i in 0..img.height() {
        for j in 0..img.width() {
            let v = img.get(i, j, 0) + amplitude * (fy * i as f64 + fx * j as f64 + phase).sin();
            img.set(i, j, 0, v);
        }
    }
}

/// Intensity rendering of `scene` with per-region fine-grained texture.
fn detailed_rendering(scene: &Scene, rng: &mut SeededRng) -> Tensor<f64> {
    let base = albedo_levels(scene.regions, rng);
    let waves: Vec<(f64, f64, f64)> = (0..scene.regions)
        .map(|_| (rng.gen_range(0.6..1.6), rng.gen_range(0.6..1.6), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let n = scene.size;
    Tensor::from_fn(n, n, 1, |i, j, _| {
        let l = scene.labels[i * n + j];
        let (fy, fx, ph) = waves[l];
        base[l] + 0.1 * (fy * i as f64 + ph).sin() * (fx * j as f64).cos()
    })
}

fn synth_one(kind: DatasetKind, size: usize, rng: &mut SeededRng) -> Result<SamplePair<f64>> {
    let scene = Scene::random(size, rng);
    match kind {
        DatasetKind::GuidedSr => {
            let depth: Vec<f64> = (0..scene.regions).map(|_| rng.gen_range(0.1..0.9)).collect();
            let z = scene.paint(&depth);
            let mut y = scene.paint(&albedo_levels(scene.regions, rng));
            add_texture(&mut y, TEXTURE_AMPLITUDE, rng);
            let x = degrade_sr(&z, SR_FACTOR)?;
            SamplePair::new(x, y, z, kind)
        }
        DatasetKind::GuidedDenoise => {
            let mut z = scene.paint(&albedo_levels(scene.regions, rng));
            add_texture(&mut z, TEXTURE_AMPLITUDE, rng);
            let mut y = scene.paint(&albedo_levels(scene.regions, rng));
            add_texture(&mut y, TEXTURE_AMPLITUDE, rng);
            let x = add_gaussian_noise(&z, DENOISE_SIGMA, rng)?;
            SamplePair::new(x, y, z, kind)
        }
        DatasetKind::Multifocus => {
            let img = detailed_rendering(&scene, rng);
            let label = rng.gen_range(1..scene.regions);
            make_multifocus_pair(&img, &scene.mask(label), MULTIFOCUS_SIGMA, MULTIFOCUS_RADIUS)
        }
    }
}

/// `count` single-channel `size×size` samples. Sample `i` depends only on
/// `(seed, i)`.
pub fn synth_guided_dataset(kind: DatasetKind, count: usize, size: usize, seed: u64) -> Result<Vec<SamplePair<f64>>> {
    ensure!(count >= 1, "dataset count must be at least 1");
    ensure!(size >= 2, "image size must be at least 2");
    if kind == DatasetKind::GuidedSr {
        ensure!(size.is_multiple_of(SR_FACTOR), "guided-sr image size must be a multiple of {SR_FACTOR}, got {size}");
    }
    (0..count).map(|i| synth_one(kind, size, &mut SeededRng::derived(seed, i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(h, w, 1, |i, j, _| 0.1 * i as f64 + 0.03 * j as f64 + 0.01 * (i * j) as f64)
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_survives_every_scale() {
        let img = Tensor::filled(16, 12, 2, 0.37);
        for scale in [Scale::down(4), Scale::down(2), Scale::up(2), Scale::up(4), Scale::new(3, 2).unwrap()] {
            let out = bicubic_resize(&img, scale).unwrap();
            assert!(out.data().iter().all(|v: &f64| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let img = ramp(9, 7);
        let out = bicubic_resize(&img, Scale::new(3, 3).unwrap()).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-12);
    }

    #[test]
    fn upscale_matches_pointwise_kernel() {
        let img = ramp(8, 8);
        let out = bicubic_resize(&img, Scale::up(2)).unwrap();
        let clamp = |v: isize| v.clamp(0, 7) as usize;
        for oi in 0..16 {
            for oj in 0..16 {
                let sy = (oi as f64 + 0.5) / 2.0 - 0.5;
                let sx = (oj as f64 + 0.5) / 2.0 - 0.5;
                let mut v = 0.0;
                for p in -3isize..=10 {
                    for q in -3isize..=10 {
                        let wy = cubic_kernel(sy - p as f64);
                        let wx = cubic_kernel(sx - q as f64);
                        v += wy * wx * img.get(clamp(p), clamp(q), 0);
                    }
                }
                assert!((out.get(oi, oj, 0) - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn resize_rejects_empty_output() {
        assert!(bicubic_resize(&ramp(3, 3), Scale::down(4)).is_err());
        assert!(Scale::new(0, 1).is_err());
    }

    #[test]
    fn degrade_sr_contracts() {
        let img = Tensor::filled(16, 16, 1, 0.6);
        let out = degrade_sr(&img, 4).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v: &f64| (v - 0.6).abs() < 1e-10));
        assert!(degrade_sr(&ramp(10, 12), 4).is_err());
        assert!(degrade_sr(&ramp(8, 8), 1).is_err());
    }

    #[test]
    fn checkerboard_collapses_to_half() {
        let img = Tensor::from_fn(64, 64, 1, |i, j, _| ((i + j) % 2) as f64);
        let out = degrade_sr(&img, 4).unwrap();
        let lr = bicubic_resize(&img, Scale::down(4)).unwrap();
        let reference = bicubic_resize(&lr, Scale::up(4)).unwrap();
        assert_eq!(out, reference);
        let dev = out.data().iter().fold(0.0f64, |m, v| m.max((v - 0.5).abs()));
        assert!(dev < 0.05, "max deviation {dev}");
        assert!((out.mean() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn noise_contracts() {
        let img = ramp(8, 8);
        let mut rng = SeededRng::new(3);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        let a = add_gaussian_noise(&img, 25.0, &mut SeededRng::new(9)).unwrap();
        let b = add_gaussian_noise(&img, 25.0, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(add_gaussian_noise(&img, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_std_within_chi_square_bounds() {
        let zero = Tensor::<f64>::zeros(256, 256, 1);
        let noisy = add_gaussian_noise(&zero, 25.0, &mut SeededRng::new(11)).unwrap();
        let n = noisy.len() as f64;
        let mean = noisy.mean();
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((24.0 / 255.0 * 0.97..=25.0 / 255.0 * 1.03).contains(&std), "std {std}");
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::filled(10, 9, 3, 0.25);
        let out = gaussian_blur(&img, 1.3, 3).unwrap();
        assert!(out.data().iter().all(|v: &f64| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn blur_delta_peak_is_squared_center_tap() {
        let (sigma, radius) = (1.7f64, 4usize);
        let mut img = Tensor::<f64>::zeros(15, 15, 1);
        img.set(7, 7, 0, 1.0);
        let out = gaussian_blur(&img, sigma, radius).unwrap();
        let z: f64 = (-(radius as i64)..=radius as i64).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        let peak = 1.0 / z;
        assert!((out.get(7, 7, 0) - peak * peak).abs() < 1e-15);
    }

    #[test]
    fn blur_matches_2d_bruteforce() {
        let img = ramp(9, 11).map(|v| (v * 7.0).sin());
        let (sigma, radius) = (1.2, 2usize);
        let out = gaussian_blur(&img, sigma, radius).unwrap();
        let k = gaussian_kernel(sigma, radius);
        let r = radius as isize;
        for i in 0..9isize {
            for j in 0..11isize {
                let mut v = 0.0;
                for p in -r..=r {
                    for q in -r..=r {
                        let si = (i + p).clamp(0, 8) as usize;
                        let sj = (j + q).clamp(0, 10) as usize;
                        v += k[(p + r) as usize] * k[(q + r) as usize] * img.get(si, sj, 0);
                    }
                }
                assert!((out.get(i as usize, j as usize, 0) - v).abs() < 1e-12);
            }
        }
        assert!(gaussian_blur(&img, 0.0, 2).is_err());
        assert!(gaussian_blur(&img, 1.0, 0).is_err());
    }

    #[test]
    fn multifocus_zero_mask() {
        let img = ramp(12, 12).map(|v| (v * 5.0).cos());
        let pair = make_multifocus_pair(&img, &Tensor::zeros(12, 12, 1), 1.5, 3).unwrap();
        assert_eq!(pair.x, img);
        assert_eq!(pair.z, img);
        assert!(pair.y.max_abs_diff(&gaussian_blur(&img, 1.5, 3).unwrap()).unwrap() < 1e-15);
        assert!(pair.warning.is_some());
    }

    #[test]
    fn multifocus_half_plane() {
        let n = 32;
        let radius = 3;
        let img = ramp(n, n).map(|v| (v * 3.0).sin());
        let mask = Tensor::from_fn(n, n, 1, |_, j, _| if j >= n / 2 { 1.0 } else { 0.0 });
        let pair = make_multifocus_pair(&img, &mask, 1.0, radius).unwrap();
        assert!(pair.warning.is_none());
        assert_eq!(pair.z, img);
        for i in 0..n {
            for j in 0..n / 2 - radius {
                assert_eq!(pair.x.get(i, j, 0), img.get(i, j, 0));
            }
            for j in n / 2 + radius..n {
                assert!((pair.y.get(i, j, 0) - img.get(i, j, 0)).abs() < 1e-12);
            }
        }
        let bad = Tensor::filled(n, n, 1, 0.5);
        assert!(make_multifocus_pair(&img, &bad, 1.0, radius).is_err());
    }

    fn pair_of(h: usize, w: usize) -> SamplePair<f64> {
        let x = ramp(h, w);
        SamplePair::new(x.clone(), x.scale(2.0), x.scale(3.0), DatasetKind::GuidedSr).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(extract_patches(&pair_of(64, 64), 64, 8).unwrap().len(), 1);
        assert_eq!(extract_patches(&pair_of(128, 128), 64, 64).unwrap().len(), 4);
        let offsets = patch_offsets(100, 80, 64, 16).unwrap();
        let expected: Vec<(usize, usize)> = [0, 16, 32].iter().flat_map(|&r| [0, 16].map(|c| (r, c))).collect();
        assert_eq!(offsets, expected);
        assert!(extract_patches(&pair_of(32, 32), 64, 1).is_err());
    }

    #[test]
    fn non_overlapping_patches_reassemble() {
        let pair = pair_of(20, 28);
        let patches = extract_patches(&pair, 8, 8).unwrap();
        let offsets = patch_offsets(20, 28, 8, 8).unwrap();
        let mut canvas = Tensor::<f64>::zeros(16, 24, 1);
        for (p, (top, left)) in patches.iter().zip(offsets) {
            for i in 0..8 {
                for j in 0..8 {
                    canvas.set(top + i, left + j, 0, p.z.get(i, j, 0));
                }
            }
        }
        assert_eq!(canvas, pair.z.crop(0, 0, 16, 24).unwrap());
    }

    #[test]
    fn luminance_weights() {
        let rgb = Tensor::from_fn(2, 2, 3, |_, _, c| [1.0f64, 0.5, 0.25][c]);
        let y = to_luminance(&rgb).unwrap();
        assert!((y.get(1, 1, 0) - (0.299 + 0.2935 + 0.0285)).abs() < 1e-12);
        assert!(to_luminance(&Tensor::<f64>::zeros(2, 2, 2)).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        for kind in [DatasetKind::GuidedSr, DatasetKind::GuidedDenoise, DatasetKind::Multifocus] {
            let a = synth_guided_dataset(kind, 2, 32, 5).unwrap();
            let b = synth_guided_dataset(kind, 2, 32, 5).unwrap();
            assert_eq!(a, b);
            assert_ne!(a[0].z, a[1].z);
        }
    }

    #[test]
    fn sr_degradation_keeps_mean() {
        for pair in synth_guided_dataset(DatasetKind::GuidedSr, 20, 64, 1).unwrap() {
            assert!((pair.x.mean() - pair.z.mean()).abs() < 1e-3, "{} vs {}", pair.x.mean(), pair.z.mean());
        }
    }

    fn edges(t: &Tensor<f64>, thresh: f64) -> Vec<bool> {
        let n = t.height();
        let mut out = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let dx = if j + 1 < n { t.get(i, j + 1, 0) - t.get(i, j, 0) } else { 0.0 };
                let dy = if i + 1 < n { t.get(i + 1, j, 0) - t.get(i, j, 0) } else { 0.0 };
                out[i * n + j] = dx.hypot(dy) > thresh;
            }
        }
        out
    }

    #[test]
    fn guidance_edges_cover_depth_edges() {
        let mut total = 0usize;
        let mut covered = 0usize;
        for pair in synth_guided_dataset(DatasetKind::GuidedSr, 10, 64, 2).unwrap() {
            let n = 64;
            let ez = edges(&pair.z, 1e-6);
            let ey = edges(&pair.y, 0.05);
            for i in 0..n {
                for j in 0..n {
                    if !ez[i * n + j] {
                        continue;
                    }
                    total += 1;
                    let hit = (i.saturating_sub(1)..=(i + 1).min(n - 1))
                        .any(|a| (j.saturating_sub(1)..=(j + 1).min(n - 1)).any(|b| ey[a * n + b]));
                    covered += hit as usize;
                }
            }
        }
        assert!(total > 0);
        assert!(covered as f64 >= 0.95 * total as f64, "{covered}/{total}");
    }

    #[test]
    fn dataset_kind_names() {
        assert_eq!("guided-sr".parse::<DatasetKind>().unwrap(), DatasetKind::GuidedSr);
        assert_eq!(serde_json::to_string(&DatasetKind::Multifocus).unwrap(), "\"multifocus-fuse\"");
        assert_eq!(DatasetKind::GuidedDenoise.task(), Task::Mir);
        assert_eq!(DatasetKind::Multifocus.task(), Task::Mif);
    }
}
