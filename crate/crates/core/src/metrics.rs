//! Image-quality metrics on `[0, 1]`-normalized tensors.

use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape());
    ensure!(!a.is_empty(), "metric inputs are empty");
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Root mean square error on the 0–255 scale.
pub fn rmse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(255.0 * mse(a, b)?.sqrt())
}

/// `10·log10(1 / mse)` in dB, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| kernel[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| kernel[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// every valid window position and channel.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape());
    let (h, w, c) = a.shape();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
    );
    let kernel = ssim_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(c).map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(c).map(|v| v.as_f64()).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &kernel);
        let mu_b = filter_valid(&pb, h, w, &kernel);
        let e_aa = filter_valid(&aa, h, w, &kernel);
        let e_bb = filter_valid(&bb, h, w, &kernel);
        let e_ab = filter_valid(&ab, h, w, &kernel);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
