//! Full-reference image quality: PSNR and SSIM over `[C, H, W]` images.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, data_range: f64) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "image shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    if !(data_range > 0.0) {
        return Err(Error::Argument(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    Ok(())
}

pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "image shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(total / a.numel() as f64)
}

/// `10 log10(range^2 / MSE)` in dB, or [`PSNR_CAP_DB`] when the images are equal.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Per-window SSIM value from local statistics.
pub fn ssim_from_stats(
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    data_range: f64,
) -> f64 {
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over all valid 11x11 Gaussian windows and channels.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        ref s => return dim_err(format!("ssim expects [C, H, W] images, got {s:?}")),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return dim_err(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        ));
    }
    let taps = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * plane..][..plane]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let pb: Vec<f64> = b.data()[ch * plane..][..plane]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            total += ssim_from_stats(
                ma,
                mb,
                e_aa[i] - ma * ma,
                e_bb[i] - mb * mb,
                e_ab[i] - ma * mb,
                data_range,
            );
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}
