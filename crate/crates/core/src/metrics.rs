//! Image quality metrics. Values are accumulated in `f64`.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::FeatureMap;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err("metric operands", &a.shape().dims(), &b.shape().dims()));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at 99 dB when the MSE is below `1e-12`.
pub fn psnr<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, _, _) = filter(a, h, w, &win);
    let (mu_b, _, _) = filter(b, h, w, &win);
    let (aa, _, _) = filter(&prod(a, a), h, w, &win);
    let (bb, _, _) = filter(&prod(b, b), h, w, &win);
    let (ab, oh, ow) = filter(&prod(a, b), h, w, &win);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let var_a = aa[i] - mu_a[i] * mu_a[i];
        let var_b = bb[i] - mu_b[i] * mu_b[i];
        let cov = ab[i] - mu_a[i] * mu_b[i];
        let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    total / (oh * ow) as f64
}

/// Mean SSIM for images with values in `[0, peak]`, averaged over channels and batch items.
/// Images smaller than the 11x11 window use the largest odd window that fits.
pub fn ssim_with_peak<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>, peak: f64) -> Result<f64> {
    check(a, b)?;
    let s = a.shape();
    let mut total = 0.0;
    for bi in 0..s.b {
        for c in 0..s.c {
            let pa: Vec<f64> = a.plane(bi, c).iter().map(|v| v.to_f64()).collect();
            let pb: Vec<f64> = b.plane(bi, c).iter().map(|v| v.to_f64()).collect();
            total += ssim_plane(&pa, &pb, s.h, s.w, peak);
        }
    }
    Ok(total / (s.b * s.c) as f64)
}

pub fn ssim<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}
