//! Degradation synthesis.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::task::{RestoreTask, TaskKind};
use crate::tensor::{FeatureMap, Shape};

/// Adds `N(0, sigma / 255)` to every element and clamps to `[0, 1]`.
pub fn add_noise<T: Real, R: Rng + ?Sized>(clean: &FeatureMap<T>, sigma: f64, rng: &mut R) -> FeatureMap<T> {
    let std = sigma / 255.0;
    let mut out = clean.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = T::from_f64((v.to_f64() + std * n).clamp(0.0, 1.0));
    }
    out
}

/// Mean over each `s x s` block. The spatial extent must be divisible by `s`.
pub fn area_downsample<T: Real>(x: &FeatureMap<T>, s: usize) -> Result<FeatureMap<T>> {
    let sh = x.shape();
    if s == 0 || sh.h % s != 0 || sh.w % s != 0 {
        return Err(Error::Invalid(format!("{}x{} is not divisible by downscale factor {s}", sh.h, sh.w)));
    }
    let inv = 1.0 / (s * s) as f64;
    Ok(FeatureMap::from_fn(Shape::new(sh.b, sh.c, sh.h / s, sh.w / s), |b, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += x.at(b, c, y * s + dy, xx * s + dx).to_f64();
            }
        }
        T::from_f64(acc * inv)
    }))
}

pub fn degrade<T: Real, R: Rng + ?Sized>(clean: &FeatureMap<T>, task: &RestoreTask, rng: &mut R) -> Result<FeatureMap<T>> {
    match task.kind {
        TaskKind::Denoise { sigma } => Ok(add_noise(clean, sigma, rng)),
        TaskKind::SuperResolve { scale } => area_downsample(clean, scale),
    }
}
