//! Pixel losses. Both return the mean value and its gradient.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::task::LossKind;
use crate::tensor::FeatureMap;

fn check<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(shape_err("loss operands", &pred.shape().dims(), &target.shape().dims()));
    }
    Ok(())
}

/// Mean absolute error with subgradient `sign(r) / count`, `sign(0) = 0`.
pub fn l1_loss<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(f64, FeatureMap<T>)> {
    check(pred, target)?;
    let n = pred.data().len() as f64;
    let inv = T::from_f64(1.0 / n);
    let mut total = 0.0;
    let grad = pred.zip_map(target, |p, t| {
        let r = p - t;
        if r > T::ZERO {
            inv
        } else if r < T::ZERO {
            -inv
        } else {
            T::ZERO
        }
    })?;
    for (p, t) in pred.data().iter().zip(target.data()) {
        total += (p.to_f64() - t.to_f64()).abs();
    }
    Ok((total / n, grad))
}

/// Mean over elements of `sqrt(r^2 + eps^2)`.
pub fn charbonnier_loss<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>, eps: f64) -> Result<(f64, FeatureMap<T>)> {
    check(pred, target)?;
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("Charbonnier eps must be > 0, got {eps}")));
    }
    let n = pred.data().len() as f64;
    let e2 = eps * eps;
    let mut total = 0.0;
    let mut grad = FeatureMap::zeros(pred.shape());
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p.to_f64() - t.to_f64();
        let s = (r * r + e2).sqrt();
        // Accumulate the excess over eps, so a zero residual yields eps exactly.
        total += r * r / (s + eps);
        *g = T::from_f64(r / s / n);
    }
    Ok((eps + total / n, grad))
}

pub fn loss<T: Real>(kind: LossKind, pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(f64, FeatureMap<T>)> {
    match kind {
        LossKind::L1 => l1_loss(pred, target),
        LossKind::Charbonnier { eps } => charbonnier_loss(pred, target, eps),
    }
}
