//! Central finite-difference gradient checks (64-bit).
//!
//! A scalar probe `L = sum(w * y)` with fixed random `w` turns any operator
//! into a scalar function; its analytic gradient is the backward pass seeded
//! with `w`. Large tensors are checked on a seeded sample of entries that
//! always includes the entry with the largest analytic gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::hierarchy::Model;
use crate::tensor::{FeatureMap, Shape};

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry where the worst error occurred.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            groups: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("group\tchecked\tmax_rel_err\tpass\n");
        for g in &self.groups {
            s += &format!("{}\t{}\t{:.3e}\t{}\n", g.group, g.checked, g.max_rel_err, g.max_rel_err < self.tolerance);
        }
        s
    }
}

/// Entries to probe: all of them when `n <= max`, else a seeded sample plus the largest-gradient entry.
pub fn probe_indices(analytic: &[f64], max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = analytic.len();
    if n <= max {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = sample(rng, n, max.saturating_sub(1).max(1)).into_vec();
    let top = (0..n).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())).unwrap();
    if !idx.contains(&top) {
        idx.push(top);
    }
    idx.sort_unstable();
    idx
}

/// Compares `analytic[i]` against a central difference of `f` in coordinate `i`
/// of `x` for each `i` in `indices`. `x` is restored afterwards.
pub fn check_coords(
    group: impl Into<String>,
    x: &mut [f64],
    indices: &[usize],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> GroupReport {
    let mut worst = (0.0, 0);
    for &i in indices {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(x);
        x[i] = orig - FD_STEP;
        let down = f(x);
        x[i] = orig;
        let e = rel_err(analytic[i], (up - down) / (2.0 * FD_STEP));
        if e > worst.0 || !e.is_finite() {
            worst = (if e.is_finite() { e } else { f64::INFINITY }, i);
        }
    }
    GroupReport {
        group: group.into(),
        checked: indices.len(),
        max_rel_err: worst.0,
        worst_index: worst.1,
    }
}

/// Probe weights scaled so the probe loss stays O(1) regardless of size.
pub fn probe_weights(shape: Shape, rng: &mut impl Rng) -> FeatureMap<f64> {
    let s = 1.0 / (shape.numel() as f64).sqrt();
    let mut w = FeatureMap::zeros(shape);
    for v in w.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = n * s;
    }
    w
}

pub fn probe_loss(y: &FeatureMap<f64>, w: &FeatureMap<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Checks every parameter tensor of `model` and the input `x`, probing at
/// most `per_group` entries of each.
pub fn check_model(model: &mut Model<f64>, x: &FeatureMap<f64>, per_group: usize, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, cache) = model.forward_train(x)?;
    let w = probe_weights(y.shape(), &mut rng);
    model.store.zero_grads();
    let gx = model.backward(&cache, &w)?;
    drop(cache);
    let mut report = GradCheckReport::new(tolerance);

    let mut xs = x.clone().into_vec();
    let idx = probe_indices(gx.data(), per_group, &mut rng);
    let shape = x.shape();
    let m = &*model;
    report.groups.push(check_coords("input", &mut xs, &idx, gx.data(), |v| {
        let xi = FeatureMap::from_vec(shape, v.to_vec()).expect("same shape");
        probe_loss(&m.forward(&xi).expect("forward"), &w)
    }));

    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let analytic = model.store.grad(id).to_vec();
        let name = model.store.param(id).name.clone();
        let idx = probe_indices(&analytic, per_group, &mut rng);
        let mut vals = model.store.value(id).to_vec();
        let mut probe = model.clone();
        let r = check_coords(name, &mut vals, &idx, &analytic, |v| {
            probe.store.value_mut(id).copy_from_slice(v);
            probe_loss(&probe.forward(x).expect("forward"), &w)
        });
        report.groups.push(r);
    }
    Ok(report)
}
