//! Shared finite-difference harness for the operator gradient checks.
#![allow(dead_code)]

use psmamba_core::block::*;
use psmamba_core::gradcheck::{check_coords, probe_indices, probe_loss, probe_weights, GradCheckReport, DEFAULT_TOLERANCE};
use psmamba_core::params::ParamStore;
use psmamba_core::ssm::{ssm_scan, ssm_scan_backward, SsmParams, TokenSequence};
use psmamba_core::tensor::*;
use psmamba_core::{loss, FeatureMap, Shape, SplitLevel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_PROBES: usize = 256;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(shape: Shape, rng: &mut impl Rng) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn map_of(shape: Shape, v: &[f64]) -> FeatureMap<f64> {
    FeatureMap::from_vec(shape, v.to_vec()).unwrap()
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn probe(report: &mut GradCheckReport, group: &str, x: &[f64], analytic: &[f64], r: &mut impl Rng, f: impl Fn(&[f64]) -> f64) {
    let idx = probe_indices(analytic, MAX_PROBES, r);
    let mut v = x.to_vec();
    report.groups.push(check_coords(group, &mut v, &idx, analytic, f));
}

pub fn conv(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let x = random_map(Shape::new(2, 3, 6, 5), &mut r);
    let mut k = ConvKernel::<f64>::zeros(4, 3, 3, 3);
    k.weight.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    k.bias.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    let y = conv2d(&x, &k.view()).unwrap();
    let w = probe_weights(y.shape(), &mut r);
    let g = conv2d_backward(&x, &k.view(), &w).unwrap();
    let xs = x.shape();
    probe(&mut rep, "conv2d.input", x.data(), g.input.data(), &mut r, |v| probe_loss(&conv2d(&map_of(xs, v), &k.view()).unwrap(), &w));
    let kw = k.clone();
    probe(&mut rep, "conv2d.weight", &k.weight, &g.weight, &mut r, |v| {
        let mut kk = kw.clone();
        kk.weight.copy_from_slice(v);
        probe_loss(&conv2d(&x, &kk.view()).unwrap(), &w)
    });
    probe(&mut rep, "conv2d.bias", &k.bias, &g.bias, &mut r, |v| {
        let mut kk = kw.clone();
        kk.bias.copy_from_slice(v);
        probe_loss(&conv2d(&x, &kk.view()).unwrap(), &w)
    });
    rep
}

/// Inputs kept away from the kink so the central difference is exact.
fn away_from_zero(shape: Shape, r: &mut impl Rng) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_, _, _, _| {
        let v: f64 = r.random_range(0.05..1.0);
        if r.random_bool(0.5) { v } else { -v }
    })
}

pub fn elementwise(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let s = Shape::new(2, 4, 8, 8);
    let x = away_from_zero(s, &mut r);
    let w = probe_weights(s, &mut r);
    let g = relu_backward(&x, &w).unwrap();
    probe(&mut rep, "relu", x.data(), g.data(), &mut r, |v| probe_loss(&relu(&map_of(s, v)), &w));
    let y = sigmoid(&x.scale(3.0));
    let g = sigmoid_backward(&y, &w).unwrap().scale(3.0);
    probe(&mut rep, "sigmoid", x.data(), g.data(), &mut r, |v| probe_loss(&sigmoid(&map_of(s, v).scale(3.0)), &w));
    rep
}

pub fn norm_and_pool(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let s = Shape::new(2, 4, 8, 8);
    let x = random_map(s, &mut r);
    let gamma: Vec<f64> = (0..4).map(|_| r.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let eps = DEFAULT_LN_EPS;
    let (y, cache) = layer_norm(&x, &gamma, &beta, eps).unwrap();
    let w = probe_weights(y.shape(), &mut r);
    let (gx, gg, gb) = layer_norm_backward(&cache, &gamma, &w).unwrap();
    probe(&mut rep, "layer_norm.input", x.data(), gx.data(), &mut r, |v| probe_loss(&layer_norm(&map_of(s, v), &gamma, &beta, eps).unwrap().0, &w));
    probe(&mut rep, "layer_norm.gamma", &gamma, &gg, &mut r, |v| probe_loss(&layer_norm(&x, v, &beta, eps).unwrap().0, &w));
    probe(&mut rep, "layer_norm.beta", &beta, &gb, &mut r, |v| probe_loss(&layer_norm(&x, &gamma, v, eps).unwrap().0, &w));

    let pooled_w: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let g = global_avg_pool_backward(s, &pooled_w);
    probe(&mut rep, "global_avg_pool", x.data(), g.data(), &mut r, |v| {
        global_avg_pool(&map_of(s, v)).iter().zip(&pooled_w).map(|(a, b)| a * b).sum()
    });
    rep
}

pub fn geometry(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let s = Shape::new(2, 3, 5, 7);
    let x = random_map(s, &mut r);
    let (p, rec) = pad_to_multiple(&x, 4, 4).unwrap();
    let w = probe_weights(p.shape(), &mut r);
    let g = pad_backward(&w, &rec);
    probe(&mut rep, "pad_to_multiple", x.data(), g.data(), &mut r, |v| probe_loss(&pad_to_multiple(&map_of(s, v), 4, 4).unwrap().0, &w));
    let ps = p.shape();
    let wc = probe_weights(s, &mut r);
    let g = crop_backward(&wc, &rec);
    probe(&mut rep, "crop", p.data(), g.data(), &mut r, |v| probe_loss(&crop(&map_of(ps, v), &rec), &wc));

    let small = Shape::new(1, 3, 4, 5);
    let x = random_map(small, &mut r);
    let up = bilinear_upsample(&x, 3);
    let w = probe_weights(up.shape(), &mut r);
    let g = bilinear_upsample_backward(&w, 3);
    probe(&mut rep, "bilinear_upsample", x.data(), g.data(), &mut r, |v| probe_loss(&bilinear_upsample(&map_of(small, v), 3), &w));

    let ds = Shape::new(2, 12, 3, 4);
    let x = random_map(ds, &mut r);
    let y = depth_to_space(&x, 2).unwrap();
    let w = probe_weights(y.shape(), &mut r);
    let g = depth_to_space_backward(&w, 2);
    probe(&mut rep, "depth_to_space", x.data(), g.data(), &mut r, |v| probe_loss(&depth_to_space(&map_of(ds, v), 2).unwrap(), &w));
    rep
}

pub fn dense(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let (rows, fin, fout) = (3, 5, 4);
    let x: Vec<f64> = (0..rows * fin).map(|_| r.random_range(-1.0..1.0)).collect();
    let wt: Vec<f64> = (0..fout * fin).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..fout).map(|_| r.random_range(-1.0..1.0)).collect();
    let gy: Vec<f64> = (0..rows * fout).map(|_| r.random_range(-1.0..1.0)).collect();
    let dot = |y: Vec<f64>| y.iter().zip(&gy).map(|(a, b)| a * b).sum::<f64>();
    let g = linear_backward(&x, rows, &wt, &gy);
    probe(&mut rep, "linear.input", &x, &g.input, &mut r, |v| dot(linear(v, rows, &wt, &b)));
    probe(&mut rep, "linear.weight", &wt, &g.weight, &mut r, |v| dot(linear(&x, rows, v, &b)));
    probe(&mut rep, "linear.bias", &b, &g.bias, &mut r, |v| dot(linear(&x, rows, &wt, v)));
    rep
}

pub fn scan(seed: u64, channels: usize, n: usize, len: usize) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let p = SsmParams::<f64>::init(channels, n, &mut r);
    let x = TokenSequence::new(2, channels, len, (0..2 * channels * len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let gy = TokenSequence::new(2, channels, len, (0..2 * channels * len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let dot = |y: TokenSequence<f64>| y.values.iter().zip(&gy.values).map(|(a, b)| a * b).sum::<f64>();
    let g = ssm_scan_backward(&x, &p.view(), &gy).unwrap();
    let xv = x.values.clone();
    probe(&mut rep, "ssm_scan.input", &xv, &g.input.values, &mut r, |v| {
        let xi = TokenSequence::new(2, channels, len, v.to_vec()).unwrap();
        dot(ssm_scan(&xi, &p.view(), None).unwrap())
    });
    let groups: [(&str, &Vec<f64>, &Vec<f64>); 4] = [("ssm_scan.a_raw", &p.a_raw, &g.a_raw), ("ssm_scan.b", &p.b, &g.b), ("ssm_scan.cw", &p.cw, &g.cw), ("ssm_scan.d", &p.d, &g.d)];
    for (i, (name, val, grad)) in groups.into_iter().enumerate() {
        probe(&mut rep, name, val, grad, &mut r, |v| {
            let mut q = p.clone();
            match i {
                0 => q.a_raw.copy_from_slice(v),
                1 => q.b.copy_from_slice(v),
                2 => q.cw.copy_from_slice(v),
                _ => q.d.copy_from_slice(v),
            }
            dot(ssm_scan(&x, &q.view(), None).unwrap())
        });
    }
    rep
}

pub fn losses(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let s = Shape::new(2, 3, 4, 4);
    let t = random_map(s, &mut r);
    let p = t.zip_map(&away_from_zero(s, &mut r), |a, b| a + 0.1 * b).unwrap();
    let (_, g) = loss::l1_loss(&p, &t).unwrap();
    probe(&mut rep, "l1_loss", p.data(), g.data(), &mut r, |v| loss::l1_loss(&map_of(s, v), &t).unwrap().0);
    let (_, g) = loss::charbonnier_loss(&p, &t, 1e-3).unwrap();
    probe(&mut rep, "charbonnier_loss", p.data(), g.data(), &mut r, |v| loss::charbonnier_loss(&map_of(s, v), &t, 1e-3).unwrap().0);
    rep
}

pub fn test_block(channels: usize, seed: u64) -> (ParamStore<f64>, BlockParams) {
    let mut store = ParamStore::new();
    let cfg = BlockConfig {
        channels,
        state_n: 3,
        reduction: 2,
        alpha_init: 0.7,
    };
    let p = BlockParams::new(&mut store, "blk", &cfg, &mut rng(seed)).unwrap();
    (store, p)
}

/// Gradient check of `f` with respect to its input and every parameter in `store`.
fn block_part(
    rep: &mut GradCheckReport,
    prefix: &str,
    store: &ParamStore<f64>,
    inputs: &[FeatureMap<f64>],
    analytic_inputs: &[FeatureMap<f64>],
    analytic_store: &ParamStore<f64>,
    r: &mut impl Rng,
    f: impl Fn(&ParamStore<f64>, &[FeatureMap<f64>]) -> f64,
) {
    for (i, (x, g)) in inputs.iter().zip(analytic_inputs).enumerate() {
        let s = x.shape();
        probe(rep, &format!("{prefix}.input{i}"), x.data(), g.data(), r, |v| {
            let mut xs = inputs.to_vec();
            xs[i] = map_of(s, v);
            f(store, &xs)
        });
    }
    for id in store.ids() {
        let name = format!("{prefix}:{}", store.param(id).name);
        let grad = analytic_store.grad(id).to_vec();
        probe(rep, &name, store.value(id), &grad, r, |v| {
            let mut st = store.clone();
            st.value_mut(id).copy_from_slice(v);
            f(&st, inputs)
        });
    }
}

pub fn block_parts(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let (store, p) = test_block(4, seed);
    let s = Shape::new(1, 4, 8, 8);
    let x = random_map(s, &mut r);
    let x2 = random_map(s, &mut r);
    let w = probe_weights(s, &mut r);

    // Convolutional preprocessing.
    let (_, c) = conv_preprocess(&x, &p, &store).unwrap();
    let mut st = store.clone();
    let g = conv_preprocess_backward(&x, &c, &w, &p, &mut st).unwrap();
    block_part(&mut rep, "conv_preprocess", &store, &[x.clone()], &[g], &st, &mut r, |s, xs| probe_loss(&conv_preprocess(&xs[0], &p, s).unwrap().0, &w));

    // Patch core at every level.
    for level in SplitLevel::ALL {
        let (_, c) = patch_mamba_core(&x, &p, &store, level).unwrap();
        let mut st = store.clone();
        let g = patch_mamba_core_backward(&c, &w, &p, &mut st).unwrap();
        block_part(&mut rep, &format!("patch_core[{level}]"), &store, &[x.clone()], &[g], &st, &mut r, |s, xs| {
            probe_loss(&patch_mamba_core(&xs[0], &p, s, level).unwrap().0, &w)
        });
    }

    // Gated fusion.
    let (_, c) = gated_fusion(&x, &x2, &p, &store).unwrap();
    let mut st = store.clone();
    let (ga, gb) = gated_fusion_backward(&x, &x2, &c, &w, &p, &mut st).unwrap();
    block_part(&mut rep, "gated_fusion", &store, &[x.clone(), x2.clone()], &[ga, gb], &st, &mut r, |s, xs| {
        probe_loss(&gated_fusion(&xs[0], &xs[1], &p, s).unwrap().0, &w)
    });

    // Dual attention.
    let (_, c) = dual_attention(&x, &x2, &p, &store).unwrap();
    let mut st = store.clone();
    let (ga, gb) = dual_attention_backward(&x2, &c, &w, &p, &mut st).unwrap();
    block_part(&mut rep, "dual_attention", &store, &[x.clone(), x2.clone()], &[ga, gb], &st, &mut r, |s, xs| {
        probe_loss(&dual_attention(&xs[0], &xs[1], &p, s).unwrap().0, &w)
    });
    rep
}

pub fn whole_block(seed: u64, level: SplitLevel) -> GradCheckReport {
    let mut r = rng(seed);
    let mut rep = GradCheckReport::new(DEFAULT_TOLERANCE);
    let (store, p) = test_block(4, seed);
    let s = Shape::new(1, 4, 8, 8);
    let x = random_map(s, &mut r);
    let w = probe_weights(s, &mut r);
    let (_, c) = block_forward(&x, &p, &store, level).unwrap();
    let mut st = store.clone();
    let g = block_backward(&c, &w, &p, &mut st).unwrap();
    block_part(&mut rep, &format!("block[{level}]"), &store, &[x.clone()], &[g], &st, &mut r, |s, xs| {
        probe_loss(&block_forward(&xs[0], &p, s, level).unwrap().0, &w)
    });
    rep
}

/// Every operator-level check, in a fixed order.
pub fn all_ops() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("conv2d", conv(1)),
        ("relu/sigmoid", elementwise(2)),
        ("layer_norm/gap", norm_and_pool(3)),
        ("pad/crop/upsample/depth_to_space", geometry(4)),
        ("linear", dense(5)),
        ("ssm_scan", scan(6, 2, 3, 16)),
        ("losses", losses(7)),
        ("block components", block_parts(8)),
        ("block", whole_block(9, SplitLevel::Octants)),
    ]
}
