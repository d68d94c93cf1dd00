//! The split state-space block:
//!
//! ```text
//! f_conv = Conv3(ReLU(Conv3(x)))
//! f_m    = Merge_j Fold(LN_out(Scan(LN_in(Unfold(X_j)))))
//! g      = sigmoid(W2 ReLU(W1 GAP(f_conv + f_m)))
//! f_mix  = g * f_conv + (1 - g) * f_m
//! y      = x + alpha * SA(CA(f_mix))
//! ```
//!
//! CA is a squeeze MLP gate over pooled channels; SA is a 7x7 convolution over
//! the channel-wise `[mean; max]` maps followed by a sigmoid.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::parallel;
use crate::params::{ConvHandle, LinearHandle, NormHandle, ParamId, ParamStore, SsmHandle};
use crate::partition::{fold, merge, split, unfold, PatchSet, SplitLevel};
use crate::real::{sigmoid, Real};
use crate::ssm::{ssm_scan, ssm_scan_backward, SsmParams, TokenSequence};
use crate::tensor::{
    conv2d, conv2d_backward, crop, crop_backward, global_avg_pool, global_avg_pool_backward,
    layer_norm, layer_norm_backward, linear, linear_backward, pad_backward, pad_to_multiple, relu,
    relu_backward, FeatureMap, LayerNormCache, PadRecord, Shape, DEFAULT_LN_EPS,
};

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const SA_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub state_n: usize,
    pub reduction: usize,
    pub alpha_init: f64,
}

/// Parameter handles of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub channels: usize,
    pub conv1: ConvHandle,
    pub conv2: ConvHandle,
    pub ln_in: NormHandle,
    pub ln_out: NormHandle,
    pub ssm: SsmHandle,
    pub gate1: LinearHandle,
    pub gate2: LinearHandle,
    pub ca1: LinearHandle,
    pub ca2: LinearHandle,
    pub sa: ConvHandle,
    pub alpha: ParamId,
}

fn normal_vec<T: Real>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
}

pub(crate) fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    out_channels: usize,
    in_channels: usize,
    k: usize,
    std: f64,
    rng: &mut impl Rng,
) -> ConvHandle {
    let weight = store.add(
        format!("{name}.weight"),
        &[out_channels, in_channels, k, k],
        normal_vec(out_channels * in_channels * k * k, std, rng),
    );
    let bias = store.add(format!("{name}.bias"), &[out_channels], vec![T::ZERO; out_channels]);
    ConvHandle {
        weight,
        bias,
        out_channels,
        in_channels,
        k,
    }
}

/// He-normal standard deviation for a `k x k` kernel over `fan_in` channels.
pub(crate) fn he_std(fan_in: usize, k: usize) -> f64 {
    (2.0 / (fan_in * k * k) as f64).sqrt()
}

fn add_linear<T: Real>(store: &mut ParamStore<T>, name: &str, out_f: usize, in_f: usize, rng: &mut impl Rng) -> LinearHandle {
    let weight = store.add(
        format!("{name}.weight"),
        &[out_f, in_f],
        normal_vec(out_f * in_f, (1.0 / in_f as f64).sqrt(), rng),
    );
    let bias = store.add(format!("{name}.bias"), &[out_f], vec![T::ZERO; out_f]);
    LinearHandle {
        weight,
        bias,
        out_features: out_f,
        in_features: in_f,
    }
}

fn add_norm<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> NormHandle {
    NormHandle {
        gamma: store.add(format!("{name}.gamma"), &[c], vec![T::ONE; c]),
        beta: store.add(format!("{name}.beta"), &[c], vec![T::ZERO; c]),
    }
}

impl BlockParams {
    /// Registers a freshly initialised block under `prefix` in `store`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        if cfg.reduction == 0 || c % cfg.reduction != 0 || c < cfg.reduction {
            return Err(Error::Invalid(format!(
                "gate reduction {} must divide the channel count {c}",
                cfg.reduction
            )));
        }
        let hidden = c / cfg.reduction;
        let conv1 = add_conv(store, &format!("{prefix}.conv1"), c, c, 3, he_std(c, 3), rng);
        let conv2 = add_conv(store, &format!("{prefix}.conv2"), c, c, 3, he_std(c, 3), rng);
        let ln_in = add_norm(store, &format!("{prefix}.ln_in"), c);
        let ln_out = add_norm(store, &format!("{prefix}.ln_out"), c);
        let init = SsmParams::<T>::init(c, cfg.state_n, rng);
        let n = cfg.state_n;
        let ssm = SsmHandle {
            a_raw: store.add(format!("{prefix}.ssm.a_raw"), &[c, n], init.a_raw),
            b: store.add(format!("{prefix}.ssm.b"), &[c, n], init.b),
            cw: store.add(format!("{prefix}.ssm.cw"), &[c, n], init.cw),
            d: store.add(format!("{prefix}.ssm.d"), &[c], init.d),
            channels: c,
            n,
        };
        let gate1 = add_linear(store, &format!("{prefix}.gate1"), hidden, c, rng);
        let gate2 = add_linear(store, &format!("{prefix}.gate2"), c, hidden, rng);
        let ca1 = add_linear(store, &format!("{prefix}.ca1"), hidden, c, rng);
        let ca2 = add_linear(store, &format!("{prefix}.ca2"), c, hidden, rng);
        let sa = add_conv(store, &format!("{prefix}.sa"), 1, 2, SA_KERNEL, he_std(2, SA_KERNEL) * 0.5, rng);
        let alpha = store.add(format!("{prefix}.alpha"), &[1], vec![T::from_f64(cfg.alpha_init)]);
        Ok(Self {
            channels: c,
            conv1,
            conv2,
            ln_in,
            ln_out,
            ssm,
            gate1,
            gate2,
            ca1,
            ca2,
            sa,
            alpha,
        })
    }
}

fn check_channels(x: Shape, p: &BlockParams) -> Result<()> {
    if x.c != p.channels {
        return Err(crate::error::shape_err("block input channels", &x.dims(), &[p.channels]));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolutional preprocessing

#[derive(Debug, Clone)]
pub struct ConvPreCache<T> {
    pub hidden: FeatureMap<T>,
    pub activated: FeatureMap<T>,
}

pub fn conv_preprocess<T: Real>(x: &FeatureMap<T>, p: &BlockParams, store: &ParamStore<T>) -> Result<(FeatureMap<T>, ConvPreCache<T>)> {
    check_channels(x.shape(), p)?;
    let hidden = conv2d(x, &p.conv1.view(store))?;
    let activated = relu(&hidden);
    let out = conv2d(&activated, &p.conv2.view(store))?;
    Ok((out, ConvPreCache { hidden, activated }))
}

pub fn conv_preprocess_backward<T: Real>(
    x: &FeatureMap<T>,
    cache: &ConvPreCache<T>,
    grad: &FeatureMap<T>,
    p: &BlockParams,
    store: &mut ParamStore<T>,
) -> Result<FeatureMap<T>> {
    let g2 = conv2d_backward(&cache.activated, &p.conv2.view(store), grad)?;
    store.accumulate(p.conv2.weight, &g2.weight);
    store.accumulate(p.conv2.bias, &g2.bias);
    let gh = relu_backward(&cache.hidden, &g2.input)?;
    let g1 = conv2d_backward(x, &p.conv1.view(store), &gh)?;
    store.accumulate(p.conv1.weight, &g1.weight);
    store.accumulate(p.conv1.bias, &g1.bias);
    Ok(g1.input)
}

// ---------------------------------------------------------------------------
// Patch-level scan core

#[derive(Debug, Clone)]
pub struct CoreCache<T> {
    pub pad: PadRecord,
    pub level: SplitLevel,
    pub ln_in: LayerNormCache<T>,
    /// Normalised patch sequences fed to the scan.
    pub sequences: Vec<TokenSequence<T>>,
    pub ln_out: LayerNormCache<T>,
}

fn ln_eps<T: Real>() -> T {
    T::from_f64(DEFAULT_LN_EPS)
}

fn fold_all<T: Real>(seqs: &[TokenSequence<T>], template: &PatchSet<T>) -> Result<FeatureMap<T>> {
    let (ph, pw) = (template.spec.patch_h(), template.spec.patch_w());
    let patches = seqs.iter().map(|s| fold(s, ph, pw)).collect::<Result<Vec<_>>>()?;
    merge(&PatchSet {
        patches,
        spec: template.spec,
        parent: template.parent,
    })
}

/// Pads to the patch grid, normalises, scans every patch with shared
/// parameters, normalises again and crops back.
///
/// Normalisation is per token, so applying it to the whole map is the same as
/// applying it patch by patch.
pub fn patch_mamba_core<T: Real>(
    x: &FeatureMap<T>,
    p: &BlockParams,
    store: &ParamStore<T>,
    level: SplitLevel,
) -> Result<(FeatureMap<T>, CoreCache<T>)> {
    check_channels(x.shape(), p)?;
    let (rows, cols) = level.grid();
    let (xp, pad) = pad_to_multiple(x, rows, cols)?;
    let (u, ln_in) = layer_norm(&xp, store.value(p.ln_in.gamma), store.value(p.ln_in.beta), ln_eps())?;
    let ps = split(&u, level)?;
    let ssm = p.ssm.view(store);
    let sequences: Vec<TokenSequence<T>> = ps.patches.iter().map(unfold).collect();
    let scanned = parallel::map(sequences.len(), |j| ssm_scan(&sequences[j], &ssm, None))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let z = fold_all(&scanned, &ps)?;
    let (v, ln_out) = layer_norm(&z, store.value(p.ln_out.gamma), store.value(p.ln_out.beta), ln_eps())?;
    Ok((
        crop(&v, &pad),
        CoreCache {
            pad,
            level,
            ln_in,
            sequences,
            ln_out,
        },
    ))
}

pub fn patch_mamba_core_backward<T: Real>(
    cache: &CoreCache<T>,
    grad: &FeatureMap<T>,
    p: &BlockParams,
    store: &mut ParamStore<T>,
) -> Result<FeatureMap<T>> {
    let gv = crop_backward(grad, &cache.pad);
    let (gz, gg2, gb2) = layer_norm_backward(&cache.ln_out, store.value(p.ln_out.gamma), &gv)?;
    store.accumulate(p.ln_out.gamma, &gg2);
    store.accumulate(p.ln_out.beta, &gb2);
    let gps = split(&gz, cache.level)?;
    let grads = {
        let ssm = p.ssm.view(store);
        let seqs = &cache.sequences;
        let results = parallel::map(gps.patches.len(), |j| {
            ssm_scan_backward(&seqs[j], &ssm, &unfold(&gps.patches[j]))
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let mut inputs = Vec::with_capacity(grads.len());
    for g in grads {
        store.accumulate(p.ssm.a_raw, &g.a_raw);
        store.accumulate(p.ssm.b, &g.b);
        store.accumulate(p.ssm.cw, &g.cw);
        store.accumulate(p.ssm.d, &g.d);
        inputs.push(g.input);
    }
    let gu = fold_all(&inputs, &gps)?;
    let (gxp, gg1, gb1) = layer_norm_backward(&cache.ln_in, store.value(p.ln_in.gamma), &gu)?;
    store.accumulate(p.ln_in.gamma, &gg1);
    store.accumulate(p.ln_in.beta, &gb1);
    Ok(pad_backward(&gxp, &cache.pad))
}

// ---------------------------------------------------------------------------
// Gated fusion

#[derive(Debug, Clone)]
pub struct SqueezeCache<T> {
    pub pooled: Vec<T>,
    pub hidden: Vec<T>,
    pub gate: Vec<T>,
}

/// `sigmoid(W2 relu(W1 v + b1) + b2)` row by row.
fn squeeze_gate<T: Real>(pooled: Vec<T>, rows: usize, l1: &LinearHandle, l2: &LinearHandle, store: &ParamStore<T>) -> SqueezeCache<T> {
    let hidden = linear(&pooled, rows, store.value(l1.weight), store.value(l1.bias));
    let act: Vec<T> = hidden.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
    let gate = linear(&act, rows, store.value(l2.weight), store.value(l2.bias))
        .into_iter()
        .map(sigmoid)
        .collect();
    SqueezeCache { pooled, hidden, gate }
}

/// Returns the gradient with respect to the pooled vector.
fn squeeze_gate_backward<T: Real>(
    cache: &SqueezeCache<T>,
    grad_gate: &[T],
    rows: usize,
    l1: &LinearHandle,
    l2: &LinearHandle,
    store: &mut ParamStore<T>,
) -> Vec<T> {
    let gz: Vec<T> = grad_gate
        .iter()
        .zip(&cache.gate)
        .map(|(&g, &s)| g * s * (T::ONE - s))
        .collect();
    let act: Vec<T> = cache.hidden.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
    let g2 = linear_backward(&act, rows, store.value(l2.weight), &gz);
    store.accumulate(l2.weight, &g2.weight);
    store.accumulate(l2.bias, &g2.bias);
    let gh: Vec<T> = g2
        .input
        .iter()
        .zip(&cache.hidden)
        .map(|(&g, &h)| if h > T::ZERO { g } else { T::ZERO })
        .collect();
    let g1 = linear_backward(&cache.pooled, rows, store.value(l1.weight), &gh);
    store.accumulate(l1.weight, &g1.weight);
    store.accumulate(l1.bias, &g1.bias);
    g1.input
}

/// Scales every `(b, c)` plane of `x` by `gate[b * C + c]`.
fn scale_planes<T: Real>(x: &FeatureMap<T>, gate: &[T]) -> FeatureMap<T> {
    let mut out = x.clone();
    let plane = x.shape().plane();
    for (chunk, &g) in out.data_mut().chunks_mut(plane).zip(gate) {
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    out
}

/// Per-plane inner products `sum_hw a * b`.
fn plane_dots<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Vec<T> {
    let plane = a.shape().plane();
    a.data()
        .chunks(plane)
        .zip(b.data().chunks(plane))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
        .collect()
}

#[derive(Debug, Clone)]
pub struct FusionCache<T> {
    pub squeeze: SqueezeCache<T>,
}

pub fn gated_fusion<T: Real>(
    f_conv: &FeatureMap<T>,
    f_m: &FeatureMap<T>,
    p: &BlockParams,
    store: &ParamStore<T>,
) -> Result<(FeatureMap<T>, FusionCache<T>)> {
    f_conv.check_same(f_m, "gated fusion branches")?;
    check_channels(f_conv.shape(), p)?;
    let s = f_conv.shape();
    let pooled = global_avg_pool(&f_conv.zip_map(f_m, |a, b| a + b)?);
    let squeeze = squeeze_gate(pooled, s.b, &p.gate1, &p.gate2, store);
    let plane = s.plane();
    let mut mix = FeatureMap::zeros(s);
    for (i, ((dst, a), b)) in mix
        .data_mut()
        .chunks_mut(plane)
        .zip(f_conv.data().chunks(plane))
        .zip(f_m.data().chunks(plane))
        .enumerate()
    {
        let g = squeeze.gate[i];
        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
            *d = g * x + (T::ONE - g) * y;
        }
    }
    Ok((mix, FusionCache { squeeze }))
}

/// Returns `(grad_f_conv, grad_f_m)`.
pub fn gated_fusion_backward<T: Real>(
    f_conv: &FeatureMap<T>,
    f_m: &FeatureMap<T>,
    cache: &FusionCache<T>,
    grad: &FeatureMap<T>,
    p: &BlockParams,
    store: &mut ParamStore<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let s = f_conv.shape();
    let gate = &cache.squeeze.gate;
    let diff = f_conv.zip_map(f_m, |a, b| a - b)?;
    let grad_gate = plane_dots(grad, &diff);
    let g_pooled = squeeze_gate_backward(&cache.squeeze, &grad_gate, s.b, &p.gate1, &p.gate2, store);
    let g_sum = global_avg_pool_backward(s, &g_pooled);
    let mut g_conv = scale_planes(grad, gate);
    let one_minus: Vec<T> = gate.iter().map(|&g| T::ONE - g).collect();
    let mut g_m = scale_planes(grad, &one_minus);
    g_conv.add_assign(&g_sum)?;
    g_m.add_assign(&g_sum)?;
    Ok((g_conv, g_m))
}

// ---------------------------------------------------------------------------
// Dual attention

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub channel: SqueezeCache<T>,
    pub after_ca: FeatureMap<T>,
    /// `(B, 2, H, W)` channel mean and max maps.
    pub pooled: FeatureMap<T>,
    pub argmax: Vec<u32>,
    /// `(B, 1, H, W)` spatial gate.
    pub spatial_gate: FeatureMap<T>,
    pub refined: FeatureMap<T>,
}

fn channel_mean_max<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let s = x.shape();
    let hw = s.plane();
    let inv = T::ONE / T::from_usize(s.c);
    let mut out = FeatureMap::zeros(Shape::new(s.b, 2, s.h, s.w));
    let mut arg = vec![0u32; s.b * hw];
    for b in 0..s.b {
        let item = x.item(b);
        for p in 0..hw {
            let mut sum = T::ZERO;
            let mut best = item[p];
            let mut bi = 0;
            for c in 0..s.c {
                let v = item[c * hw + p];
                sum += v;
                if v > best {
                    best = v;
                    bi = c;
                }
            }
            out.data_mut()[(b * 2) * hw + p] = sum * inv;
            out.data_mut()[(b * 2 + 1) * hw + p] = best;
            arg[b * hw + p] = bi as u32;
        }
    }
    (out, arg)
}

pub fn dual_attention<T: Real>(
    x_in: &FeatureMap<T>,
    f_mix: &FeatureMap<T>,
    p: &BlockParams,
    store: &ParamStore<T>,
) -> Result<(FeatureMap<T>, AttentionCache<T>)> {
    x_in.check_same(f_mix, "dual attention residual")?;
    check_channels(x_in.shape(), p)?;
    let s = f_mix.shape();
    let hw = s.plane();
    let channel = squeeze_gate(global_avg_pool(f_mix), s.b, &p.ca1, &p.ca2, store);
    let after_ca = scale_planes(f_mix, &channel.gate);
    let (pooled, argmax) = channel_mean_max(&after_ca);
    let spatial_gate = conv2d(&pooled, &p.sa.view(store))?.map(sigmoid);
    let mut refined = after_ca.clone();
    for b in 0..s.b {
        let g = spatial_gate.item(b);
        for chunk in refined.data_mut()[b * s.c * hw..(b + 1) * s.c * hw].chunks_mut(hw) {
            chunk.iter_mut().zip(g).for_each(|(v, &gv)| *v *= gv);
        }
    }
    let alpha = store.value(p.alpha)[0];
    let y = x_in.zip_map(&refined, |a, r| a + alpha * r)?;
    Ok((
        y,
        AttentionCache {
            channel,
            after_ca,
            pooled,
            argmax,
            spatial_gate,
            refined,
        },
    ))
}

/// Returns `(grad_x_in, grad_f_mix)`.
pub fn dual_attention_backward<T: Real>(
    f_mix: &FeatureMap<T>,
    cache: &AttentionCache<T>,
    grad: &FeatureMap<T>,
    p: &BlockParams,
    store: &mut ParamStore<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let s = f_mix.shape();
    let hw = s.plane();
    let alpha = store.value(p.alpha)[0];
    let g_alpha: T = grad.data().iter().zip(cache.refined.data()).map(|(&g, &r)| g * r).sum();
    store.accumulate(p.alpha, &[g_alpha]);

    // refined = after_ca * spatial_gate (broadcast over channels)
    let mut g_ca = FeatureMap::zeros(s);
    let mut g_gate = FeatureMap::zeros(cache.spatial_gate.shape());
    for b in 0..s.b {
        let gate = cache.spatial_gate.item(b);
        for c in 0..s.c {
            let o = (b * s.c + c) * hw;
            for i in 0..hw {
                let gr = alpha * grad.data()[o + i];
                g_ca.data_mut()[o + i] = gr * gate[i];
                g_gate.data_mut()[b * hw + i] += gr * cache.after_ca.data()[o + i];
            }
        }
    }
    let g_logit = cache.spatial_gate.zip_map(&g_gate, |sg, g| g * sg * (T::ONE - sg))?;
    let gs = conv2d_backward(&cache.pooled, &p.sa.view(store), &g_logit)?;
    store.accumulate(p.sa.weight, &gs.weight);
    store.accumulate(p.sa.bias, &gs.bias);
    let inv = T::ONE / T::from_usize(s.c);
    for b in 0..s.b {
        for i in 0..hw {
            let gm = gs.input.data()[(b * 2) * hw + i] * inv;
            let gx = gs.input.data()[(b * 2 + 1) * hw + i];
            let am = cache.argmax[b * hw + i] as usize;
            for c in 0..s.c {
                g_ca.data_mut()[(b * s.c + c) * hw + i] += gm;
            }
            g_ca.data_mut()[(b * s.c + am) * hw + i] += gx;
        }
    }

    // after_ca = f_mix * channel gate
    let grad_gate = plane_dots(&g_ca, f_mix);
    let g_pooled = squeeze_gate_backward(&cache.channel, &grad_gate, s.b, &p.ca1, &p.ca2, store);
    let mut g_mix = scale_planes(&g_ca, &cache.channel.gate);
    g_mix.add_assign(&global_avg_pool_backward(s, &g_pooled))?;
    Ok((grad.clone(), g_mix))
}

// ---------------------------------------------------------------------------
// Whole block

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub input: FeatureMap<T>,
    pub f_conv: FeatureMap<T>,
    pub f_m: FeatureMap<T>,
    pub f_mix: FeatureMap<T>,
    pub conv: ConvPreCache<T>,
    pub core: CoreCache<T>,
    pub fusion: FusionCache<T>,
    pub attention: AttentionCache<T>,
}

pub fn block_forward<T: Real>(
    x: &FeatureMap<T>,
    p: &BlockParams,
    store: &ParamStore<T>,
    level: SplitLevel,
) -> Result<(FeatureMap<T>, BlockCache<T>)> {
    let (f_conv, conv) = conv_preprocess(x, p, store)?;
    let (f_m, core) = patch_mamba_core(x, p, store, level)?;
    let (f_mix, fusion) = gated_fusion(&f_conv, &f_m, p, store)?;
    let (y, attention) = dual_attention(x, &f_mix, p, store)?;
    Ok((
        y,
        BlockCache {
            input: x.clone(),
            f_conv,
            f_m,
            f_mix,
            conv,
            core,
            fusion,
            attention,
        },
    ))
}

/// Accumulates parameter gradients into `store` and returns the input gradient.
pub fn block_backward<T: Real>(
    cache: &BlockCache<T>,
    grad: &FeatureMap<T>,
    p: &BlockParams,
    store: &mut ParamStore<T>,
) -> Result<FeatureMap<T>> {
    let (mut gx, g_mix) = dual_attention_backward(&cache.f_mix, &cache.attention, grad, p, store)?;
    let (g_conv, g_m) = gated_fusion_backward(&cache.f_conv, &cache.f_m, &cache.fusion, &g_mix, p, store)?;
    gx.add_assign(&conv_preprocess_backward(&cache.input, &cache.conv, &g_conv, p, store)?)?;
    gx.add_assign(&patch_mamba_core_backward(&cache.core, &g_m, p, store)?)?;
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvKernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParamStore<f64>, BlockParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = BlockConfig {
            channels: c,
            state_n: 3,
            reduction: 2,
            alpha_init: 0.1,
        };
        let p = BlockParams::new(&mut store, "blk", &cfg, &mut rng).unwrap();
        (store, p, rng)
    }

    fn random_map(shape: Shape, rng: &mut impl Rng) -> FeatureMap<f64> {
        FeatureMap::from_fn(shape, |_, _, _, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn conv_preprocess_zero_in_zero_out() {
        let (store, p, _) = setup(4);
        let x = FeatureMap::zeros(Shape::new(1, 4, 8, 8));
        let (y, _) = conv_preprocess(&x, &p, &store).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_preprocess_identity_kernels_pass_nonnegative() {
        let (mut store, p, mut rng) = setup(4);
        let id = ConvKernel::<f64>::identity(4, 3);
        store.value_mut(p.conv1.weight).copy_from_slice(&id.weight);
        store.value_mut(p.conv2.weight).copy_from_slice(&id.weight);
        let x = random_map(Shape::new(1, 4, 6, 6), &mut rng).map(f64::abs);
        assert_eq!(conv_preprocess(&x, &p, &store).unwrap().0, x);
    }

    #[test]
    fn conv_preprocess_matches_two_conv_composition() {
        let (store, p, mut rng) = setup(4);
        let x = random_map(Shape::new(1, 4, 8, 8), &mut rng);
        let want = conv2d(&relu(&conv2d(&x, &p.conv1.view(&store)).unwrap()), &p.conv2.view(&store)).unwrap();
        assert_eq!(conv_preprocess(&x, &p, &store).unwrap().0, want);
    }

    #[test]
    fn full_level_core_is_single_raster() {
        let (store, p, mut rng) = setup(4);
        let x = random_map(Shape::new(1, 4, 4, 6), &mut rng);
        let (got, _) = patch_mamba_core(&x, &p, &store, SplitLevel::Full).unwrap();
        let (u, _) = layer_norm(&x, store.value(p.ln_in.gamma), store.value(p.ln_in.beta), 1e-6).unwrap();
        let z = ssm_scan(&unfold(&u), &p.ssm.view(&store), None).unwrap();
        let z = fold(&z, 4, 6).unwrap();
        let (want, _) = layer_norm(&z, store.value(p.ln_out.gamma), store.value(p.ln_out.beta), 1e-6).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn passthrough_core_reduces_to_double_norm() {
        let (mut store, p, mut rng) = setup(4);
        store.value_mut(p.ssm.a_raw).fill(-1e9);
        store.value_mut(p.ssm.b).fill(0.0);
        store.value_mut(p.ssm.cw).fill(0.0);
        for c in 0..4 {
            store.value_mut(p.ssm.b)[c * 3] = 1.0;
            store.value_mut(p.ssm.cw)[c * 3] = 1.0;
        }
        store.value_mut(p.ssm.d).fill(0.0);
        let x = random_map(Shape::new(1, 4, 8, 8), &mut rng);
        let (got, _) = patch_mamba_core(&x, &p, &store, SplitLevel::Octants).unwrap();
        let (u, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        let (want, _) = layer_norm(&u, &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn core_pads_indivisible_input() {
        let (store, p, mut rng) = setup(4);
        let x = random_map(Shape::new(2, 4, 7, 5), &mut rng);
        let (y, _) = patch_mamba_core(&x, &p, &store, SplitLevel::Octants).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }

    #[test]
    fn core_is_local_to_octants() {
        let (store, p, mut rng) = setup(4);
        let x = random_map(Shape::new(1, 4, 8, 8), &mut rng);
        let (base, _) = patch_mamba_core(&x, &p, &store, SplitLevel::Octants).unwrap();
        let mut z = x.clone();
        // octant 3 covers rows 2..4, cols 4..8
        for c in 0..4 {
            for y in 2..4 {
                for xx in 4..8 {
                    z.set(0, c, y, xx, 0.0);
                }
            }
        }
        let (pert, _) = patch_mamba_core(&z, &p, &store, SplitLevel::Octants).unwrap();
        for c in 0..4 {
            for y in 0..8 {
                for xx in 0..8 {
                    let inside = (2..4).contains(&y) && xx >= 4;
                    if !inside {
                        assert_eq!(base.at(0, c, y, xx), pert.at(0, c, y, xx));
                    }
                }
            }
        }
        assert_ne!(base, pert);
    }

    #[test]
    fn zero_gate_averages_branches() {
        let (mut store, p, mut rng) = setup(4);
        store.value_mut(p.gate2.weight).fill(0.0);
        store.value_mut(p.gate2.bias).fill(0.0);
        let a = random_map(Shape::new(2, 4, 3, 3), &mut rng);
        let b = random_map(Shape::new(2, 4, 3, 3), &mut rng);
        let (mix, _) = gated_fusion(&a, &b, &p, &store).unwrap();
        for ((m, x), y) in mix.data().iter().zip(a.data()).zip(b.data()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_branches_are_fixed_point() {
        let (store, p, mut rng) = setup(4);
        let a = random_map(Shape::new(1, 4, 3, 3), &mut rng);
        let (mix, _) = gated_fusion(&a, &a, &p, &store).unwrap();
        for (m, x) in mix.data().iter().zip(a.data()) {
            assert!((m - x).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_matches_composed_oracle() {
        let (store, p, mut rng) = setup(4);
        let a = random_map(Shape::new(2, 4, 5, 3), &mut rng);
        let b = random_map(Shape::new(2, 4, 5, 3), &mut rng);
        let (mix, _) = gated_fusion(&a, &b, &p, &store).unwrap();
        let pooled = global_avg_pool(&a.zip_map(&b, |x, y| x + y).unwrap());
        for bi in 0..2 {
            let v = &pooled[bi * 4..(bi + 1) * 4];
            let w1 = store.value(p.gate1.weight);
            let h: Vec<f64> = (0..2)
                .map(|o| (store.value(p.gate1.bias)[o] + (0..4).map(|i| w1[o * 4 + i] * v[i]).sum::<f64>()).max(0.0))
                .collect();
            let w2 = store.value(p.gate2.weight);
            for c in 0..4 {
                let z = store.value(p.gate2.bias)[c] + (0..2).map(|i| w2[c * 2 + i] * h[i]).sum::<f64>();
                let g = 1.0 / (1.0 + (-z).exp());
                for y in 0..5 {
                    for x in 0..3 {
                        let want = g * a.at(bi, c, y, x) + (1.0 - g) * b.at(bi, c, y, x);
                        assert!((mix.at(bi, c, y, x) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_alpha_is_residual_only() {
        let (mut store, p, mut rng) = setup(4);
        store.value_mut(p.alpha)[0] = 0.0;
        let x = random_map(Shape::new(1, 4, 8, 8), &mut rng);
        let m = random_map(Shape::new(1, 4, 8, 8), &mut rng);
        assert_eq!(dual_attention(&x, &m, &p, &store).unwrap().0, x);
        assert_eq!(block_forward(&x, &p, &store, SplitLevel::Octants).unwrap().0, x);
    }

    #[test]
    fn saturated_gates_add_mix() {
        let (mut store, p, mut rng) = setup(4);
        store.value_mut(p.alpha)[0] = 1.0;
        store.value_mut(p.ca2.weight).fill(0.0);
        store.value_mut(p.ca2.bias).fill(60.0);
        store.value_mut(p.sa.weight).fill(0.0);
        store.value_mut(p.sa.bias).fill(60.0);
        let x = random_map(Shape::new(1, 4, 4, 4), &mut rng);
        let m = random_map(Shape::new(1, 4, 4, 4), &mut rng);
        let (y, _) = dual_attention(&x, &m, &p, &store).unwrap();
        for ((a, b), c) in y.data().iter().zip(x.data()).zip(m.data()) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_composed_oracle() {
        let (store, p, mut rng) = setup(4);
        let x = random_map(Shape::new(1, 4, 5, 5), &mut rng);
        let m = random_map(Shape::new(1, 4, 5, 5), &mut rng);
        let (y, _) = dual_attention(&x, &m, &p, &store).unwrap();
        // CA
        let q = global_avg_pool(&m);
        let w1 = store.value(p.ca1.weight);
        let h: Vec<f64> = (0..2).map(|o| (store.value(p.ca1.bias)[o] + (0..4).map(|i| w1[o * 4 + i] * q[i]).sum::<f64>()).max(0.0)).collect();
        let w2 = store.value(p.ca2.weight);
        let gca: Vec<f64> = (0..4)
            .map(|c| 1.0 / (1.0 + (-(store.value(p.ca2.bias)[c] + (0..2).map(|i| w2[c * 2 + i] * h[i]).sum::<f64>())).exp()))
            .collect();
        let ca = FeatureMap::from_fn(m.shape(), |_, c, yy, xx| gca[c] * m.at(0, c, yy, xx));
        // SA
        let pool = FeatureMap::from_fn(Shape::new(1, 2, 5, 5), |_, k, yy, xx| {
            let vals: Vec<f64> = (0..4).map(|c| ca.at(0, c, yy, xx)).collect();
            if k == 0 {
                vals.iter().sum::<f64>() / 4.0
            } else {
                vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        });
        let s = conv2d(&pool, &p.sa.view(&store)).unwrap();
        let alpha = store.value(p.alpha)[0];
        for c in 0..4 {
            for yy in 0..5 {
                for xx in 0..5 {
                    let g = 1.0 / (1.0 + (-s.at(0, 0, yy, xx)).exp());
                    let want = x.at(0, c, yy, xx) + alpha * g * ca.at(0, c, yy, xx);
                    assert!((y.at(0, c, yy, xx) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_equals_chained_ops() {
        let (store, p, mut rng) = setup(4);
        let x = random_map(Shape::new(1, 4, 8, 8), &mut rng);
        let (fc, _) = conv_preprocess(&x, &p, &store).unwrap();
        let (fm, _) = patch_mamba_core(&x, &p, &store, SplitLevel::Quadrants).unwrap();
        let (mix, _) = gated_fusion(&fc, &fm, &p, &store).unwrap();
        let (want, _) = dual_attention(&x, &mix, &p, &store).unwrap();
        let (got, _) = block_forward(&x, &p, &store, SplitLevel::Quadrants).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = BlockConfig {
            channels: 6,
            state_n: 2,
            reduction: 4,
            alpha_init: 0.1,
        };
        assert!(BlockParams::new(&mut store, "b", &cfg, &mut rng).is_err());
    }
}
