use super::{FeatureMap, Shape};
use crate::counter;
use crate::error::{shape_err, Error, Result};
use crate::parallel;
use crate::real::{self, Real};

pub const DEFAULT_LN_EPS: f64 = 1e-6;

pub fn relu<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient of [`relu`]; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Real>(x: &FeatureMap<T>, grad_y: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    x.zip_map(grad_y, |v, g| if v > T::ZERO { g } else { T::ZERO })
}

pub fn sigmoid<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(real::sigmoid)
}

/// Gradient of [`sigmoid`] expressed through its output `y`.
pub fn sigmoid_backward<T: Real>(y: &FeatureMap<T>, grad_y: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    y.zip_map(grad_y, |s, g| g * s * (T::ONE - s))
}

pub fn add<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Saved statistics of a [`layer_norm`] call.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalised input before the affine transform.
    pub xhat: FeatureMap<T>,
    /// Reciprocal standard deviation per `(b, h, w)` token.
    pub rstd: Vec<T>,
}

/// Normalises each `(b, h, w)` token across channels, then applies `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(FeatureMap<T>, LayerNormCache<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(shape_err("layer_norm affine vs channels", &[gamma.len(), beta.len()], &[s.c]));
    }
    let hw = s.plane();
    let inv_c = T::ONE / T::from_usize(s.c);
    let per_item = parallel::map(s.b, |b| {
        let src = x.item(b);
        let mut xhat = vec![T::ZERO; s.c * hw];
        let mut y = vec![T::ZERO; s.c * hw];
        let mut rstd = vec![T::ZERO; hw];
        for p in 0..hw {
            let mut mean = T::ZERO;
            for c in 0..s.c {
                mean += src[c * hw + p];
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for c in 0..s.c {
                let d = src[c * hw + p] - mean;
                var += d * d;
            }
            var *= inv_c;
            let r = T::ONE / (var + eps).sqrt();
            rstd[p] = r;
            for c in 0..s.c {
                let xh = (src[c * hw + p] - mean) * r;
                xhat[c * hw + p] = xh;
                y[c * hw + p] = gamma[c] * xh + beta[c];
            }
        }
        (y, xhat, rstd)
    });
    counter::add(5 * s.numel() as u64);
    let mut y = Vec::with_capacity(s.numel());
    let mut xhat = Vec::with_capacity(s.numel());
    let mut rstd = Vec::with_capacity(s.b * hw);
    for (yy, xh, r) in per_item {
        y.extend_from_slice(&yy);
        xhat.extend_from_slice(&xh);
        rstd.extend_from_slice(&r);
    }
    Ok((
        FeatureMap::from_vec(s, y)?,
        LayerNormCache {
            xhat: FeatureMap::from_vec(s, xhat)?,
            rstd,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    grad_y: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, Vec<T>, Vec<T>)> {
    let s = cache.xhat.shape();
    cache.xhat.check_same(grad_y, "layer_norm grad_y")?;
    let hw = s.plane();
    let inv_c = T::ONE / T::from_usize(s.c);
    let per_item = parallel::map(s.b, |b| {
        let xh = cache.xhat.item(b);
        let gy = grad_y.item(b);
        let mut gx = vec![T::ZERO; s.c * hw];
        let mut gg = vec![T::ZERO; s.c];
        let mut gb = vec![T::ZERO; s.c];
        for c in 0..s.c {
            for p in 0..hw {
                gg[c] += gy[c * hw + p] * xh[c * hw + p];
                gb[c] += gy[c * hw + p];
            }
        }
        for p in 0..hw {
            let mut m1 = T::ZERO;
            let mut m2 = T::ZERO;
            for c in 0..s.c {
                let g = gy[c * hw + p] * gamma[c];
                m1 += g;
                m2 += g * xh[c * hw + p];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            let r = cache.rstd[b * hw + p];
            for c in 0..s.c {
                let g = gy[c * hw + p] * gamma[c];
                gx[c * hw + p] = r * (g - m1 - xh[c * hw + p] * m2);
            }
        }
        (gx, gg, gb)
    });
    let mut gx = Vec::with_capacity(s.numel());
    let mut gg = vec![T::ZERO; s.c];
    let mut gb = vec![T::ZERO; s.c];
    for (x, g, bb) in per_item {
        gx.extend_from_slice(&x);
        gg.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
        gb.iter_mut().zip(&bb).for_each(|(a, &v)| *a += v);
    }
    Ok((FeatureMap::from_vec(s, gx)?, gg, gb))
}

/// Spatial mean per `(b, c)`, returned row-major as `B x C`.
pub fn global_avg_pool<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let s = x.shape();
    let inv = T::ONE / T::from_usize(s.plane());
    x.data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(shape: Shape, grad: &[T]) -> FeatureMap<T> {
    assert_eq!(grad.len(), shape.b * shape.c);
    let inv = T::ONE / T::from_usize(shape.plane());
    let mut out = FeatureMap::zeros(shape);
    for (plane, &g) in out.data_mut().chunks_mut(shape.plane()).zip(grad) {
        plane.fill(g * inv);
    }
    out
}

/// Original extents of a map padded by [`pad_to_multiple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl PadRecord {
    pub fn is_empty(&self) -> bool {
        self.orig_h == self.padded_h && self.orig_w == self.padded_w
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Pads bottom and right edges by replication up to the next multiples of `mh`, `mw`.
pub fn pad_to_multiple<T: Real>(x: &FeatureMap<T>, mh: usize, mw: usize) -> Result<(FeatureMap<T>, PadRecord)> {
    if mh == 0 || mw == 0 {
        return Err(Error::Invalid("pad multiples must be >= 1".into()));
    }
    let s = x.shape();
    let rec = PadRecord {
        orig_h: s.h,
        orig_w: s.w,
        padded_h: round_up(s.h, mh),
        padded_w: round_up(s.w, mw),
    };
    if rec.is_empty() {
        return Ok((x.clone(), rec));
    }
    let out = FeatureMap::from_fn(s.with_hw(rec.padded_h, rec.padded_w), |b, c, y, xx| {
        x.at(b, c, y.min(s.h - 1), xx.min(s.w - 1))
    });
    Ok((out, rec))
}

/// Adjoint of [`pad_to_multiple`]: replicated positions fold back onto the edge.
pub fn pad_backward<T: Real>(grad: &FeatureMap<T>, rec: &PadRecord) -> FeatureMap<T> {
    if rec.is_empty() {
        return grad.clone();
    }
    let s = grad.shape();
    let mut out = FeatureMap::zeros(s.with_hw(rec.orig_h, rec.orig_w));
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let (ty, tx) = (y.min(rec.orig_h - 1), x.min(rec.orig_w - 1));
                    let i = out.index(b, c, ty, tx);
                    out.data_mut()[i] += grad.at(b, c, y, x);
                }
            }
        }
    }
    out
}

/// Removes padding added by [`pad_to_multiple`].
pub fn crop<T: Real>(x: &FeatureMap<T>, rec: &PadRecord) -> FeatureMap<T> {
    crop_to(x, rec.orig_h, rec.orig_w)
}

pub(crate) fn crop_to<T: Real>(x: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let s = x.shape();
    if s.h == h && s.w == w {
        return x.clone();
    }
    FeatureMap::from_fn(s.with_hw(h, w), |b, c, y, xx| x.at(b, c, y, xx))
}

/// Adjoint of [`crop`]: zero-fills the removed border.
pub fn crop_backward<T: Real>(grad: &FeatureMap<T>, rec: &PadRecord) -> FeatureMap<T> {
    let s = grad.shape();
    if rec.is_empty() {
        return grad.clone();
    }
    FeatureMap::from_fn(s.with_hw(rec.padded_h, rec.padded_w), |b, c, y, x| {
        if y < s.h && x < s.w {
            grad.at(b, c, y, x)
        } else {
            T::ZERO
        }
    })
}

/// Row-wise affine map `y = x W^T + b` for `x: rows x in`, `W: out x in`.
pub fn linear<T: Real>(x: &[T], rows: usize, w: &[T], bias: &[T]) -> Vec<T> {
    let out = bias.len();
    let inp = w.len() / out;
    assert_eq!(x.len(), rows * inp);
    let mut y: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
    T::gemm(false, true, rows, inp, out, T::ONE, x, w, T::ONE, &mut y);
    y
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Real>(x: &[T], rows: usize, w: &[T], grad_y: &[T]) -> LinearGrads<T> {
    let inp = x.len() / rows;
    let out = w.len() / inp;
    assert_eq!(grad_y.len(), rows * out);
    let mut gx = vec![T::ZERO; rows * inp];
    let mut gw = vec![T::ZERO; out * inp];
    T::gemm(false, false, rows, out, inp, T::ONE, grad_y, w, T::ZERO, &mut gx);
    T::gemm(true, false, out, rows, inp, T::ONE, grad_y, x, T::ZERO, &mut gw);
    let mut gb = vec![T::ZERO; out];
    for r in 0..rows {
        for o in 0..out {
            gb[o] += grad_y[r * out + o];
        }
    }
    LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Source taps and weights of half-pixel bilinear resampling along one axis.
fn bilinear_taps(n_in: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel centres and edge clamping.
pub fn bilinear_upsample<T: Real>(x: &FeatureMap<T>, scale: usize) -> FeatureMap<T> {
    let s = x.shape();
    if scale == 1 {
        return x.clone();
    }
    let ty = bilinear_taps(s.h, scale);
    let tx = bilinear_taps(s.w, scale);
    FeatureMap::from_fn(s.with_hw(s.h * scale, s.w * scale), |b, c, y, xx| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[xx];
        let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
        let top = x.at(b, c, y0, x0) * (T::ONE - fx) + x.at(b, c, y0, x1) * fx;
        let bot = x.at(b, c, y1, x0) * (T::ONE - fx) + x.at(b, c, y1, x1) * fx;
        top * (T::ONE - fy) + bot * fy
    })
}

pub fn bilinear_upsample_backward<T: Real>(grad: &FeatureMap<T>, scale: usize) -> FeatureMap<T> {
    if scale == 1 {
        return grad.clone();
    }
    let s = grad.shape();
    let (h, w) = (s.h / scale, s.w / scale);
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let mut out = FeatureMap::zeros(s.with_hw(h, w));
    for b in 0..s.b {
        for c in 0..s.c {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = grad.at(b, c, y, xx);
                    let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
                    for (yy, wy) in [(y0, T::ONE - fy), (y1, fy)] {
                        for (xs, wx) in [(x0, T::ONE - fx), (x1, fx)] {
                            let i = out.index(b, c, yy, xs);
                            out.data_mut()[i] += g * wy * wx;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Sub-pixel rearrangement `(B, C*s*s, H, W) -> (B, C, H*s, W*s)`.
pub fn depth_to_space<T: Real>(x: &FeatureMap<T>, scale: usize) -> Result<FeatureMap<T>> {
    let s = x.shape();
    if s.c % (scale * scale) != 0 {
        return Err(Error::Invalid(format!(
            "depth_to_space: {} channels not divisible by {}",
            s.c,
            scale * scale
        )));
    }
    let c = s.c / (scale * scale);
    Ok(FeatureMap::from_fn(
        Shape::new(s.b, c, s.h * scale, s.w * scale),
        |b, ch, y, xx| x.at(b, ch * scale * scale + (y % scale) * scale + xx % scale, y / scale, xx / scale),
    ))
}

pub fn depth_to_space_backward<T: Real>(grad: &FeatureMap<T>, scale: usize) -> FeatureMap<T> {
    let s = grad.shape();
    FeatureMap::from_fn(
        Shape::new(s.b, s.c * scale * scale, s.h / scale, s.w / scale),
        |b, ch, y, xx| {
            let c = ch / (scale * scale);
            let r = ch % (scale * scale);
            grad.at(b, c, y * scale + r / scale, xx * scale + r % scale)
        },
    )
}
