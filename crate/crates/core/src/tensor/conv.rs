//! Stride-1 "same" 2D cross-correlation via im2col and GEMM.

use super::{FeatureMap, Shape};
use crate::error::{shape_err, Error, Result};
use crate::parallel;
use crate::real::Real;

/// An owned convolution kernel: weights `(out, in, kh, kw)` and one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weight: vec![T::ZERO; out_channels * in_channels * kh * kw],
            bias: vec![T::ZERO; out_channels],
        }
    }

    /// Center-tap identity kernel (`in == out`).
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut kern = Self::zeros(channels, channels, k, k);
        let c = k / 2;
        for o in 0..channels {
            kern.weight[((o * channels + o) * k + c) * k + c] = T::ONE;
        }
        kern
    }

    pub fn view(&self) -> ConvView<'_, T> {
        ConvView {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kh: self.kh,
            kw: self.kw,
            weight: &self.weight,
            bias: &self.bias,
        }
    }
}

/// Borrowed kernel, usually pointing into a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct ConvView<'a, T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: &'a [T],
    pub bias: &'a [T],
}

impl<T> ConvView<'_, T> {
    fn validate(&self, x: Shape) -> Result<()> {
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(Error::Invalid(format!(
                "kernel extents must be odd, got {}x{}",
                self.kh, self.kw
            )));
        }
        if self.weight.len() != self.out_channels * self.in_channels * self.kh * self.kw
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Invalid("kernel buffers do not match declared extents".into()));
        }
        if x.c != self.in_channels {
            return Err(shape_err(
                "conv2d input vs kernel (out, in, kh, kw)",
                &x.dims(),
                &[self.out_channels, self.in_channels, self.kh, self.kw],
            ));
        }
        Ok(())
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kj as isize - pw as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            T::ZERO
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, dst: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    dst.fill(T::ZERO);
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kj as isize - pw as isize;
                        if sx >= 0 && sx < w as isize {
                            srow[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded "same" cross-correlation (no kernel flip), stride 1.
pub fn conv2d<T: Real>(x: &FeatureMap<T>, k: &ConvView<'_, T>) -> Result<FeatureMap<T>> {
    let s = x.shape();
    k.validate(s)?;
    let hw = s.plane();
    let out_shape = s.with_c(k.out_channels);
    let mut out = FeatureMap::zeros(out_shape);
    let per_item = k.out_channels * hw;
    parallel::for_each_chunk(out.data_mut(), per_item, |b, dst| {
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(k.bias[o]);
        }
        let src = x.item(b);
        if k.pointwise() {
            T::gemm(false, false, k.out_channels, k.in_channels, hw, T::ONE, k.weight, src, T::ONE, dst);
        } else {
            let mut cols = vec![T::ZERO; k.patch_len() * hw];
            im2col(src, s.c, s.h, s.w, k.kh, k.kw, &mut cols);
            T::gemm(false, false, k.out_channels, k.patch_len(), hw, T::ONE, k.weight, &cols, T::ONE, dst);
        }
    });
    Ok(out)
}

/// Gradients of a convolution with respect to its input and kernel.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: FeatureMap<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Adjoint of [`conv2d`] for output gradient `grad_y`.
pub fn conv2d_backward<T: Real>(
    x: &FeatureMap<T>,
    k: &ConvView<'_, T>,
    grad_y: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    let s = x.shape();
    k.validate(s)?;
    if grad_y.shape() != s.with_c(k.out_channels) {
        return Err(shape_err("conv2d grad_y", &grad_y.shape().dims(), &s.with_c(k.out_channels).dims()));
    }
    let hw = s.plane();
    let kl = k.patch_len();
    let partials = parallel::map(s.b, |b| {
        let src = x.item(b);
        let gy = grad_y.item(b);
        let mut gw = vec![T::ZERO; k.out_channels * kl];
        let mut gx = vec![T::ZERO; s.c * hw];
        let gb: Vec<T> = gy.chunks(hw).map(|r| r.iter().copied().sum()).collect();
        if k.pointwise() {
            T::gemm(false, true, k.out_channels, hw, s.c, T::ONE, gy, src, T::ZERO, &mut gw);
            T::gemm(true, false, s.c, k.out_channels, hw, T::ONE, k.weight, gy, T::ZERO, &mut gx);
        } else {
            let mut cols = vec![T::ZERO; kl * hw];
            im2col(src, s.c, s.h, s.w, k.kh, k.kw, &mut cols);
            T::gemm(false, true, k.out_channels, hw, kl, T::ONE, gy, &cols, T::ZERO, &mut gw);
            T::gemm(true, false, kl, k.out_channels, hw, T::ONE, k.weight, gy, T::ZERO, &mut cols);
            col2im(&cols, s.c, s.h, s.w, k.kh, k.kw, &mut gx);
        }
        (gx, gw, gb)
    });
    let mut weight = vec![T::ZERO; k.out_channels * kl];
    let mut bias = vec![T::ZERO; k.out_channels];
    let mut input = Vec::with_capacity(s.numel());
    for (gx, gw, gb) in partials {
        input.extend_from_slice(&gx);
        weight.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
        bias.iter_mut().zip(&gb).for_each(|(a, &b)| *a += b);
    }
    Ok(ConvGrads {
        input: FeatureMap::from_vec(s, input)?,
        weight,
        bias,
    })
}
