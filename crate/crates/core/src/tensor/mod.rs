//! Dense rank-4 feature maps and the kernels composed by the rest of the crate.
//!
//! Layout is `(batch, channels, height, width)`, row-major with width fastest.
//! Every forward kernel has a matching `*_backward` that maps an output
//! gradient to input (and parameter) gradients.

mod conv;
mod ops;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvKernel, ConvView};
pub use ops::{
    add, bilinear_upsample, bilinear_upsample_backward, crop, crop_backward, depth_to_space,
    depth_to_space_backward, global_avg_pool, global_avg_pool_backward, layer_norm,
    layer_norm_backward, linear, linear_backward, pad_to_multiple, pad_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, LayerNormCache, LinearGrads, PadRecord,
    DEFAULT_LN_EPS,
};

use crate::error::{shape_err, Result};
use crate::real::Real;

/// Extents of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

/// A dense `(B, C, H, W)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::ZERO)
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        assert!(
            shape.b > 0 && shape.c > 0 && shape.h > 0 && shape.w > 0,
            "feature map extents must be >= 1, got {shape:?}"
        );
        Self {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() || shape.numel() == 0 {
            return Err(shape_err("data length vs shape", &[data.len()], &shape.dims()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// The `H*W` plane of one `(batch, channel)` pair.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let o = (b * self.shape.c + c) * p;
        &self.data[o..o + p]
    }

    /// All channels of one batch item.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.c * self.shape.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, "elementwise operands")?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn check_same(&self, other: &Self, what: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(what, &self.shape.dims(), &other.shape.dims()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Copies one batch item out as a single-item map.
    pub fn batch_item(&self, b: usize) -> Self {
        Self {
            shape: Shape { b: 1, ..self.shape },
            data: self.item(b).to_vec(),
        }
    }

    /// Stacks single- or multi-item maps of equal `(C, H, W)` along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| crate::Error::Invalid("cannot stack zero maps".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for it in items {
            if (it.shape.c, it.shape.h, it.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(shape_err("stack", &first.shape.dims(), &it.shape.dims()));
            }
            b += it.shape.b;
            data.extend_from_slice(&it.data);
        }
        Ok(Self {
            shape: Shape { b, ..first.shape },
            data,
        })
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
