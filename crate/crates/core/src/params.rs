//! Named learnable tensors with paired gradient and Adam moment buffers.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::ssm::SsmView;
use crate::tensor::ConvView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// The checkpointable model state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, dims: &[usize], value: Vec<T>) -> ParamId {
        let name = name.into();
        let n: usize = dims.iter().product();
        assert_eq!(value.len(), n, "parameter {name}: value length vs dims {dims:?}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            dims: dims.to_vec(),
            value,
            grad: vec![T::ZERO; n],
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    /// Adds `g` into the gradient buffer of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        assert_eq!(p.grad.len(), g.len(), "gradient length for {}", p.name);
        p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::ZERO);
        }
    }

    pub fn set_value(&mut self, name: &str, dims: &[usize], value: &[T]) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::MissingRecord(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.dims != dims {
            return Err(Error::RecordShape {
                name: name.to_string(),
                expected: p.dims.clone(),
                found: dims.to_vec(),
            });
        }
        p.value.copy_from_slice(value);
        Ok(())
    }

    /// Same parameter set converted to another precision (moments and step included).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    value: conv(&p.value),
                    grad: conv(&p.grad),
                    m: conv(&p.m),
                    v: conv(&p.v),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }

    pub fn check_dims(&self, id: ParamId, dims: &[usize]) -> Result<()> {
        let p = self.param(id);
        if p.dims != dims {
            return Err(shape_err("parameter dims", &p.dims, dims));
        }
        Ok(())
    }
}

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvHandle {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
}

impl ConvHandle {
    pub fn view<'a, T: Real>(&self, store: &'a ParamStore<T>) -> ConvView<'a, T> {
        ConvView {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kh: self.k,
            kw: self.k,
            weight: store.value(self.weight),
            bias: store.value(self.bias),
        }
    }
}

/// A dense layer `out x in` plus bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearHandle {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_features: usize,
    pub in_features: usize,
}

/// Affine pair of a layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormHandle {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmHandle {
    pub a_raw: ParamId,
    pub b: ParamId,
    pub cw: ParamId,
    pub d: ParamId,
    pub channels: usize,
    pub n: usize,
}

impl SsmHandle {
    pub fn view<'a, T: Real>(&self, store: &'a ParamStore<T>) -> SsmView<'a, T> {
        SsmView {
            channels: self.channels,
            n: self.n,
            a_raw: store.value(self.a_raw),
            b: store.value(self.b),
            cw: store.value(self.cw),
            d: store.value(self.d),
        }
    }
}
