//! Restoration task descriptions.

use std::fmt;

use crate::error::{Error, Result};

/// Default Charbonnier epsilon.
pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// Additive Gaussian noise with standard deviation `sigma` on the `[0, 255]` scale.
    Denoise { sigma: f64 },
    /// Integer-factor downscaling.
    SuperResolve { scale: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    L1,
    Charbonnier { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoreTask {
    pub kind: TaskKind,
    pub loss: LossKind,
}

impl RestoreTask {
    /// Denoising with the Charbonnier objective.
    pub fn denoise(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise sigma must be > 0, got {sigma}")));
        }
        Ok(Self {
            kind: TaskKind::Denoise { sigma },
            loss: LossKind::Charbonnier { eps: CHARBONNIER_EPS },
        })
    }

    /// Super-resolution with the L1 objective.
    pub fn super_resolve(scale: usize) -> Result<Self> {
        if !(2..=4).contains(&scale) {
            return Err(Error::Invalid(format!("super-resolution scale must be 2, 3 or 4, got {scale}")));
        }
        Ok(Self {
            kind: TaskKind::SuperResolve { scale },
            loss: LossKind::L1,
        })
    }

    /// Output-to-input spatial ratio.
    pub fn scale(&self) -> usize {
        match self.kind {
            TaskKind::Denoise { .. } => 1,
            TaskKind::SuperResolve { scale } => scale,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Result<Self> {
        if let LossKind::Charbonnier { eps } = loss {
            if !(eps > 0.0) {
                return Err(Error::Invalid(format!("Charbonnier eps must be > 0, got {eps}")));
            }
        }
        self.loss = loss;
        Ok(self)
    }
}

impl fmt::Display for RestoreTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TaskKind::Denoise { sigma } => write!(f, "denoise(sigma={sigma})"),
            TaskKind::SuperResolve { scale } => write!(f, "sr(x{scale})"),
        }
    }
}
