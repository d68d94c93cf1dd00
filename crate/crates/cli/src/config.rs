//! Line-oriented `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are rejected. Serialising writes every key in a fixed order, so
//! parse -> serialise -> parse is idempotent.

use std::fmt;
use std::str::FromStr;

use psmamba_core::hierarchy::schedule;
use psmamba_core::optim::AdamConfig;
use psmamba_core::{ModelConfig, SplitLevel, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(format!("precision must be f32 or f64, got {s:?}")),
        }
    }
}

/// Desk-scale defaults: small enough that a full train/restore/eval cycle fits
/// in a few CPU minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub total_steps: usize,
    pub milestones: Vec<usize>,
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub val_every: usize,
    pub checkpoint_every: usize,
    pub val_crop: usize,
    pub split_level: SplitLevel,
    pub n_blocks: usize,
    pub c0: usize,
    pub channel_step: usize,
    pub state_n: usize,
    pub alpha_init: f64,
    pub reduction_r: usize,
    pub sigma: f64,
    pub scale: usize,
    pub charbonnier_eps: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            crop_size: 16,
            total_steps: 300,
            milestones: Vec::new(),
            seed: 0,
            precision: Precision::F32,
            deterministic: false,
            val_every: 50,
            checkpoint_every: 0,
            val_crop: 64,
            split_level: SplitLevel::Octants,
            n_blocks: 1,
            c0: 16,
            channel_step: 48,
            state_n: 8,
            alpha_init: 0.1,
            reduction_r: 4,
            sigma: 25.0,
            scale: 2,
            charbonnier_eps: 1e-3,
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value {v:?}: {e}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "lr" => self.lr = num(v)?,
            "beta1" => self.beta1 = num(v)?,
            "beta2" => self.beta2 = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "crop_size" => self.crop_size = num(v)?,
            "total_steps" => self.total_steps = num(v)?,
            "milestones" => {
                self.milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(num)
                    .collect::<Result<_, _>>()?
            }
            "seed" => self.seed = num(v)?,
            "precision" => self.precision = v.parse()?,
            "deterministic" => self.deterministic = num(v)?,
            "val_every" => self.val_every = num(v)?,
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            "val_crop" => self.val_crop = num(v)?,
            "split_level" => self.split_level = v.parse().map_err(|e: psmamba_core::Error| e.to_string())?,
            "n_blocks" => self.n_blocks = num(v)?,
            "c0" => self.c0 = num(v)?,
            "channel_step" => self.channel_step = num(v)?,
            "state_n" => self.state_n = num(v)?,
            "alpha_init" => self.alpha_init = num(v)?,
            "reduction_r" => self.reduction_r = num(v)?,
            "sigma" => self.sigma = num(v)?,
            "scale" => self.scale = num(v)?,
            "charbonnier_eps" => self.charbonnier_eps = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn model(&self, scale: usize) -> ModelConfig {
        ModelConfig {
            c0: self.c0,
            channel_step: self.channel_step,
            n_blocks: self.n_blocks,
            state_n: self.state_n,
            reduction: self.reduction_r,
            alpha_init: self.alpha_init,
            levels: schedule(self.split_level),
            scale,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            crop_size: self.crop_size,
            total_steps: self.total_steps,
            milestones: self.milestones.clone(),
            seed: self.seed,
            deterministic: self.deterministic,
            val_every: self.val_every,
            checkpoint_every: self.checkpoint_every,
            val_crop: self.val_crop,
        }
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "beta1 = {}", self.beta1)?;
        writeln!(f, "beta2 = {}", self.beta2)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "crop_size = {}", self.crop_size)?;
        writeln!(f, "total_steps = {}", self.total_steps)?;
        writeln!(f, "milestones = {}", ms.join(","))?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "precision = {}", self.precision)?;
        writeln!(f, "deterministic = {}", self.deterministic)?;
        writeln!(f, "val_every = {}", self.val_every)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)?;
        writeln!(f, "val_crop = {}", self.val_crop)?;
        writeln!(f, "split_level = {}", self.split_level)?;
        writeln!(f, "n_blocks = {}", self.n_blocks)?;
        writeln!(f, "c0 = {}", self.c0)?;
        writeln!(f, "channel_step = {}", self.channel_step)?;
        writeln!(f, "state_n = {}", self.state_n)?;
        writeln!(f, "alpha_init = {}", self.alpha_init)?;
        writeln!(f, "reduction_r = {}", self.reduction_r)?;
        writeln!(f, "sigma = {}", self.sigma)?;
        writeln!(f, "scale = {}", self.scale)?;
        writeln!(f, "charbonnier_eps = {}", self.charbonnier_eps)
    }
}
