//! Training loop.
//!
//! Every step draws its batch from a generator seeded by `(seed, step)`, so a
//! run resumed from a checkpoint at step `s` replays exactly the batches the
//! uninterrupted run would have drawn after `s`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{augment, center_crop, crop, random_crop, Dataset};
use crate::degrade::degrade;
use crate::error::{Error, Result};
use crate::hierarchy::Model;
use crate::loss::loss;
use crate::metrics::{psnr, ssim};
use crate::optim::{adam_step, AdamConfig};
use crate::parallel;
use crate::real::Real;
use crate::task::{RestoreTask, TaskKind};
use crate::tensor::{bilinear_upsample, FeatureMap};

const VAL_STREAM: u64 = 0x5eed_0f_7a1;
const MAX_VAL_TILES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Side of the network input crop; super-resolution targets are `scale` times larger.
    pub crop_size: usize,
    pub total_steps: usize,
    /// Steps after which the learning rate halves. Empty means 50% and 80% of `total_steps`.
    pub milestones: Vec<usize>,
    pub seed: u64,
    /// Disables all parallelism for the duration of the run.
    pub deterministic: bool,
    /// Validate every this many steps (0: only at the end).
    pub val_every: usize,
    /// Checkpoint every this many steps in addition to milestones and the end (0: off).
    pub checkpoint_every: usize,
    /// Side of the clean validation tiles.
    pub val_crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            crop_size: 32,
            total_steps: 1000,
            milestones: Vec::new(),
            seed: 0,
            deterministic: false,
            val_every: 100,
            checkpoint_every: 0,
            val_crop: 64,
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        if self.milestones.is_empty() {
            let mut m = vec![self.total_steps / 2, self.total_steps * 4 / 5];
            m.dedup();
            m.retain(|&s| s > 0);
            m
        } else {
            self.milestones.clone()
        }
    }

    /// Learning rate used by step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let crossed = self.milestones().iter().filter(|&&m| step > m).count();
        self.adam.lr * 0.5f64.powi(crossed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.crop_size == 0 || self.val_crop == 0 {
            return Err(Error::Invalid("batch_size, crop_size and val_crop must be >= 1".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Metrics of the degraded input (bilinearly upsampled for super-resolution).
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub val: Option<ValReport>,
}

pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub task: RestoreTask,
    pub cfg: TrainConfig,
    data: Dataset<T>,
    val_pairs: Vec<(FeatureMap<T>, FeatureMap<T>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, task: RestoreTask, cfg: TrainConfig, data: Dataset<T>) -> Result<Self> {
        cfg.validate()?;
        if model.config().scale != task.scale() {
            return Err(Error::Invalid(format!(
                "model upscales by {} but the task needs {}",
                model.config().scale,
                task.scale()
            )));
        }
        let need = cfg.crop_size * task.scale();
        if let Some(small) = data.train.iter().find(|im| im.image.shape().h < need || im.image.shape().w < need) {
            return Err(Error::Invalid(format!("training image {} is smaller than the {need}px crop", small.name)));
        }
        let val_pairs = validation_pairs(&data, &task, &cfg)?;
        Ok(Self {
            model,
            task,
            cfg,
            data,
            val_pairs,
        })
    }

    pub fn step(&self) -> usize {
        self.model.store.step as usize
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// Degraded inputs and clean targets for step `step`.
    pub fn batch(&self, step: usize) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let mut rng = self.step_rng(step);
        let size = self.cfg.crop_size * self.task.scale();
        let mut inputs = Vec::with_capacity(self.cfg.batch_size);
        let mut targets = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let im = &self.data.train[rng.random_range(0..self.data.train.len())].image;
            let clean = augment(&random_crop(im, size, &mut rng), rng.random_range(0..8u8));
            inputs.push(degrade(&clean, &self.task, &mut rng)?);
            targets.push(clean);
        }
        Ok((FeatureMap::stack(&inputs)?, FeatureMap::stack(&targets)?))
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step() + 1;
        let (x, target) = self.batch(step)?;
        let (y, cache) = self.model.forward_train(&x)?;
        let (value, grad) = loss(self.task.loss, &y, &target)?;
        if !value.is_finite() {
            return Err(Error::Invalid(format!("loss diverged at step {step}")));
        }
        self.model.store.zero_grads();
        self.model.backward(&cache, &grad)?;
        let lr = self.cfg.lr_at(step);
        adam_step(&mut self.model.store, &self.cfg.adam, lr);
        Ok(StepLog { step, lr, loss: value })
    }

    /// Restored outputs are clamped to `[0, 1]` before scoring.
    pub fn validate(&self) -> Result<ValReport> {
        let mut acc = [0.0; 4];
        for (input, clean) in &self.val_pairs {
            let out = self.model.forward(input)?.map(|v| v.max(T::ZERO).min(T::ONE));
            let base = match self.task.kind {
                TaskKind::Denoise { .. } => input.clone(),
                TaskKind::SuperResolve { scale } => bilinear_upsample(input, scale),
            };
            acc[0] += psnr(&out, clean, 1.0)?;
            acc[1] += ssim(&out, clean)?;
            acc[2] += psnr(&base, clean, 1.0)?;
            acc[3] += ssim(&base, clean)?;
        }
        let n = self.val_pairs.len() as f64;
        Ok(ValReport {
            psnr: acc[0] / n,
            ssim: acc[1] / n,
            baseline_psnr: acc[2] / n,
            baseline_ssim: acc[3] / n,
        })
    }

    /// Trains until `total_steps`, writing tab-separated log lines to `log` and
    /// checkpoints to `ckpt` (when given) at milestones, every
    /// `checkpoint_every` steps and at the end.
    pub fn run(&mut self, log: &mut dyn Write, ckpt: Option<&Path>) -> Result<TrainSummary> {
        let body = |this: &mut Self, log: &mut dyn Write| -> Result<TrainSummary> {
            if this.step() == 0 {
                writeln!(log, "step\tlr\tloss\tval_psnr\tval_ssim")?;
            }
            let milestones = this.cfg.milestones();
            let mut last = None;
            let mut val = None;
            while this.step() < this.cfg.total_steps {
                let s = this.train_step()?;
                let end = s.step == this.cfg.total_steps;
                let do_val = end || (this.cfg.val_every > 0 && s.step % this.cfg.val_every == 0);
                if do_val {
                    let v = this.validate()?;
                    writeln!(log, "{}\t{:e}\t{:.6}\t{:.4}\t{:.4}", s.step, s.lr, s.loss, v.psnr, v.ssim)?;
                    log::info!("step {} loss {:.5} val psnr {:.3} (input {:.3})", s.step, s.loss, v.psnr, v.baseline_psnr);
                    val = Some(v);
                } else {
                    writeln!(log, "{}\t{:e}\t{:.6}", s.step, s.lr, s.loss)?;
                }
                let save = end
                    || milestones.contains(&s.step)
                    || (this.cfg.checkpoint_every > 0 && s.step % this.cfg.checkpoint_every == 0);
                if let (true, Some(p)) = (save, ckpt) {
                    checkpoint::save(&this.model, p)?;
                }
                last = Some(s);
            }
            Ok(TrainSummary {
                steps: this.step(),
                final_loss: last.map_or(f64::NAN, |s| s.loss),
                val,
            })
        };
        if self.cfg.deterministic {
            parallel::sequential(|| body(self, log))
        } else {
            body(self, log)
        }
    }
}

fn validation_pairs<T: Real>(data: &Dataset<T>, task: &RestoreTask, cfg: &TrainConfig) -> Result<Vec<(FeatureMap<T>, FeatureMap<T>)>> {
    let s = task.scale();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_STREAM);
    let mut out = Vec::new();
    for im in &data.val {
        let sh = im.image.shape();
        let side = cfg.val_crop.min(sh.h).min(sh.w) / s * s;
        if side == 0 {
            continue;
        }
        let (ny, nx) = (sh.h / side, sh.w / side);
        let tiles: Vec<FeatureMap<T>> = if ny * nx <= 1 {
            vec![center_crop(&im.image, side)]
        } else {
            (0..ny * nx).take(MAX_VAL_TILES).map(|t| crop(&im.image, (t / nx) * side, (t % nx) * side, side, side)).collect()
        };
        for clean in tiles {
            out.push((degrade(&clean, task, &mut rng)?, clean));
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no validation tiles could be cut".into()));
    }
    Ok(out)
}

/// Convenience wrapper: load a folder, train, and return the trainer.
pub fn train<T: Real>(
    model: Model<T>,
    data_dir: &Path,
    cfg: TrainConfig,
    task: RestoreTask,
    log: &mut dyn Write,
    ckpt: Option<PathBuf>,
) -> Result<(Trainer<T>, TrainSummary)> {
    let data = Dataset::load(data_dir, cfg.crop_size * task.scale())?;
    let mut t = Trainer::new(model, task, cfg, data)?;
    let summary = t.run(log, ckpt.as_deref())?;
    Ok((t, summary))
}
