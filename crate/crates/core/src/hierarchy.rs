//! Progressive split hierarchy.
//!
//! A shallow convolution lifts the image to `c0` channels. Each descending
//! stage widens by `channel_step` with a 1x1 convolution and runs `n_blocks`
//! blocks at its split level, stashing its output. Ascending stages visit the
//! levels in reverse, add the stashed tensor of equal width, run their blocks
//! and narrow by `channel_step`. A tail convolution predicts a residual over
//! the input (denoising) or over its bilinear upsampling via sub-pixel
//! rearrangement (super-resolution).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{add_conv, block_backward, block_forward, he_std, BlockCache, BlockConfig, BlockParams, DEFAULT_ALPHA, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::params::{ConvHandle, ParamStore};
use crate::partition::SplitLevel;
use crate::real::Real;
use crate::ssm::DEFAULT_STATE_N;
use crate::tensor::{
    bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward, depth_to_space,
    depth_to_space_backward, FeatureMap,
};

pub const DEFAULT_C0: usize = 48;
pub const CHANNEL_STEP: usize = 48;
pub const DEFAULT_N_BLOCKS: usize = 2;

/// Stage levels for a given deepest level: the standard halves, quadrants,
/// octants progression with every stage capped at `deepest` and the last stage
/// set to `deepest`.
pub fn schedule(deepest: SplitLevel) -> Vec<SplitLevel> {
    let standard = [SplitLevel::Halves, SplitLevel::Quadrants, deepest];
    standard.iter().map(|&l| l.min(deepest)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub c0: usize,
    pub channel_step: usize,
    pub n_blocks: usize,
    pub state_n: usize,
    pub reduction: usize,
    pub alpha_init: f64,
    /// Split level of each descending stage, coarse to fine.
    pub levels: Vec<SplitLevel>,
    /// 1 for denoising, the upscaling factor for super-resolution.
    pub scale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            c0: DEFAULT_C0,
            channel_step: CHANNEL_STEP,
            n_blocks: DEFAULT_N_BLOCKS,
            state_n: DEFAULT_STATE_N,
            reduction: DEFAULT_REDUCTION,
            alpha_init: DEFAULT_ALPHA,
            levels: schedule(SplitLevel::Octants),
            scale: 1,
        }
    }
}

impl ModelConfig {
    /// Channel width of descending stage `i` (0 = shallow features).
    pub fn width(&self, stage: usize) -> usize {
        self.c0 + stage * self.channel_step
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels.len()).map(|i| self.width(i)).collect()
    }

    /// Smallest `(rows, cols)` multiple every stage's patch grid divides.
    pub fn grid_multiple(&self) -> (usize, usize) {
        self.levels.iter().fold((1, 1), |(r, c), l| {
            let (lr, lc) = l.grid();
            (lcm(r, lr), lcm(c, lc))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.c0 == 0 || self.n_blocks == 0 || self.state_n == 0 || self.in_channels == 0 {
            return Err(Error::Invalid("c0, n_blocks, state_n and in_channels must be >= 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Invalid("at least one split stage is required".into()));
        }
        if self.scale == 0 || self.scale > 4 {
            return Err(Error::Invalid(format!("scale must be 1..=4, got {}", self.scale)));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub level: SplitLevel,
    /// 1x1 channel lift (descending) or drop (ascending).
    pub resize: ConvHandle,
    pub blocks: Vec<BlockParams>,
}

/// Parameter handles of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyParams {
    pub config: ModelConfig,
    pub shallow: ConvHandle,
    pub down: Vec<Stage>,
    pub up: Vec<Stage>,
    pub tail: ConvHandle,
}

impl HierarchyParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c0 = config.c0;
        let shallow = add_conv(store, "shallow", c0, config.in_channels, 3, he_std(config.in_channels, 3), rng);
        let block_cfg = |c: usize| BlockConfig {
            channels: c,
            state_n: config.state_n,
            reduction: config.reduction,
            alpha_init: config.alpha_init,
        };
        let mut down = Vec::new();
        for (i, &level) in config.levels.iter().enumerate() {
            let (cin, cout) = (config.width(i), config.width(i + 1));
            let resize = add_conv(store, &format!("down.{i}.lift"), cout, cin, 1, he_std(cin, 1) * 0.5, rng);
            let blocks = (0..config.n_blocks)
                .map(|j| BlockParams::new(store, &format!("down.{i}.block.{j}"), &block_cfg(cout), rng))
                .collect::<Result<Vec<_>>>()?;
            down.push(Stage { level, resize, blocks });
        }
        let mut up = Vec::new();
        for (i, &level) in config.levels.iter().enumerate().rev() {
            let (cin, cout) = (config.width(i + 1), config.width(i));
            let blocks = (0..config.n_blocks)
                .map(|j| BlockParams::new(store, &format!("up.{i}.block.{j}"), &block_cfg(cin), rng))
                .collect::<Result<Vec<_>>>()?;
            let resize = add_conv(store, &format!("up.{i}.drop"), cout, cin, 1, he_std(cin, 1) * 0.5, rng);
            up.push(Stage { level, resize, blocks });
        }
        let tail_out = config.in_channels * config.scale * config.scale;
        let tail = add_conv(store, "tail", tail_out, c0, 3, he_std(c0, 3) * 0.1, rng);
        Ok(Self {
            config,
            shallow,
            down,
            up,
            tail,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockParams> {
        self.down.iter().chain(&self.up).flat_map(|s| s.blocks.iter())
    }
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    resize_input: FeatureMap<T>,
    blocks: Vec<BlockCache<T>>,
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct HierarchyCache<T> {
    input: FeatureMap<T>,
    down: Vec<StageCache<T>>,
    up: Vec<StageCache<T>>,
    tail_input: FeatureMap<T>,
}

/// A network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: HierarchyParams,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = HierarchyParams::new(&mut store, config, &mut rng)?;
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Sets every block's residual scale.
    pub fn set_alpha(&mut self, alpha: f64) {
        let ids: Vec<_> = self.arch.blocks().map(|b| b.alpha).collect();
        for id in ids {
            self.store.value_mut(id)[0] = T::from_f64(alpha);
        }
    }

    /// Zeroes the tail convolution so the network reduces to its global residual path.
    pub fn zero_tail(&mut self) {
        self.store.value_mut(self.arch.tail.weight).fill(T::ZERO);
        self.store.value_mut(self.arch.tail.bias).fill(T::ZERO);
    }

    /// Inference forward; intermediate caches are dropped as soon as possible.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.run(x, None, false).map(|(y, _)| y)
    }

    /// Forward retaining everything [`Model::backward`] needs.
    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, HierarchyCache<T>)> {
        let (y, c) = self.run(x, None, true)?;
        Ok((y, c.expect("cache kept")))
    }

    /// Forward with `offset` added to the stashed skip tensor of descending stage `stage`.
    pub fn forward_with_skip_offset(&self, x: &FeatureMap<T>, stage: usize, offset: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.run(x, Some((stage, offset)), false).map(|(y, _)| y)
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let cfg = &self.arch.config;
        let s = x.shape();
        if s.c != cfg.in_channels {
            return Err(crate::error::shape_err("model input channels", &s.dims(), &[cfg.in_channels]));
        }
        let (rows, cols) = cfg.levels.iter().fold((1, 1), |(r, c), l| (r.max(l.grid().0), c.max(l.grid().1)));
        if s.h < rows || s.w < cols {
            return Err(Error::Invalid(format!(
                "input of {}x{} is smaller than the deepest {rows}x{cols} patch grid",
                s.h, s.w
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &FeatureMap<T>,
        skip_offset: Option<(usize, &FeatureMap<T>)>,
        keep: bool,
    ) -> Result<(FeatureMap<T>, Option<HierarchyCache<T>>)> {
        self.check_input(x)?;
        let store = &self.store;
        let arch = &self.arch;
        let mut cur = conv2d(x, &arch.shallow.view(store))?;
        let mut skips = Vec::with_capacity(arch.down.len());
        let mut down_caches = Vec::new();
        for (i, stage) in arch.down.iter().enumerate() {
            let resize_input = cur;
            cur = conv2d(&resize_input, &stage.resize.view(store))?;
            let mut caches = Vec::new();
            for b in &stage.blocks {
                let (y, c) = block_forward(&cur, b, store, stage.level)?;
                if keep {
                    caches.push(c);
                }
                cur = y;
            }
            let mut skip = cur.clone();
            if let Some((s, off)) = skip_offset {
                if s == i {
                    skip.add_assign(off)?;
                }
            }
            skips.push(skip);
            if keep {
                down_caches.push(StageCache {
                    resize_input,
                    blocks: caches,
                });
            }
        }
        let mut up_caches = Vec::new();
        for stage in &arch.up {
            let skip = skips.pop().expect("one skip per stage");
            cur.add_assign(&skip)?;
            let mut caches = Vec::new();
            for b in &stage.blocks {
                let (y, c) = block_forward(&cur, b, store, stage.level)?;
                if keep {
                    caches.push(c);
                }
                cur = y;
            }
            let resize_input = cur;
            cur = conv2d(&resize_input, &stage.resize.view(store))?;
            if keep {
                up_caches.push(StageCache {
                    resize_input,
                    blocks: caches,
                });
            }
        }
        let residual = conv2d(&cur, &arch.tail.view(store))?;
        let scale = arch.config.scale;
        let y = if scale == 1 {
            x.zip_map(&residual, |a, r| a + r)?
        } else {
            bilinear_upsample(x, scale).zip_map(&depth_to_space(&residual, scale)?, |a, r| a + r)?
        };
        let cache = keep.then(|| HierarchyCache {
            input: x.clone(),
            down: down_caches,
            up: up_caches,
            tail_input: cur,
        });
        Ok((y, cache))
    }

    /// Accumulates parameter gradients into the store; returns the input gradient.
    pub fn backward(&mut self, cache: &HierarchyCache<T>, grad: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let arch = &self.arch;
        let store = &mut self.store;
        let scale = arch.config.scale;
        let (mut g_input, g_res) = if scale == 1 {
            (grad.clone(), grad.clone())
        } else {
            (bilinear_upsample_backward(grad, scale), depth_to_space_backward(grad, scale))
        };
        let gt = conv2d_backward(&cache.tail_input, &arch.tail.view(store), &g_res)?;
        store.accumulate(arch.tail.weight, &gt.weight);
        store.accumulate(arch.tail.bias, &gt.bias);
        let mut g = gt.input;

        let mut skip_grads = Vec::with_capacity(arch.up.len());
        for (stage, sc) in arch.up.iter().zip(&cache.up).rev() {
            let gr = conv2d_backward(&sc.resize_input, &stage.resize.view(store), &g)?;
            store.accumulate(stage.resize.weight, &gr.weight);
            store.accumulate(stage.resize.bias, &gr.bias);
            g = gr.input;
            for (b, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                g = block_backward(bc, &g, b, store)?;
            }
            skip_grads.push(g.clone());
        }
        // skip_grads[j] belongs to descending stage j (the first up stage mirrors the last down stage).
        for (i, (stage, sc)) in arch.down.iter().zip(&cache.down).enumerate().rev() {
            if i + 1 < arch.down.len() {
                g.add_assign(&skip_grads[i])?;
            } else {
                // The deepest ascending stage consumes the descending output twice.
                g = skip_grads[i].clone();
                g.add_assign(&skip_grads[i])?;
            }
            for (b, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                g = block_backward(bc, &g, b, store)?;
            }
            let gr = conv2d_backward(&sc.resize_input, &stage.resize.view(store), &g)?;
            store.accumulate(stage.resize.weight, &gr.weight);
            store.accumulate(stage.resize.bias, &gr.bias);
            g = gr.input;
        }
        let gs = conv2d_backward(&cache.input, &arch.shallow.view(store), &g)?;
        store.accumulate(arch.shallow.weight, &gs.weight);
        store.accumulate(arch.shallow.bias, &gs.bias);
        g_input.add_assign(&gs.input)?;
        Ok(g_input)
    }
}
