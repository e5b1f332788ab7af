//! Hierarchical window encoder for images and clips.
//!
//! Four stages of pre-norm residual blocks. Stage 0 runs on the patch
//! embedding; stages 1..3 start with 2×2 patch merging. Blocks alternate
//! regular and shifted windows, starting regular. A final LayerNorm and
//! linear layer project the last grid to the decoder width.

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::mixers::{shifted_window_mask, MixerConfig, MixerKind, TokenMixer};
use crate::nn::{Activation, Ctx, Linear, Mlp, Norm, ParamStore};
use crate::patching::{
    cyclic_shift, patch_merge, patch_project_2d, patch_project_3d, window_partition, window_reverse, FeatureGrid,
    GridDims, PatchSpec, Window,
};
use crate::tensor::{Scalar, Tensor, Var};

pub const STAGES: usize = 4;

/// Temporal axes for clip input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoConfig {
    /// Frames per clip.
    pub frames: usize,
    /// Frames per tubelet.
    pub tubelet: usize,
    /// Temporal window extent.
    pub window_t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub window: usize,
    pub mixer: MixerKind,
    pub video: Option<VideoConfig>,
    pub out_dim: usize,
    pub mlp_ratio: usize,
    /// Shrink windows to the grid side when a stage grid is smaller.
    pub clamp_window: bool,
    /// Mask cross-region pairs in shifted attention windows.
    pub shift_mask: bool,
    pub pool_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            patch: 4,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            window: 14,
            mixer: MixerKind::WMlp,
            video: None,
            out_dim: 512,
            mlp_ratio: 4,
            clamp_window: true,
            shift_mask: false,
            pool_size: 3,
        }
    }
}

/// Resolved geometry of one stage for a single item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub dims: GridDims,
    pub channels: usize,
    pub window: Window,
    pub shift: [usize; 3],
    pub heads: usize,
}

/// `(4, 8, 16, 32)` halved per stage until each divides its channel width.
pub fn default_heads(embed_dim: usize) -> [usize; STAGES] {
    let mut heads = [4, 8, 16, 32];
    for (i, h) in heads.iter_mut().enumerate() {
        let c = embed_dim << i;
        while *h > 1 && !c.is_multiple_of(*h) {
            *h /= 2;
        }
    }
    heads
}

impl EncoderConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn patch_spec(&self) -> PatchSpec {
        match self.video {
            Some(v) => PatchSpec::video(v.tubelet, self.patch, self.embed_dim),
            None => PatchSpec::image(self.patch, self.embed_dim),
        }
    }

    /// Shape of one input item: `[Cin,H,W]` or `[Cin,T,H,W]`.
    pub fn input_shape(&self) -> Vec<usize> {
        let s = self.image_size;
        match self.video {
            Some(v) => vec![self.in_channels, v.frames, s, s],
            None => vec![self.in_channels, s, s],
        }
    }

    /// Memory rows per item.
    pub fn memory_len(&self) -> Result<usize> {
        Ok(self.plan()?[STAGES - 1].dims.tokens_per_item())
    }

    /// Checks the configuration and resolves per-stage geometry. Errors
    /// name the first stage whose grid cannot be tiled.
    pub fn plan(&self) -> Result<Vec<StagePlan>> {
        if self.embed_dim == 0 || self.out_dim == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(config_err!("encoder widths must be positive"));
        }
        if self.patch == 0 || self.window == 0 {
            return Err(config_err!("patch and window sizes must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(config_err!(
                "image size {} is not divisible by patch {}",
                self.image_size,
                self.patch
            ));
        }
        let side = self.image_size / self.patch;
        let (grid_t, win_t) = match self.video {
            Some(v) => {
                if v.tubelet == 0 || v.window_t == 0 || v.frames == 0 || v.frames % v.tubelet != 0 {
                    return Err(config_err!(
                        "{} frames cannot be cut into tubelets of {}",
                        v.frames,
                        v.tubelet
                    ));
                }
                (Some(v.frames / v.tubelet), v.window_t)
            }
            None => (None, 1),
        };
        let mut plans = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            let channels = self.stage_channels(stage);
            let heads = self.heads[stage];
            if heads == 0 || !channels.is_multiple_of(heads) {
                return Err(config_err!(
                    "stage {stage}: {heads} heads do not divide {channels} channels"
                ));
            }
            if stage > 0 && !(side >> (stage - 1)).is_multiple_of(2) {
                return Err(config_err!(
                    "stage {stage}: grid side {} cannot be merged 2x2",
                    side >> (stage - 1)
                ));
            }
            let g = side >> stage;
            if g == 0 {
                return Err(config_err!("stage {stage}: grid vanished"));
            }
            let dims = match grid_t {
                Some(t) => GridDims::video(t, g, g),
                None => GridDims::image(g, g),
            };
            if self.mixer == MixerKind::GlobalMsa {
                // one window spanning the grid; shifting it changes nothing
                let window = Window {
                    t: dims.t(),
                    h: g,
                    w: g,
                };
                plans.push(StagePlan {
                    dims,
                    channels,
                    window,
                    shift: [0; 3],
                    heads,
                });
                continue;
            }
            let fit = |m: usize, n: usize| if self.clamp_window { m.min(n) } else { m };
            let window = Window {
                t: fit(win_t, dims.t()),
                h: fit(self.window, g),
                w: fit(self.window, g),
            };
            if window.t > dims.t() || window.h > g || dims.t() % window.t != 0 || !g.is_multiple_of(window.h) {
                return Err(config_err!(
                    "stage {stage}: grid {}x{}x{} is not divisible by window {}x{}x{}",
                    dims.t(),
                    g,
                    g,
                    window.t,
                    window.h,
                    window.w
                ));
            }
            plans.push(StagePlan {
                dims,
                channels,
                window,
                shift: window.half_shift(),
                heads,
            });
        }
        Ok(plans)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub mixer: TokenMixer,
    pub norm2: Norm,
    pub mlp: Mlp,
    pub shifted: bool,
}

#[derive(Clone, Debug)]
pub struct Merge {
    pub norm: Norm,
    pub reduction: Linear,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<Merge>,
    pub blocks: Vec<Block>,
    pub plan: StagePlan,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub patch_norm: Norm,
    pub stages: Vec<Stage>,
    pub norm: Norm,
    pub head: Linear,
}

/// Memory rows for every item plus the intermediate stage grids.
pub struct Encoded<'t, T: Scalar> {
    /// `[B·L, out_dim]`.
    pub memory: Var<'t, T>,
    pub len: usize,
    pub stages: Vec<FeatureGrid<'t, T>>,
}

impl Block {
    fn forward<'a, T: Scalar>(
        &self,
        ctx: Ctx<'a, T>,
        g: &FeatureGrid<'a, T>,
        plan: &StagePlan,
        mask: Option<&Tensor<T>>,
        scope: &str,
    ) -> Result<FeatureGrid<'a, T>> {
        let counter = ctx.tape.counter();
        let mixed = {
            let _s = counter.enter(format!("{scope}.mixer"));
            let h = g.with_tokens(self.norm1.forward(ctx, g.tokens)?)?;
            let shift = plan.shift.map(|s| s as isize);
            let h = if self.shifted {
                cyclic_shift(&h, shift.map(|s| -s))?
            } else {
                h
            };
            let wins = window_partition(&h, &plan.window)?;
            let wins = self.mixer.forward(ctx, wins, if self.shifted { mask } else { None })?;
            let back = window_reverse(wins, h.dims, &plan.window)?;
            if self.shifted {
                cyclic_shift(&back, shift)?
            } else {
                back
            }
        };
        let x = g.tokens.add(&mixed.tokens)?;
        let _s = counter.enter(format!("{scope}.mlp"));
        let x = x.add(&self.mlp.forward(ctx, self.norm2.forward(ctx, x)?)?)?;
        g.with_tokens(x)
    }
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        let plans = cfg.plan()?;
        let spec = cfg.patch_spec();
        let patch_in = cfg.in_channels * spec.t * spec.p * spec.p;
        let patch_embed = Linear::new(store, rng, "encoder.patch_embed", patch_in, cfg.embed_dim, true);
        let patch_norm = Norm::new(store, "encoder.patch_norm", cfg.embed_dim);
        let mut stages = Vec::with_capacity(STAGES);
        for (i, plan) in plans.iter().enumerate() {
            let c = plan.channels;
            let merge = (i > 0).then(|| Merge {
                norm: Norm::new(store, &format!("encoder.stages.{i}.merge.norm"), 2 * c),
                reduction: Linear::new(
                    store,
                    rng,
                    &format!("encoder.stages.{i}.merge.reduction"),
                    2 * c,
                    c,
                    false,
                ),
            });
            let mut mixer_cfg = MixerConfig::new(cfg.mixer, plan.heads, plan.window);
            mixer_cfg.pool_size = cfg.pool_size;
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for j in 0..cfg.depths[i] {
                let name = format!("encoder.stages.{i}.blocks.{j}");
                blocks.push(Block {
                    norm1: Norm::new(store, &format!("{name}.norm1"), c),
                    mixer: TokenMixer::new(store, rng, &format!("{name}.mixer"), &mixer_cfg, c)?,
                    norm2: Norm::new(store, &format!("{name}.norm2"), c),
                    mlp: Mlp::new(
                        store,
                        rng,
                        &format!("{name}.mlp"),
                        c,
                        c * cfg.mlp_ratio,
                        Activation::Gelu,
                    ),
                    shifted: j % 2 == 1,
                });
            }
            stages.push(Stage {
                merge,
                blocks,
                plan: *plan,
            });
        }
        let last = plans[STAGES - 1].channels;
        let norm = Norm::new(store, "encoder.norm", last);
        let head = Linear::new(store, rng, "encoder.head", last, cfg.out_dim, true);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            patch_norm,
            stages,
            norm,
            head,
        })
    }

    /// Runs one stage on a batched grid.
    pub fn stage_forward<'a, T: Scalar>(
        &self,
        ctx: Ctx<'a, T>,
        g: &FeatureGrid<'a, T>,
        stage_idx: usize,
    ) -> Result<FeatureGrid<'a, T>> {
        let stage = self
            .stages
            .get(stage_idx)
            .ok_or_else(|| config_err!("stage index {stage_idx} out of range"))?;
        let counter = ctx.tape.counter();
        let mut g = *g;
        if let Some(m) = &stage.merge {
            let _s = counter.enter(format!("encoder.stage{stage_idx}.merge"));
            let w = ctx.p(&m.reduction.weight)?;
            let (gamma, beta) = (ctx.p(&m.norm.weight)?, ctx.p(&m.norm.bias)?);
            g = patch_merge(&g, &w, Some((&gamma, &beta)))?;
        }
        let expected = GridDims {
            batch: g.dims.batch,
            ..stage.plan.dims
        };
        if g.dims != expected || g.channels != stage.plan.channels {
            return Err(shape_err!(
                "stage {stage_idx} expects grid {expected:?} with {} channels, got {:?} with {}",
                stage.plan.channels,
                g.dims,
                g.channels
            ));
        }
        let needs_mask = self.cfg.shift_mask && self.cfg.mixer == MixerKind::WMsa && stage.blocks.len() > 1;
        let mask = if needs_mask {
            Some(shifted_window_mask::<T>(
                &stage.plan.dims,
                &stage.plan.window,
                stage.plan.shift,
            )?)
        } else {
            None
        };
        let scope = format!("encoder.stage{stage_idx}");
        for block in &stage.blocks {
            g = block.forward(ctx, &g, &stage.plan, mask.as_ref(), &scope)?;
        }
        Ok(g)
    }

    /// Encodes `[Cin,H,W]`/`[B,Cin,H,W]` images or `[Cin,T,H,W]`/`[B,Cin,T,H,W]`
    /// clips, matching the configured modality.
    pub fn encode<'a, T: Scalar>(&self, ctx: Ctx<'a, T>, input: Var<'a, T>) -> Result<Encoded<'a, T>> {
        let item = self.cfg.input_shape();
        let shape = input.shape();
        let tail_ok = shape.len() >= item.len() && shape[shape.len() - item.len()..] == item[..];
        if !tail_ok || shape.len() > item.len() + 1 {
            return Err(shape_err!("encoder expects items of shape {item:?}, got {shape:?}"));
        }
        let counter = ctx.tape.counter();
        let spec = self.cfg.patch_spec();
        let embedded = {
            let _s = counter.enter("encoder.patch_embed");
            let w = ctx.p(&self.patch_embed.weight)?;
            let b = ctx.p(self.patch_embed.bias.as_deref().expect("patch bias"))?;
            let g = match self.cfg.video {
                Some(_) => patch_project_3d(input, &spec, &w, &b)?,
                None => patch_project_2d(input, &spec, &w, &b)?,
            };
            g.with_tokens(self.patch_norm.forward(ctx, g.tokens)?)?
        };
        let mut g = embedded;
        let mut grids = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            g = self.stage_forward(ctx, &g, i)?;
            grids.push(g);
        }
        let _s = counter.enter("encoder.head");
        let memory = self.head.forward(ctx, self.norm.forward(ctx, g.tokens)?)?;
        Ok(Encoded {
            memory,
            len: g.dims.tokens_per_item(),
            stages: grids,
        })
    }
}

/// 2D convenience wrapper returning `[B·L, out_dim]` memory.
pub fn encode_image<'a, T: Scalar>(enc: &Encoder, ctx: Ctx<'a, T>, image: Var<'a, T>) -> Result<Var<'a, T>> {
    if enc.cfg.video.is_some() {
        return Err(config_err!("encoder is configured for clips"));
    }
    Ok(enc.encode(ctx, image)?.memory)
}

pub fn encode_video<'a, T: Scalar>(enc: &Encoder, ctx: Ctx<'a, T>, clip: Var<'a, T>) -> Result<Var<'a, T>> {
    if enc.cfg.video.is_none() {
        return Err(config_err!("encoder is configured for images"));
    }
    Ok(enc.encode(ctx, clip)?.memory)
}
