//! Pixels to token grids, and the window geometry that operates on them.
//!
//! Every geometric operation here is a row permutation expressed as an
//! index vector and applied with [`Var::gather_rows`], so gradients flow
//! through all of them for free.
//!
//! Layout conventions:
//! - grid tokens are row-major over `(batch, frame, row, col)`;
//! - a patch flattens channel-major, then frame, then row-major pixels;
//! - windows are ordered row-major over window coordinates, and tokens
//!   inside a window row-major over `(frame, row, col)`;
//! - patch merging concatenates the 2×2 group as (even row, even col),
//!   (odd row, even col), (even row, odd col), (odd row, odd col).

use std::sync::Arc;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Scalar, Var};

/// Token lattice geometry. Images have `frames == None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub batch: usize,
    pub frames: Option<usize>,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn image(h: usize, w: usize) -> Self {
        Self {
            batch: 1,
            frames: None,
            h,
            w,
        }
    }

    pub fn video(t: usize, h: usize, w: usize) -> Self {
        Self {
            batch: 1,
            frames: Some(t),
            h,
            w,
        }
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }

    /// Temporal extent, 1 for images.
    pub fn t(&self) -> usize {
        self.frames.unwrap_or(1)
    }

    pub fn tokens_per_item(&self) -> usize {
        self.t() * self.h * self.w
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.tokens_per_item()
    }

    fn row(&self, b: usize, f: usize, y: usize, x: usize) -> usize {
        ((b * self.t() + f) * self.h + y) * self.w + x
    }
}

/// Window extent along (frame, row, col). Images use `t == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub fn square(m: usize) -> Self {
        Self { t: 1, h: m, w: m }
    }

    pub fn cube(p: usize, m: usize) -> Self {
        Self { t: p, h: m, w: m }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Shift offsets `floor(size/2)` per axis.
    pub fn half_shift(&self) -> [usize; 3] {
        [self.t / 2, self.h / 2, self.w / 2]
    }

    pub fn count(&self, dims: &GridDims) -> usize {
        dims.batch * (dims.t() / self.t) * (dims.h / self.h) * (dims.w / self.w)
    }

    pub fn check(&self, dims: &GridDims) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(config_err!("window {self:?} has a zero extent"));
        }
        if !dims.t().is_multiple_of(self.t) || !dims.h.is_multiple_of(self.h) || !dims.w.is_multiple_of(self.w) {
            return Err(config_err!(
                "grid {}x{}x{} is not divisible by window {}x{}x{}",
                dims.t(),
                dims.h,
                dims.w,
                self.t,
                self.h,
                self.w
            ));
        }
        Ok(())
    }
}

/// Patch geometry: spatial side `p`, temporal length `t` (1 for images),
/// embedding width `channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub p: usize,
    pub t: usize,
    pub channels: usize,
}

impl PatchSpec {
    pub fn image(p: usize, channels: usize) -> Self {
        Self { p, t: 1, channels }
    }

    pub fn video(t: usize, p: usize, channels: usize) -> Self {
        Self { p, t, channels }
    }
}

/// Tokens on a lattice, `[tokens, channels]` with `tokens == dims.tokens()`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub dims: GridDims,
    pub channels: usize,
}

impl<'t, T: Scalar> FeatureGrid<'t, T> {
    pub fn new(tokens: Var<'t, T>, dims: GridDims) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != dims.tokens() || dims.h == 0 || dims.w == 0 {
            return Err(shape_err!("tokens {shape:?} do not fit grid {dims:?}"));
        }
        Ok(Self {
            tokens,
            dims,
            channels: shape[1],
        })
    }

    pub fn with_tokens(&self, tokens: Var<'t, T>) -> Result<Self> {
        Self::new(tokens, self.dims)
    }
}

/// Row indices that cut `[Cin,H,W]` images (viewed as rows of `p` pixels)
/// into flattened `[Cin·t·p·p]` patches. `frames == None` means 2D input.
fn patch_index(batch: usize, cin: usize, frames: Option<usize>, h: usize, w: usize, spec: &PatchSpec) -> Vec<usize> {
    let (p, t) = (spec.p, spec.t);
    let total_frames = frames.unwrap_or(1);
    let (gt, gh, gw) = (total_frames / t, h / p, w / p);
    let mut idx = Vec::with_capacity(batch * gt * gh * gw * cin * t * p);
    for b in 0..batch {
        for ft in 0..gt {
            for py in 0..gh {
                for px in 0..gw {
                    for c in 0..cin {
                        for dt in 0..t {
                            for dy in 0..p {
                                let f = ft * t + dt;
                                let y = py * p + dy;
                                idx.push((((b * cin + c) * total_frames + f) * h + y) * gw + px);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

fn check_divisible(what: &str, size: usize, by: usize) -> Result<()> {
    if by == 0 || !size.is_multiple_of(by) {
        return Err(config_err!("{what} {size} is not divisible by {by}"));
    }
    Ok(())
}

/// Projects non-overlapping patches of `[Cin,H,W]` (or batched
/// `[B,Cin,H,W]`) input with `weight: [C, Cin·p·p]` and `bias: [C]`.
/// No normalization; see [`patch_embed_2d`].
pub fn patch_project_2d<'t, T: Scalar>(
    image: Var<'t, T>,
    spec: &PatchSpec,
    weight: &Var<'t, T>,
    bias: &Var<'t, T>,
) -> Result<FeatureGrid<'t, T>> {
    let shape = image.shape();
    let (batch, cin, h, w) = match *shape.as_slice() {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(shape_err!("image must be [C,H,W] or [B,C,H,W], got {shape:?}")),
    };
    if spec.t != 1 {
        return Err(config_err!("2D patch embedding needs temporal patch 1, got {}", spec.t));
    }
    check_divisible("image height", h, spec.p)?;
    check_divisible("image width", w, spec.p)?;
    let dims = GridDims::image(h / spec.p, w / spec.p).with_batch(batch);
    let feat = cin * spec.p * spec.p;
    let idx = patch_index(batch, cin, None, h, w, spec);
    let patches = image.gather_rows(Arc::new(idx), spec.p, [dims.tokens(), feat])?;
    let tokens = patches.matmul_t(weight)?.add_bias(bias)?;
    FeatureGrid::new(tokens, dims)
}

/// 2D patch embedding: projection followed by LayerNorm.
pub fn patch_embed_2d<'t, T: Scalar>(
    image: Var<'t, T>,
    spec: &PatchSpec,
    weight: &Var<'t, T>,
    bias: &Var<'t, T>,
    ln: (&Var<'t, T>, &Var<'t, T>),
) -> Result<FeatureGrid<'t, T>> {
    let g = patch_project_2d(image, spec, weight, bias)?;
    g.with_tokens(g.tokens.layer_norm(ln.0, ln.1, crate::nn::LN_EPS)?)
}

/// Projects `[Cin,T,H,W]` (or `[B,Cin,T,H,W]`) clips cut into
/// `[Cin,t,p,p]` cubes with `weight: [C, Cin·t·p·p]`.
pub fn patch_project_3d<'t, T: Scalar>(
    clip: Var<'t, T>,
    spec: &PatchSpec,
    weight: &Var<'t, T>,
    bias: &Var<'t, T>,
) -> Result<FeatureGrid<'t, T>> {
    let shape = clip.shape();
    let (batch, cin, frames, h, w) = match *shape.as_slice() {
        [c, f, h, w] => (1, c, f, h, w),
        [b, c, f, h, w] => (b, c, f, h, w),
        _ => return Err(shape_err!("clip must be [C,T,H,W] or [B,C,T,H,W], got {shape:?}")),
    };
    check_divisible("clip length", frames, spec.t)?;
    check_divisible("frame height", h, spec.p)?;
    check_divisible("frame width", w, spec.p)?;
    let dims = GridDims::video(frames / spec.t, h / spec.p, w / spec.p).with_batch(batch);
    let feat = cin * spec.t * spec.p * spec.p;
    let idx = patch_index(batch, cin, Some(frames), h, w, spec);
    let cubes = clip.gather_rows(Arc::new(idx), spec.p, [dims.tokens(), feat])?;
    let tokens = cubes.matmul_t(weight)?.add_bias(bias)?;
    FeatureGrid::new(tokens, dims)
}

/// 3D patch embedding: cube projection followed by LayerNorm.
pub fn patch_embed_3d<'t, T: Scalar>(
    clip: Var<'t, T>,
    spec: &PatchSpec,
    weight: &Var<'t, T>,
    bias: &Var<'t, T>,
    ln: (&Var<'t, T>, &Var<'t, T>),
) -> Result<FeatureGrid<'t, T>> {
    let g = patch_project_3d(clip, spec, weight, bias)?;
    g.with_tokens(g.tokens.layer_norm(ln.0, ln.1, crate::nn::LN_EPS)?)
}

/// Grid row feeding each windowed row, windows in row-major order.
pub fn partition_index(dims: &GridDims, win: &Window) -> Result<Vec<usize>> {
    win.check(dims)?;
    let (nt, nh, nw) = (dims.t() / win.t, dims.h / win.h, dims.w / win.w);
    let mut idx = Vec::with_capacity(dims.tokens());
    for b in 0..dims.batch {
        for wt in 0..nt {
            for wy in 0..nh {
                for wx in 0..nw {
                    for dt in 0..win.t {
                        for dy in 0..win.h {
                            for dx in 0..win.w {
                                idx.push(dims.row(b, wt * win.t + dt, wy * win.h + dy, wx * win.w + dx));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of [`partition_index`].
pub fn reverse_index(dims: &GridDims, win: &Window) -> Result<Vec<usize>> {
    let fwd = partition_index(dims, win)?;
    let mut inv = vec![0; fwd.len()];
    for (r, &src) in fwd.iter().enumerate() {
        inv[src] = r;
    }
    Ok(inv)
}

/// `out(f,i,j) = in((f−dt) mod t, (i−dy) mod h, (j−dx) mod w)`.
pub fn shift_index(dims: &GridDims, offsets: [isize; 3]) -> Vec<usize> {
    let wrap = |v: usize, off: isize, n: usize| (v as isize - off).rem_euclid(n as isize) as usize;
    let mut idx = Vec::with_capacity(dims.tokens());
    for b in 0..dims.batch {
        for f in 0..dims.t() {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    idx.push(dims.row(
                        b,
                        wrap(f, offsets[0], dims.t()),
                        wrap(y, offsets[1], dims.h),
                        wrap(x, offsets[2], dims.w),
                    ));
                }
            }
        }
    }
    idx
}

/// Grid rows gathered into each merged token's four slots.
pub fn merge_index(dims: &GridDims) -> Result<Vec<usize>> {
    if !dims.h.is_multiple_of(2) || !dims.w.is_multiple_of(2) {
        return Err(config_err!(
            "patch merging needs even grid sides, got {}x{}",
            dims.h,
            dims.w
        ));
    }
    let mut idx = Vec::with_capacity(dims.tokens());
    for b in 0..dims.batch {
        for f in 0..dims.t() {
            for y in 0..dims.h / 2 {
                for x in 0..dims.w / 2 {
                    for (ro, co) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        idx.push(dims.row(b, f, 2 * y + ro, 2 * x + co));
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Splits the grid into windows: `[nW, window tokens, C]`.
pub fn window_partition<'t, T: Scalar>(g: &FeatureGrid<'t, T>, win: &Window) -> Result<Var<'t, T>> {
    let idx = partition_index(&g.dims, win)?;
    g.tokens.gather_rows(
        Arc::new(idx),
        g.channels,
        [win.count(&g.dims), win.tokens(), g.channels],
    )
}

/// Reassembles windows produced by [`window_partition`].
pub fn window_reverse<'t, T: Scalar>(windows: Var<'t, T>, dims: GridDims, win: &Window) -> Result<FeatureGrid<'t, T>> {
    let shape = windows.shape();
    let &[n, s, c] = shape.as_slice() else {
        return Err(shape_err!("windows must be [nW,S,C], got {shape:?}"));
    };
    win.check(&dims)?;
    if n != win.count(&dims) || s != win.tokens() {
        return Err(shape_err!(
            "windows {shape:?} inconsistent with grid {dims:?} and window {win:?}"
        ));
    }
    let idx = reverse_index(&dims, win)?;
    let tokens = windows.gather_rows(Arc::new(idx), c, [dims.tokens(), c])?;
    FeatureGrid::new(tokens, dims)
}

/// Cyclic translation of the grid by `(dt, dy, dx)`.
pub fn cyclic_shift<'t, T: Scalar>(g: &FeatureGrid<'t, T>, offsets: [isize; 3]) -> Result<FeatureGrid<'t, T>> {
    if offsets == [0, 0, 0] {
        return Ok(*g);
    }
    let idx = shift_index(&g.dims, offsets);
    let tokens = g
        .tokens
        .gather_rows(Arc::new(idx), g.channels, [g.dims.tokens(), g.channels])?;
    g.with_tokens(tokens)
}

/// 2×2 spatial patch merging: concat to 4C, optional LayerNorm, then
/// `reduce_weight: [2C, 4C]` without bias. Frames are untouched.
pub fn patch_merge<'t, T: Scalar>(
    g: &FeatureGrid<'t, T>,
    reduce_weight: &Var<'t, T>,
    ln: Option<(&Var<'t, T>, &Var<'t, T>)>,
) -> Result<FeatureGrid<'t, T>> {
    let idx = merge_index(&g.dims)?;
    let dims = GridDims {
        h: g.dims.h / 2,
        w: g.dims.w / 2,
        ..g.dims
    };
    let c4 = 4 * g.channels;
    let mut x = g.tokens.gather_rows(Arc::new(idx), g.channels, [dims.tokens(), c4])?;
    if let Some((gamma, beta)) = ln {
        x = x.layer_norm(gamma, beta, crate::nn::LN_EPS)?;
    }
    FeatureGrid::new(x.matmul_t(reduce_weight)?, dims)
}
