//! Token mixers: window spatial MLP, window and global self-attention, and
//! window pooling. All take windows `[nW, S, C]` and return the same shape.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{trunc_normal, Ctx, Linear, ParamStore, INIT_STD};
use crate::patching::{partition_index, GridDims, Window};
use crate::tensor::{Scalar, Tensor, Var};

/// Additive logit bias for masked attention pairs across shifted regions.
pub const SHIFT_MASK_BIAS: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    WMlp,
    WMsa,
    GlobalMsa,
    Pool,
}

impl MixerKind {
    pub fn is_windowed(self) -> bool {
        !matches!(self, MixerKind::GlobalMsa)
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerKind::WMlp => "w_mlp",
            MixerKind::WMsa => "w_msa",
            MixerKind::GlobalMsa => "global_msa",
            MixerKind::Pool => "pool",
        })
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w_mlp" => Ok(MixerKind::WMlp),
            "w_msa" => Ok(MixerKind::WMsa),
            "global_msa" => Ok(MixerKind::GlobalMsa),
            "pool" => Ok(MixerKind::Pool),
            other => Err(config_err!("unknown mixer kind `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub heads: usize,
    /// Window the mixer sees; ignored by `GlobalMsa`.
    pub window: Window,
    /// Pooling neighborhood, odd.
    pub pool_size: usize,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, heads: usize, window: Window) -> Self {
        Self {
            kind,
            heads,
            window,
            pool_size: 3,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(config_err!("{} heads do not divide {channels} channels", self.heads));
        }
        if self.kind == MixerKind::Pool && self.pool_size.is_multiple_of(2) {
            return Err(config_err!("pool size {} must be odd", self.pool_size));
        }
        Ok(())
    }
}

/// Multi-head attention with separate q/k/v/o projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// `[B·S, n·d]` rows → `[B·n, S, d]` head-major.
fn split_heads_index(batch: usize, seq: usize, heads: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * seq * heads);
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                idx.push((b * seq + s) * heads + h);
            }
        }
    }
    idx
}

fn merge_heads_index(batch: usize, seq: usize, heads: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * seq * heads);
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                idx.push((b * heads + h) * seq + s);
            }
        }
    }
    idx
}

/// Output of an attention call, with the softmax weights kept for inspection.
pub struct AttentionOutput<'t, T: Scalar> {
    pub out: Var<'t, T>,
    /// `[B·n, Sq, Sk]`.
    pub probs: Var<'t, T>,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{heads} heads do not divide {dim} channels"));
        }
        let mut lin = |part: &str| Linear::new(store, rng, &format!("{name}.{part}"), dim, dim, true);
        Ok(Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * (self.dim * self.dim + self.dim)
    }

    /// Attends `batch` query groups of `sq` rows to key groups of `sk` rows.
    ///
    /// `query` is `[batch·sq, C]`, `memory` `[batch·sk, C]`. `mask`, if
    /// given, is `[G, sq, sk]` and is added to the logits of group `b` as
    /// `mask[b mod G]` for every head.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<'a, T: Scalar>(
        &self,
        ctx: Ctx<'a, T>,
        query: Var<'a, T>,
        memory: Var<'a, T>,
        batch: usize,
        sq: usize,
        sk: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<AttentionOutput<'a, T>> {
        let (n, d) = (self.heads, self.dim / self.heads);
        if query.shape() != [batch * sq, self.dim] || memory.shape() != [batch * sk, self.dim] {
            return Err(shape_err!(
                "attention expects [{}, {c}] queries and [{}, {c}] keys, got {:?} and {:?}",
                batch * sq,
                batch * sk,
                query.shape(),
                memory.shape(),
                c = self.dim
            ));
        }
        let split =
            |x: Var<'a, T>, s: usize| x.gather_rows(Arc::new(split_heads_index(batch, s, n)), d, [batch * n, s, d]);
        let q = split(self.q.forward(ctx, query)?, sq)?;
        let k = split(self.k.forward(ctx, memory)?, sk)?;
        let v = split(self.v.forward(ctx, memory)?, sk)?;
        let mut scores = q.bmm_t(&k)?.scale(T::from_f64(1.0 / (d as f64).sqrt()));
        if let Some(mask) = mask {
            let &[groups, mq, mk] = mask.shape() else {
                return Err(shape_err!("mask must be [G,Sq,Sk], got {:?}", mask.shape()));
            };
            if mq != sq || mk != sk || !batch.is_multiple_of(groups) {
                return Err(shape_err!(
                    "mask {:?} incompatible with {batch} groups of {sq}x{sk}",
                    mask.shape()
                ));
            }
            let block = sq * sk;
            let full = Tensor::from_fn([batch * n, sq, sk], |i| {
                let bh = i / block;
                mask.data()[((bh / n) % groups) * block + i % block]
            });
            scores = scores.add(&ctx.constant(full))?;
        }
        let probs = scores.softmax(2)?;
        let mixed = probs.bmm(&v)?;
        let merged = mixed.gather_rows(Arc::new(merge_heads_index(batch, sq, n)), d, [batch * sq, self.dim])?;
        Ok(AttentionOutput {
            out: self.o.forward(ctx, merged)?,
            probs,
        })
    }
}

/// Per-head `S×S` token-mixing matrices shared by all windows.
#[derive(Clone, Debug)]
pub struct SpatialMlp {
    pub weight: String,
    pub bias: String,
    pub heads: usize,
    pub tokens: usize,
}

impl SpatialMlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        heads: usize,
        tokens: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, trunc_normal(&[heads, tokens, tokens], INIT_STD, rng));
        store.insert(&bias, Tensor::zeros([heads, tokens]));
        Self {
            weight,
            bias,
            heads,
            tokens,
        }
    }

    /// `n·S·(S+1)`.
    pub fn num_params(&self) -> usize {
        self.heads * self.tokens * (self.tokens + 1)
    }
}

/// Window-local neighborhood mean minus identity, as an `S×S` matrix.
/// Averages only over in-window neighbors.
pub fn pool_matrix<T: Scalar>(win: &Window, k: usize) -> Tensor<T> {
    let s = win.tokens();
    let r = (k / 2) as isize;
    let coords: Vec<[isize; 3]> = (0..s)
        .map(|i| {
            let (t, rest) = (i / (win.h * win.w), i % (win.h * win.w));
            [t as isize, (rest / win.w) as isize, (rest % win.w) as isize]
        })
        .collect();
    let mut m = vec![T::zero(); s * s];
    for (j, cj) in coords.iter().enumerate() {
        let near: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, ck)| (0..3).all(|a| (ck[a] - cj[a]).abs() <= r))
            .map(|(kk, _)| kk)
            .collect();
        let share = T::one() / T::from_f64(near.len() as f64);
        for kk in near {
            m[j * s + kk] = share;
        }
        m[j * s + j] = m[j * s + j] - T::one();
    }
    Tensor::new([s, s], m).expect("square")
}

/// A configured token mixer with its parameter names.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum TokenMixer {
    SpatialMlp(SpatialMlp),
    Attention(Attention),
    Pool { window: Window, k: usize },
}

impl TokenMixer {
    /// `window` must already be clamped to the grid the mixer will see.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &MixerConfig,
        channels: usize,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(match cfg.kind {
            MixerKind::WMlp => {
                TokenMixer::SpatialMlp(SpatialMlp::new(store, rng, name, cfg.heads, cfg.window.tokens()))
            }
            MixerKind::WMsa | MixerKind::GlobalMsa => {
                TokenMixer::Attention(Attention::new(store, rng, name, channels, cfg.heads)?)
            }
            MixerKind::Pool => TokenMixer::Pool {
                window: cfg.window,
                k: cfg.pool_size,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            TokenMixer::SpatialMlp(m) => m.num_params(),
            TokenMixer::Attention(a) => a.num_params(),
            TokenMixer::Pool { .. } => 0,
        }
    }

    /// Mixes `[nW, S, C]` windows. `mask` only applies to attention.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: Ctx<'a, T>,
        windows: Var<'a, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'a, T>> {
        let shape = windows.shape();
        let &[nw, s, c] = shape.as_slice() else {
            return Err(shape_err!("mixer input must be [nW,S,C], got {shape:?}"));
        };
        match self {
            TokenMixer::SpatialMlp(m) => {
                if s != m.tokens {
                    return Err(shape_err!(
                        "spatial MLP built for {} tokens per window, got {s}",
                        m.tokens
                    ));
                }
                windows.grouped_mix(&ctx.p(&m.weight)?, &ctx.p(&m.bias)?)
            }
            TokenMixer::Attention(a) => {
                let flat = windows.reshape([nw * s, c])?;
                a.attend(ctx, flat, flat, nw, s, s, mask)?.out.reshape([nw, s, c])
            }
            TokenMixer::Pool { window, k } => {
                if s != window.tokens() {
                    return Err(shape_err!("pool built for {} tokens, got {s}", window.tokens()));
                }
                let w = pool_matrix::<T>(window, *k).reshape([1, s, s])?;
                windows.grouped_mix(&ctx.constant(w), &ctx.constant(Tensor::zeros([1, s])))
            }
        }
    }
}

/// Window spatial MLP on `[nW, S, C]` with explicit `[n,S,S]` weights.
pub fn w_mlp_mix<'a, T: Scalar>(
    windows: Var<'a, T>,
    cfg: &MixerConfig,
    weight: &Var<'a, T>,
    bias: &Var<'a, T>,
) -> Result<Var<'a, T>> {
    let shape = windows.shape();
    if shape.len() != 3 || shape[1] != cfg.window.tokens() {
        return Err(shape_err!(
            "windows {shape:?} do not hold {} tokens each",
            cfg.window.tokens()
        ));
    }
    cfg.validate(shape[2])?;
    if weight.shape()[0] != cfg.heads {
        return Err(shape_err!(
            "weights {:?} do not have {} heads",
            weight.shape(),
            cfg.heads
        ));
    }
    windows.grouped_mix(weight, bias)
}

/// Window self-attention on `[nW, S, C]`.
pub fn w_msa<'a, T: Scalar>(
    ctx: Ctx<'a, T>,
    windows: Var<'a, T>,
    attn: &Attention,
    mask: Option<&Tensor<T>>,
) -> Result<AttentionOutput<'a, T>> {
    let shape = windows.shape();
    let &[nw, s, c] = shape.as_slice() else {
        return Err(shape_err!("windows must be [nW,S,C], got {shape:?}"));
    };
    let flat = windows.reshape([nw * s, c])?;
    let res = attn.attend(ctx, flat, flat, nw, s, s, mask)?;
    Ok(AttentionOutput {
        out: res.out.reshape([nw, s, c])?,
        probs: res.probs,
    })
}

/// Full-sequence self-attention on `[N, C]` tokens.
pub fn global_msa<'a, T: Scalar>(ctx: Ctx<'a, T>, tokens: Var<'a, T>, attn: &Attention) -> Result<Var<'a, T>> {
    let n = tokens.shape()[0];
    Ok(attn.attend(ctx, tokens, tokens, 1, n, n, None)?.out)
}

/// Pooling mixer with neighborhood `k` (odd).
pub fn pool_mix<'a, T: Scalar>(windows: Var<'a, T>, win: &Window, k: usize) -> Result<Var<'a, T>> {
    if k.is_multiple_of(2) {
        return Err(config_err!("pool size {k} must be odd"));
    }
    let tape = windows.tape();
    let s = win.tokens();
    let w = pool_matrix::<T>(win, k).reshape([1, s, s])?;
    windows.grouped_mix(&tape.constant(w), &tape.constant(Tensor::zeros([1, s])))
}

/// Attention mask for shifted windows over one item: tokens that came
/// from different regions of the unshifted grid may not attend to each
/// other. Shape `[windows per item, S, S]`.
pub fn shifted_window_mask<T: Scalar>(dims: &GridDims, win: &Window, shift: [usize; 3]) -> Result<Tensor<T>> {
    let item = GridDims { batch: 1, ..*dims };
    let sizes = [item.t(), item.h, item.w];
    let wins = [win.t, win.h, win.w];
    let region = |axis: usize, v: usize| -> usize {
        let (n, w, s) = (sizes[axis], wins[axis], shift[axis]);
        if s == 0 || v < n - w {
            0
        } else if v < n - s {
            1
        } else {
            2
        }
    };
    // label grid positions, shift like the features, then partition
    let mut labels = vec![0usize; item.tokens()];
    for f in 0..item.t() {
        for y in 0..item.h {
            for x in 0..item.w {
                labels[(f * item.h + y) * item.w + x] = (region(0, f) * 3 + region(1, y)) * 3 + region(2, x);
            }
        }
    }
    let order = partition_index(&item, win)?;
    let s = win.tokens();
    let n = win.count(&item);
    let masked = T::from_f64(SHIFT_MASK_BIAS);
    Ok(Tensor::from_fn([n, s, s], |i| {
        let (w, rest) = (i / (s * s), i % (s * s));
        let (a, b) = (rest / s, rest % s);
        if labels[order[w * s + a]] == labels[order[w * s + b]] {
            T::zero()
        } else {
            masked
        }
    }))
}
