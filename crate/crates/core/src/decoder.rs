//! Transformer caption decoder over encoder memory.

use std::sync::Arc;

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::mixers::Attention;
use crate::nn::{trunc_normal, Activation, Ctx, Linear, Mlp, Norm, ParamStore, INIT_STD};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Longest input sequence, `bos` included.
    pub max_len: usize,
    pub vocab: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            max_len: 32,
            vocab: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(config_err!("decoder dimensions must be positive"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(config_err!(
                "{} decoder heads do not divide model width {}",
                self.heads,
                self.model_dim
            ));
        }
        if self.max_len < 2 {
            return Err(config_err!("decoder max_len must be at least 2, got {}", self.max_len));
        }
        if self.vocab <= EOS.max(PAD) {
            return Err(config_err!(
                "vocabulary of {} cannot hold the special tokens",
                self.vocab
            ));
        }
        Ok(())
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn([len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let freq = 10000f64.powf((j - j % 2) as f64 / dim as f64);
        let angle = pos as f64 / freq;
        T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Additive causal mask `[1, len, len]`: `-inf` above the diagonal.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::from_fn([1, len, len], |i| {
        if i % len > i / len {
            T::neg_infinity()
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: String,
    pub blocks: Vec<DecoderBlock>,
    pub norm: Norm,
    pub out: Linear,
}

pub struct DecoderOutput<'t, T: Scalar> {
    /// `[B·len, V]`.
    pub logits: Var<'t, T>,
    /// Cross-attention weights per block, `[B·heads, len, L]`.
    pub cross_attn: Vec<Var<'t, T>>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = "decoder.embed".to_string();
        store.insert(&embed, trunc_normal(&[cfg.vocab, d], INIT_STD, rng));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("decoder.blocks.{i}");
                Ok(DecoderBlock {
                    norm1: Norm::new(store, &format!("{name}.norm1"), d),
                    self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, cfg.heads)?,
                    norm2: Norm::new(store, &format!("{name}.norm2"), d),
                    cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, cfg.heads)?,
                    norm3: Norm::new(store, &format!("{name}.norm3"), d),
                    ffn: Mlp::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_dim, Activation::Gelu),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::new(store, "decoder.norm", d);
        let out = Linear::new(store, rng, "decoder.out", d, cfg.vocab, true);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            norm,
            out,
        })
    }

    /// Teacher-forced forward over `prev` (equal-length rows) against
    /// `memory: [B·mem_len, model_dim]`.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: Ctx<'a, T>,
        memory: Var<'a, T>,
        mem_len: usize,
        prev: &[Vec<usize>],
    ) -> Result<DecoderOutput<'a, T>> {
        let batch = prev.len();
        let len = prev.first().map_or(0, Vec::len);
        let d = self.cfg.model_dim;
        if batch == 0 || len == 0 {
            return Err(shape_err!("decoder needs at least one non-empty sequence"));
        }
        if prev.iter().any(|s| s.len() != len) {
            return Err(shape_err!("decoder input rows must share one length"));
        }
        if len > self.cfg.max_len {
            return Err(shape_err!("sequence length {len} exceeds max_len {}", self.cfg.max_len));
        }
        if let Some(&bad) = prev.iter().flatten().find(|&&id| id >= self.cfg.vocab) {
            return Err(shape_err!("token id {bad} outside vocabulary of {}", self.cfg.vocab));
        }
        if memory.shape() != [batch * mem_len, d] {
            return Err(shape_err!(
                "memory must be [{}, {d}], got {:?}",
                batch * mem_len,
                memory.shape()
            ));
        }
        let counter = ctx.tape.counter();
        let ids: Vec<usize> = prev.iter().flatten().copied().collect();
        let pe = sinusoidal_positions::<T>(len, d);
        let pe = Tensor::from_fn([batch * len, d], |i| pe.data()[i % (len * d)]);
        let mut x = ctx
            .p(&self.embed)?
            .gather_rows(Arc::new(ids), d, [batch * len, d])?
            .scale(T::from_f64((d as f64).sqrt()))
            .add(&ctx.constant(pe))?;
        let mask = causal_mask::<T>(len);
        let mut cross = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let _s = counter.enter(format!("decoder.block{i}"));
            let h = b.norm1.forward(ctx, x)?;
            x = x.add(&b.self_attn.attend(ctx, h, h, batch, len, len, Some(&mask))?.out)?;
            let h = b.norm2.forward(ctx, x)?;
            let attn = b.cross_attn.attend(ctx, h, memory, batch, len, mem_len, None)?;
            cross.push(attn.probs);
            x = x.add(&attn.out)?;
            x = x.add(&b.ffn.forward(ctx, b.norm3.forward(ctx, x)?)?)?;
        }
        let _s = counter.enter("decoder.out");
        let logits = self.out.forward(ctx, self.norm.forward(ctx, x)?)?;
        Ok(DecoderOutput {
            logits,
            cross_attn: cross,
        })
    }

    /// Greedy decoding for every item of `memory: [B·mem_len, D]`.
    /// Returned captions exclude `bos` and `eos`; ties pick the lowest id.
    pub fn greedy_decode<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        memory: &Tensor<T>,
        mem_len: usize,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if mem_len == 0 || memory.shape().len() != 2 || !memory.shape()[0].is_multiple_of(mem_len) {
            return Err(shape_err!(
                "memory {:?} is not a multiple of {mem_len} rows",
                memory.shape()
            ));
        }
        let batch = memory.shape()[0] / mem_len;
        let steps = max_len.min(self.cfg.max_len);
        let mut seqs = vec![vec![BOS]; batch];
        let mut done = vec![false; batch];
        let v = self.cfg.vocab;
        for _ in 0..steps {
            if done.iter().all(|&f| f) {
                break;
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, params);
            let logits = self
                .forward(ctx, tape.constant(memory.clone()), mem_len, &seqs)?
                .logits
                .value();
            let len = seqs[0].len();
            for (b, seq) in seqs.iter_mut().enumerate() {
                if done[b] {
                    seq.push(PAD);
                    continue;
                }
                let row = &logits.data()[(b * len + len - 1) * v..(b * len + len) * v];
                let mut best = 0;
                for (id, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = id;
                    }
                }
                seq.push(best);
                done[b] = best == EOS;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s.into_iter().skip(1).take_while(|&t| t != EOS).collect())
            .collect())
    }
}
