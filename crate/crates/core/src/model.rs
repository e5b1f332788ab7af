//! Encoder and decoder joined into a captioner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Teacher-forcing rows: `[bos, w..]` inputs and `[w.., eos]` targets,
/// padded with `pad` to the longest caption. Captions are cut to
/// `max_len − 1` words.
pub fn teacher_forcing(captions: &[Vec<usize>], max_len: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let keep = max_len.saturating_sub(1);
    let len = captions.iter().map(|c| c.len().min(keep)).max().unwrap_or(0) + 1;
    let mut inputs = Vec::with_capacity(captions.len());
    let mut targets = Vec::with_capacity(captions.len() * len);
    for c in captions {
        let words = &c[..c.len().min(keep)];
        let mut input = vec![BOS];
        input.extend_from_slice(words);
        input.resize(len, PAD);
        inputs.push(input);
        targets.extend_from_slice(words);
        targets.push(EOS);
        targets.extend(std::iter::repeat_n(PAD, len - words.len() - 1));
    }
    (inputs, targets)
}

/// Concatenates equally shaped items into one batch tensor.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| shape_err!("cannot stack an empty batch"))?;
    if items.iter().any(|t| t.shape() != first.shape()) {
        return Err(shape_err!("batch items differ in shape"));
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, items.iter().flat_map(|t| t.data().iter().copied()).collect())
}

impl Captioner {
    /// Builds the architecture, registering freshly initialized parameters.
    pub fn init<T: Scalar>(config: &RunConfig, vocab: Vocabulary, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(store, &mut rng, &config.encoder())?;
        let decoder = Decoder::new(store, &mut rng, &config.decoder(vocab.len()))?;
        Ok(Self {
            config: config.clone(),
            vocab,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the architecture for existing parameters, checking that
    /// every expected tensor is present with the right shape.
    pub fn for_params<T: Scalar>(config: &RunConfig, vocab: Vocabulary, params: &ParamStore<T>) -> Result<Self> {
        let mut fresh = ParamStore::<T>::new();
        let model = Self::init(config, vocab, &mut fresh)?;
        for (name, t) in fresh.iter() {
            let got = params
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != fresh.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                params.len(),
                fresh.len()
            )));
        }
        Ok(model)
    }

    /// Mean next-token cross-entropy over non-pad targets.
    pub fn loss<'a, T: Scalar>(
        &self,
        ctx: Ctx<'a, T>,
        images: Var<'a, T>,
        captions: &[Vec<usize>],
    ) -> Result<Var<'a, T>> {
        let enc = self.encoder.encode(ctx, images)?;
        let (inputs, targets) = teacher_forcing(captions, self.config.max_len);
        let out = self.decoder.forward(ctx, enc.memory, enc.len, &inputs)?;
        out.logits.cross_entropy(&targets, PAD)
    }

    /// Greedy captions (word ids) for a batch of inputs.
    pub fn caption_ids<T: Scalar>(&self, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params);
        let enc = self.encoder.encode(ctx, tape.constant(images.clone()))?;
        let memory = enc.memory.value();
        drop(enc);
        self.decoder
            .greedy_decode(params, &memory, self.encoder_len()?, self.config.max_len)
    }

    pub fn caption<T: Scalar>(&self, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<String>> {
        Ok(self
            .caption_ids(params, images)?
            .iter()
            .map(|ids| self.vocab.detokenize(ids))
            .collect())
    }

    pub fn encoder_len(&self) -> Result<usize> {
        self.encoder.cfg.memory_len()
    }
}
