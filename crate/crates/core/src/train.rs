//! Teacher-forced training with Adam, per-step CSV logging and
//! checkpointing.
//!
//! Batches are a pure function of `(seed, step)`: epoch `e` visits the
//! samples in a permutation drawn from its own random stream, so a resumed
//! run replays exactly the batches an uninterrupted one would have seen.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{bleu4, EvalRecord};
use crate::model::{stack, Captioner};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::tensor::{Tape, Tensor};
use crate::text::Vocabulary;

pub const LOG_HEADER: &str = "step,epoch,lr,loss";
pub const LOG_FILE: &str = "train.csv";
pub const LAST_CHECKPOINT: &str = "last.swcap";
pub const BEST_CHECKPOINT: &str = "best.swcap";
const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f32,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:e},{}", self.step, self.epoch, self.lr, self.loss)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where the log and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub checkpoints: bool,
    /// Training-set BLEU-4 is measured every this many steps (0: never).
    pub eval_every: u64,
    /// Stop once training-set BLEU-4 reaches this value.
    pub target_bleu: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub bleu: Option<f64>,
    pub reached_target: bool,
}

pub struct Trainer {
    pub model: Captioner,
    pub params: ParamStore<f32>,
    pub optim: Adam<f32>,
    pub step: u64,
    images: Vec<Tensor<f32>>,
    captions: Vec<Vec<usize>>,
    references: Vec<String>,
}

impl Trainer {
    /// Fresh parameters; the vocabulary is built from the dataset captions.
    pub fn new(config: &RunConfig, data: &Dataset) -> Result<Self> {
        let vocab = Vocabulary::build(data.captions());
        let mut params = ParamStore::new();
        let model = Captioner::init(config, vocab, &mut params)?;
        Self::assemble(model, params, Adam::new(AdamConfig::default()), 0, data)
    }

    pub fn resume(ckpt: Checkpoint, data: &Dataset) -> Result<Self> {
        let model = Captioner::for_params(&ckpt.config, ckpt.vocab, &ckpt.params)?;
        let optim = ckpt.optim.unwrap_or_else(|| Adam::new(AdamConfig::default()));
        Self::assemble(model, ckpt.params, optim, ckpt.step, data)
    }

    fn assemble(
        model: Captioner,
        params: ParamStore<f32>,
        optim: Adam<f32>,
        step: u64,
        data: &Dataset,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let expect = model.config.encoder().input_shape();
        if let Some(bad) = data.samples.iter().find(|s| s.image.shape() != expect.as_slice()) {
            return Err(Error::Data(format!(
                "sample of shape {:?} does not match the configured input {expect:?}",
                bad.image.shape()
            )));
        }
        let captions = data.samples.iter().map(|s| model.vocab.tokenize(&s.caption)).collect();
        Ok(Self {
            images: data.samples.iter().map(|s| s.image.clone()).collect(),
            references: data.samples.iter().map(|s| s.caption.clone()).collect(),
            captions,
            model,
            params,
            optim,
            step,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.config
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.images.len().div_ceil(self.config().batch) as u64
    }

    /// Planned number of steps for the configured epochs and step cap.
    pub fn total_steps(&self) -> u64 {
        let planned = self.config().epochs as u64 * self.batches_per_epoch();
        match self.config().max_steps {
            0 => planned,
            cap => planned.min(cap),
        }
    }

    /// Sample indices of the batch used at 0-based step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, b) = (step / bpe, (step % bpe) as usize);
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config().seed);
        rng.set_stream(epoch + 1);
        order.shuffle(&mut rng);
        let size = self.config().batch;
        order[b * size..((b + 1) * size).min(order.len())].to_vec()
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let idx = self.batch_indices(self.step);
        let images = stack(&idx.iter().map(|&i| &self.images[i]).collect::<Vec<_>>())?;
        let captions: Vec<Vec<usize>> = idx.iter().map(|&i| self.captions[i].clone()).collect();
        let lr = lr_schedule(self.step + 1, self.config().lr, self.config().warmup)?;
        let (loss, grads) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.params);
            let loss = self.model.loss(ctx, tape.constant(images), &captions)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} at step {}; lower lr or check the data",
                    self.step + 1
                )));
            }
            tape.backward(loss)?;
            (value, tape.param_grads())
        };
        self.optim.update(&mut self.params, &grads, lr)?;
        let epoch = self.step / self.batches_per_epoch();
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            epoch,
            lr,
            loss,
        })
    }

    /// Greedy captions for every training sample.
    pub fn captions(&self) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(self.images.len());
        for chunk in self.images.chunks(EVAL_BATCH) {
            let batch = stack(&chunk.iter().collect::<Vec<_>>())?;
            out.extend(self.model.caption(&self.params, &batch)?);
        }
        Ok(out)
    }

    pub fn training_bleu(&self) -> Result<f64> {
        let records = self
            .captions()?
            .iter()
            .zip(&self.references)
            .map(|(c, r)| EvalRecord::from_text(c, std::slice::from_ref(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(bleu4(&records))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optim: Some(self.optim.clone()),
            vocab: self.model.vocab.clone(),
            config: self.model.config.clone(),
            step: self.step,
        }
    }

    /// Trains until the planned step count or the BLEU target.
    pub fn run(&mut self, opts: &TrainOptions) -> Result<TrainOutcome> {
        let mut log_file = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(LOG_FILE);
                let fresh = self.step == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let total = self.total_steps();
        let bpe = self.batches_per_epoch();
        let mut log = Vec::new();
        let mut epoch_loss = 0.0f64;
        let mut best = f64::INFINITY;
        let mut bleu = None;
        let mut reached = false;
        while self.step < total {
            let row = self.train_step()?;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            log.push(row);
            epoch_loss += row.loss as f64;
            if self.step.is_multiple_of(bpe) {
                let mean = epoch_loss / bpe as f64;
                epoch_loss = 0.0;
                log::info!("epoch {} mean loss {mean:.4}", row.epoch);
                if let (true, Some(dir)) = (opts.checkpoints, &opts.out_dir) {
                    let ckpt = self.checkpoint();
                    ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                    if mean < best {
                        best = mean;
                        ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            if opts.eval_every > 0 && self.step.is_multiple_of(opts.eval_every) {
                let b = self.training_bleu()?;
                log::info!("step {} training BLEU-4 {b:.4}", self.step);
                bleu = Some(b);
                if opts.target_bleu.is_some_and(|t| b >= t) {
                    reached = true;
                    break;
                }
            }
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }
        if opts.checkpoints {
            if let Some(dir) = &opts.out_dir {
                self.checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
            }
        }
        Ok(TrainOutcome {
            steps: self.step,
            log,
            bleu,
            reached_target: reached,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, load_dataset, CorpusOptions};

    fn tiny() -> RunConfig {
        RunConfig {
            image_size: 32,
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            heads: [2, 2, 4, 4],
            window: 2,
            out_dim: 16,
            dec_blocks: 1,
            dec_heads: 2,
            dec_ffn: 32,
            max_len: 12,
            batch: 4,
            lr: 3e-3,
            warmup: 10,
            epochs: 2,
            ..Default::default()
        }
    }

    fn corpus(count: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let opts = CorpusOptions {
            seed: 3,
            count,
            image_size: 32,
            frames: None,
        };
        let s = gen_corpus(&opts, dir.path()).unwrap();
        let ds = load_dataset(&s.manifest).unwrap();
        (dir, ds)
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let (_d, ds) = corpus(10);
        let t = Trainer::new(&tiny(), &ds).unwrap();
        assert_eq!(t.batches_per_epoch(), 3);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..3).flat_map(|b| t.batch_indices(epoch * 3 + b)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let (_d, ds) = corpus(9);
        let mut t = Trainer::new(&tiny(), &ds).unwrap();
        let v = t.model.vocab.len() as f32;
        let row = t.train_step().unwrap();
        assert!((row.loss - v.ln()).abs() < 0.1 * v.ln(), "{} vs ln {v}", row.loss);
    }

    #[test]
    fn loss_decreases_early() {
        let (_d, ds) = corpus(9);
        let cfg = RunConfig {
            epochs: 100,
            max_steps: 50,
            ..tiny()
        };
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let out = t.run(&TrainOptions::default()).unwrap();
        let losses: Vec<f32> = out.log.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 50);
        assert!(losses.iter().all(|l| l.is_finite()));
        let avg: Vec<f32> = losses.windows(10).map(|w| w.iter().sum::<f32>() / 10.0).collect();
        assert!(avg.last().unwrap() < avg.first().unwrap());
        for pair in avg.chunks(10).collect::<Vec<_>>().windows(2) {
            assert!(pair[1][0] < pair[0][0]);
        }
    }

    #[test]
    fn resume_replays_identical_losses() {
        let (_d, ds) = corpus(10);
        let cfg = RunConfig { max_steps: 8, ..tiny() };
        let mut full = Trainer::new(&cfg, &ds).unwrap();
        let all = full.run(&TrainOptions::default()).unwrap().log;

        let half = RunConfig {
            max_steps: 4,
            ..cfg.clone()
        };
        let mut first = Trainer::new(&half, &ds).unwrap();
        first.run(&TrainOptions::default()).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        ckpt.config.max_steps = 8;
        let mut second = Trainer::resume(ckpt, &ds).unwrap();
        let rest = second.run(&TrainOptions::default()).unwrap().log;
        assert_eq!(rest, all[4..]);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let (_d, ds) = corpus(5);
        let out = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&tiny(), &ds).unwrap();
        let opts = TrainOptions {
            out_dir: Some(out.path().to_path_buf()),
            checkpoints: true,
            ..Default::default()
        };
        t.run(&opts).unwrap();
        let log = fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[1].starts_with("1,0,"));
        let last = Checkpoint::load(&out.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(last.step, 4);
        assert!(out.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn nan_loss_aborts() {
        let (_d, ds) = corpus(4);
        let mut t = Trainer::new(&tiny(), &ds).unwrap();
        let name = t.model.decoder.out.weight.clone();
        t.params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
        assert!(matches!(t.train_step(), Err(Error::Numeric(_))));
    }

    #[test]
    fn mismatched_images_are_rejected() {
        let (_d, ds) = corpus(2);
        let cfg = RunConfig {
            image_size: 64,
            ..tiny()
        };
        assert!(matches!(Trainer::new(&cfg, &ds), Err(Error::Data(_))));
    }
}
