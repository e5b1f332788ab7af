//! Run configuration in a canonical `key=value` text form.
//!
//! Blank lines and `#` comments are ignored when parsing; serialization
//! always writes every key in a fixed order, so parse∘serialize is stable.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, VideoConfig, STAGES};
use crate::error::{config_err, Error, Result};
use crate::mixers::MixerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Swin,
    SwinMlp,
    VideoSwinMlp,
}

impl ModelKind {
    pub fn default_mixer(self) -> MixerKind {
        match self {
            ModelKind::Swin => MixerKind::WMsa,
            ModelKind::SwinMlp | ModelKind::VideoSwinMlp => MixerKind::WMlp,
        }
    }

    pub fn is_video(self) -> bool {
        self == ModelKind::VideoSwinMlp
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Swin => "swin",
            ModelKind::SwinMlp => "swinmlp",
            ModelKind::VideoSwinMlp => "video-swinmlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swin" => Ok(ModelKind::Swin),
            "swinmlp" => Ok(ModelKind::SwinMlp),
            "video-swinmlp" => Ok(ModelKind::VideoSwinMlp),
            other => Err(config_err!(
                "unknown model `{other}` (expected swin, swinmlp or video-swinmlp)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub mixer: MixerKind,
    pub image_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub window: usize,
    pub mlp_ratio: usize,
    pub out_dim: usize,
    pub clamp_window: bool,
    pub shift_mask: bool,
    pub frames: usize,
    pub tubelet: usize,
    pub window_t: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub dec_ffn: usize,
    pub max_len: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub data: String,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::SwinMlp,
            mixer: MixerKind::WMlp,
            image_size: 224,
            patch: 4,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            window: 14,
            mlp_ratio: 4,
            out_dim: 512,
            clamp_window: true,
            shift_mask: false,
            frames: 4,
            tubelet: 2,
            window_t: 2,
            dec_blocks: 6,
            dec_heads: 8,
            dec_ffn: 2048,
            max_len: 32,
            seed: 0,
            epochs: 100,
            batch: 9,
            lr: 3e-4,
            warmup: 20000,
            max_steps: 0,
            data: String::new(),
            out: String::new(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got `{v}`")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<[usize; STAGES]> {
    let items: Vec<usize> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| config_err!("{key}: expected {STAGES} comma-separated values, got `{v}`"))
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults for `model`, with its default mixer.
    pub fn for_model(model: ModelKind) -> Self {
        Self {
            model,
            mixer: model.default_mixer(),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut mixer_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key=value, got `{line}`", n + 1))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err!("line {}: duplicate key `{key}`", n + 1));
            }
            match key {
                "model" => cfg.model = v.parse()?,
                "mixer" => {
                    cfg.mixer = v.parse()?;
                    mixer_set = true;
                }
                "image_size" => cfg.image_size = parse_num(key, v)?,
                "patch" => cfg.patch = parse_num(key, v)?,
                "embed_dim" => cfg.embed_dim = parse_num(key, v)?,
                "depths" => cfg.depths = parse_list(key, v)?,
                "heads" => cfg.heads = parse_list(key, v)?,
                "window" => cfg.window = parse_num(key, v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_num(key, v)?,
                "out_dim" => cfg.out_dim = parse_num(key, v)?,
                "clamp_window" => cfg.clamp_window = parse_bool(key, v)?,
                "shift_mask" => cfg.shift_mask = parse_bool(key, v)?,
                "frames" => cfg.frames = parse_num(key, v)?,
                "tubelet" => cfg.tubelet = parse_num(key, v)?,
                "window_t" => cfg.window_t = parse_num(key, v)?,
                "dec_blocks" => cfg.dec_blocks = parse_num(key, v)?,
                "dec_heads" => cfg.dec_heads = parse_num(key, v)?,
                "dec_ffn" => cfg.dec_ffn = parse_num(key, v)?,
                "max_len" => cfg.max_len = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "epochs" => cfg.epochs = parse_num(key, v)?,
                "batch" => cfg.batch = parse_num(key, v)?,
                "lr" => cfg.lr = parse_num(key, v)?,
                "warmup" => cfg.warmup = parse_num(key, v)?,
                "max_steps" => cfg.max_steps = parse_num(key, v)?,
                "data" => cfg.data = v.to_string(),
                "out" => cfg.out = v.to_string(),
                other => return Err(config_err!("line {}: unknown key `{other}`", n + 1)),
            }
        }
        if !mixer_set {
            cfg.mixer = cfg.model.default_mixer();
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("model", self.model.to_string());
        kv("mixer", self.mixer.to_string());
        kv("image_size", self.image_size.to_string());
        kv("patch", self.patch.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("depths", join(&self.depths));
        kv("heads", join(&self.heads));
        kv("window", self.window.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("out_dim", self.out_dim.to_string());
        kv("clamp_window", self.clamp_window.to_string());
        kv("shift_mask", self.shift_mask.to_string());
        kv("frames", self.frames.to_string());
        kv("tubelet", self.tubelet.to_string());
        kv("window_t", self.window_t.to_string());
        kv("dec_blocks", self.dec_blocks.to_string());
        kv("dec_heads", self.dec_heads.to_string());
        kv("dec_ffn", self.dec_ffn.to_string());
        kv("max_len", self.max_len.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("warmup", self.warmup.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("data", self.data.clone());
        kv("out", self.out.clone());
        s
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            in_channels: 3,
            patch: self.patch,
            embed_dim: self.embed_dim,
            depths: self.depths,
            heads: self.heads,
            window: self.window,
            mixer: self.mixer,
            video: self.model.is_video().then_some(VideoConfig {
                frames: self.frames,
                tubelet: self.tubelet,
                window_t: self.window_t,
            }),
            out_dim: self.out_dim,
            mlp_ratio: self.mlp_ratio,
            clamp_window: self.clamp_window,
            shift_mask: self.shift_mask,
            pool_size: 3,
        }
    }

    pub fn decoder(&self, vocab: usize) -> DecoderConfig {
        DecoderConfig {
            blocks: self.dec_blocks,
            model_dim: self.out_dim,
            heads: self.dec_heads,
            ffn_dim: self.dec_ffn,
            max_len: self.max_len,
            vocab,
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.encoder().plan()?;
        self.decoder(crate::text::SPECIALS.len() + 1).validate()?;
        if self.batch == 0 {
            return Err(config_err!("batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be a positive number, got {}", self.lr));
        }
        Ok(())
    }
}
