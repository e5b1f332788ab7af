//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SWCAP1\0"                  7-byte magic
//! u32 version
//! u32 tensor count
//! per tensor: u32 name_len, name, u32 rank, u64 dims[rank], f32 data
//! u32 len, vocabulary (one entry per line)
//! u32 len, config (canonical key=value, then state.* lines)
//! ```
//!
//! Optimizer moments are ordinary tensors under `optim.m.` and `optim.v.`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 7] = b"SWCAP1\0";
pub const VERSION: u32 = 1;
const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optim: Option<Adam<f32>>,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    /// Optimizer steps taken when saved.
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non-UTF-8 text in checkpoint"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    fn tensors(&self) -> BTreeMap<String, &Tensor<f32>> {
        let mut all: BTreeMap<String, &Tensor<f32>> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optim {
            for (n, t) in &opt.m {
                all.insert(format!("{MOMENT1}{n}"), t);
            }
            for (n, t) in &opt.v {
                all.insert(format!("{MOMENT2}{n}"), t);
            }
        }
        all
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_str(&mut out, &self.vocab.to_text());
        let mut config = self.config.to_text();
        config.push_str(&format!("state.step={}\n", self.step));
        if let Some(opt) = &self.optim {
            config.push_str(&format!("state.optim_step={}\n", opt.step));
        }
        put_str(&mut out, &config);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| bad("tensor too large"))?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            if let Some(p) = name.strip_prefix(MOMENT1) {
                m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                v.insert(p.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let vocab = Vocabulary::from_text(&r.string()?).map_err(|e| bad(e.to_string()))?;
        let text = r.string()?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after checkpoint"));
        }
        let (state, config): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with("state."));
        let config = RunConfig::parse(&config.join("\n"))?;
        let mut step = None;
        let mut optim_step = None;
        for line in state {
            let (k, val) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad state line `{line}`")))?;
            let n: u64 = val.parse().map_err(|_| bad(format!("bad state line `{line}`")))?;
            match k {
                "state.step" => step = Some(n),
                "state.optim_step" => optim_step = Some(n),
                _ => return Err(bad(format!("unknown state key `{k}`"))),
            }
        }
        let optim = optim_step.map(|s| Adam {
            cfg: AdamConfig::default(),
            step: s,
            m,
            v,
        });
        Ok(Self {
            params,
            optim,
            vocab,
            config,
            step: step.ok_or_else(|| bad("checkpoint lacks state.step"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
