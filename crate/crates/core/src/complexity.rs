//! Closed-form cost model, checked against instrumented forward passes.
//!
//! The unit is the multiply-accumulate (MAC). Softmax, LayerNorm and GELU
//! are left out of the closed forms, as in the window-attention cost
//! formulas; the tape can count them separately.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::encoder::{EncoderConfig, STAGES};
use crate::error::{Error, Result};
use crate::mixers::MixerKind;
use crate::model::Captioner;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::text::{Vocabulary, BOS, SPECIALS};

/// Global self-attention: `4hwC² + 2(hw)²C`.
pub fn cost_msa(h: u64, w: u64, c: u64) -> u64 {
    let n = h * w;
    4 * n * c * c + 2 * n * n * c
}

/// Window self-attention: `4hwC² + 2M²hwC`.
pub fn cost_wmsa(h: u64, w: u64, c: u64, m: u64) -> u64 {
    let n = h * w;
    4 * n * c * c + 2 * m * m * n * c
}

/// Window spatial MLP: `hw·M²·C`, independent of the head count.
pub fn cost_wmlp(h: u64, w: u64, c: u64, m: u64) -> u64 {
    h * w * m * m * c
}

/// Channel MLP `C → rC → C` over `n` tokens.
pub fn cost_mlp(n: u64, c: u64, ratio: u64) -> u64 {
    2 * n * c * ratio * c
}

/// Dense layer over `n` rows.
pub fn cost_linear(n: u64, input: u64, output: u64) -> u64 {
    n * input * output
}

/// Mixer cost for `n` tokens in windows of `s` tokens.
pub fn cost_mixer(kind: MixerKind, n: u64, s: u64, c: u64) -> u64 {
    match kind {
        MixerKind::WMlp | MixerKind::Pool => n * s * c,
        MixerKind::WMsa | MixerKind::GlobalMsa => 4 * n * c * c + 2 * s * n * c,
    }
}

/// One decoder block over `len` positions attending to `mem` memory rows.
pub fn cost_decoder_block(len: u64, mem: u64, d: u64, ffn: u64) -> u64 {
    let self_attn = 4 * len * d * d + 2 * len * len * d;
    let cross_attn = 2 * len * d * d + 2 * mem * d * d + 2 * len * mem * d;
    self_attn + cross_attn + 2 * len * d * ffn
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub analytic_macs: u64,
    pub measured_macs: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub rows: Vec<CostRow>,
    pub encoder_params: u64,
    pub encoder_macs: u64,
    pub total_params: u64,
    pub total_macs: u64,
    pub config: RunConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportOptions {
    pub vocab: usize,
    /// Decoder positions in the measured teacher-forced pass.
    pub caption_len: usize,
    pub include_decoder: bool,
    /// Run the instrumented forward and require equality.
    pub measure: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            vocab: 64,
            caption_len: 16,
            include_decoder: true,
            measure: true,
        }
    }
}

/// Analytic rows for the encoder of `cfg`, one item.
fn encoder_rows(cfg: &EncoderConfig) -> Result<Vec<(String, u64)>> {
    let plans = cfg.plan()?;
    let spec = cfg.patch_spec();
    let n0 = plans[0].dims.tokens_per_item() as u64;
    let patch_in = (cfg.in_channels * spec.t * spec.p * spec.p) as u64;
    let mut rows = vec![(
        "encoder.patch_embed".to_string(),
        cost_linear(n0, patch_in, cfg.embed_dim as u64),
    )];
    for (i, p) in plans.iter().enumerate() {
        let (n, c) = (p.dims.tokens_per_item() as u64, p.channels as u64);
        if i > 0 {
            rows.push((format!("encoder.stage{i}.merge"), cost_linear(n, 2 * c, c)));
        }
        let blocks = cfg.depths[i] as u64;
        if blocks > 0 {
            let s = p.window.tokens() as u64;
            rows.push((
                format!("encoder.stage{i}.mixer"),
                blocks * cost_mixer(cfg.mixer, n, s, c),
            ));
            rows.push((
                format!("encoder.stage{i}.mlp"),
                blocks * cost_mlp(n, c, cfg.mlp_ratio as u64),
            ));
        }
    }
    let last = &plans[STAGES - 1];
    rows.push((
        "encoder.head".to_string(),
        cost_linear(
            last.dims.tokens_per_item() as u64,
            last.channels as u64,
            cfg.out_dim as u64,
        ),
    ));
    Ok(rows)
}

/// Parameter-name prefixes that make up each report row.
fn row_prefixes(name: &str) -> Vec<String> {
    if name == "encoder.patch_embed" {
        return vec!["encoder.patch_embed.".into(), "encoder.patch_norm.".into()];
    }
    if name == "encoder.head" {
        return vec!["encoder.norm.".into(), "encoder.head.".into()];
    }
    if name == "decoder.out" {
        return vec!["decoder.embed".into(), "decoder.norm.".into(), "decoder.out.".into()];
    }
    if let Some(i) = name.strip_prefix("decoder.block") {
        return vec![format!("decoder.blocks.{i}.")];
    }
    let rest = name.strip_prefix("encoder.stage").unwrap_or("");
    let (stage, part) = rest.split_once('.').unwrap_or(("", ""));
    match part {
        "merge" => vec![format!("encoder.stages.{stage}.merge.")],
        "mixer" => vec![
            format!("encoder.stages.{stage}.blocks.*.mixer."),
            format!("encoder.stages.{stage}.blocks.*.norm1."),
        ],
        "mlp" => vec![
            format!("encoder.stages.{stage}.blocks.*.mlp."),
            format!("encoder.stages.{stage}.blocks.*.norm2."),
        ],
        _ => Vec::new(),
    }
}

fn matches_prefix(name: &str, pattern: &str) -> bool {
    match pattern.split_once(".*.") {
        None => name.starts_with(pattern),
        Some((head, tail)) => name
            .strip_prefix(head)
            .and_then(|r| r.strip_prefix('.'))
            .and_then(|r| r.split_once('.'))
            .is_some_and(|(idx, r)| idx.chars().all(|c| c.is_ascii_digit()) && r.starts_with(tail)),
    }
}

/// Walks the architecture of `cfg`, optionally measuring one forward pass.
pub fn model_report(cfg: &RunConfig, opts: &ReportOptions) -> Result<CostReport> {
    cfg.validate()?;
    let enc_cfg = cfg.encoder();
    let mut analytic = encoder_rows(&enc_cfg)?;
    let mem = enc_cfg.memory_len()? as u64;
    let vocab_words = opts.vocab.saturating_sub(SPECIALS.len()).max(1);
    let vocab = Vocabulary::from_words((0..vocab_words).map(|i| format!("w{i}")))?;
    let len = opts.caption_len.clamp(1, cfg.max_len) as u64;
    if opts.include_decoder {
        let (d, f) = (cfg.out_dim as u64, cfg.dec_ffn as u64);
        for i in 0..cfg.dec_blocks {
            analytic.push((format!("decoder.block{i}"), cost_decoder_block(len, mem, d, f)));
        }
        analytic.push(("decoder.out".into(), cost_linear(len, d, vocab.len() as u64)));
    }

    let mut store = ParamStore::<f32>::new();
    let model = Captioner::init(cfg, vocab, &mut store)?;
    let names: Vec<&str> = store.names().collect();
    let count = |row: &str| -> u64 {
        let prefixes = row_prefixes(row);
        names
            .iter()
            .filter(|n| prefixes.iter().any(|p| matches_prefix(n, p)))
            .map(|n| store.tensor(n).map_or(0, |t| t.numel() as u64))
            .sum()
    };

    let measured = if opts.measure {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        tape.counter().enable();
        let mut shape = vec![1];
        shape.extend(enc_cfg.input_shape());
        let enc = model.encoder.encode(ctx, tape.constant(Tensor::zeros(shape)))?;
        if opts.include_decoder {
            let prev = vec![vec![BOS; len as usize]];
            model.decoder.forward(ctx, enc.memory, enc.len, &prev)?;
        }
        Some(tape.counter().by_scope())
    } else {
        None
    };

    let mut rows = Vec::with_capacity(analytic.len());
    let mut mismatches = Vec::new();
    for (name, macs) in analytic {
        let got = measured.as_ref().map(|m| {
            m.iter()
                .filter(|(scope, _)| *scope == &name || scope.starts_with(&format!("{name}.")))
                .map(|(_, v)| *v)
                .sum::<u64>()
        });
        if let Some(g) = got {
            if g != macs {
                mismatches.push(format!("{name}: analytic {macs}, measured {g}"));
            }
        }
        rows.push(CostRow {
            params: count(&name),
            name,
            analytic_macs: macs,
            measured_macs: got,
        });
    }
    if !mismatches.is_empty() {
        return Err(Error::Consistency(mismatches.join("; ")));
    }
    let encoder_rows = rows.iter().filter(|r| r.name.starts_with("encoder."));
    let encoder_params = encoder_rows.clone().map(|r| r.params).sum();
    let encoder_macs = encoder_rows.map(|r| r.analytic_macs).sum();
    let total_params: u64 = rows.iter().map(|r| r.params).sum();
    let expected_params = if opts.include_decoder {
        store.num_params() as u64
    } else {
        store.num_params_with_prefix("encoder.") as u64
    };
    if total_params != expected_params {
        return Err(Error::Consistency(format!(
            "report rows cover {total_params} parameters, model has {expected_params}"
        )));
    }
    Ok(CostReport {
        model: cfg.model.to_string(),
        total_macs: rows.iter().map(|r| r.analytic_macs).sum(),
        rows,
        encoder_params,
        encoder_macs,
        total_params,
        config: cfg.clone(),
    })
}

fn fmt_measured(m: Option<u64>) -> String {
    m.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl CostReport {
    pub fn measured_total(&self) -> Option<u64> {
        self.rows.iter().map(|r| r.measured_macs).sum()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {} (MACs; 1 FLOP counted as 1 MAC)\n\n", self.model);
        s.push_str("| module | params | analytic MACs | measured MACs |\n|---|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r.name,
                r.params,
                r.analytic_macs,
                fmt_measured(r.measured_macs)
            );
        }
        let enc_measured: Option<u64> = self
            .rows
            .iter()
            .filter(|r| r.name.starts_with("encoder."))
            .map(|r| r.measured_macs)
            .sum();
        let _ = writeln!(
            s,
            "| **encoder total** | {} | {} | {} |",
            self.encoder_params,
            self.encoder_macs,
            fmt_measured(enc_measured)
        );
        let _ = writeln!(
            s,
            "| **total** | {} | {} | {} |",
            self.total_params,
            self.total_macs,
            fmt_measured(self.measured_total())
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,module,params,analytic_macs,measured_macs\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.model,
                r.name,
                r.params,
                r.analytic_macs,
                fmt_measured(r.measured_macs)
            );
        }
        s
    }
}

/// Side-by-side totals, one row per report.
pub fn comparison_markdown(reports: &[CostReport]) -> String {
    let mut s = String::from(
        "| model | encoder params | encoder MACs | params | analytic MACs | measured MACs |\n|---|---:|---:|---:|---:|---:|\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.model,
            r.encoder_params,
            r.encoder_macs,
            r.total_params,
            r.total_macs,
            fmt_measured(r.measured_total())
        );
    }
    s
}

pub fn comparison_csv(reports: &[CostReport]) -> String {
    let mut s = String::from("model,encoder_params,encoder_macs,params,analytic_macs,measured_macs\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.model,
            r.encoder_params,
            r.encoder_macs,
            r.total_params,
            r.total_macs,
            fmt_measured(r.measured_total())
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::ModelKind;
    use crate::mixers::{global_msa, Attention};

    #[test]
    fn closed_form_values() {
        assert_eq!(cost_msa(56, 56, 128), 2_723_151_872);
        assert_eq!(cost_msa(1, 1, 7), 4 * 49 + 14);
        assert_eq!(cost_wmsa(56, 56, 128, 14), 362_872_832);
        assert_eq!(cost_wmlp(56, 56, 128, 14), 78_675_968);
        assert_eq!(cost_wmlp(5, 3, 8, 1), 15 * 8);
        assert_eq!(cost_wmsa(8, 8, 16, 8), cost_msa(8, 8, 16));
    }

    #[test]
    fn global_attention_instrumented() {
        let mut store = ParamStore::<f32>::new();
        let attn = Attention::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "a", 128, 4).unwrap();
        let tape = Tape::new();
        tape.counter().enable();
        let ctx = Ctx::new(&tape, &store);
        global_msa(ctx, tape.constant(Tensor::zeros([3136, 128])), &attn).unwrap();
        assert_eq!(tape.counter().total_macs(), cost_msa(56, 56, 128));
    }

    #[test]
    fn ordering_over_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = rng.random_range(1..8u64);
            let h = m * rng.random_range(1..6u64);
            let w = m * rng.random_range(1..6u64);
            let c = rng.random_range(2..256u64);
            if m * m < h * w {
                assert!(cost_wmlp(h, w, c, m) < cost_wmsa(h, w, c, m));
                assert!(cost_wmsa(h, w, c, m) < cost_msa(h, w, c));
            }
        }
    }

    fn small(model: ModelKind, mixer: MixerKind) -> RunConfig {
        RunConfig {
            model,
            mixer,
            image_size: 64,
            embed_dim: 16,
            depths: [1, 2, 1, 1],
            window: 4,
            out_dim: 32,
            dec_blocks: 2,
            dec_heads: 4,
            dec_ffn: 64,
            ..Default::default()
        }
    }

    #[test]
    fn analytic_equals_measured_for_every_mixer() {
        for mixer in [MixerKind::WMlp, MixerKind::WMsa, MixerKind::GlobalMsa, MixerKind::Pool] {
            let r = model_report(&small(ModelKind::SwinMlp, mixer), &ReportOptions::default()).unwrap();
            for row in &r.rows {
                assert_eq!(Some(row.analytic_macs), row.measured_macs, "{mixer} {}", row.name);
            }
            assert_eq!(r.total_macs, r.rows.iter().map(|x| x.analytic_macs).sum::<u64>());
            assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        }
        let video = model_report(
            &small(ModelKind::VideoSwinMlp, MixerKind::WMlp),
            &ReportOptions::default(),
        )
        .unwrap();
        assert_eq!(video.measured_total(), Some(video.total_macs));
    }

    #[test]
    fn head_count_does_not_change_spatial_mlp_cost() {
        let a = RunConfig {
            heads: [2, 2, 2, 2],
            ..small(ModelKind::SwinMlp, MixerKind::WMlp)
        };
        let b = RunConfig {
            heads: [8, 8, 8, 8],
            ..a.clone()
        };
        let opts = ReportOptions {
            include_decoder: false,
            ..Default::default()
        };
        let ra = model_report(&a, &opts).unwrap();
        let rb = model_report(&b, &opts).unwrap();
        assert_eq!(ra.measured_total(), rb.measured_total());
    }

    #[test]
    fn patch_embed_scales_with_area() {
        let opts = ReportOptions {
            include_decoder: false,
            ..Default::default()
        };
        let a = model_report(&small(ModelKind::SwinMlp, MixerKind::WMlp), &opts).unwrap();
        let b = model_report(
            &RunConfig {
                image_size: 128,
                ..small(ModelKind::SwinMlp, MixerKind::WMlp)
            },
            &opts,
        )
        .unwrap();
        let pe = |r: &CostReport| {
            r.rows
                .iter()
                .find(|x| x.name == "encoder.patch_embed")
                .unwrap()
                .measured_macs
                .unwrap()
        };
        assert_eq!(pe(&b), 4 * pe(&a));
    }

    #[test]
    fn tables_render() {
        let r = model_report(&small(ModelKind::Swin, MixerKind::WMsa), &ReportOptions::default()).unwrap();
        let md = r.to_markdown();
        assert!(md.contains("| encoder.stage1.mixer |"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), r.rows.len() + 1);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 5));
        let cmp = comparison_csv(&[r.clone(), r]);
        assert_eq!(cmp.lines().count(), 3);
    }

    #[test]
    fn prefix_patterns() {
        assert!(matches_prefix(
            "encoder.stages.2.blocks.11.mixer.weight",
            "encoder.stages.2.blocks.*.mixer."
        ));
        assert!(!matches_prefix(
            "encoder.stages.2.blocks.11.mlp.fc1.weight",
            "encoder.stages.2.blocks.*.mixer."
        ));
        assert!(!matches_prefix(
            "encoder.stages.12.blocks.1.mixer.weight",
            "encoder.stages.2.blocks.*.mixer."
        ));
    }
}
