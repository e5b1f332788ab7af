use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swincap::checkpoint::Checkpoint;
use swincap::complexity::{comparison_csv, comparison_markdown, model_report, ReportOptions};
use swincap::config::{ModelKind, RunConfig};
use swincap::corpus::{gen_corpus, image_tensor, load_dataset, CorpusOptions, MANIFEST};
use swincap::metrics::{bleu4, cider, parse_pairs, EvalRecord};
use swincap::model::{stack, Captioner};
use swincap::train::{TrainOptions, Trainer};
use swincap::{Error, Result};

/// Window MLP and attention captioning models on synthetic scenes.
#[derive(Parser)]
#[command(name = "swincap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes corpus with a JSON-lines manifest.
    GenCorpus(GenCorpusArgs),
    /// Train a captioner and write a CSV log plus checkpoints.
    Train(TrainArgs),
    /// Caption one image or clip.
    Caption(CaptionArgs),
    /// Score captions with BLEU-4 and CIDEr.
    Eval(EvalArgs),
    /// Parameter and MAC report for a configuration.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Seed for scene sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write clips of this many frames instead of still images.
    #[arg(long)]
    frames: Option<usize>,
    /// Patch size the corpus will be used with; the side must divide by 8 times this.
    #[arg(long, default_value_t = 4)]
    patch: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of key=value lines; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest file, or a directory holding manifest.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config step cap.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Measure training-set BLEU-4 every this many steps.
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    /// Stop once training-set BLEU-4 reaches this value.
    #[arg(long)]
    target_bleu: Option<f64>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file in IMG1 format; clips have frames stacked vertically.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to caption the dataset with.
    #[arg(long, required_unless_present = "pairs")]
    checkpoint: Option<PathBuf>,
    /// Manifest file or its directory.
    #[arg(long, required_unless_present = "pairs")]
    data: Option<PathBuf>,
    /// Score a JSON-lines file of {"candidate", "references"} records instead.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pairs: Option<PathBuf>,
    /// Print CSV instead of a Markdown table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct FlopsArgs {
    /// Config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report swin and swinmlp side by side at the same config.
    #[arg(long)]
    compare: bool,
    /// Leave the decoder out.
    #[arg(long)]
    encoder_only: bool,
    /// Vocabulary size used for the decoder output layer.
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    /// Decoder positions in the measured pass.
    #[arg(long, default_value_t = 16)]
    caption_len: usize,
    /// Skip the instrumented forward pass.
    #[arg(long)]
    no_measure: bool,
    /// Print CSV instead of Markdown.
    #[arg(long)]
    csv: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::UndefinedLoss => 3,
        _ => 1,
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let unit = a.patch * 8;
    if a.patch == 0 || !a.size.is_multiple_of(unit) {
        return Err(Error::Config(format!(
            "size {} must be divisible by patch × 2³ = {unit}",
            a.size
        )));
    }
    let summary = gen_corpus(
        &CorpusOptions {
            seed: a.seed,
            count: a.count,
            image_size: a.size,
            frames: a.frames,
        },
        &a.out,
    )?;
    println!("manifest {}", summary.manifest.display());
    println!("vocab_size {}", summary.vocab_size);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ckpt = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&ckpt, &a.config) {
        (Some(c), None) => c.config.clone(),
        _ => read_config(a.config.as_deref())?,
    };
    if let Some(d) = &a.data {
        cfg.data = d.display().to_string();
    }
    if let Some(o) = &a.out {
        cfg.out = o.display().to_string();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.max_steps {
        cfg.max_steps = m;
    }
    if cfg.data.is_empty() {
        return Err(Error::Config("no data: pass --data or set data= in the config".into()));
    }
    cfg.validate()?;
    print!("{}", cfg.to_text());
    let data = load_dataset(&manifest_path(Path::new(&cfg.data)))?;
    let mut trainer = match ckpt {
        Some(mut c) => {
            c.config = cfg.clone();
            Trainer::resume(c, &data)?
        }
        None => Trainer::new(&cfg, &data)?,
    };
    let out_dir = (!cfg.out.is_empty()).then(|| PathBuf::from(&cfg.out));
    let outcome = trainer.run(&TrainOptions {
        checkpoints: out_dir.is_some(),
        out_dir,
        eval_every: a.eval_every,
        target_bleu: a.target_bleu,
    })?;
    if let Some(last) = outcome.log.last() {
        println!("final step={} loss={}", last.step, last.loss);
    }
    if let Some(b) = outcome.bleu {
        println!("training_bleu4={b:.4}");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Captioner, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Captioner::for_params(&ckpt.config, ckpt.vocab.clone(), &ckpt.params)?;
    Ok((model, ckpt))
}

fn clip_frames(cfg: &RunConfig) -> Option<usize> {
    cfg.model.is_video().then_some(cfg.frames)
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let (model, ckpt) = load_model(&a.checkpoint)?;
    let image = image_tensor::<f32>(&a.image, clip_frames(&ckpt.config))?;
    let expect = ckpt.config.encoder().input_shape();
    if image.shape() != expect.as_slice() {
        return Err(Error::Data(format!(
            "image of shape {:?} does not match the model input {expect:?}",
            image.shape()
        )));
    }
    let text = model.caption(&ckpt.params, &stack(&[&image])?)?;
    println!("{}", text[0]);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let records = match (&a.pairs, &a.checkpoint, &a.data) {
        (Some(p), _, _) => parse_pairs(&fs::read_to_string(p)?)?,
        (None, Some(c), Some(d)) => {
            let data = load_dataset(&manifest_path(d))?;
            if data.is_empty() {
                return Err(Error::Data("nothing to evaluate: the dataset is empty".into()));
            }
            let (model, ckpt) = load_model(c)?;
            let mut records = Vec::with_capacity(data.len());
            for chunk in data.samples.chunks(16) {
                let batch = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
                for (cand, s) in model.caption(&ckpt.params, &batch)?.iter().zip(chunk) {
                    records.push(EvalRecord::from_text(cand, std::slice::from_ref(&s.caption))?);
                }
            }
            records
        }
        _ => unreachable!("clap enforces the flag combination"),
    };
    if records.is_empty() {
        return Err(Error::Data("nothing to evaluate: the dataset is empty".into()));
    }
    let (b, c) = (bleu4(&records), cider(&records));
    if a.csv {
        println!("metric,value\nbleu4,{b}\ncider,{c}\nsamples,{}", records.len());
    } else {
        println!(
            "| metric | value |\n|---|---:|\n| BLEU-4 | {b:.4} |\n| CIDEr | {c:.4} |\n| samples | {} |",
            records.len()
        );
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let opts = ReportOptions {
        vocab: a.vocab,
        caption_len: a.caption_len,
        include_decoder: !a.encoder_only,
        measure: !a.no_measure,
    };
    if a.compare {
        let mut reports = Vec::new();
        for model in [ModelKind::Swin, ModelKind::SwinMlp] {
            let c = RunConfig {
                model,
                mixer: model.default_mixer(),
                ..cfg.clone()
            };
            reports.push(model_report(&c, &opts)?);
        }
        if a.csv {
            print!("{}", comparison_csv(&reports));
        } else {
            print!("{}", comparison_markdown(&reports));
        }
    } else {
        let r = model_report(&cfg, &opts)?;
        if a.csv {
            print!("{}", r.to_csv());
        } else {
            print!("{}", r.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
