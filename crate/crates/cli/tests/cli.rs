use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn swincap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swincap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn gen(dir: &Path, seed: u64, count: usize, size: usize) -> Output {
    swincap(&[
        "gen-corpus",
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ])
}

const TINY: &str = "\
image_size=32
embed_dim=8
depths=1,1,1,1
heads=2,2,4,4
window=2
out_dim=16
dec_blocks=1
dec_heads=2
dec_ffn=32
max_len=16
batch=4
epochs=2
warmup=10
";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_documents_every_command() {
    let o = swincap(&["--help"]);
    assert!(o.status.success());
    for cmd in ["gen-corpus", "train", "caption", "eval", "flops"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
        let sub = swincap(&[cmd, "--help"]);
        assert!(sub.status.success(), "{cmd}");
    }
    let train = stdout(&swincap(&["train", "--help"]));
    for flag in ["--config", "--data", "--out", "--resume", "--seed"] {
        assert!(train.contains(flag), "{flag}");
    }
}

#[test]
fn corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = gen(a.path(), 7, 5, 32);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(gen(b.path(), 7, 5, 32).status.success());
    assert!(stdout(&oa).contains("manifest.jsonl"));
    assert!(stdout(&oa).contains("vocab_size"));
    assert_eq!(
        sha(&a.path().join("manifest.jsonl")),
        sha(&b.path().join("manifest.jsonl"))
    );
    assert_eq!(
        sha(&a.path().join("images/00004.img")),
        sha(&b.path().join("images/00004.img"))
    );
}

#[test]
fn corpus_flag_errors() {
    let d = tempfile::tempdir().unwrap();
    let zero = gen(d.path(), 1, 0, 32);
    assert_eq!(zero.status.code(), Some(2));
    let odd = gen(d.path(), 1, 3, 36);
    assert_eq!(odd.status.code(), Some(2));
    assert!(stderr(&odd).contains("divisible by patch"), "{}", stderr(&odd));
    let missing = swincap(&["gen-corpus", "--count", "3"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn train_defaults_echo_published_settings() {
    // an absent manifest fails after the effective config is printed
    let d = tempfile::tempdir().unwrap();
    let o = swincap(&["train", "--data", d.path().join("none.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let out = stdout(&o);
    for kv in ["batch=9", "lr=0.0003", "warmup=20000", "epochs=100"] {
        assert!(out.lines().any(|l| l == kv), "{kv} in {out}");
    }
}

#[test]
fn bad_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "window=5\n");
    let o = swincap(&["flops", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let cfg = write_config(d.path(), "colour=red\n");
    assert_eq!(swincap(&["flops", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn train_caption_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(gen(&data, 3, 8, 32).status.success());
    let cfg = write_config(d.path(), TINY);
    let out = d.path().join("run");
    let o = swincap(&[
        "train",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,epoch,lr,loss"));
    assert_eq!(log.lines().count(), 1 + 4);
    let ckpt = out.join("last.swcap");
    assert!(out.join("best.swcap").exists());

    // resuming continues the step counter
    let o = swincap(&[
        "train",
        "--resume",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-steps",
        "6",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs=2"));
    let log = fs::read_to_string(out.join("train.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4"]);

    let image = data.join("images/00000.img");
    let args = [
        "caption",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ];
    let (a, b) = (swincap(&args), swincap(&args));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).lines().count(), 1);

    let o = swincap(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    for l in lines {
        let (_, v) = l.split_once(',').unwrap();
        v.parse::<f64>().unwrap();
    }
}

#[test]
fn train_longer_run_resumes_mid_way() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(gen(&data, 3, 8, 32).status.success());
    let cfg = write_config(d.path(), &format!("{TINY}epochs=4\n").replace("epochs=2\n", ""));
    let out = d.path().join("run");
    let first = swincap(&[
        "train",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-steps",
        "3",
    ]);
    assert!(first.status.success(), "{}", stderr(&first));
    let second = swincap(&[
        "train",
        "--resume",
        out.join("last.swcap").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-steps",
        "6",
    ]);
    assert!(second.status.success(), "{}", stderr(&second));
    let log = fs::read_to_string(out.join("train.csv")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, [1, 2, 3, 4, 5, 6]);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.swcap");
    fs::write(&bad, b"NOTACKPT and then some bytes").unwrap();
    let img = d.path().join("x.img");
    let o = swincap(&[
        "caption",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad checkpoint magic"), "{}", stderr(&o));
}

#[test]
fn eval_pairs_perfect_and_empty() {
    let d = tempfile::tempdir().unwrap();
    let pairs = d.path().join("pairs.jsonl");
    let rows = [
        "a red circle left of a blue square",
        "a green triangle above a yellow circle",
        "a blue square left of a red triangle above a green circle",
    ];
    let text: String = rows
        .iter()
        .map(|r| format!("{{\"candidate\": \"{r}\", \"references\": [\"{r}\"]}}\n"))
        .collect();
    fs::write(&pairs, text).unwrap();
    let o = swincap(&["eval", "--pairs", pairs.to_str().unwrap(), "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "bleu4,1"), "{}", stdout(&o));

    fs::write(&pairs, "").unwrap();
    assert_eq!(
        swincap(&["eval", "--pairs", pairs.to_str().unwrap()]).status.code(),
        Some(1)
    );
    let manifest = d.path().join("manifest.jsonl");
    fs::write(&manifest, "").unwrap();
    let ckpt = d.path().join("none.swcap");
    let o = swincap(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flops_compare_orders_models() {
    let o = swincap(&["flops", "--compare", "--encoder-only", "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[1][0].as_str()), ("swin", "swinmlp"));
    let num = |r: &[String], i: usize| r[i].parse::<u64>().unwrap();
    assert!(num(&rows[1], 1) < num(&rows[0], 1));
    assert!(num(&rows[1], 2) < num(&rows[0], 2));
    for r in &rows {
        assert_eq!(num(r, 4), num(r, 5), "analytic and measured");
    }
}

#[test]
fn flops_single_report_markdown() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), TINY);
    let o = swincap(&["flops", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("| encoder.stage0.mixer |"));
    assert!(text.contains("| decoder.out |"));
}

#[test]
fn overfit_model_recites_its_caption() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(gen(&data, 4, 1, 32).status.success());
    let text =
        format!("{TINY}lr=0.003\n").replace("batch=4\nepochs=2\nwarmup=10\n", "batch=1\nepochs=300\nwarmup=20\n");
    let cfg = write_config(d.path(), &text);
    let out = d.path().join("run");
    let o = swincap(&[
        "train",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--eval-every",
        "20",
        "--target-bleu",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let image = data.join(record["image"].as_str().unwrap());
    let o = swincap(&[
        "caption",
        "--checkpoint",
        out.join("last.swcap").to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ]);
    assert_eq!(stdout(&o).trim(), record["caption"].as_str().unwrap());
}
