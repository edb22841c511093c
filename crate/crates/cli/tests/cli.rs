use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use potq::data::CharVocab;
use potq::model::{load_checkpoint, save_checkpoint, GPTConfig, GPTWeights};

fn potq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_potq"))
        .args(args)
        .output()
        .expect("spawn potq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Prepared splits of a small text plus a matching random checkpoint.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let line = "ROMEO: But soft, what light through yonder window breaks?\nJULIET: Ay me!\n";
        fs::write(dir.path().join("input.txt"), line.repeat(60)).unwrap();
        let ws = Self { dir };
        let o = potq(&[
            "prepare-data",
            "--input",
            ws.s("input.txt").as_str(),
            "--ratios",
            "0.8,0.1,0.1",
            "--out",
            ws.s("data").as_str(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let vocab = CharVocab::load(ws.p("data/vocab.txt")).unwrap();
        let cfg = GPTConfig {
            vocab_size: vocab.len(),
            block_size: 32,
            n_layer: 2,
            n_head: 2,
            n_embd: 16,
        };
        save_checkpoint(
            &GPTWeights::random(cfg, 1, 0.1, true, false).unwrap(),
            ws.p("model.pqck"),
        )
        .unwrap();
        ws
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_string_lossy().into_owned()
    }
}

fn eval_args<'a>(ws: &'a Workspace, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = ["eval", "--checkpoint"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.push(ws.s("model.pqck"));
    v.push("--split".into());
    v.push(ws.s("data/test.bin"));
    v.extend(["--calib-split".to_string(), ws.s("data/train.bin")]);
    v.extend(
        ["--n-batches", "5", "--batch", "2", "--block", "16"]
            .iter()
            .map(|s| s.to_string()),
    );
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(args: &[String]) -> Output {
    potq(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn prepare_data_writes_three_splits() {
    let ws = Workspace::new();
    for f in ["train.bin", "val.bin", "test.bin", "vocab.txt"] {
        assert!(ws.p("data").join(f).exists(), "missing {f}");
    }
}

#[test]
fn eval_reports_ce_and_is_deterministic() {
    let ws = Workspace::new();
    let rec = |name: &str| ws.s(name);
    let a = run(&eval_args(
        &ws,
        &[
            "--quant",
            "pot:e0..4",
            "--seed",
            "7",
            "--records",
            &rec("a.jsonl"),
        ],
    ));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(stdout(&a).contains("perplexity"));
    let b = run(&eval_args(
        &ws,
        &[
            "--quant",
            "pot:e0..4",
            "--seed",
            "7",
            "--records",
            &rec("b.jsonl"),
            "--threads",
            "1",
        ],
    ));
    assert!(b.status.success());
    let (ra, rb) = (
        fs::read(ws.p("a.jsonl")).unwrap(),
        fs::read(ws.p("b.jsonl")).unwrap(),
    );
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
}

#[test]
fn sweep_prints_one_row_per_spec() {
    let ws = Workspace::new();
    let o = potq(&[
        "sweep",
        "--checkpoint",
        &ws.s("model.pqck"),
        "--split",
        &ws.s("data/test.bin"),
        "--quant",
        "float",
        "--quant",
        "sym:8",
        "--quant",
        "pot:e0..6",
        "--n-batches",
        "3",
        "--batch",
        "2",
        "--block",
        "16",
        "--records",
        &ws.s("sweep.jsonl"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 4);
    assert_eq!(
        fs::read_to_string(ws.p("sweep.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn quantize_writes_pot_checkpoint() {
    let ws = Workspace::new();
    let o = potq(&[
        "quantize",
        "--checkpoint",
        &ws.s("model.pqck"),
        "--quant",
        "pot:e0..4",
        "--calib-split",
        &ws.s("data/train.bin"),
        "--out",
        &ws.s("pot.pqck"),
        "--summary",
        &ws.s("sites.jsonl"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w = load_checkpoint(ws.p("pot.pqck")).unwrap();
    // every quantized weight is zero or a signed power of two times its scale
    let levels: std::collections::BTreeSet<u32> = w.layers[0]
        .attn_qkv
        .weight
        .data()
        .iter()
        .map(|v| v.abs().to_bits())
        .collect();
    assert!(levels.len() <= 6, "{} distinct magnitudes", levels.len());
    assert!(fs::read_to_string(ws.p("sites.jsonl"))
        .unwrap()
        .contains("layer0.attn_qkv"));
}

#[test]
fn generate_text_and_report() {
    let ws = Workspace::new();
    let args = [
        "generate",
        "--checkpoint",
        &ws.s("model.pqck"),
        "--quant",
        "pot:e0..4",
        "--calib-split",
        &ws.s("data/train.bin"),
        "--vocab",
        &ws.s("data/vocab.txt"),
        "--prompt",
        "ROMEO:",
        "--steps",
        "40",
        "--seed",
        "1",
        "--out",
        &ws.s("sample.txt"),
    ];
    assert!(potq(&args).status.success());
    let sample = fs::read_to_string(ws.p("sample.txt")).unwrap();
    assert!(sample.starts_with("ROMEO:"));
    assert_eq!(sample.chars().count(), 46);
    assert!(potq(&args).status.success());
    assert_eq!(fs::read_to_string(ws.p("sample.txt")).unwrap(), sample);

    let o = potq(&[
        "report",
        "--checkpoint",
        &ws.s("model.pqck"),
        "--quant",
        "pot:e0..6;@mode=integer",
        "--split",
        &ws.s("data/test.bin"),
        "--block",
        "16",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("memory factor 8.000"), "{out}");
    assert!(out.contains("census"));
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    assert_eq!(code(&potq(&["eval", "--bogus"])), Some(2));
    assert_eq!(
        code(&potq(&[
            "prepare-data",
            "--input",
            &ws.s("input.txt"),
            "--ratios",
            "1,0,0",
            "--out",
            &ws.s("x")
        ])),
        Some(2)
    );
    assert_eq!(
        code(&run(&eval_args(&ws, &["--quant", "pot:e9..1"]))),
        Some(2)
    );

    let missing = Path::new("/nonexistent/model.pqck")
        .to_string_lossy()
        .into_owned();
    let o = potq(&[
        "eval",
        "--checkpoint",
        &missing,
        "--split",
        &ws.s("data/test.bin"),
    ]);
    assert_eq!(code(&o), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));

    assert_eq!(
        code(&run(&eval_args(
            &ws,
            &["--quant", "pot:e-40..40", "--mode", "integer"]
        ))),
        Some(4)
    );
}
