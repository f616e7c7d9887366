use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hat"))
        .args(args)
        .output()
        .expect("spawn hat")
}

fn ok(args: &[&str]) -> String {
    let out = hat(args);
    assert!(
        out.status.success(),
        "hat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MODEL: &str = r#"
mode = "hat"
num_layers = 1
hidden_size = 16
ffn_size = 32
num_heads = 2
vocab_size = 64
max_positions = 96
"#;

const TRAIN: &str = r#"
beta1 = 0.9
beta2 = 0.98
epsilon = 1e-8
weight_decay = 0.0
peak_lr = 0.003
warmup_steps = 2
total_steps = 6
grad_accum_steps = 1
label_smoothing = 0.1
dropout = 0.1
batch_size = 2
seed = 5
valid_every = 3
selection = "loss"
"#;

fn corpus(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("raw.jsonl");
    let lines = [
        r#"{"source": "the cat sat. the dog ran far.", "target": "cat sat"}"#,
        r#"{"source": "a bird flew. it sang loudly. then it slept.", "target": "bird sang"}"#,
        r#"{"source": "rain fell all day. the river rose.", "target": "river rose"}"#,
    ];
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw = corpus(d);
    let model = d.join("model.toml");
    let train = d.join("train.toml");
    fs::write(&model, MODEL).unwrap();
    fs::write(&train, TRAIN).unwrap();

    let prep = d.join("prep");
    ok(&[
        "preprocess",
        p(&raw),
        "--mode",
        "document",
        "--set",
        "vocab_size=64",
        "--out",
        p(&prep),
    ]);
    let data = prep.join("data.jsonl");
    let vocab = prep.join("vocab.txt");
    assert!(prep.join("manifest.json").exists());

    let run = |name: &str| {
        let out = d.join(name);
        ok(&[
            "train",
            "--model",
            p(&model),
            "--config",
            p(&train),
            "--train",
            p(&data),
            "--valid",
            p(&data),
            "--set",
            "seed=5",
            "--out",
            p(&out),
        ]);
        out
    };
    let a = run("run_a");
    let b = run("run_b");
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let other: serde_json::Value =
        serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["content_hash"], other["content_hash"]);

    let gen = d.join("gen.toml");
    fs::write(
        &gen,
        "beam_width = 2\nlength_penalty = 1.0\nmin_len = 0\nmax_len = 5\n",
    )
    .unwrap();
    let hyp = d.join("hyp.txt");
    ok(&[
        "generate",
        "--checkpoint",
        p(&a.join("best.ckpt")),
        "--data",
        p(&data),
        "--vocab",
        p(&vocab),
        "--config",
        p(&gen),
        "--trace-attention",
        "--out",
        p(&hyp),
    ]);
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 3);
    let trace = d.join("hyp.txt.traces").join("0.json");
    assert!(trace.exists());

    let refs = d.join("ref.txt");
    fs::write(&refs, "cat sat\nbird sang\nriver rose\n").unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "evaluate",
        p(&hyp),
        p(&refs),
        "--metric",
        "rouge",
        "--metric",
        "bleu",
    ]))
    .unwrap();
    assert_eq!(report["examples"], 3);
    assert!(report["rouge1"].is_object());

    let prefix = d.join("maps").join("ex0");
    let listed = ok(&[
        "heatmap",
        p(&trace),
        "--top-k",
        "4",
        "--format",
        "pgm",
        "--out",
        p(&prefix),
    ]);
    assert_eq!(listed.lines().count(), 1);
    assert!(d.join("maps").join("ex0.layer0.pgm").exists());
}

#[test]
fn paramcount_reports_delta() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.toml");
    fs::write(&model, MODEL).unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(&["paramcount", p(&model)])).unwrap();
    let total = v["total"].as_u64().unwrap();
    let plain = v["plain_total"].as_u64().unwrap();
    assert_eq!(total - plain, v["delta"].as_u64().unwrap());
}

#[test]
fn failures_exit_nonzero_with_context() {
    let out = hat(&["paramcount", "/nonexistent/model.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.toml"));

    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("bad.jsonl");
    fs::write(&raw, "{\"source\": \"x\", \"target\": \"y\"}\nnot json\n").unwrap();
    let out = hat(&[
        "preprocess",
        p(&raw),
        "--mode",
        "document",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains(":2"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
