use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ade::corpus::write_jsonl;
use ade::synthetic::memorization_corpus;
use tempfile::TempDir;

fn ade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ade")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TOY: &str = "\
variant = ADE
layers = 1
model_dim = 32
heads = 2
word_dim = 16
ffn_dim = 64
max_len = 8
dropout = 0
lr = 0.001
batch_size = 24
validation_fraction = 0
candidates = 24
";

/// A model trained to memorise a 24-pair corpus, shared by the tests.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("train.jsonl");
        write_jsonl(&data, &memorization_corpus(24, 3)).unwrap();
        let config = dir.path().join("toy.cfg");
        std::fs::write(&config, format!("{TOY}steps = 300\ndata = train.jsonl\ncheckpoint = out/model.ckpt\n")).unwrap();
        let o = ade(&["train", "--config", config.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let checkpoint = dir.path().join("out/model.ckpt");
        Fixture { _dir: dir, data, checkpoint }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn recall(json: &str, k: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    v["recall_at"][k].as_f64().unwrap()
}

#[test]
fn train_writes_checkpoint_metadata_and_report() {
    let f = fixture();
    assert!(f.checkpoint.exists());
    assert!(f.checkpoint.with_file_name("model.ckpt.meta.json").exists());
    let report = std::fs::read_to_string(f.checkpoint.with_file_name("model.ckpt.report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["history"].as_array().unwrap().len(), 300);
    assert_eq!(v["variant"], "ADE");
}

#[test]
fn memorised_checkpoint_scores_perfectly_on_its_training_data() {
    let f = fixture();
    let o = ade(&["eval", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--protocol", "fixed", "--k", "1,5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(recall(&stdout(&o), "1"), 1.0);
    assert!(f.checkpoint.with_file_name("model.ckpt.metrics.json").exists());
}

#[test]
fn uniform_prior_changes_nothing() {
    let f = fixture();
    let run = |prior: bool| {
        let mut args = vec!["eval", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--protocol", "fixed", "--k", "1,2,5"];
        if prior {
            args.push("--prior");
        }
        let o = ade(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn recall_at_20_of_20_candidates_is_one() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.json");
    let o = ade(&["eval", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--k", "20", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = std::fs::read_to_string(&out).unwrap();
    assert_eq!(recall(&written, "20"), 1.0);
    let v: serde_json::Value = serde_json::from_str(&written).unwrap();
    assert_eq!(v["protocol"], "distractor19");
    assert_eq!(v["instances"], 24);
}

#[test]
fn prior_with_distractors_is_a_usage_error() {
    let f = fixture();
    let o = ade(&["eval", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--prior"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn vocabulary_mismatch_reports_both_sizes() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    std::fs::copy(&f.checkpoint, &ckpt).unwrap();
    let meta = std::fs::read_to_string(f.checkpoint.with_file_name("model.ckpt.meta.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&meta).unwrap();
    let full = v["vocab"].as_array().unwrap().len();
    v["vocab"].as_array_mut().unwrap().truncate(full - 3);
    std::fs::write(dir.path().join("model.ckpt.meta.json"), v.to_string()).unwrap();
    let o = ade(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&full.to_string()) && err.contains(&(full - 3).to_string()), "{err}");
}

#[test]
fn html_heatmap_has_a_span_per_token() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("heat.html");
    let o = ade(&[
        "visualize", "--checkpoint", s(&f.checkpoint), "--context", "w1 w2 w3", "--response", "w4 w5",
        "--format", "html", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let html = std::fs::read_to_string(&out).unwrap();
    assert_eq!(html.matches("<span").count(), 5);
    assert_eq!(html.matches("</span>").count(), 5);
    assert!(html.contains("rgba(200, 30, 30, 1.000000)"));
}

#[test]
fn single_token_context_renders_at_full_weight() {
    let f = fixture();
    let o = ade(&["visualize", "--checkpoint", s(&f.checkpoint), "--context", "w7", "--response", "w4 w5", "--format", "ansi"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let ctx = text.lines().find(|l| l.starts_with("context")).unwrap();
    assert!(ctx.contains("\x1b[48;5;124mw7\x1b[0m"), "{ctx:?}");
}

#[test]
fn empty_text_is_rejected() {
    let f = fixture();
    let o = ade(&["visualize", "--checkpoint", s(&f.checkpoint), "--context", "  ", "--response", "w4"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, format!("{TOY}steps = 1\ndata = nowhere.jsonl\ncheckpoint = m.ckpt\n")).unwrap();
    let o = ade(&["train", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.jsonl"), "{}", stderr(&o));
}

#[test]
fn unknown_variant_lists_the_valid_ones() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, "variant = BERT\n").unwrap();
    let o = ade(&["train", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for v in ["DE", "ADE", "ADE+WE", "ADE+REG", "ADE+WE+REG"] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn unknown_key_is_named() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, "steps = 3\nlearning_rate = 0.1\n").unwrap();
    let o = ade(&["train", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn bad_invocation_is_a_usage_error() {
    assert_eq!(ade(&["eval"]).status.code(), Some(1));
    assert_eq!(ade(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ade(&["--help"]).status.code(), Some(0));
}
