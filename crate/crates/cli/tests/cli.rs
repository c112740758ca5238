use std::path::Path;
use std::process::{Command, Output};

fn vaprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaprobe"))
        .args(args)
        .output()
        .expect("spawn vaprobe")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = vaprobe(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(vaprobe(&["score", "--bogus"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = vaprobe(&["score", "--traces", s(&missing), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "k_bins = 1\n").unwrap();
    let out = vaprobe(&["--config", s(&cfg), "pipeline", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn chain_from_generation_to_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let ok = |args: &[&str]| {
        let out = vaprobe(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    ok(&["--seed", "3", "synth", "gen", "--out", s(&p("data")), "--pairs", "80"]);
    ok(&[
        "score",
        "--traces",
        s(&p("data").join("trace")),
        "--out",
        s(&p("map")),
        "--heatmap",
        s(&p("heatmap.csv")),
        "--top-k",
        "10",
    ]);
    let heat = std::fs::read_to_string(p("heatmap.csv")).unwrap();
    assert!(heat.lines().count() > 1);

    let out = ok(&[
        "--seed",
        "3",
        "sweep",
        "--map",
        s(&p("map")),
        "--traces",
        s(&p("data").join("trace")),
        "--grid",
        "0.3:0.8:0.05",
        "--out",
        s(&p("sweep")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("best beta"));
    let csv = std::fs::read_to_string(p("sweep").join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("beta,n_neurons,precision,recall,accuracy"));
    assert_eq!(csv.lines().count(), 12);
    let detector = p("sweep").join("detector.bin");

    let records = p("data").join("records.jsonl");
    ok(&["refine", "qa", "--detector", s(&detector), "--records", s(&records), "--out", s(&p("qa.jsonl"))]);
    let out = ok(&["eval", "qa", "--results", s(&p("qa.jsonl")), "--format", "markdown"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("| Method | Acc_yes | Acc_no | Acc |"));

    let first = std::fs::read_to_string(&records).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let scene = rec["scene_id"].as_str().unwrap();
    let out = ok(&["refine", "gen", "--detector", s(&detector), "--scene", scene, "--data", s(&p("data"))]);
    let gen: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(gen.is_object());

    for mode in ["none", "zero", "double"] {
        ok(&[
            "synth",
            "answer",
            "--data",
            s(&p("data")),
            "--map",
            s(&p("map")),
            "--mode",
            mode,
            "--out",
            s(&p(&format!("{mode}.jsonl"))),
        ]);
    }
    let out = ok(&[
        "eval",
        "intervene",
        "--baseline",
        s(&p("none.jsonl")),
        "--zero",
        s(&p("zero.jsonl")),
        "--double",
        s(&p("double.jsonl")),
        "--format",
        "json",
    ]);
    let table: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(table.is_object());
}

#[test]
fn chair_eval_reads_caption_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("caption.json");
    std::fs::write(
        &input,
        r#"{"sentences":[["a","dog"],["a","cat"]],"mentions":[["dog",0],["cat",1]],"gt_objects":["dog"]}"#,
    )
    .unwrap();
    let out = vaprobe(&["eval", "chair", "--input", s(&input), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("0.500"), "{text}");
}
