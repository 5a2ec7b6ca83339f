use std::fs;
use std::process::{Command, Output};

fn trajnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = r#"{
  "states": 3,
  "init": [1.0, 0.0, 0.0],
  "transitions": [[0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1]],
  "seed": 1
}"#;

#[test]
fn help_lists_defaults() {
    let text = stdout(&trajnet(&["train", "--help"]));
    for want in ["[default: 42]", "[default: 0.1]", "[default: 3]", "[default: 100]", "--tied"] {
        assert!(text.contains(want), "missing {want}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let o = trajnet(&["ingest", "--input", "x.csv", "--out-vocab", "v", "--out-seqs", "s"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--homepage"));
    assert_eq!(trajnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ckpt");
    let o = trajnet(&["inspect", "--checkpoint", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_chain_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC.replace("0.8, 0.1, 0.1", "0.8, 0.1, 0.2")).unwrap();
    let o = trajnet(&["synth", "--spec", spec.to_str().unwrap(), "--n", "5", "--len", "4", "--out", "-"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row"), "{}", stderr(&o));
}

#[test]
fn synth_train_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    fs::write(p("spec.json"), SPEC).unwrap();
    let o = trajnet(&["synth", "--spec", &p("spec.json"), "--n", "60", "--len", "10", "--out", &p("seqs"), "--out-vocab", &p("vocab")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = trajnet(&[
        "train", "--arch", "transformer", "--seqs", &p("seqs"), "--vocab", &p("vocab"), "--d-model", "8", "--heads", "2",
        "--max-epochs", "3", "--quiet", "--out-checkpoint", &p("ckpt"), "--out-log", &p("log"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(p("log")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let o = trajnet(&["eval", "--checkpoint", &p("ckpt"), "--seqs", &p("seqs"), "--log", &p("log"), "--dataset", "toy", "--out-report", &p("report")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(p("report")).unwrap();
    assert!(report.starts_with("dataset,model,"));
    assert!(report.contains("toy,transformer+penalty,"));

    let text = stdout(&trajnet(&["inspect", "--checkpoint", &p("ckpt")]));
    assert!(text.contains("transformer"));
    assert!(text.contains("embedding"));
}

#[test]
fn eval_rejects_vocabulary_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    fs::write(p("spec.json"), SPEC).unwrap();
    trajnet(&["synth", "--spec", &p("spec.json"), "--n", "30", "--len", "6", "--out", &p("seqs")]);
    let o = trajnet(&["train", "--seqs", &p("seqs"), "--d-model", "4", "--max-epochs", "1", "--quiet", "--out-checkpoint", &p("ckpt")]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(p("wide"), "{\"format\":\"trajnet-sequences\",\"version\":1,\"max_seq_len\":3}\n{\"user\":\"u\",\"tokens\":[1,9,0]}\n").unwrap();
    let o = trajnet(&["eval", "--checkpoint", &p("ckpt"), "--seqs", &p("wide"), "--split", "all", "--out-report", &p("r")]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains('3') && msg.contains('9'), "{msg}");
}
