use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn litdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_litdec"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
[experiment]
name = tiny
seeds = 0,1

[decoder]
depth = 1
model_dim = 16
mlp_dim = 16
encoder_dim = 16

[train]
steps = 4
batch_size = 4

[task.cls]
kind = classify_dominant_glyph
train_size = 16
eval_size = 6
seed = 1

[task.ocr]
kind = ocr_read_sequence
train_size = 16
eval_size = 6
seed = 2

[cell.both]
tasks = cls,ocr
";

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.ini");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn preset_list_and_show() {
    let list = litdec(&["preset", "list"]);
    assert!(list.status.success());
    assert!(stdout(&list).contains("table1_conditioning"));
    let show = litdec(&["preset", "show", "fig8_decoding"]);
    assert!(show.status.success());
    assert!(stdout(&show).contains("[cell.beam4]"));
    let missing = litdec(&["preset", "show", "nope"]);
    assert!(!missing.status.success());
}

#[test]
fn train_then_eval_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let model = dir.path().join("model");
    let m = model.to_str().unwrap();
    let train = litdec(&["train", "--config", &cfg, "--cell", "both", "--model", m]);
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    assert!(model.join("decoder.litd").exists());

    let eval = litdec(&["eval", "--model", m]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let text = stdout(&eval);
    assert!(text.contains("cls\texact_match"));
    assert!(text.contains("ocr\texact_match"));

    let decode = litdec(&[
        "decode",
        "--model",
        m,
        "--task",
        "ocr",
        "--strategy",
        "beam",
        "-k",
        "2",
        "-n",
        "2",
    ]);
    assert!(
        decode.status.success(),
        "{}",
        String::from_utf8_lossy(&decode.stderr)
    );
    assert_eq!(stdout(&decode).matches("target:").count(), 2);
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let sweep = litdec(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        o,
        "--set",
        "train.steps=3",
    ]);
    assert!(
        sweep.status.success(),
        "{}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    assert!(out.join("both/seed0.jsonl").exists());
    assert!(out.join("both/seed1.jsonl").exists());
    let again = litdec(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        o,
        "--set",
        "train.steps=3",
    ]);
    assert!(stdout(&again).contains("0 cells run, 1 skipped"));

    let report = litdec(&["report", o]);
    assert!(report.status.success());
    assert!(stdout(&report).starts_with("cell,task,metric,seeds,mean,std"));
    assert!(out.join("report/report.csv").exists());
}

#[test]
fn bad_overrides_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    for set in ["train.steps", "train.nope=1", "experiment.seeds="] {
        let o = litdec(&["sweep", "--config", &cfg, "--set", set]);
        assert!(!o.status.success(), "{set}");
    }
}

#[test]
fn oracle_check_passes() {
    let o = litdec(&["oracle-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
}
