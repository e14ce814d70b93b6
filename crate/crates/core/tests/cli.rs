mod common;

use std::path::Path;
use std::process::{Command, Output};

fn pustage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pustage")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let o = pustage(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["split", "stage", "eval", "report", "lora-demo", "serve-review", "timing"] {
        assert!(stdout(&o).contains(cmd), "help lacks {cmd}");
    }
    assert_eq!(pustage(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pustage(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(pustage(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pustage(&["eval", "--config", "x.toml", "--mode", "nonsense"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let o = pustage(&["eval", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn split_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    common::project(dir.path(), 40, "zero_shot", 5);
    let manifest = dir.path().join("manifest.csv");
    let a = pustage(&["split", "--manifest", s(&manifest), "--k", "5", "--seed", "9"]);
    let b = pustage(&["split", "--manifest", s(&manifest), "--k", "5", "--seed", "9"]);
    let c = pustage(&["split", "--manifest", s(&manifest), "--k", "5", "--seed", "10"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let folds: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(folds.as_array().unwrap().len(), 5);

    let out = dir.path().join("folds.json");
    let o = pustage(&["split", "--manifest", s(&manifest), "--seed", "9", "--out", s(&out), "--table"]);
    assert_eq!(std::fs::read(&out).unwrap(), a.stdout);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Stage II"));
}

#[test]
fn split_rejects_too_small_class() {
    let dir = tempfile::tempdir().unwrap();
    common::project(dir.path(), 8, "zero_shot", 5);
    let o = pustage(&["split", "--manifest", s(&dir.path().join("manifest.csv")), "--k", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_prints_prediction_and_writes_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::project(dir.path(), 4, "ft_arm", 2);
    let image = dir.path().join("images/p002.png");
    let o = pustage(&["stage", "--image", s(&image), "--config", s(&config), "--note", "ref p002."]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("Stage: III\nRationale: scripted.\nTranscript: "), "{text}");
    let transcript = dir.path().join("run/stage/p002.transcript.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(transcript).unwrap()).unwrap();
    assert_eq!(v["kind"], "reflection");
    assert_eq!(v["transcript"]["terminated_by"], "critic_ok");
}

#[test]
fn eval_then_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::project(dir.path(), 20, "zero_shot", 5);
    let o = pustage(&["eval", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["config.snapshot", "folds.json", "cases.jsonl", "transcripts.jsonl", "report.json", "report.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let report = pustage(&["report", "--run-dir", s(&run)]);
    assert_eq!(report.stdout, std::fs::read(run.join("report.txt")).unwrap());
    let json = pustage(&["report", "--run-dir", s(&run), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["aggregate"]["accuracy"]["mean"], 1.0);
    assert_eq!(v["run_metadata"]["mode"], "zero_shot");
}

#[test]
fn eval_overrides_and_other_modes() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::project(dir.path(), 16, "zero_shot", 4);
    for mode in ["few_shot", "cot", "arm_only", "ft_only"] {
        let out = dir.path().join(format!("run-{mode}"));
        let o = pustage(&[
            "eval", "--config", s(&config), "--mode", mode, "--output-dir", s(&out), "--k", "2", "--parallelism", "3",
            "--parallel-folds",
        ]);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(v["per_fold"].as_array().unwrap().len(), 2, "{mode}");
        assert_eq!(v["aggregate"]["accuracy"]["mean"], 1.0, "{mode}");
        let cases = std::fs::read_to_string(out.join("cases.jsonl")).unwrap();
        assert_eq!(cases.lines().count(), 16, "{mode}");
    }
}

#[test]
fn timing_from_run_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::project(dir.path(), 8, "arm_only", 2);
    assert_eq!(pustage(&["eval", "--config", s(&config)]).status.code(), Some(0));
    let o = pustage(&["timing", "--transcripts", s(&dir.path().join("run/transcripts.jsonl")), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["count"], 8);
}

#[test]
fn lora_demo_writes_curve_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curve.csv");
    let ckpt = dir.path().join("layer.bin");
    let o = pustage(&["lora-demo", "--steps", "50", "--out", s(&csv), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let losses: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 50);
    assert!(losses.last().unwrap() < &losses[0]);
    let layer = pustage_core::lora::LoraLayer::load(&ckpt).unwrap();
    assert_eq!(layer.rank(), 4);
}
