use std::path::Path;
use std::process::{Command, Output};

fn mmreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmreid")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mmreid(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|(n, b)| (format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", s(dir), "--ids", "4", "--per-id", "4", "--test-ids", "2", "--seed", "3"]);
}

#[test]
fn synth_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    synth(&d);
    let first = tree(&d);
    assert!(!mmreid(&["synth", "--out", s(&d), "--ids", "4", "--per-id", "2"]).status.success());
    ok(&["synth", "--out", s(&d), "--ids", "4", "--per-id", "4", "--test-ids", "2", "--seed", "3", "--force"]);
    assert!(tree(&d) == first);
    let again = tmp.path().join("again");
    ok(&["synth", "--config", s(&d.join("synth_config.toml")), "--out", s(&again)]);
    assert!(tree(&again) == first);
}

#[test]
fn caption_record_and_replay_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, fx) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("fx"));
    synth(&a);
    synth(&b);
    ok(&["caption", "--root", s(&a), "--simulate", "--record", s(&fx), "--no-resume", "--priority", "alpha,beta"]);
    ok(&["caption", "--root", s(&b), "--replay", s(&fx), "--no-resume", "--priority", "alpha,beta"]);
    assert!(tree(&a.join("captions")) == tree(&b.join("captions")));
    let summary = json(&b.join("caption_summary.json"));
    assert!(summary["failed"].as_array().unwrap().is_empty());
}

#[test]
fn train_eval_and_diag_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    synth(&d);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&d), "--out", s(&run), "--steps", "3", "--p", "2", "--k", "2", "--eval-every", "0"]);
    for f in ["config.toml", "train_log.jsonl", "eval_log.jsonl", "best.safetensors", "last.safetensors", "final_metrics.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let rerun = tmp.path().join("rerun");
    ok(&["train", "--config", s(&run.join("config.toml")), "--data", s(&d), "--out", s(&rerun)]);
    assert_eq!(json(&run.join("final_metrics.json")), json(&rerun.join("final_metrics.json")));
    assert!(std::fs::read(run.join("last.safetensors")).unwrap() == std::fs::read(rerun.join("last.safetensors")).unwrap());

    let ck = run.join("last.safetensors");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&e1), "--protocol", "none"]);
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&e2), "--protocol", "standard_camera"]);
    let (m1, m2) = (json(&e1.join("metrics.json")), json(&e2.join("metrics.json")));
    assert_eq!(m1["protocol"], "none");
    assert_eq!(m2["protocol"], "standard_camera");
    assert!(m1["mAP"].as_f64().unwrap() > 0.0);

    let diag = tmp.path().join("diag");
    ok(&["diag", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&diag), "--count", "1"]);
    assert!(diag.join("routes.csv").is_file() && diag.join("omega.csv").is_file());
    assert!(diag.join("masks").is_dir());
}

#[test]
fn baseline_model_trains_without_modules() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    synth(&d);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", s(&d), "--out", s(&run), "--steps", "2", "--p", "2", "--k", "2", "--eval-every", "0", "--no-tmse",
        "--no-csse", "--no-mmfa",
    ]);
    let cfg = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("mmfa = false"), "{cfg}");
    let bad = mmreid(&["train", "--data", s(&d), "--out", s(&tmp.path().join("bad")), "--steps", "1", "--no-mmfa"]);
    assert!(!bad.status.success());
}

#[test]
fn strict_protocol_requires_time_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    synth(&d);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&d), "--out", s(&run), "--steps", "1", "--p", "2", "--k", "2", "--eval-every", "0"]);
    let ck = run.join("last.safetensors");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&tmp.path().join("e")), "--protocol", "msvr310_strict"]);

    let meta = d.join("meta.csv");
    let text = std::fs::read_to_string(&meta).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                return l.to_string();
            }
            let mut f: Vec<&str> = l.split(',').collect();
            f[3] = "";
            f.join(",")
        })
        .collect();
    std::fs::write(&meta, stripped.join("\n") + "\n").unwrap();
    let out = mmreid(&["eval", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&tmp.path().join("f")), "--protocol", "msvr310_strict"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("time labels"));
}

#[test]
fn study_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    synth(&d);
    let out = tmp.path().join("study");
    ok(&["study", "--data", s(&d), "--out", s(&out), "--axis", "route_type", "--steps", "1", "--seeds", "0"]);
    let report = json(&out.join("study.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert!(out.join("study.md").is_file());
}
