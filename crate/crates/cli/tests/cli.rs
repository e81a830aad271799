use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "seed = 3\n\n[synth]\nn_agents = 10\nn_days = 5\ngrid_extent = 4\n\n[split]\nwindow = 8\n\n\
[model]\nn_layers = 1\nn_heads = 2\nff_dim = 8\ngmm_components = 2\nbatch_size = 4\nmax_seq_len = 128\n\n\
[model.encoder]\ns2v_scales = 2\nt2v_dim = 2\nregion_emb_dim = 4\n\n[train]\nmax_epochs = 2\n";

fn trajgpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajgpt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = trajgpt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(trajgpt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(trajgpt(&["synth", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(trajgpt(&["train"]).status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nn_heads = 7\n");
    let out = trajgpt(&["synth", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "config");

    let cfg = write_config(dir.path(), "[train]\nbogus = 1\n");
    let out = trajgpt(&["synth", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let data = dir.path().join("x.jsonl");
    std::fs::write(&data, "").unwrap();
    let out = trajgpt(&["eval", "--checkpoint", &format!("{d}/none.bin"), "--data", data.to_str().unwrap(), "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\""));
}

#[test]
fn infill_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, CONFIG);
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    ok(&["synth", "--config", &cfg, "--out-dir", &p("synth")]);
    ok(&["preprocess", "--config", &cfg, "--input", &p("synth/synth.jsonl"), "--format", "jsonl", "--task", "infill", "--out-dir", &p("pre")]);
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.json", "preprocess.json", "test_partial.jsonl", "manifest.json"] {
        assert!(root.join("pre").join(f).exists(), "{f}");
    }
    ok(&[
        "train", "--config", &cfg, "--train", &p("pre/train.jsonl"), "--valid", &p("pre/valid.jsonl"), "--vocab", &p("pre/vocab.json"),
        "--task", "infill", "--out-dir", &p("train"),
    ]);
    let log = std::fs::read_to_string(root.join("train/epoch_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(&["eval", "--config", &cfg, "--checkpoint", &p("train/checkpoint.bin"), "--data", &p("pre/test.jsonl"), "--task", "infill", "--out-dir", &p("eval")]);
    let metrics = std::fs::read_to_string(root.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value,count\nacc@1,"));

    ok(&[
        "generate", "--config", &cfg, "--checkpoint", &p("train/checkpoint.bin"), "--input", &p("pre/test_partial.jsonl"), "--decode",
        "sample", "--out-dir", &p("gen"),
    ]);
    let partials = std::fs::read_to_string(root.join("pre/test_partial.jsonl")).unwrap();
    let generated = std::fs::read_to_string(root.join("gen/generated.jsonl")).unwrap();
    assert_eq!(partials.lines().count(), generated.lines().count());
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("gen/diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag.as_array().unwrap().len(), partials.lines().count());

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("gen/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, CONFIG);
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    ok(&["synth", "--config", &cfg, "--out-dir", &p("synth")]);
    ok(&["preprocess", "--config", &cfg, "--input", &p("synth/synth.jsonl"), "--format", "jsonl", "--task", "next", "--out-dir", &p("pre")]);
    ok(&[
        "ablate", "--config", &cfg, "--train", &p("pre/train.jsonl"), "--test", &p("pre/test.jsonl"), "--vocab", &p("pre/vocab.json"),
        "--task", "next", "--epochs", "1", "--out-dir", &p("ablate"),
    ]);
    let csv = std::fs::read_to_string(root.join("ablate/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("variant,acc@1,"));
    for (line, name) in lines[1..].iter().zip(["full", "independence", "regression"]) {
        assert!(line.starts_with(&format!("{name},")), "{line}");
    }
    for name in ["full", "independence", "regression"] {
        assert!(root.join(format!("ablate/epoch_log_{name}.csv")).exists());
    }
}

#[test]
fn csv_traces_become_visits() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // two agents alternating between two places 2 km apart, 30 min dwell each
    let mut csv = String::from("agent,lat,lon,t\n");
    for agent in ["a", "b"] {
        let mut t = 1_300_000_000i64;
        for stop in 0..6 {
            let lat = 39.9 + if stop % 2 == 0 { 0.0 } else { 0.02 };
            for _ in 0..30 {
                csv.push_str(&format!("{agent},{lat:.6},116.3,{t}\n"));
                t += 60;
            }
        }
    }
    let input = root.join("traces.csv");
    std::fs::write(&input, csv).unwrap();
    let out = root.join("pre");
    let cfg = write_config(root, "[split]\nwindow = 2\n");
    ok(&["preprocess", "--config", &cfg, "--input", input.to_str().unwrap(), "--format", "csv", "--task", "next", "--seed", "1", "--out-dir", out.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("preprocess.json")).unwrap()).unwrap();
    assert_eq!(summary["agents"], 2);
    assert_eq!(summary["visits"], 12);
    assert_eq!(summary["regions"], 2);
}
