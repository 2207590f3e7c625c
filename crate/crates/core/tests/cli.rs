use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn leakbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakbench"))
        .args(args)
        .env("LEAKBENCH_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SYNTH: &str = r#"{
  "n_groups": 40, "items_per_group": 10, "feature_dim": 8,
  "within_group_noise": 0.3, "label_noise": 0.15,
  "structure": {"kind": "video-frames"}, "seed": 3
}"#;

#[test]
fn gen_split_audit_flags_leaky_plan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = write(&d.join("synth.json"), SYNTH);
    let data = d.join("data");
    ok(&leakbench(&["gen", "--config", &synth, "--out", data.to_str().unwrap()]));
    for f in ["manifest.csv", "features.lbfs", "run_manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let leaky = write(
        &d.join("leaky.json"),
        r#"{"kind": "leaky-frame-pool", "test_fraction": 0.2, "frame_fraction": 0.5, "train_val": [3, 1]}"#,
    );
    let clean = write(
        &d.join("clean.json"),
        r#"{"kind": "clean-frame-sample", "test_fraction": 0.2, "frame_fraction": 0.5, "train_val": [3, 1]}"#,
    );
    for (cfg, verdict) in [(&leaky, "group-leak"), (&clean, "clean")] {
        let plan = d.join("plan.json");
        let plan = plan.to_str().unwrap();
        let data = data.to_str().unwrap();
        ok(&leakbench(&["split", "--data", data, "--config", cfg, "--out", plan, "--seed", "9"]));
        let stdout = ok(&leakbench(&["audit", "--data", data, "--plan", plan]));
        let audit: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(audit["verdict"], verdict, "{stdout}");
    }
}

#[test]
fn run_is_byte_identical_and_report_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = write(
        &d.join("matrix.json"),
        &format!(
            r#"{{"data": {{"synthetic": {SYNTH}}},
                "base_seed": 11, "replicates": 2,
                "cells": [
                  {{"ft_mode": "clean", "test_mode": "independent"}},
                  {{"ft_mode": "leaky", "test_mode": "tainted"}}
                ]}}"#
        ),
    );
    let (a, b) = (d.join("a"), d.join("b"));
    for out in [&a, &b] {
        ok(&leakbench(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--jobs", "1"]));
    }
    let ra = fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.json")).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["base_seed"], 11);
    assert_eq!(manifest["files"][0]["sha256"].as_str().unwrap(), leakbench::seed::digest_hex(&ra));

    let svg = d.join("fig.svg");
    ok(&leakbench(&["report", "--in", a.to_str().unwrap(), "--svg", svg.to_str().unwrap()]));
    let svg = fs::read_to_string(svg).unwrap();
    let reports: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    for r in reports.as_array().unwrap() {
        let s = &r["summary"];
        assert!(svg.contains(&format!("data-mean=\"{}\"", s["plcc_mean"])));
        assert!(svg.contains(&format!("data-std=\"{}\"", s["srocc_std"])));
    }
}

#[test]
fn errors_are_one_line_with_class_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("out");
    let out = out.to_str().unwrap();

    let bad = write(&d.join("bad.json"), "{ not json");
    let r = leakbench(&["run", "--config", &bad, "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8(r.stderr).unwrap();
    assert!(stderr.starts_with("error[config]: ") && stderr.trim_end().lines().count() == 1, "{stderr}");

    let missing = d.join("nope.json");
    let r = leakbench(&["gen", "--config", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(3));

    let tainted_without_ft = write(
        &d.join("proto.json"),
        &format!(
            r#"{{"data": {{"synthetic": {SYNTH}}},
                "cells": [{{"ft_mode": "none", "test_mode": "tainted"}}]}}"#
        ),
    );
    let r = leakbench(&["run", "--config", &tainted_without_ft, "--out", out]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8(r.stderr).unwrap().starts_with("error[protocol]: "));
}
