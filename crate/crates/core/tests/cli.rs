use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn freqmoe(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_freqmoe"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let (code, out, err) = freqmoe(dir, args);
    assert_eq!(code, 0, "{args:?}\nstdout: {out}\nstderr: {err}");
    out
}

fn run_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_records_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = |out: &str| {
        [
            "gen-data",
            "--problem",
            "ns",
            "--size",
            "32",
            "--samples",
            "20",
            "--seed",
            "4",
            "--out",
            out,
        ]
        .map(String::from)
    };
    for out in ["a/ns.fqd", "b/ns.fqd"] {
        let a = args(out);
        run_ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let (a, b) = (
        std::fs::read(d.join("a/ns.fqd")).unwrap(),
        std::fs::read(d.join("b/ns.fqd")).unwrap(),
    );
    assert_eq!(a, b);
    let run = run_json(&d.join("a/run.json"));
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["settings"]["seed"], 4);
    assert_eq!(run["settings"]["grid_size"], 32);
    assert_eq!(run["outputs"][0]["sha256"], freqmoe::io::sha256_hex(&a));
    assert_eq!(
        run_json(&d.join("b/run.json"))["outputs"][0]["sha256"],
        run["outputs"][0]["sha256"]
    );
}

#[test]
fn lphf_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run_ok(
        d,
        &[
            "gen-data",
            "--problem",
            "heat",
            "--size",
            "32",
            "--samples",
            "20",
            "--out",
            "data/heat.fqd",
        ],
    );
    run_ok(
        d,
        &[
            "gen-data",
            "--problem",
            "ns",
            "--size",
            "32",
            "--samples",
            "20",
            "--seed",
            "1",
            "--out",
            "data/ns.fqd",
        ],
    );
    std::fs::write(
        d.join("train.json"),
        r#"{"batch_size": 4, "epochs": 2, "warmup_steps": 2}"#,
    )
    .unwrap();
    run_ok(
        d,
        &[
            "train-base",
            "--data",
            "data/heat.fqd",
            "--width",
            "8",
            "--modes",
            "4x4",
            "--config",
            "train.json",
            "--out",
            "base/base.fqm",
        ],
    );
    let base_run = run_json(&d.join("base/run.json"));
    assert_eq!(base_run["settings"]["batch_size"], 4);
    assert_eq!(base_run["settings"]["width"], 8);
    let log = std::fs::read_to_string(d.join("base/train-base.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let out = run_ok(
        d,
        &[
            "upcycle",
            "--base",
            "base/base.fqm",
            "--chunks",
            "2x2",
            "--rank",
            "2",
            "--out",
            "moe/up.fqm",
        ],
    );
    assert!(out.contains("masked deviation 0e0"), "{out}");
    let verify = run_ok(
        d,
        &[
            "verify",
            "--base",
            "base/base.fqm",
            "--model",
            "moe/up.fqm",
            "--probe",
            "10",
            "--out",
            "v",
        ],
    );
    assert!(verify.contains("max masked deviation 0e0"), "{verify}");
    assert_eq!(run_json(&d.join("v/verify.json"))["max_deviation"], 0.0);

    run_ok(
        d,
        &[
            "finetune",
            "--model",
            "moe/up.fqm",
            "--data",
            "data/ns.fqd",
            "--config",
            "train.json",
            "--sparsity-weight",
            "0.01",
            "--out",
            "ft/ft.fqm",
        ],
    );
    let ft = run_json(&d.join("ft/run.json"));
    assert_eq!(ft["settings"]["sparsity_weight"], 0.01);
    assert_eq!(ft["inputs"].as_array().unwrap().len(), 2);

    let eval = run_ok(
        d,
        &[
            "eval",
            "--model",
            "ft/ft.fqm",
            "--data",
            "data/ns.fqd",
            "--top-k",
            "1",
            "--out",
            "e",
        ],
    );
    assert!(eval.starts_with("mean L2RE"), "{eval}");
    let csv = std::fs::read_to_string(d.join("e/eval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample,l2re"));
    run_ok(
        d,
        &[
            "rollout",
            "--model",
            "ft/ft.fqm",
            "--data",
            "data/ns.fqd",
            "--steps",
            "5",
            "--out",
            "r",
        ],
    );
    assert_eq!(
        std::fs::read_to_string(d.join("r/rollout.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );
    run_ok(
        d,
        &[
            "inspect-gates",
            "--model",
            "ft/ft.fqm",
            "--data",
            "data/ns.fqd",
            "--records",
            "2",
            "--out",
            "g",
        ],
    );
    assert!(d.join("g/inspect-gates.csv").exists());
    let records = std::fs::read_to_string(d.join("g/inspect-gates.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2 * 4);

    // Wrong architecture for the command: validation failure.
    let (code, _, err) = freqmoe(
        d,
        &[
            "finetune",
            "--model",
            "base/base.fqm",
            "--data",
            "data/ns.fqd",
            "--out",
            "x/x.fqm",
        ],
    );
    assert_eq!(code, 1);
    assert!(err.contains("'dense'"), "{err}");
    let (code, _, err) = freqmoe(
        d,
        &[
            "inspect-gates",
            "--model",
            "base/base.fqm",
            "--data",
            "data/ns.fqd",
            "--out",
            "x",
        ],
    );
    assert_eq!(code, 1, "{err}");
}

#[test]
fn bench_modes_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(tmp.path(), &["bench-modes", "--modes", "4,8", "--out", "b"]);
    let csv = std::fs::read_to_string(tmp.path().join("b/bench-modes.csv")).unwrap();
    assert_eq!(out, csv);
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_input_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(
        freqmoe(d, &["gen-data", "--problem", "wave", "--out", "x.fqd"]).0,
        1
    );
    assert_eq!(
        freqmoe(
            d,
            &[
                "gen-data",
                "--problem",
                "heat",
                "--size",
                "24",
                "--out",
                "x.fqd"
            ]
        )
        .0,
        1
    );
    assert_eq!(
        freqmoe(
            d,
            &["eval", "--model", "missing.fqm", "--data", "missing.fqd"]
        )
        .0,
        2
    );
    std::fs::write(d.join("c.json"), r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(freqmoe(d, &["bench-modes", "--config", "c.json"]).0, 1);
    assert_eq!(freqmoe(d, &["--help"]).0, 0);

    run_ok(
        d,
        &[
            "gen-data",
            "--problem",
            "heat",
            "--size",
            "16",
            "--samples",
            "20",
            "--out",
            "h.fqd",
        ],
    );
    let mut bytes = std::fs::read(d.join("h.fqd")).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 1;
    std::fs::write(d.join("h.fqd"), bytes).unwrap();
    let (code, _, err) = freqmoe(d, &["train-base", "--data", "h.fqd", "--out", "m.fqm"]);
    assert_eq!(code, 2);
    assert!(err.contains("integrity"), "{err}");
}
