use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_kvprobe");

fn kvprobe(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("spawn kvprobe")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_trace(dir: &Path, name: &str, dim: &str, signal: &str) -> PathBuf {
    let path = dir.join(name);
    let out = kvprobe(&[
        "gen-trace",
        "--dim",
        dim,
        "--layers",
        "2",
        "--window-size",
        "16",
        "--windows",
        "8",
        "--decode-steps",
        "4",
        "--planted",
        "2",
        "--signal",
        signal,
        "--sinks",
        "4",
        "--chunk",
        "4",
        "--local",
        "16",
        "--seed",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn run_small(trace: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--trace",
        trace.to_str().unwrap(),
        "--budget",
        "16",
        "--chunk",
        "4",
        "--sinks",
        "4",
        "--local",
        "16",
    ];
    args.extend_from_slice(extra);
    kvprobe(&args)
}

#[test]
fn gen_trace_defaults_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.akvt");
    let b = dir.path().join("b.akvt");
    for p in [&a, &b] {
        let out = kvprobe(&["gen-trace", "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(
            stdout.contains("d=64 L=4 H=1 m=256 windows=8 decode_steps=16"),
            "{stdout}"
        );
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn run_writes_all_outputs_and_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "t.akvt", "16", "0.8");
    let report = dir.path().join("r.json");
    let records = dir.path().join("r.jsonl");
    let csv = dir.path().join("r.csv");
    let manifest = dir.path().join("m.json");
    let out = run_small(
        &trace,
        &[
            "--report",
            report.to_str().unwrap(),
            "--records",
            records.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        std::fs::read_to_string(&records).unwrap().lines().count(),
        12
    );
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("layer,metric,mean,p25,p50,p75\n"));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["budget_split"]["retrieved"], 16);
    assert_eq!(r["probe_mode"], "act");
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["trace_sha256"], r["trace_hash"]);
    assert_eq!(m["trace_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn null_signal_still_carries_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "t.akvt", "16", "0.0");
    let t = kvprobe::trace::read_trace(&trace).unwrap();
    let gt = t.ground_truth.expect("ground truth");
    assert!(!gt.steps.is_empty());
    assert!(gt.steps.iter().all(|s| s.signal == 0.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "t.akvt", "16", "0.8");

    // Budget not a multiple of the chunk size.
    assert_eq!(code(&run_small(&trace, &["--budget", "10"])), 3);
    // Engine geometry disagreeing with the planted ground truth.
    assert_eq!(code(&run_small(&trace, &["--chunk", "8"])), 3);
    assert_eq!(
        code(&kvprobe(&[
            "gen-trace",
            "--signal",
            "1.5",
            "--out",
            "x.akvt"
        ])),
        3
    );
    assert_eq!(
        code(&kvprobe(&[
            "run",
            "--trace",
            trace.to_str().unwrap(),
            "--probe",
            "nope"
        ])),
        3
    );

    let junk = dir.path().join("junk.akvt");
    std::fs::write(&junk, b"not a trace at all").unwrap();
    assert_eq!(code(&run_small(&junk, &[])), 2);
    let truncated = dir.path().join("cut.akvt");
    let bytes = std::fs::read(&trace).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let out = run_small(&truncated, &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
    assert_eq!(code(&run_small(&dir.path().join("missing.akvt"), &[])), 2);
}

#[test]
fn compare_identical_and_mismatched_reports() {
    let dir = tempfile::tempdir().unwrap();
    let t16 = small_trace(dir.path(), "a.akvt", "16", "0.8");
    let t8 = small_trace(dir.path(), "b.akvt", "8", "0.8");
    let r16 = dir.path().join("a.json");
    let r8 = dir.path().join("b.json");
    let mean = dir.path().join("mean.json");
    assert_eq!(
        code(&run_small(&t16, &["--report", r16.to_str().unwrap()])),
        0
    );
    assert_eq!(
        code(&run_small(&t8, &["--report", r8.to_str().unwrap()])),
        0
    );
    let out = run_small(
        &t16,
        &[
            "--probe",
            "mean",
            "--cutoff",
            "fixed",
            "--report",
            mean.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0);

    let delta = dir.path().join("d.json");
    let r16s = r16.to_str().unwrap();
    assert_eq!(
        code(&kvprobe(&[
            "compare",
            "--a",
            r16s,
            "--b",
            r16s,
            "--out",
            delta.to_str().unwrap()
        ])),
        0
    );
    let d: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&delta).unwrap()).unwrap();
    for l in d["layers"].as_array().unwrap() {
        assert_eq!(l["recall_delta"], 0.0);
        assert_eq!(l["perplexity_delta"], 0.0);
    }

    let out = kvprobe(&["compare", "--a", r16s, "--b", mean.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let d: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(d["probe_b"], "mean");
    assert_eq!(d["cutoff_b"], "fixed");

    assert_eq!(
        code(&kvprobe(&[
            "compare",
            "--a",
            r16s,
            "--b",
            r8.to_str().unwrap()
        ])),
        4
    );
    assert_eq!(
        code(&kvprobe(&[
            "compare", "--a", r16s, "--a", r16s, "--b", r16s
        ])),
        4
    );
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{}").unwrap();
    assert_eq!(
        code(&kvprobe(&[
            "compare",
            "--a",
            r16s,
            "--b",
            junk.to_str().unwrap()
        ])),
        2
    );
}
