use std::path::Path;
use std::process::{Command, Output};

fn ssalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssalign")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ssalign(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn generate(out: &Path) {
    ok(&[
        "generate", "--classes", "2", "--dim", "4", "--k-shot", "2", "--n-source", "16", "--n-test", "8",
        "--frames", "24", "--seed", "1", "--out", out.to_str().unwrap(),
    ]);
}

const SMALL: &[&str] = &["--epochs", "2", "--m", "4", "--mhat", "4", "--e-warmup", "0", "--hidden", "8", "--embed", "4"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ssalign(&args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_three_manifests_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a);
    generate(&b);
    for stem in ["source", "target_train", "target_test"] {
        assert!(a.join(format!("{stem}.json")).exists());
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "generate.json" {
            assert!(ba == bb, "{na} differs");
        }
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(ssalign(&["generate", "--k-shot", "0", "--out", out]).status.code(), Some(2));
    assert_eq!(ssalign(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(ssalign(&["train", "--out", out]).status.code(), Some(2));
    assert_eq!(ssalign(&["ablate", "--data", out, "--variants", "nope"]).status.code(), Some(2));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let run = tmp.path().join("run");
    let out = train(&data, &run, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.fsvm", "train_log.json", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["config"]["m"], 4);
    assert!(metrics["summary"]["final_accuracy"].is_number());

    let ckpt = run.join("checkpoint.fsvm");
    let manifest = data.join("target_test.json");
    let eval = |metrics: &Path| {
        ok(&[
            "eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
            "--metrics", metrics.to_str().unwrap(),
        ])
    };
    let (e1, e2) = (eval(&tmp.path().join("e1.json")), eval(&tmp.path().join("e2.json")));
    assert_eq!(e1.stdout, e2.stdout);
    let acc: f64 = String::from_utf8_lossy(&e1.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(
        std::fs::read(tmp.path().join("e1.json")).unwrap(),
        std::fs::read(tmp.path().join("e2.json")).unwrap()
    );

    // Dimension mismatch between checkpoint and data.
    let other = tmp.path().join("other");
    ok(&["generate", "--classes", "3", "--dim", "4", "--k-shot", "1", "--n-source", "3", "--n-test", "3",
        "--frames", "24", "--out", other.to_str().unwrap()]);
    let out = ssalign(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        other.join("target_test.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));

    // Corrupted magic.
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&ckpt, bytes).unwrap();
    let out = ssalign(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

#[test]
fn infeasible_configs_fail_at_startup() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let run = tmp.path().join("r1");
    let out = train(&data, &run, &["--r", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("r >= 2"));
    assert!(!run.join("metrics.json").exists());
    assert!(train(&data, &run, &["--r", "1", "--no-cross"]).status.success());
    // Snippets longer than the videos.
    let big = tmp.path().join("big");
    let out = ssalign(&["train", "--data", data.to_str().unwrap(), "--out", big.to_str().unwrap(), "--m", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shorter than m"));
}

#[test]
fn toggles_reproduce_the_prediction_only_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let off = ["--no-proto", "--no-cross", "--no-sn-dist", "--stat-metric", "none", "--no-attention", "--no-ssa"];
    assert!(train(&data, &tmp.path().join("a"), &off).status.success());
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("a/metrics.json")).unwrap()).unwrap();
    for row in metrics["epochs"].as_array().unwrap() {
        for term in ["l_proto", "l_cross", "l_sn_dist", "l_sn_stat"] {
            assert_eq!(row[term], 0.0, "{term}");
        }
        assert_eq!(row["total"], row["l_pred"]);
    }
}

#[test]
fn ablate_single_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let record = tmp.path().join("ablate.json");
    let mut args = vec!["ablate", "--data", data.to_str().unwrap(), "--seeds", "3,4", "--variants", "full",
        "--out", record.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = ok(&args);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 2, "{table}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(record).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["accuracies"].as_array().unwrap().len(), 2);
}
