use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn flcb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flcb"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec(name: &str, mean: f64, seed: u64) -> Value {
    json!({
        "name": name,
        "count_distribution": {"kind": "poisson", "mean": mean},
        "blob_sigma_px": 1.5,
        "noise_level": 0.1,
        "image_size": [32, 32],
        "n_train": 8,
        "n_test": 3,
        "seed": seed,
    })
}

/// Writes a small three-domain config into `dir` and returns its path.
fn config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "domain_specs": [spec("a", 3.0, 1), spec("b", 8.0, 2), spec("c", 15.0, 3)],
        "order": ["a", "b", "c"],
        "mode": "flcb",
        "epochs_per_domain": 1,
        "batch_size": 4,
        "augment": {"flip_prob": 0.5, "crop_size": 16},
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn assert_error(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
}

fn gen(cfg: &Path) {
    let o = flcb(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = flcb(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_refuses_then_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({}));
    gen(&cfg);
    let data = tmp.path().join("data");
    for name in ["a", "b", "c"] {
        let d = data.join(name);
        assert!(d.join("meta.json").is_file());
        assert!(d.join("train/annotations.json").is_file());
        assert_eq!(fs::read_dir(d.join("test/images")).unwrap().count(), 3);
    }
    let before = snapshot(&data);

    let again = flcb(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_error(&again, "state");
    assert_eq!(snapshot(&data), before);

    let forced = flcb(&["gen-data", "--config", cfg.to_str().unwrap(), "--force"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert_eq!(snapshot(&data), before);
}

#[test]
fn sequential_matches_flcb_at_zero_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({}));
    gen(&cfg);
    let (seq, zero) = (tmp.path().join("seq"), tmp.path().join("zero"));
    train(&cfg, &seq, &["--mode", "sequential", "--seed", "3"]);
    train(&cfg, &zero, &["--lambda", "0", "--seed", "3"]);
    for f in ["e_matrix_mae.csv", "e_matrix_rmse.csv", "loss_log.jsonl"] {
        assert_eq!(
            fs::read(seq.join(f)).unwrap(),
            fs::read(zero.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn train_writes_a_triangular_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({}));
    gen(&cfg);
    let run = tmp.path().join("run");
    train(&cfg, &run, &[]);
    let csv = fs::read_to_string(run.join("e_matrix_mae.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,a,b,c");
    for (t, line) in lines[1..].iter().enumerate() {
        let filled = line.split(',').skip(1).filter(|c| !c.is_empty()).count();
        assert_eq!(filled, t + 1, "{line}");
    }
    assert_eq!(lines.len(), 4);
    for t in 1..=3 {
        assert!(run.join(format!("checkpoints/step_{t}.bin")).is_file());
        assert!(run.join(format!("checkpoints/step_{t}.json")).is_file());
    }
    let snap: Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["mode"], "flcb");

    let again = flcb(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_error(&again, "state");
}

#[test]
fn distill_switch_zeroes_only_the_disabled_term() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({}));
    gen(&cfg);
    let (out, both) = (tmp.path().join("out"), tmp.path().join("both"));
    train(&cfg, &out, &["--distill", "output"]);
    train(&cfg, &both, &["--distill", "both"]);
    let read = |d: &Path| -> Vec<Value> {
        fs::read_to_string(d.join("loss_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (a, b) = (read(&out), read(&both));
    assert_ne!(a, b);
    assert!(a.iter().all(|r| r["feature_term"] == 0.0));
    assert!(a.iter().any(|r| r["output_term"].as_f64().unwrap() > 0.0));
    assert!(b.iter().any(|r| r["feature_term"].as_f64().unwrap() > 0.0));
}

#[test]
fn report_writes_metrics_and_compares() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({}));
    gen(&cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&cfg, &a, &[]);
    train(&cfg, &b, &["--mode", "sequential"]);
    let o = flcb(&[
        "report",
        a.to_str().unwrap(),
        "--compare",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("nBwT"), "{text}");
    let m: Value =
        serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["nbwt_per_step"].as_array().unwrap().len(), 2);
    for name in ["a", "b", "c"] {
        assert!(m["per_domain_final"][name]["mae"].is_number());
    }
    assert!(m["final_mmae"].is_number() && m["final_mrmse"].is_number());
    assert!(a.join("forgetting_curves.csv").is_file());
    assert!(a.join("compare.txt").is_file());

    // A truncated matrix is reported by row.
    let csv = fs::read_to_string(a.join("e_matrix_mae.csv")).unwrap();
    let cut: Vec<&str> = csv.lines().take(3).collect();
    fs::write(a.join("e_matrix_mae.csv"), cut.join("\n") + "\n").unwrap();
    let rcsv = fs::read_to_string(a.join("e_matrix_rmse.csv")).unwrap();
    let rcut: Vec<&str> = rcsv.lines().take(3).collect();
    fs::write(a.join("e_matrix_rmse.csv"), rcut.join("\n") + "\n").unwrap();
    let o = flcb(&["report", a.to_str().unwrap()]);
    assert_error(&o, "state");
    assert!(stderr(&o).contains("row 3"));
}

#[test]
fn single_domain_and_unseen() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({"order": ["a"], "unseen": "c"}));
    gen(&cfg);
    let run = tmp.path().join("run");
    train(&cfg, &run, &[]);
    let o = flcb(&["report", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains("nBwT"), "{text}");
    assert!(text.contains("c (unseen)"), "{text}");
    let m: Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(m["nbwt_per_step"].as_array().unwrap().is_empty());
    assert!(m["unseen"]["mae"].is_number());
}

#[test]
fn joint_mode_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({}));
    gen(&cfg);
    let run = tmp.path().join("joint");
    train(&cfg, &run, &["--mode", "joint"]);
    let o = flcb(&["report", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mode"], "joint");
    assert_eq!(m["per_domain_final"].as_object().unwrap().len(), 3);
}

#[test]
fn failures_are_single_line_and_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_error(
        &flcb(&["train", "--config", missing.to_str().unwrap()]),
        "io",
    );

    let cfg = config(tmp.path(), json!({}));
    let c = cfg.to_str().unwrap();
    // No data generated yet.
    assert_error(&flcb(&["train", "--config", c]), "config");
    assert_error(
        &flcb(&["train", "--config", c, "--order", "a,zz"]),
        "config",
    );
    assert_error(&flcb(&["train", "--config", c, "--lambda", "-1"]), "config");
    assert_error(&flcb(&["train", "--config", c, "--mode", "bogus"]), "usage");
    assert_error(&flcb(&["bogus"]), "usage");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_error(
        &flcb(&["gen-data", "--config", bad.to_str().unwrap()]),
        "parse",
    );
    assert_error(
        &flcb(&["report", tmp.path().join("none").to_str().unwrap()]),
        "io",
    );
}
