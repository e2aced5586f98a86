use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn protogate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protogate"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn protogate")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Two tight clusters far apart in the first two of eight dimensions.
fn write_blobs(path: &Path) {
    let mut s = String::from("a,b,c,d,e,f,g,h,y\n");
    for i in 0..60 {
        let class = i % 2;
        let centre = if class == 0 { -4.0 } else { 4.0 };
        let jitter = |k: usize| ((i * 7 + k * 13) % 11) as f64 / 22.0 - 0.25;
        let mut row: Vec<String> = (0..8)
            .map(|k| {
                let v = if k < 2 { centre + jitter(k) } else { jitter(k) };
                v.to_string()
            })
            .collect();
        row.push(if class == 0 { "neg" } else { "pos" }.into());
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

#[test]
fn gen_synth_writes_quota_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = protogate(
        dir.path(),
        &["gen-synth", "--kind", "syn1", "--seed", "7", "--out", "d"],
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let text = fs::read_to_string(dir.path().join("d/syn1.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 201);
    assert_eq!(lines[0].split(',').count(), 101);
    assert!(lines[0].ends_with(",y"));
    let ones = lines[1..].iter().filter(|l| l.ends_with(",1")).count();
    assert_eq!((200 - ones, ones), (150, 50));
    let truth = json(dir.path().join("d/syn1.truth.json"));
    assert_eq!(truth["samples"].as_array().unwrap().len(), 200);

    let again = protogate(
        dir.path(),
        &["gen-synth", "--kind", "syn1", "--seed", "7", "--out", "e"],
    );
    assert_eq!(code(&again), 0);
    for f in ["syn1.csv", "syn1.truth.json"] {
        assert_eq!(
            fs::read(dir.path().join("d").join(f)).unwrap(),
            fs::read(dir.path().join("e").join(f)).unwrap()
        );
    }
}

#[test]
fn syn3_truth_uses_branch_indices() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&protogate(
            dir.path(),
            &["gen-synth", "--kind", "syn3", "--out", "."]
        )),
        0
    );
    let truth = json(dir.path().join("syn3.truth.json"));
    for s in truth["samples"].as_array().unwrap() {
        for d in s.as_array().unwrap() {
            assert!([1, 2, 7, 8, 9, 10, 11].contains(&d.as_u64().unwrap()));
        }
    }
}

#[test]
fn train_separates_blobs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_blobs(&dir.path().join("blobs.csv"));
    let args = |out: &'static str| {
        vec![
            "train",
            "--dataset",
            "blobs.csv",
            "--hidden",
            "8",
            "--max-iterations",
            "150",
            "--batch-size",
            "16",
            "--out",
            out,
        ]
    };
    let o = protogate(dir.path(), &args("a"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(dir.path().join("a/metrics.json"));
    assert_eq!(m["test"]["balanced_accuracy"].as_f64(), Some(1.0));
    for f in [
        "manifest.json",
        "checkpoint.json",
        "base.json",
        "history.csv",
        "explanations.json",
    ] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(dir.path().join("a/history.csv")).unwrap();
    assert!(history.starts_with("iter,train_loss,val_loss,mean_l0,l1_norm"));

    assert_eq!(code(&protogate(dir.path(), &args("b"))), 0);
    for f in ["metrics.json", "checkpoint.json", "explanations.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }

    // a stored query explains itself through its own prototype
    let o = protogate(
        dir.path(),
        &[
            "explain",
            "--checkpoint",
            "a/checkpoint.json",
            "--base",
            "a/base.json",
            "--queries",
            "blobs.csv",
            "--out",
            "x",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ex = json(dir.path().join("x/explanations.json"));
    let base = json(dir.path().join("a/base.json"));
    let sources: Vec<u64> = base["base"]["sources"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let records = ex.as_array().unwrap();
    assert_eq!(records.len(), 60);
    for &s in &sources {
        let nearest = &records[s as usize]["neighbors"][0];
        assert!(nearest["distance"].as_f64().unwrap() < 1e-9);
    }
    for r in records {
        assert_eq!(r["tags"].as_array().unwrap().len(), 8);
        assert_eq!(r["neighbors"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn explain_rejects_wrong_width() {
    let dir = tempfile::tempdir().unwrap();
    write_blobs(&dir.path().join("blobs.csv"));
    let o = protogate(
        dir.path(),
        &[
            "train",
            "--dataset",
            "blobs.csv",
            "--hidden",
            "4",
            "--max-iterations",
            "5",
            "--out",
            "a",
        ],
    );
    assert_eq!(code(&o), 0);
    fs::write(dir.path().join("q.csv"), "a,b\n1,2\n").unwrap();
    let o = protogate(
        dir.path(),
        &[
            "explain",
            "--checkpoint",
            "a/checkpoint.json",
            "--base",
            "a/base.json",
            "--queries",
            "q.csv",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_config_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let o = protogate(
        dir.path(),
        &["train", "--kind", "syn1", "--k", "64", "--out", "o"],
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`k`"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn usage_data_and_numerical_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&protogate(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&protogate(dir.path(), &["train"])), 1);
    assert_eq!(code(&protogate(dir.path(), &["--help"])), 0);
    assert_eq!(
        code(&protogate(
            dir.path(),
            &["train", "--dataset", "missing.csv"]
        )),
        2
    );
    fs::write(dir.path().join("bad.csv"), "a,y\n1,0\nx,1\n").unwrap();
    assert_eq!(
        code(&protogate(dir.path(), &["train", "--dataset", "bad.csv"])),
        2
    );

    write_blobs(&dir.path().join("blobs.csv"));
    let o = protogate(
        dir.path(),
        &[
            "train",
            "--dataset",
            "blobs.csv",
            "--hidden",
            "4",
            "--learning-rate",
            "1e300",
            "--max-iterations",
            "20",
        ],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn cv_runs_every_fold_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    write_blobs(&dir.path().join("blobs.csv"));
    let run = |out: &'static str| {
        protogate(
            dir.path(),
            &[
                "cv",
                "--dataset",
                "blobs.csv",
                "--folds",
                "2",
                "--repeats",
                "1",
                "--hidden",
                "4",
                "--max-iterations",
                "30",
                "--batch-size",
                "16",
                "--baselines",
                "--out",
                out,
            ],
        )
    };
    let o = run("a");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        json(dir.path().join("a/runs.json"))
            .as_array()
            .unwrap()
            .len(),
        2
    );
    assert!(stdout(&o).contains("balanced_accuracy"));
    let agg = fs::read_to_string(dir.path().join("a/aggregate.csv")).unwrap();
    assert!(agg.starts_with("dataset,method,metric,mean,std"));
    assert!(agg.contains("knn_all"));
    assert_eq!(code(&run("b")), 0);
    assert_eq!(
        agg,
        fs::read_to_string(dir.path().join("b/aggregate.csv")).unwrap()
    );
}

#[test]
fn manifest_file_drives_grid() {
    let dir = tempfile::tempdir().unwrap();
    write_blobs(&dir.path().join("blobs.csv"));
    let manifest = r#"{
        "dataset": {"type": "csv", "path": "blobs.csv", "label_column": "y"},
        "train": {"hidden": 4, "max_iterations": 20, "batch_size": 16},
        "grid": {"lambda_global": [0.01, 0.02], "lambda_local": [0.0], "k": [1, 3], "learning_rate": [0.1]},
        "splits": {"folds": 2, "repeats": 1, "val_frac": 0.2},
        "seed": 5
    }"#;
    fs::write(dir.path().join("m.json"), manifest).unwrap();
    let o = protogate(dir.path(), &["grid", "--config", "m.json", "--out", "g"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let grid = fs::read_to_string(dir.path().join("g/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
    let written = json(dir.path().join("g/manifest.json"));
    assert_eq!(written["seed"], 5);

    fs::write(
        dir.path().join("bad.json"),
        r#"{"dataset": {"type": "csv"}, "nope": 1}"#,
    )
    .unwrap();
    assert_eq!(
        code(&protogate(dir.path(), &["cv", "--config", "bad.json"])),
        1
    );
}

#[test]
fn help_documents_paper_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&protogate(dir.path(), &["train", "--help"]));
    for needle in [
        "--batch-size",
        "[default: 64]",
        "[default: 0.5]",
        "[default: 16]",
        "[default: 0.0001]",
        "[default: 10000]",
        "[default: 500]",
        "--jobs",
        "--val-frac",
        "--label-col",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = protogate(dir.path(), &["verify", "--quick"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("gradient fidelity"));
    let o = protogate(dir.path(), &["verify", "--quick", "--inject-tanh-fault"]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
}
