use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qverify(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qverify"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen(dir: &Path, out: &str, seed: &str) -> Output {
    qverify(
        dir,
        &[
            "gen", "--qubits", "2", "--circuits", "10", "--levels", "3", "--shots", "40", "--profile", "depolarizing",
            "--seed", seed, "--layers", "3", "--out", out,
        ],
    )
}

const TINY: &str = r#"{"model":{"d":8,"d3":8,"conv_widths":[4,8],"graph_layers":2,"graph_width":4},
"train":{"epochs_stage1":2,"epochs_stage2":2,"seed":5}}"#;

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_counts_records_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), "a", "3");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let labels = read_csv(&tmp.path().join("a/labels.csv"));
    assert_eq!(labels.len() - 1, 30);
    assert_eq!(
        labels[0],
        ["record_id", "circuit_id", "level_i", "level_j", "fidelity", "purity_i", "purity_j"]
    );
    assert!(gen(tmp.path(), "b", "3").status.success());
    let ma = fs::read(tmp.path().join("a/manifest.json")).unwrap();
    let mb = fs::read(tmp.path().join("b/manifest.json")).unwrap();
    assert_eq!(ma, mb);
    assert!(tmp.path().join("a/gen_config.json").exists());
}

#[test]
fn gen_config_errors_use_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qverify(
        tmp.path(),
        &["gen", "--qubits", "2", "--circuits", "2", "--levels", "2", "--shots", "8", "--seed", "1", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--profile"));
    let out = qverify(
        tmp.path(),
        &[
            "gen", "--qubits", "12", "--circuits", "2", "--levels", "2", "--shots", "8", "--profile", "depolarizing",
            "--seed", "1", "--out", "x",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    fs::write(tmp.path().join("g.json"), r#"{"qubits": 2, "colour": "red"}"#).unwrap();
    let out = qverify(tmp.path(), &["gen", "--config", "g.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_methods() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(tmp.path(), "ds", "4").status.success());
    let out = qverify(tmp.path(), &["baseline", "--method", "mle", "--dataset", "ds", "--out", "b"]);
    assert_eq!(out.status.code(), Some(2));
    for method in ["cs", "cc"] {
        let dir = format!("b_{method}");
        let out = qverify(
            tmp.path(),
            &["baseline", "--method", method, "--dataset", "ds", "--all-records", "--out", &dir],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let rows = read_csv(&tmp.path().join(&dir).join("predictions.csv"));
        assert_eq!(rows[0], ["record_id", "label", "prediction"]);
        assert_eq!(rows.len() - 1, 30);
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(tmp.path().join(&dir).join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m["count"], 30);
    }
}

#[test]
fn staged_training_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(gen(p, "ds", "5").status.success());
    fs::write(p.join("c.json"), TINY).unwrap();
    let train = |stage: &str, out: &str| qverify(p, &["train", "--dataset", "ds", "--config", "c.json", "--stage", stage, "--out", out]);

    assert!(train("branch-mea", "run").status.success());
    let out = train("finetune", "run");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));

    assert!(train("branch-circ", "run").status.success());
    assert!(train("finetune", "run").status.success());
    let hist = read_csv(&p.join("run/history_finetune.csv"));
    assert_eq!(hist.len() - 1, 2);
    assert!(p.join("run/train_config.json").exists());

    // identical config and seed give identical results
    assert!(train("all", "run2").status.success());
    assert_eq!(
        fs::read(p.join("run/history_finetune.csv")).unwrap(),
        fs::read(p.join("run2/history_finetune.csv")).unwrap()
    );

    let out = qverify(p, &["eval", "--model", "run/finetune", "--dataset", "ds", "--emit-repr", "--out", "ev"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = read_csv(&p.join("ev/predictions.csv"));
    assert_eq!(preds[0], ["record_id", "label", "prediction"]);
    let (mut se, mut n) = (0.0, 0.0);
    for row in &preds[1..] {
        let (y, f): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
        se += (y - f) * (y - f);
        n += 1.0;
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(p.join("ev/metrics.json")).unwrap()).unwrap();
    assert!((m["mse"].as_f64().unwrap() - se / n).abs() < 1e-15);
    let repr = read_csv(&p.join("ev/representations.csv"));
    assert_eq!(repr[0].len(), 3 + 8);
    assert!(repr[1..].iter().all(|r| r.len() == 3 + 8));

    let out = qverify(p, &["eval", "--model", "run/nothing", "--dataset", "ds", "--out", "ev2"]);
    assert_eq!(out.status.code(), Some(2));
}
