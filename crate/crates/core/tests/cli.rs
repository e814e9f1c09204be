use std::fs;
use std::path::Path;

use gendilate::autograd::{grad_check, DEFAULT_EPS};
use gendilate::cli::{
    cmd_gradcheck_with, run, EXIT_CHECK_FAILED, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE,
};
use gendilate::experiment::{ExperimentConfig, TaskConfig};
use gendilate::gradcheck::{GradCase, Group, Scope};
use gendilate::Tensor;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["gendilate"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::lag_default(3);
    if let TaskConfig::Lag {
        n_train, n_test, ..
    } = &mut cfg.task
    {
        *n_train = 200;
        *n_test = 100;
    }
    cfg.train.epochs = 3;
    cfg.train.snapshot_period = Some(1);
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn edit_config(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, v.to_string()).unwrap();
}

#[test]
fn train_eval_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let (code, out, err) = cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{out}{err}");
    let (code, _, _) = cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
    assert!(a.join("masks/epoch0002_layer0_ch0.txt").exists());

    let summary = a.join("summary.json");
    let (code, out, _) = cli(&["eval", "--summary", summary.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{out}");

    let (code, out, _) = cli(&["dump-mask", "--summary", summary.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "separable 9x4 3x1 0");
    assert_eq!(lines.len(), 1 + 9 + 9 + 1 + 9);

    let (code, _, err) = cli(&[
        "dump-mask",
        "--summary",
        summary.to_str().unwrap(),
        "--layer",
        "4",
    ]);
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
    ]);
    cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn non_positive_mu_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    for mu in [0.0, -1.0] {
        edit_config(&cfg, |v| v["train"]["mu"] = serde_json::json!(mu));
        let (code, _, err) = cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().join("x").to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("train.mu"), "{err}");
    }
}

#[test]
fn unknown_field_reports_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    edit_config(&cfg, |v| {
        v["model"]["layers"][0]["dilation"] = serde_json::json!(2)
    });
    let (code, _, err) = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("model.layers[0].dilation"), "{err}");
}

#[test]
fn divergence_exits_with_three_and_keeps_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    edit_config(&cfg, |v| {
        v["train"]["learning_rate"] = serde_json::json!(1e200)
    });
    let out = tmp.path().join("div");
    let (code, _, err) = cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_DIVERGED, "{err}");
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,"));
}

#[test]
fn gradcheck_scopes() {
    let (code, out, _) = cli(&["gradcheck", "--scope", "barrier"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("0 failures"));
    let (code, _, _) = cli(&["gradcheck", "--scope", "everything"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn broken_backward_rule_is_caught() {
    let broken = GradCase::new("broken_square", Group::Ops, |seed| {
        let x = Tensor::from_vec(vec![0.5 + seed as f64, -1.0, 2.0]);
        grad_check(
            |tape, v| {
                let value = tape.value(v[0]).map(|a| a * a);
                let sq = tape.custom(
                    "square_missing_factor_two",
                    &[v[0]],
                    value,
                    Box::new(|dy, xs| vec![dy.elementwise_mul(xs[0]).unwrap()]),
                );
                Ok(tape.sum(sq))
            },
            &[x],
            DEFAULT_EPS,
        )
    });
    let mut out = Vec::new();
    assert_eq!(
        cmd_gradcheck_with(&[broken], Scope::All, &mut out),
        EXIT_CHECK_FAILED
    );
    let text = String::from_utf8(out).unwrap();
    assert!(
        text.contains("FAIL") && text.contains("broken_square"),
        "{text}"
    );
}

#[test]
fn gen_data_writes_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let (code, _, err) = cli(&[
        "gen-data",
        "--task",
        "pattern2d",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let inputs =
        Tensor::from_text(&fs::read_to_string(dir.join("test_inputs.txt")).unwrap()).unwrap();
    assert_eq!(inputs.shape(), &[500, 1, 12, 12]);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 4);
    let (code, _, _) = cli(&["gen-data", "--out", dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
}
