use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const STEMS: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Writes a tiny MNIST-shaped set where class k lights up row block k.
fn fixture(dir: &Path, train: usize, test: usize) {
    let write_set = |img: &str, lab: &str, n: usize, offset: usize| {
        let mut i = Vec::new();
        let mut l = Vec::new();
        for v in [0x0803u32, n as u32, 28, 28] {
            i.extend_from_slice(&v.to_be_bytes());
        }
        for v in [0x0801u32, n as u32] {
            l.extend_from_slice(&v.to_be_bytes());
        }
        for s in 0..n {
            let k = (s + offset) % 10;
            l.push(k as u8);
            for p in 0..784 {
                let lit = (p / 28) / 3 == k && (p + s) % 5 != 0;
                i.push(if lit { 255 } else { ((p * 7 + s) % 20) as u8 });
            }
        }
        std::fs::write(dir.join(img), i).unwrap();
        std::fs::write(dir.join(lab), l).unwrap();
    };
    write_set(STEMS[0], STEMS[1], train, 0);
    write_set(STEMS[2], STEMS[3], test, 3);
}

fn sensprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sensprune"))
        .args(args)
        .env_remove("SENSPRUNE_DATA")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL: [&str; 8] = ["--epochs1", "3", "--epochs2", "2", "--target-error", "0.5", "--batch-size", "10"];

#[test]
fn train_then_report_then_eval_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fixture(&data, 100, 50);
    let out = tmp.path().join("run");
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());

    let mut args = vec!["train", "--data", d, "--out", o];
    args.extend(SMALL);
    let r = sensprune(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["config.json", "metrics.csv", "model.sparse", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,test_loss,test_err,ratio,alive_fc1,alive_fc2,alive_fc3,wall_s"));
    assert!(csv.lines().count() >= 2);

    let summary = read_json(&out.join("summary.json"));
    let err = summary["test_err"].as_f64().unwrap();
    assert!(err <= 0.5);

    let r = sensprune(&["report", "--run", o]);
    assert_eq!(code(&r), 0);
    assert!(String::from_utf8_lossy(&r.stdout).contains("FC1"));

    let model = out.join("model.sparse");
    let r = sensprune(&["eval", "--data", d, "--model", model.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    let line = stdout.lines().find(|l| l.starts_with("test_err ")).unwrap();
    let eval_err: f64 = line["test_err ".len()..].parse().unwrap();
    assert_eq!(eval_err, err);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fixture(&data, 20, 10);
    let d = data.to_str().unwrap();
    let o = tmp.path().join("run");
    let o = o.to_str().unwrap();

    assert_eq!(code(&sensprune(&["train", "--recipe", "nope", "--data", d, "--out", o])), 2);
    assert_eq!(code(&sensprune(&["train", "--out", o])), 2);
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&sensprune(&["train", "--data", empty.to_str().unwrap(), "--out", o])), 2);

    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"etaa": 0.1}"#).unwrap();
    let r = sensprune(&["train", "--data", d, "--out", o, "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("etaa"));

    assert_eq!(code(&sensprune(&["train", "--data", d, "--out", o, "--target-error", "1.5"])), 2);
    assert_eq!(code(&sensprune(&["train", "--data", d, "--out", o, "--mode", "sideways"])), 2);
}

#[test]
fn divergence_exits_with_three_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fixture(&data, 20, 10);
    let out = tmp.path().join("run");
    let r = sensprune(&[
        "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--eta", "1e300", "--epochs1", "2",
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("checkpoint.sparse").is_file());
}

#[test]
fn flags_override_config_file_override_recipe() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fixture(&data, 20, 10);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"eta": 0.2, "lambda": 2e-5}"#).unwrap();
    let r = sensprune(&[
        "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--lambda", "3e-5", "--epochs1", "1", "--epochs2", "1",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let echo = read_json(&out.join("config.json"));
    let c = &echo["config"];
    assert_eq!(echo["recipe"].as_str(), Some("lenet300-1.95"));
    assert_eq!(c["eta"].as_f64(), Some(0.2));
    assert_eq!(c["lambda"].as_f64(), Some(3e-5));
    assert_eq!(c["threshold"].as_f64(), Some(1e-3));
    assert_eq!(c["target_error"].as_f64(), Some(0.0195));
}

#[test]
fn compare_reg_writes_one_curve_per_regularizer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fixture(&data, 30, 20);
    let out = tmp.path().join("cmp");
    let r = sensprune(&[
        "compare-reg", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--epochs", "2", "--seeds", "0,1", "--l1-lambdas", "1e-6", "--l2-lambdas", "1e-5,1e-4",
        "--sensitivity-lambdas", "1e-5",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("comparison.json").is_file());
    for kind in ["none", "l1", "l2", "sensitivity"] {
        let csv = std::fs::read_to_string(out.join(format!("{kind}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,test_loss_seed0,test_loss_seed1,mean_test_loss", "{kind}");
        assert_eq!(lines.len(), 3, "{kind}");
    }
}
