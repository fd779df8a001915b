mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{config_path, data_dir, have};

fn hebb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hebb"))
        .args(args)
        .env("HEBB_DATA_DIR", data_dir())
        .output()
        .expect("binary runs")
}

fn stdout_value(out: &Output, key: &str) -> String {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key:?} in output:\n{text}"))
        .to_string()
}

fn have_fashion() -> bool {
    let ok = have("fashion/train-images-idx3-ubyte") && have("fashion/t10k-images-idx3-ubyte");
    if !ok {
        eprintln!("skipping: no Fashion-MNIST files under {}", data_dir().display());
    }
    ok
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_train_then_eval_and_viz() {
    if !have_fashion() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let smoke = config_path("smoke.json");
    let train = hebb(&["train", "--config", s(&smoke), "--out", s(&out)]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["hebbian.ckpt", "final.ckpt", "metrics.csv", "weight_stats.csv", "summary.json", "weights_conv1_final.pgm"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = out.join("final.ckpt");
    let eval = hebb(&["eval", "--config", s(&smoke), "--checkpoint", s(&ckpt)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(stdout_value(&eval, "test accuracy"), stdout_value(&train, "test accuracy"));
    assert_eq!(stdout_value(&eval, "test loss"), stdout_value(&train, "test loss"));

    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    for p in [&a, &b] {
        let viz = hebb(&["viz", "--checkpoint", s(&ckpt), "--layer", "conv1", "--grid", "2x4", "--out", s(p)]);
        assert!(viz.status.success(), "{}", String::from_utf8_lossy(&viz.stderr));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert!(bytes.starts_with(b"P5\n23 11\n255\n"));
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let unknown = hebb(&["viz", "--checkpoint", s(&ckpt), "--layer", "conv9", "--out", s(&a)]);
    assert_eq!(unknown.status.code(), Some(2));

    let mut wider: serde_json::Value = serde_json::from_slice(&std::fs::read(&smoke).unwrap()).unwrap();
    wider["model"]["layers"][0]["filters"] = 9.into();
    let wider_path = dir.path().join("wider.json");
    std::fs::write(&wider_path, wider.to_string()).unwrap();
    let mismatch = hebb(&["eval", "--config", s(&wider_path), "--checkpoint", s(&ckpt)]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("conv1.weight"));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let corrupt = hebb(&["eval", "--config", s(&smoke), "--checkpoint", s(&bad)]);
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("CRC"));
}

#[test]
fn missing_dataset_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(config_path("smoke.json")).unwrap()).unwrap();
    cfg["data"]["train_images"] = "nowhere/train-images-idx3-ubyte".into();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    let res = hebb(&["train", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nowhere"));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(hebb(&[]).status.code(), Some(2));
    assert_eq!(hebb(&["train", "--config", "x.json"]).status.code(), Some(2));
    assert_eq!(hebb(&["bench", "--threads", "0"]).status.code(), Some(2));
    assert_eq!(hebb(&["viz", "--checkpoint", "/nonexistent.ckpt", "--layer", "a", "--out", "/tmp/x.pgm"]).status.code(), Some(2));
    assert!(hebb(&["--help"]).status.success());
}
