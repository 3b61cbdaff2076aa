use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sigdel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigdel"))
        .args(args)
        .env("SIGDEL_THREADS", "2")
        .env_remove("SIGDEL_NET")
        .env_remove("SIGDEL_MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn write_u8_images(path: &Path, n: usize, seed: u8) {
    let mut bytes = Vec::new();
    bytes.extend(0x0803u32.to_be_bytes());
    for d in [n as u32, 4, 4] {
        bytes.extend(d.to_be_bytes());
    }
    bytes.extend((0..n * 16).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)));
    fs::write(path, bytes).unwrap();
}

fn write_labels(path: &Path, n: usize) {
    let mut bytes = Vec::new();
    bytes.extend(0x0801u32.to_be_bytes());
    bytes.extend((n as u32).to_be_bytes());
    bytes.extend((0..n).map(|i| (i % 10) as u8));
    fs::write(path, bytes).unwrap();
}

#[test]
fn equivalence_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eq");
    let o = sigdel(&["equivalence", "--frames", "40", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("equivalence.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 40);
    assert!(report["sigma_delta_vs_rounding"].as_f64().unwrap() < 1e-4);
}

#[test]
fn invalid_input_exits_with_code_2() {
    let o = sigdel(&["equivalence", "--smoothness", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sigdel(&["equivalence", "--net", "/nonexistent/net.sdnt"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sigdel(&["reshuffle", "--mnist-dir", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn random_net_writes_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rn");
    let o = sigdel(&[
        "random-net",
        "--lambda-list",
        "1e-4",
        "--epochs",
        "1",
        "--samples",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cloud = fs::read_to_string(out.join("cloud.csv")).unwrap();
    assert_eq!(cloud.lines().count(), 11);
    assert!(fs::read_to_string(out.join("trajectories.csv")).unwrap().starts_with("lambda,step,error,kflops"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "random-net");
    assert_eq!(manifest["threads"], 2);
}

#[test]
fn reshuffle_exports_a_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    fs::create_dir(&data).unwrap();
    write_u8_images(&data.join("train-images-idx3-ubyte"), 20, 1);
    write_labels(&data.join("train-labels-idx1-ubyte"), 20);
    write_u8_images(&data.join("t10k-images-idx3-ubyte"), 30, 5);
    write_labels(&data.join("t10k-labels-idx1-ubyte"), 30);
    let out = dir.path().join("temporal");
    let o = sigdel(&[
        "reshuffle",
        "--mnist-dir",
        data.to_str().unwrap(),
        "--buffer-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let frames = sigdel::data::read_idx_images(&out.join("temporal-t10k-frames-idx2-double.gz")).unwrap();
    let mut labels = sigdel::data::read_idx_labels(&out.join("temporal-t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(frames.len(), 30);
    labels.sort();
    let mut want: Vec<u8> = (0..30).map(|i| (i % 10) as u8).collect();
    want.sort();
    assert_eq!(labels, want);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(out.join("temporal-t10k.json")).unwrap()).unwrap();
    assert_eq!(meta["frames"], 30);
}
