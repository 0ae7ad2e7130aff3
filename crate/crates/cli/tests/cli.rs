use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bofnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bofnet"))
        .args(args)
        .env_remove("BOFNET_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn bofnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_idx(dir: &Path, stem: &str, n: usize, seed: u8) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let label = (i % 10) as u8;
        labels.push(label);
        // One bright row per class keeps the task learnable.
        images.extend((0..28 * 28).map(|p| {
            if p / 28 == 2 * label as usize + 4 {
                200
            } else {
                (p as u8).wrapping_mul(31).wrapping_add(seed) / 8
            }
        }));
    }
    fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), labels).unwrap();
}

fn fixture_data() -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    let mnist = root.path().join("mnist");
    fs::create_dir(&mnist).unwrap();
    write_idx(&mnist, "train", 60, 1);
    write_idx(&mnist, "t10k", 20, 2);
    root
}

#[test]
fn config_prints_the_resolved_preset() {
    let out = bofnet(&["config", "--preset", "desk-mnist", "--epochs", "3", "--beta", "0.01"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["dataset"], "mnist");
    assert_eq!(json["epochs"], 3);
    assert_eq!(json["beta"], 0.01);
}

#[test]
fn config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let first = bofnet(&["config", "--preset", "desk-cifar10"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let path = dir.path().join("run.json");
    fs::write(&path, stdout(&first)).unwrap();
    let second = bofnet(&["config", "--config", path.to_str().unwrap()]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = bofnet(&["config", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("error [config]"), "{}", stderr(&out));
}

#[test]
fn beta_without_bof_pooling_is_rejected() {
    let out = bofnet(&["config", "--preset", "desk-mnist", "--pooling", "gmp", "--beta", "0.1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn missing_data_is_an_io_error_naming_the_file() {
    let empty = tempfile::tempdir().unwrap();
    let out = bofnet(&[
        "run",
        "--preset",
        "desk-mnist",
        "--data-dir",
        empty.path().to_str().unwrap(),
        "--out-dir",
        empty.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    assert!(stderr(&out).contains("train-images-idx3-ubyte"), "{}", stderr(&out));
}

#[test]
fn run_then_report_on_a_tiny_dataset() {
    let data = fixture_data();
    let out_dir = tempfile::tempdir().unwrap();
    let common = [
        "--dataset",
        "mnist",
        "--data-dir",
        data.path().to_str().unwrap(),
        "--out-dir",
        out_dir.path().to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "10",
        "--filters",
        "4",
        "--codebook-size",
        "4",
        "--beta",
        "0.01",
    ];
    let mut args = vec!["run"];
    args.extend(common);
    let out = bofnet(&args);
    assert!(out.status.success(), "{}", stderr(&out));

    let runs = out_dir.path().join("runs");
    let records: Vec<_> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(records.len(), 1);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(&records[0]).unwrap()).unwrap();
    assert_eq!(record["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(record["sizes"]["test"], 20);

    let report = bofnet(&["report", "--json", runs.to_str().unwrap()]);
    assert!(report.status.success(), "{}", stderr(&report));
    let reports: serde_json::Value = serde_json::from_str(&stdout(&report)).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 1);
    assert_eq!(reports[0]["trajectory"].as_array().unwrap().len(), 2);
}
