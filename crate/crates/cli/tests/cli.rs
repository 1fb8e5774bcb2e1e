//! Drives the binary end to end on a small synthetic run.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 1
timesteps = 4

[data]
train = 400

[data.source]
format = "synthetic"
kind = "blobs"
count = 600
classes = 4
sample_shape = [16]
noise = 0.3

[model]
hidden = [24, 12]
epochs = 5

[calibration]
samples = 64
"#;

fn adacal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adacal"))
        .arg("--config")
        .arg(dir.join("small.toml"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn missing_inputs_exit_with_user_error() {
    let dir = setup();
    let out = adacal(dir.path(), &["convert"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("convert: missing"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = setup();
    std::fs::write(dir.path().join("small.toml"), "bogus = 1\n").unwrap();
    let out = adacal(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config:"));
}

#[test]
fn invalid_flag_values_are_rejected() {
    let dir = setup();
    let out = adacal(dir.path(), &["--timesteps", "0", "train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn convert_reports_every_spiking_layer() {
    let dir = setup();
    assert!(adacal(dir.path(), &["train"]).status.success());
    let out = adacal(dir.path(), &["--timesteps", "8", "convert"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("run/calibration_report.toml")).unwrap();
    let report: toml::Value = text.parse().unwrap();
    assert_eq!(report["timesteps"].as_integer(), Some(8));
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for (i, layer) in layers.iter().enumerate() {
        assert_eq!(layer["layer"].as_integer(), Some(i as i64));
        assert!(layer["v_th"].as_float().unwrap() > 0.0);
        for key in ["error", "clipping", "quantization", "unevenness", "propagated", "local"] {
            let v = layer[key].as_float().unwrap();
            assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
        }
    }
    // The first spiking layer sees a constant input current.
    assert_eq!(layers[0]["unevenness"].as_float(), Some(0.0));
    let configs = std::fs::read_to_string(dir.path().join("run/configs_base.toml")).unwrap();
    assert_eq!(configs.matches("[[layer]]").count(), 2);
}
