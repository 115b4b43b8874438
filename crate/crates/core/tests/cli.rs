use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[gen]
n_train = 30
n_test = 6

[train]
batch_size = 10
cg_iters_per_batch = 3
pretrain_epochs = 1
finetune_epochs = 1
decoder_epochs = 2
"#;

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn reachgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reachgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn out_dir(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn gen_data_with_shipped_config_writes_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "runs");
    let cfg = shipped_config();
    let o = reachgen(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = Path::new(&out).join("id/dataset");
    for f in ["pairs.csv", "activations.csv", "manifest.json"] {
        assert!(ds.join(f).is_file(), "{f} missing");
    }
    assert!(Path::new(&out).join("id/manifests/gen-data.json").is_file());
    let pairs = fs::read_to_string(ds.join("pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 5001);
}

#[test]
fn missing_config_is_a_usage_error_with_no_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "runs");
    let missing = out_dir(&tmp, "nope.toml");
    let o = reachgen(&["gen-data", "--config", &missing, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&out).exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let cfg = shipped_config();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(reachgen(&["gen-data", "--config", cfg, "--method", "xx"]).status.code(), Some(2));
    assert_eq!(reachgen(&["gen-data", "--config", cfg, "--threads", "0"]).status.code(), Some(2));
    assert_eq!(reachgen(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_before_training_names_the_missing_stage() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "tiny.toml", TINY);
    let out = out_dir(&tmp, "runs");
    let o = reachgen(&["eval", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gen-data"), "{err}");
}

#[test]
fn validate_reports_by_severity() {
    let tmp = TempDir::new().unwrap();
    let shipped = shipped_config();
    let o = reachgen(&["validate", "--config", shipped.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ok"));

    let tall = write(&tmp, "tall.toml", "[gen.region]\ny_max = 0.50\n");
    let o = reachgen(&["validate", "--config", &tall]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("warning") && text.contains("0.20 m"), "{text}");

    let broken = write(&tmp, "broken.toml", "[arm]\nl1 = -0.3\n");
    let o = reachgen(&["validate", "--config", &broken]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("arm.l1"));

    let garbled = write(&tmp, "garbled.toml", "[gen]\nn_train = \n");
    let o = reachgen(&["validate", "--config", &garbled]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("garbled.toml:2:"));
}

#[test]
fn pipeline_is_reproducible_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "tiny.toml", TINY);
    let a = out_dir(&tmp, "a");
    let b = out_dir(&tmp, "b");
    for (out, threads) in [(&a, "1"), (&b, "2")] {
        let o = reachgen(&["pipeline", "--config", &cfg, "--out", out, "--threads", threads]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("method"));
    }
    for rel in [
        "summary.json",
        "id/report.json",
        "id/decoder.rgnn",
        "id/autoencoder.rgnn",
        "id/dataset/activations.csv",
        "oc/report.json",
        "oc/decoder.rgnn",
        "oc/plots/handpaths.csv",
    ] {
        let x = fs::read(Path::new(&a).join(rel)).unwrap();
        let y = fs::read(Path::new(&b).join(rel)).unwrap();
        assert!(x == y, "{rel} differs");
    }
    let manifest = fs::read_to_string(Path::new(&a).join("id/manifests/train-decoder.json")).unwrap();
    assert!(manifest.contains("id/autoencoder.rgnn"));
}

#[test]
fn seed_flag_changes_the_data() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "tiny.toml", TINY);
    let a = out_dir(&tmp, "a");
    let b = out_dir(&tmp, "b");
    assert_eq!(reachgen(&["gen-data", "--config", &cfg, "--out", &a]).status.code(), Some(0));
    assert_eq!(
        reachgen(&["gen-data", "--config", &cfg, "--out", &b, "--seed", "9"]).status.code(),
        Some(0)
    );
    let pa = fs::read(Path::new(&a).join("id/dataset/pairs.csv")).unwrap();
    let pb = fs::read(Path::new(&b).join("id/dataset/pairs.csv")).unwrap();
    assert_ne!(pa, pb);
}
