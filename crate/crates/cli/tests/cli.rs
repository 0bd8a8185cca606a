use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use patchdiff::io::save_image;
use patchdiff::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_patchdiff");

const TINY: &str = r#"
[schedule]
steps = 50

[denoiser]
stages = 1
channels = [8]
enc_resblocks = 1
dec_resblocks = 0
time_embed_dim = 8
norm_groups = 2

[training]
total_steps = 3
batch = 1
learning_rate = 1e-3

[sampling]
height = 16
width = 16
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn patchdiff")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn write_tiny(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let img = dir.join("tiny.png");
    let x = Tensor::<f32>::from_fn(3, 16, 16, |c, y, x| ((c * 7 + y * 3 + x) as f32 * 0.37).sin() * 0.8);
    save_image(&x, &img).unwrap();
    (cfg.display().to_string(), img.display().to_string())
}

#[test]
fn rf_reports_a_match() {
    let out = run(&["rf", "--config", "small"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("match"), "{}", text(&out));
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = run(&["sample", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("file not found"), "{}", text(&out));
}

#[test]
fn unknown_subcommand_exits_one() {
    assert_eq!(run(&["paint"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_image_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = write_tiny(dir.path());
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"not a png").unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--config", &cfg, "--image", bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn train_then_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, img) = write_tiny(dir.path());
    let train_dir = dir.path().join("train");
    let out = run(&["train", "--config", &cfg, "--image", &img, "--out", train_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    for f in ["checkpoint.bin", "losses.csv", "manifest.json"] {
        assert!(train_dir.join(f).exists(), "{f} missing");
    }
    let ckpt = train_dir.join("checkpoint.bin");
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        let out = run(&[
            "sample",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--seed",
            "7",
            "--count",
            "2",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out));
        bytes.push([fs::read(d.join("sample_000.png")).unwrap(), fs::read(d.join("sample_001.png")).unwrap()]);
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0][0], bytes[0][1]);

    let out = run(&["eval", "--image", &img, dir.path().join("a/sample_000.png").to_str().unwrap(), dir.path().join("a/sample_001.png").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("sifid"), "{}", text(&out));
}
