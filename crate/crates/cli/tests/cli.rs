use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idd_core::checkpoint::save_checkpoint;
use idd_core::{load_image, save_image, synth, total_variation, Generator, Image, ModelConfig};

fn idd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    checkpoint: PathBuf,
    content: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("model.ckpt");
    let config = ModelConfig {
        stem_channels: 4,
        channel_width: 6,
        ..ModelConfig::default()
    };
    let g = Generator::init(config.clone(), 3).unwrap();
    save_checkpoint(g.params(), &config, &checkpoint).unwrap();
    let content = dir.path().join("content.png");
    save_image(&synth::content_image(32, 40, 5).unwrap(), &content).unwrap();
    Fixture {
        dir,
        checkpoint,
        content,
    }
}

fn write_train_config(dir: &Path, extra: &str) -> PathBuf {
    synth::write_demo_data(&dir.join("data"), 3, 2, 24, 1).unwrap();
    let path = dir.join("train.toml");
    let text = format!(
        r#"
style_image = "data/style.png"
content_dir = "data/content"
output_dir = "run"
image_size = 24
batch_size = 2
total_steps = 4
checkpoint_every = 2
log_every = 1

[model]
stem_channels = 4
channel_width = 6
{extra}
"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_exits_2() {
    let o = idd(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn zero_steps_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path(), "");
    let o = idd(&["train", "--config", s(&cfg), "--set", "total_steps=0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_prints_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path(), "");
    let o = idd(&["train", "--config", s(&cfg)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let ckpt = PathBuf::from(stdout(&o));
    assert!(ckpt.exists());
    assert_eq!(ckpt, dir.path().join("run").join("final.ckpt"));
    let log = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn absurd_learning_rate_exits_4_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path(), "");
    let o = idd(&["train", "--config", s(&cfg), "--set", "learning_rate=1e6"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("at step 1"), "{err}");
}

#[test]
fn empty_content_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path(), "");
    fs::create_dir_all(dir.path().join("empty")).unwrap();
    let o = idd(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "content_dir=\"empty\"",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn stylize_smooth_is_byte_reproducible() {
    let f = fixture();
    let a = f.dir.path().join("a.png");
    let b = f.dir.path().join("b.png");
    for out in [&a, &b] {
        let o = idd(&[
            "stylize",
            "--checkpoint",
            s(&f.checkpoint),
            "--content",
            s(&f.content),
            "--out",
            s(out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn stylize_noise_depends_on_seed() {
    let f = fixture();
    let run = |seed: &str, name: &str| {
        let out = f.dir.path().join(name);
        let o = idd(&[
            "stylize",
            "--checkpoint",
            s(&f.checkpoint),
            "--content",
            s(&f.content),
            "--input-mode",
            "smooth_noise",
            "--sigma",
            "0.2",
            "--seed",
            seed,
            "--out",
            s(&out),
        ]);
        assert_eq!(o.status.code(), Some(0));
        fs::read(out).unwrap()
    };
    assert_ne!(run("1", "n1.png"), run("2", "n2.png"));
    assert_eq!(run("1", "n1.png"), run("1", "n1b.png"));
}

#[test]
fn stylize_texture_raw_writes_image() {
    let f = fixture();
    let out = f.dir.path().join("tex.png");
    let o = idd(&[
        "stylize",
        "--checkpoint",
        s(&f.checkpoint),
        "--content",
        s(&f.content),
        "--branch",
        "texture",
        "--input-mode",
        "raw",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let img = load_image(&out).unwrap();
    assert_eq!((img.height(), img.width()), (32, 40));
}

#[test]
fn stylize_missing_checkpoint_exits_5() {
    let f = fixture();
    let out = f.dir.path().join("x.png");
    let o = idd(&[
        "stylize",
        "--checkpoint",
        "/nope.ckpt",
        "--content",
        s(&f.content),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn future_checkpoint_version_exits_2() {
    let f = fixture();
    let mut bytes = fs::read(&f.checkpoint).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    let bad = f.dir.path().join("future.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = f.dir.path().join("x.png");
    let o = idd(&[
        "stylize",
        "--checkpoint",
        s(&bad),
        "--content",
        s(&f.content),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_grid_layout() {
    let f = fixture();
    let out = f.dir.path().join("grid.png");
    let o = idd(&[
        "compare",
        "--checkpoint",
        s(&f.checkpoint),
        "--content",
        s(&f.content),
        "--sigma",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let grid = load_image(&out).unwrap();
    assert_eq!(grid.width(), 4 * 40 + 3 * 2);
    assert_eq!(grid.height(), 32);
    let panel = |i: usize| grid.crop(0, i * 42, 32, 40).unwrap();
    assert_eq!(panel(2), panel(3));
    assert_eq!(panel(0), load_image(&f.content).unwrap());
    let sep = grid.crop(0, 40, 32, 2).unwrap();
    assert!(sep
        .data()
        .iter()
        .all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
}

#[test]
fn metrics_report_schema_and_ratio() {
    let f = fixture();
    let eval = f.dir.path().join("eval");
    fs::create_dir_all(&eval).unwrap();
    for i in 0..3 {
        save_image(
            &synth::content_image(24, 24, i).unwrap(),
            eval.join(format!("e{i}.png")),
        )
        .unwrap();
    }
    let report = f.dir.path().join("report.txt");
    let o = idd(&[
        "metrics",
        "--checkpoint",
        s(&f.checkpoint),
        "--eval-dir",
        s(&eval),
        "--out",
        s(&report),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let ratio: f64 = stdout(&o).parse().unwrap();
    assert!(ratio.is_finite() && ratio > 0.0);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 2 * 3 + 3);
    assert!(text.lines().last().unwrap().starts_with("ratio "));

    let o = idd(&[
        "metrics",
        "--checkpoint",
        s(&f.checkpoint),
        "--eval-dir",
        s(&eval),
        "--sigma",
        "0",
        "--out",
        s(&report),
    ]);
    assert_eq!(stdout(&o), "1.000000");
}

#[test]
fn metrics_empty_dir_exits_3() {
    let f = fixture();
    let eval = f.dir.path().join("empty");
    fs::create_dir_all(&eval).unwrap();
    let o = idd(&[
        "metrics",
        "--checkpoint",
        s(&f.checkpoint),
        "--eval-dir",
        s(&eval),
        "--out",
        s(&f.dir.path().join("r.txt")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn filter_rules() {
    let dir = tempfile::tempdir().unwrap();
    let constant = dir.path().join("const.png");
    save_image(&Image::filled(20, 20, 3, 100.0 / 255.0).unwrap(), &constant).unwrap();
    let out = dir.path().join("out.png");

    let o = idd(&[
        "filter",
        "--input",
        s(&constant),
        "--radius",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = idd(&[
        "filter",
        "--input",
        s(&constant),
        "--radius",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(load_image(&out).unwrap(), load_image(&constant).unwrap());

    let photo = dir.path().join("photo.png");
    let busy = synth::style_image(48, 48, 4).unwrap();
    save_image(&busy, &photo).unwrap();
    let o = idd(&[
        "filter",
        "--input",
        s(&photo),
        "--radius",
        "3",
        "--eps",
        "0.01",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let before = total_variation(&load_image(&photo).unwrap()).unwrap();
    let after = total_variation(&load_image(&out).unwrap()).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn features_dump_lists_files() {
    let f = fixture();
    let out = f.dir.path().join("maps");
    let o = idd(&[
        "features",
        "--checkpoint",
        s(&f.checkpoint),
        "--content",
        s(&f.content),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let listed: Vec<&str> = std::str::from_utf8(&o.stdout).unwrap().lines().collect();
    assert_eq!(listed.len(), 1 + 2 + 5);
    assert!(listed.iter().all(|p| Path::new(p).exists()));
}

#[test]
fn synth_data_writes_tree() {
    let dir = tempfile::tempdir().unwrap();
    let o = idd(&[
        "synth-data",
        "--out",
        s(dir.path()),
        "--train",
        "2",
        "--eval",
        "1",
        "--size",
        "24",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_dir(dir.path().join("content")).unwrap().count(), 2);
    assert!(dir.path().join("style.png").exists());
}

#[test]
fn unknown_flag_exits_2() {
    let o = idd(&["stylize", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}
