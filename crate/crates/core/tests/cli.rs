mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use locogan::checkpoint::payload_offsets;
use locogan::cli::checkpoint_name;

fn locogan(args: &[&str]) -> Output {
    locogan_env(args, &[])
}

fn locogan_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_locogan"));
    cmd.args(args).env_remove("LOCOGAN_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny pattern run for `steps` steps and returns the last checkpoint.
fn trained(dir: &Path, steps: u64, extra: &str) -> PathBuf {
    let config = common::write_tiny_run(dir, steps, extra);
    let out = dir.join("run");
    let o = locogan(&["train", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join(checkpoint_name(steps))
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn train_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 3, "");
    let run = dir.path().join("run");
    for step in [0, 2, 3] {
        assert!(run.join(checkpoint_name(step)).exists(), "step {step}");
    }
    let log = std::fs::read_to_string(run.join("metrics.log")).unwrap();
    let steps: Vec<&str> = log.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3"]);
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "steps = 1\n").unwrap();
    let o = locogan(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));

    std::fs::write(&config, "dataset = nowhere.png\ndataset_mode = pattern\n").unwrap();
    let o = locogan(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere.png"), "{}", stderr(&o));
}

#[test]
fn sampling_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), 1, "");
    let sample = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = locogan(&[
            "sample", "--checkpoint", s(&ckpt), "--width", "100", "--height", "37", "--seed", seed, "--out", s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b, c) = (sample("4", "a.png"), sample("4", "b.png"), sample("5", "c.png"));
    assert_eq!(png_size(&a), (100, 37));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn corrupted_checkpoint_names_the_array() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), 0, "");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let offsets = payload_offsets(&bytes).unwrap();
    let (name, &(start, len)) = offsets.iter().find(|(_, (_, len))| *len > 0).unwrap();
    bytes[start + len - 1] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = locogan(&["sample", "--checkpoint", s(&ckpt), "--width", "16", "--height", "16"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(name.as_str()), "{}", stderr(&o));
}

#[test]
fn verify_skips_spectral_when_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), 0, "spectral_norm = false\n");
    let report = dir.path().join("verify.txt");
    let o = locogan(&["verify", "--checkpoint", s(&ckpt), "--trials", "3", "--out", s(&report)]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    let spectral = text.lines().find(|l| l.starts_with("check=spectral")).unwrap();
    assert!(spectral.contains("status=skip"), "{spectral}");
    assert!(text.contains("result=pass"));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);
}

#[test]
fn thread_cap_must_be_positive() {
    for bad in ["0", "many", "-2"] {
        let o = locogan_env(&["verify", "--trials", "1"], &[("LOCOGAN_THREADS", bad)]);
        assert!(!o.status.success());
        assert!(stderr(&o).contains("LOCOGAN_THREADS"), "{}", stderr(&o));
    }
}

#[test]
fn tiling_needs_periodic_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    locogan::image_io::save_png(dir.path().join("texture.png"), &common::periodic_texture(7)).unwrap();
    let config = dir.path().join("linear.cfg");
    std::fs::write(
        &config,
        "dataset = texture.png\ndataset_mode = pattern\ngenerator_widths = 8,8,8,8\n\
         discriminator_widths = 4,4,8,8\nsteps = 0\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    assert!(locogan(&["train", "--config", s(&config), "--out", s(&out)]).status.success());
    let o = locogan(&["tile", "--checkpoint", s(&out.join(checkpoint_name(0))), "--out", s(&dir.path().join("t.png"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("period mismatch"), "{}", stderr(&o));
}

#[test]
fn editing_commands_write_their_images() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), 0, "");
    let d = dir.path();

    let frames = d.join("frames");
    let o = locogan(&[
        "interpolate", "--checkpoint", s(&ckpt), "--width", "64", "--height", "64", "--width-b", "96",
        "--height-b", "32", "--steps", "3", "--out", s(&frames),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sizes: Vec<_> = (0..3).map(|i| png_size(&frames.join(format!("frame-{i:03}.png")))).collect();
    assert_eq!(sizes, [(64, 64), (80, 48), (96, 32)]);

    let tile = d.join("tile.png");
    let o = locogan(&["tile", "--checkpoint", s(&ckpt), "--mode", "strip", "--out", s(&tile)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(png_size(&tile), (256, 64));
    let seams = std::fs::read_to_string(d.join("tile.seams.txt")).unwrap();
    assert!(seams.contains("period=64") && seams.contains("pass=true"), "{seams}");

    let moved = d.join("moved");
    let o = locogan(&[
        "transplant", "--checkpoint", s(&ckpt), "--width", "64", "--height", "64", "--region", "0,0,3,8",
        "--channels", "global", "--out", s(&moved),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["a.png", "b.png", "transplant.png"] {
        assert_eq!(png_size(&moved.join(name)), (64, 64));
    }
    let o = locogan(&[
        "transplant", "--checkpoint", s(&ckpt), "--width", "64", "--height", "64", "--region", "0,0,99,2",
        "--out", s(&moved),
    ]);
    assert!(!o.status.success());
}

#[test]
fn metrics_reports_a_distance() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), 0, "");
    let out = dir.path().join("metrics.txt");
    let o = locogan(&["metrics", "--checkpoint", s(&ckpt), "--samples", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("patch_distance="), "{text}");
}
