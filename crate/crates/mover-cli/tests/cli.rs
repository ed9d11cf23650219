//! End-to-end tests of the `mover` binary: every subcommand plus the exit
//! code contract (0 ok, 1 usage, 2 data/format, 3 numeric).

use std::path::Path;
use std::process::{Command, Output};

const MICRO_CONFIG: &str = "\
dim = 8
ffn_hidden = 16
view_blocks = 1
ray_blocks = 1
heads = 2
passthrough_features = true
samples_per_ray = 4
rays_per_step = 8
views_per_step = 2
source_views = 2
epsilon = 3
max_pairs = 4
image_size = 12
num_views = 5
num_targets = 1
train_steps = 3
finetune_steps = 2
seed = 0
";

fn mover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mover"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.cfg");
    std::fs::write(&cfg, MICRO_CONFIG).unwrap();
    let cfg = path_str(&cfg);
    let data = path_str(&dir.path().join("data"));
    let run = path_str(&dir.path().join("run"));
    let ckpt = format!("{run}/checkpoint.move");

    let out = mover(&["gen-scenes", "--config", &cfg, "--out", &data, "--count", "2"]);
    assert_ok(&out, "gen-scenes");
    assert!(Path::new(&data).join("scene_0/meta.txt").exists());
    assert!(Path::new(&data).join("scene_1/meta.txt").exists());

    let out = mover(&["train", "--config", &cfg, "--data", &data, "--out", &run]);
    assert_ok(&out, "train");
    assert!(Path::new(&ckpt).exists());

    let out = mover(&["inspect-checkpoint", "--checkpoint", &ckpt]);
    assert_ok(&out, "inspect-checkpoint");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("step = 3"), "missing step header:\n{stdout}");
    assert!(stdout.contains("model parameters"));

    let eval_csv = path_str(&dir.path().join("eval.csv"));
    let out = mover(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--data",
        &data,
        "--scene",
        "0",
        "--out",
        &eval_csv,
    ]);
    assert_ok(&out, "eval");
    let csv = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(csv.starts_with("view,psnr,ssim\n"), "bad csv header:\n{csv}");
    assert_eq!(csv.lines().count(), 2); // header + one target view

    let renders = path_str(&dir.path().join("renders"));
    let out = mover(&[
        "render",
        "--checkpoint",
        &ckpt,
        "--data",
        &data,
        "--scene",
        "0",
        "--out",
        &renders,
    ]);
    assert_ok(&out, "render");
    assert!(Path::new(&renders).join("render_4.ppm").exists());
    assert!(Path::new(&renders).join("depth_4.ppm").exists());

    let depths = path_str(&dir.path().join("depths"));
    let out = mover(&[
        "depth-maps",
        "--checkpoint",
        &ckpt,
        "--data",
        &data,
        "--scene",
        "1",
        "--out",
        &depths,
    ]);
    assert_ok(&out, "depth-maps");
    assert!(Path::new(&depths).join("depth_4.ppm").exists());

    let maps = path_str(&dir.path().join("maps"));
    let out = mover(&["expert-maps", "--checkpoint", &ckpt, "--data", &data, "--out", &maps]);
    assert_ok(&out, "expert-maps");
    assert!(Path::new(&maps).join("expert_usage.csv").exists());
    assert!(Path::new(&maps).join("expert_overlap.csv").exists());

    let ft = path_str(&dir.path().join("ft"));
    let out = mover(&[
        "finetune",
        "--checkpoint",
        &ckpt,
        "--data",
        &data,
        "--scene",
        "0",
        "--shots",
        "2",
        "--steps",
        "1",
        "--out",
        &ft,
    ]);
    assert_ok(&out, "finetune");
    assert!(Path::new(&ft).join("checkpoint.move").exists());
}

#[test]
fn gradcheck_passes_on_a_micro_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.cfg");
    std::fs::write(&cfg, MICRO_CONFIG).unwrap();
    let out = mover(&["gradcheck", "--config", &path_str(&cfg)]);
    assert_ok(&out, "gradcheck");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    for name in
        ["diversity-cv2", "symmetric-kl", "spatial-consistency", "moe-forward", "render-mse"]
    {
        assert!(stdout.contains(name), "missing check {name}:\n{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&mover(&["train", "--bogus"])), 1);
    assert_eq!(code(&mover(&["no-such-command"])), 1);
    assert_eq!(code(&mover(&[])), 1);
    // --help is not an error
    assert_eq!(code(&mover(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // unknown config key
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "nope = 1\n").unwrap();
    let out = mover(&[
        "gen-scenes",
        "--config",
        &path_str(&bad),
        "--out",
        &path_str(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    // corrupt checkpoint
    let junk = dir.path().join("junk.move");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&mover(&["inspect-checkpoint", "--checkpoint", &path_str(&junk)])), 2);

    // missing scene directory
    assert_eq!(
        code(&mover(&[
            "eval",
            "--checkpoint",
            &path_str(&junk),
            "--data",
            &path_str(dir.path()),
            "--scene",
            "7",
            "--out",
            &path_str(&dir.path().join("e.csv")),
        ])),
        2
    );
}
