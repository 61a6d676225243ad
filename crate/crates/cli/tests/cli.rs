//! End-to-end checks of the command-line surface: subcommand wiring, exit
//! codes, reproducibility of generated artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gazediff")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("GAZEDIFF_OUT")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(
        &path,
        r#"
seed = 21

[schedule]
steps = 40

[model]
layers = 2
frames = 3
height = 16
width = 16
widths = [8]
text_dim = 8
time_dim = 8
groups = 2

[encoder]
text_dim = 8
vision_dim = 8
vision_tokens = 16

[causal]
n_tokens = 16
token_dim = 8
fuse_hidden = 8
score_hidden = 4

[scenario]
frames = 3
height = 16
width = 16
collision_frame_min = 1
collision_frame_max = 2
gaze_kernel = 5

[train]
steps = 6
batch = 2
lr = 1e-3

[infer]
ddim_steps = 4
"#,
    )
    .unwrap();
    path
}

fn hash_dir_files(dir: &Path) -> String {
    let mut paths: Vec<PathBuf> = walk(dir);
    paths.sort();
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(p.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        hasher.update(std::fs::read(&p).unwrap());
    }
    format!("{:x}", hasher.finalize())
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_dir() {
            out.extend(walk(&entry.path()));
        } else {
            out.push(entry.path());
        }
    }
    out
}

#[test]
fn gen_data_idempotent_and_zero_clip_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = run(&["gen-data", "--config", cfg, "--n", "0", "--out", "empty"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("empty/manifest.tsv")).unwrap();
    assert!(manifest.starts_with("gazediff-manifest\tv1\tcount=0"));

    let out = run(&["gen-data", "--config", cfg, "--n", "3", "--out", "a"], dir.path());
    assert!(out.status.success());
    let out = run(&["gen-data", "--config", cfg, "--n", "3", "--out", "b"], dir.path());
    assert!(out.status.success());
    assert_eq!(hash_dir_files(&dir.path().join("a")), hash_dir_files(&dir.path().join("b")));

    // different seed changes the data
    let out = run(
        &["gen-data", "--config", cfg, "--n", "3", "--seed", "99", "--out", "c"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_ne!(hash_dir_files(&dir.path().join("a")), hash_dir_files(&dir.path().join("c")));
}

#[test]
fn train_chain_guard_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    run(&["gen-data", "--config", cfg, "--n", "2", "--out", "data"], dir.path());

    // stage 1 without a stage-0 checkpoint: chain error, exit 4
    let out = run(
        &["train", "--config", cfg, "--stage", "1", "--manifest", "data/manifest.tsv", "--out", "t1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn infer_mode_guards_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    assert!(run(&["gen-data", "--config", cfg, "--n", "2", "--out", "data"], dir.path())
        .status
        .success());
    let out = run(
        &["train", "--config", cfg, "--stage", "0", "--manifest", "data/manifest.tsv", "--out", "s0"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // t2v with a source clip is a usage error (exit 2)
    let out = run(
        &[
            "infer", "--mode", "t2v", "--prompt", "a car merges", "--checkpoint",
            "s0/stage0.ckpt", "--source", "data/clip_00000", "--out", "bad",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // v2v without a source is a usage error
    let out = run(
        &[
            "infer", "--mode", "v2v", "--prompt", "a car merges", "--checkpoint",
            "s0/stage0.ckpt", "--out", "bad2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // same seed and flags twice: identical frame bytes at eta = 0
    for name in ["g1", "g2"] {
        let out = run(
            &[
                "infer", "--mode", "t2v", "--prompt", "a pedestrian crosses", "--checkpoint",
                "s0/stage0.ckpt", "--seed", "5", "--out", name,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let h1 = hash_dir_files(&dir.path().join("g1/frames"));
    let h2 = hash_dir_files(&dir.path().join("g2/frames"));
    assert_eq!(h1, h2);

    // resolved config written next to outputs
    assert!(dir.path().join("g1/resolved_config.toml").exists());
    assert!(dir.path().join("g1/grid.png").exists());
}

#[test]
fn eval_reports_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    run(&["gen-data", "--config", cfg, "--n", "3", "--out", "data"], dir.path());
    run(
        &["train", "--config", cfg, "--stage", "0", "--manifest", "data/manifest.tsv", "--out", "s0"],
        dir.path(),
    );
    for name in ["e1", "e2"] {
        let out = run(
            &[
                "infer", "--mode", "v2v", "--prompt", "a truck stops abruptly ahead",
                "--checkpoint", "s0/stage0.ckpt", "--source", "data/clip_00000", "--seed", "3",
                "--out", name,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["r1", "r2"] {
        let out = run(
            &[
                "eval", "--run", "e1", "--run", "e2", "--reference", "data/manifest.tsv",
                "--out", name,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("r1/metrics.txt")).unwrap();
    let b = std::fs::read(dir.path().join("r2/metrics.txt")).unwrap();
    assert_eq!(a, b);

    // per-metric error: afd explicitly requested without source boxes
    let out = run(
        &[
            "infer", "--mode", "t2v", "--prompt", "a car merges", "--checkpoint",
            "s0/stage0.ckpt", "--out", "t2v_run",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let out = run(
        &["eval", "--run", "t2v_run", "--metrics", "afd", "--out", "r3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn out_root_env_var_roots_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = Command::new(bin())
        .args(["gen-data", "--config", cfg_path.to_str().unwrap(), "--n", "1", "--out", "rooted"])
        .current_dir(dir.path())
        .env("GAZEDIFF_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("root/rooted/manifest.tsv").exists());
    assert!(!dir.path().join("rooted").exists());
}
