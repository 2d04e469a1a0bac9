use std::path::Path;
use std::process::{Command, Output};

use colora_lab::degrade::apply_recipe;
use colora_lab::harness::data::{load_image, read_manifest};

const SMALL: &str = "steps = 6\nbatch_size = 2\npatch_size = 16\n[model]\nwidth = 4\nenc_blocks = [1, 1]\nmiddle_blocks = 1\ndec_blocks = [1, 1]\n[faig]\nsteps = 3\nprobe_pairs = 2\n";

fn lab(dir: &Path, args: &[&str]) -> Output {
    lab_with(dir, "small.toml", args)
}

fn lab_with(dir: &Path, config: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colora-lab"))
        .current_dir(dir)
        .args(["--config", config, "--deterministic"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(dir, &["degrade", "--input-dir", "clean", "--output-dir", "task", "--synthetic", "3", "--size", "32", "--kinds", "noise", "--max-depth", "1", "--noise-sigma", "25,30", "--no-poisson"]);
    ok(dir, &["pretrain", "--clean-dir", "clean", "--out", "base.ckpt"]);
    ok(dir, &["finetune", "--base", "base.ckpt", "--task-dir", "task", "--out", "full.ckpt", "--strategy", "full"]);
    ok(dir, &["faig", "--baseline", "base.ckpt", "--target", "full.ckpt", "--probe-dir", "task", "--out", "faig.json"]);
    ok(dir, &["plan-ranks", "--faig-report", "faig.json", "--spec", "base.ckpt", "--out", "plan.json"]);
    ok(dir, &["finetune", "--base", "base.ckpt", "--task-dir", "task", "--out", "colora.adapters", "--strategy", "colora", "--faig-report", "faig.json"]);
    ok(dir, &["merge", "--base", "base.ckpt", "--adapters", "colora.adapters", "--out", "merged.ckpt"]);
    ok(dir, &["eval", "--model", "base.ckpt", "--adapters", "colora.adapters", "--task-dir", "task", "--out", "eval_adapted.json"]);
    ok(dir, &["eval", "--model", "merged.ckpt", "--task-dir", "task", "--out", "eval_merged.json"]);
}

#[test]
fn full_pipeline_runs_and_repeats_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for file in ["base.ckpt", "full.ckpt", "faig.json", "plan.json", "colora.adapters", "merged.ckpt", "eval_adapted.json", "task/manifest.jsonl"] {
        let read = |d: &Path| std::fs::read(d.join(file)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{file}");
    }
    let mean = |f: &str| {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join(f)).unwrap()).unwrap();
        v["mean_psnr_rgb"].as_f64().unwrap()
    };
    assert!((mean("eval_adapted.json") - mean("eval_merged.json")).abs() < 1e-3);
}

#[test]
fn manifest_replays_the_degraded_images() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(dir.path(), &["degrade", "--input-dir", "clean", "--output-dir", "task", "--synthetic", "2", "--size", "48", "--count", "2"]);
    let task = dir.path().join("task");
    let manifest = read_manifest(&task).unwrap();
    assert_eq!(manifest.len(), 4);
    for entry in manifest {
        let clean = load_image(&task.join("clean").join(&entry.name)).unwrap();
        let stored = load_image(&task.join("degraded").join(&entry.name)).unwrap();
        let replay = apply_recipe(&clean, &entry.recipe).unwrap().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        assert!(replay.max_abs_diff(&stored).unwrap() < 1e-6, "{}", entry.name);
    }
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    std::fs::write(dir.path().join("bad.toml"), "steps = 0\n").unwrap();
    let cases: [(&str, &[&str]); 5] = [
        ("small.toml", &["eval", "--model", "missing.ckpt", "--task-dir", "task"]),
        ("small.toml", &["pretrain", "--clean-dir", "empty", "--out", "x.ckpt"]),
        ("small.toml", &["plan-ranks", "--faig-report", "missing.json", "--out", "plan.json"]),
        ("small.toml", &["finetune", "--base", "a", "--task-dir", "t", "--out", "o", "--strategy", "everything"]),
        ("bad.toml", &["merge", "--base", "a", "--adapters", "b", "--out", "c"]),
    ];
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    for (config, args) in cases {
        let out = lab_with(dir.path(), config, args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}
