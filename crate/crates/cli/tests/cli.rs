use std::path::Path;
use std::process::Command;

use assert_cmd::prelude::*;
use predicates::prelude::*;

fn bin() -> Command {
    Command::cargo_bin("compositor-lab").unwrap()
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "seed = 7\n\
         canvas.width = 32\n\
         canvas.height = 32\n\
         model.widths = 6,12\n\
         model.temb_dim = 12\n\
         model.token_dim = 24\n\
         model.encoder_input = 16\n\
         model.encoder_widths = 6,12\n\
         model.norm_groups = 2\n\
         schedule.t = 50\n\
         train.batch_size = 2\n\
         train.steps.s1 = 2\n\
         train.steps.s2 = 2\n\
         train.steps.s3 = 1\n\
         train.steps.s4 = 1\n\
         train.steps.s5 = 1\n\
         train.steps.s6 = 1\n\
         sampler.steps = 3\n\
         sampler.n = 2\n\
         eval.steps = 3\n\
         split.test = 0.5\n",
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    bin().arg("no-such-command").assert().code(1);
    bin()
        .args(["gen-scenes", "--out", "/tmp/x"])
        .assert()
        .code(1); // missing --n
}

#[test]
fn help_exits_0() {
    bin()
        .arg("--help")
        .assert()
        .success()
        .stdout(predicate::str::contains("gen-scenes"));
}

#[test]
fn unknown_config_key_exits_1_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.s3.alhpa = 0.25\n").unwrap();
    bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-scenes", "--n", "1"])
        .args(["--out", dir.path().join("d").to_str().unwrap()])
        .assert()
        .code(1)
        .stderr(predicate::str::contains("train.s3.alhpa"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    bin()
        .args(["eval", "--ckpt", "/nonexistent/ckpt.bin"])
        .args(["--data", dir.path().to_str().unwrap()])
        .args(["--out", dir.path().join("out").to_str().unwrap()])
        .assert()
        .code(2);
}

#[test]
fn gen_scenes_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        bin()
            .args(["--config", cfg.to_str().unwrap()])
            .args(["gen-scenes", "--n", "4", "--out", out.to_str().unwrap()])
            .assert()
            .success();
    }
    let ma = std::fs::read(out_a.join("manifest.json")).unwrap();
    let mb = std::fs::read(out_b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let echo = std::fs::read_to_string(out_a.join("config.resolved.txt")).unwrap();
    assert!(echo.contains("seed = 7"));
    assert!(echo.contains("sampler.steps = 3"));
}

#[test]
fn cache_env_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    bin()
        .env("COMPOSITOR_LAB_CACHE", dir.path())
        .args(["--config", cfg.to_str().unwrap()])
        .args(["gen-scenes", "--n", "1", "--out", "cached"])
        .assert()
        .success();
    assert!(dir.path().join("cached/manifest.json").exists());
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let train = dir.path().join("train");
    bin()
        .args(["--config", cfg])
        .args(["gen-scenes", "--n", "4", "--out", data.to_str().unwrap()])
        .assert()
        .success();
    bin()
        .args(["--config", cfg, "train", "--stage", "all"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", train.to_str().unwrap()])
        .assert()
        .success();
    let final_ckpt = train.join("ckpt_final.bin");
    assert!(final_ckpt.exists());
    assert!(train.join("ckpt_s3_merged.bin").exists());
    assert!(train.join("metrics.csv").exists());
    // merge the s1/s2 artifacts again through the dedicated subcommand
    let merged = dir.path().join("merged.bin");
    bin()
        .args(["--config", cfg, "merge", "--alpha", "0.25"])
        .args(["--a", train.join("ckpt_s1.bin").to_str().unwrap()])
        .args(["--b", train.join("ckpt_s2.bin").to_str().unwrap()])
        .args(["--out", merged.to_str().unwrap()])
        .assert()
        .success();
    let a = std::fs::read(&merged).unwrap();
    let b = std::fs::read(train.join("ckpt_s3_merged.bin")).unwrap();
    assert_eq!(a, b);
    // unconstrained and bbox-hinted sampling
    let samples = dir.path().join("samples");
    bin()
        .args(["--config", cfg, "sample"])
        .args(["--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", samples.to_str().unwrap()])
        .args(["--bbox", "4,4,20,20", "--traj"])
        .assert()
        .success();
    let pngs: Vec<_> = std::fs::read_dir(&samples)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    assert!(pngs.iter().any(|n| n.ends_with(".mask.png")), "{pngs:?}");
    assert!(pngs.iter().any(|n| n.ends_with(".traj.png")), "{pngs:?}");
    assert!(pngs.iter().any(|n| n.ends_with(".json")), "{pngs:?}");
    bin()
        .args(["--config", cfg, "sample"])
        .args(["--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", samples.to_str().unwrap()])
        .args(["--bbox", "4,4"])
        .assert()
        .code(1); // malformed bbox is a usage error
    let eval = dir.path().join("eval");
    bin()
        .args(["--config", cfg, "eval", "--mode", "bbox"])
        .args(["--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", eval.to_str().unwrap()])
        .assert()
        .success();
    assert!(eval.join("report.json").exists());
    assert!(eval.join("report.csv").exists());
    bin()
        .args(["--config", cfg, "eval", "--mode", "sideways"])
        .args(["--ckpt", final_ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", eval.to_str().unwrap()])
        .assert()
        .code(1);
}

#[test]
fn pipeline_writes_manifest_and_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("pipe");
    bin()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["run-pipeline", "--n", "2", "--out", out.to_str().unwrap()])
        .assert()
        .success();
    assert!(out.join("manifest.json").exists());
    assert!(out.join("decisions.jsonl").exists());
}
