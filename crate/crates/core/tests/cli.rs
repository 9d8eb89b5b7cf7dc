//! End-to-end tests of the command-line surface.

use std::fs;
use std::path::Path;
use std::process::Command;

fn sdit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdit"))
}

const TINY_CONFIG: &str = "\
model.image_size = 8
model.channels = 3
model.patch_size = 4
model.frames_per_sequence = 3
model.hidden_dim = 8
model.depth = 1
model.num_heads = 2
model.timestep_embed_dim = 4
schedule.t_max = 5
data.clips = 2
data.frames_per_clip = 8
train.steps = 2
train.batch_size = 1
train.base_lr = 0.001
";

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for sub in ["a", "b"] {
        let status = sdit()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .args(["--count", "3", "--seed", "11", "--out"])
            .arg(dir.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("a/clip_0001.avd")).unwrap();
    let b = fs::read(dir.path().join("b/clip_0001.avd")).unwrap();
    assert_eq!(a, b, "same seed must produce identical clip bytes");

    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 3, "manifest line count equals clip count");

    // empty dataset
    let status = sdit()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--count", "0", "--out"])
        .arg(dir.path().join("empty"))
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = fs::read_to_string(dir.path().join("empty/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 0);
}

#[test]
fn train_zero_steps_writes_the_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = TINY_CONFIG.replace("train.steps = 2", "train.steps = 0");
    let cfg = dir.path().join("zero.cfg");
    fs::write(&cfg, cfg_text).unwrap();
    let status = sdit()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--out"])
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert!(status.success());

    let ckpt = fs::read(dir.path().join("run/checkpoint.sdt")).unwrap();
    let run_cfg = sdit::config::RunConfig::parse(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let init = sdit::model::init_params(&run_cfg.model, 3).unwrap();
    assert_eq!(ckpt, sdit::model::checkpoint_to_bytes(&run_cfg.model, &init));

    let loss = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1, "zero steps leaves only the header");
}

#[test]
fn train_runs_are_reproducible_and_resume_extends_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for sub in ["r1", "r2"] {
        let status = sdit()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", "5", "--deterministic", "--out"])
            .arg(dir.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let c1 = fs::read(dir.path().join("r1/checkpoint.sdt")).unwrap();
    let c2 = fs::read(dir.path().join("r2/checkpoint.sdt")).unwrap();
    assert_eq!(c1, c2, "same config and seed must reproduce the checkpoint bit-exactly");

    let loss = fs::read_to_string(dir.path().join("r1/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3, "header plus one row per step");
    assert!(loss.starts_with("step,loss,lr"));

    // resume continues the trace in the same directory
    let status = sdit()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--out"])
        .arg(dir.path().join("r1"))
        .arg("--resume")
        .arg(dir.path().join("r1/checkpoint.sdt"))
        .status()
        .unwrap();
    assert!(status.success());
    let loss = fs::read_to_string(dir.path().join("r1/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5, "resume appends two more rows");
    let last = loss.lines().last().unwrap();
    assert!(last.starts_with("3,"), "resumed steps continue the numbering: {last}");
}

fn train_tiny(dir: &Path) -> std::path::PathBuf {
    let cfg = write_tiny_config(dir);
    let status = sdit()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "7", "--out"])
        .arg(dir.join("model"))
        .status()
        .unwrap();
    assert!(status.success());
    dir.join("model/checkpoint.sdt")
}

#[test]
fn generate_rejects_impossible_lengths_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let out = sdit()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--strategy", "plain", "--frames", "9", "--out"])
        .arg(dir.path().join("gen"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "stderr should carry a message, got: {stderr}");
}

#[test]
fn anchored_single_row_generation_matches_plain_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    for (sub, strategy) in [("anch", "anchored"), ("plain", "plain")] {
        let status = sdit()
            .args(["generate", "--checkpoint"])
            .arg(&ckpt)
            .args(["--config"])
            .arg(&cfg)
            .args([
                "--strategy",
                strategy,
                "--frames",
                "3",
                "--seed",
                "4",
                "--driving-seed",
                "2",
                "--deterministic",
                "--out",
            ])
            .arg(dir.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("anch/video.avf")).unwrap();
    let p = fs::read(dir.path().join("plain/video.avf")).unwrap();
    assert_eq!(a, p, "a single-row anchored plan must reduce to plain sampling");
}

#[test]
fn anchored_row_dumps_share_the_anchor_frame() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    let status = sdit()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--config"])
        .arg(&cfg)
        .args([
            "--strategy",
            "anchored",
            "--frames",
            "7",
            "--seed",
            "9",
            "--deterministic",
            "--dump-rows",
            "--out",
        ])
        .arg(dir.path().join("rows"))
        .status()
        .unwrap();
    assert!(status.success());

    // T=3 rows over 7 frames: 3 rows, anchor at slot 1
    let plan = sdit::inference::plan_for_length(7, 3).unwrap();
    let mut anchor_bytes: Option<Vec<u8>> = None;
    for b in 0..plan.batch {
        let row = sdit::io::read_video(&dir.path().join(format!("rows/row_{b:02}.avf"))).unwrap();
        let frame = row
            .slice(ndarray::s![plan.anchor_slot, .., .., ..])
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect::<Vec<u8>>();
        match &anchor_bytes {
            None => anchor_bytes = Some(frame),
            Some(reference) => assert_eq!(reference, &frame, "row {b} anchor differs"),
        }
    }
}

#[test]
fn evaluate_writes_the_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let cfg = dir.path().join("tiny.cfg");

    // driving clip on disk
    let status = sdit()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--count", "1", "--seed", "2", "--out"])
        .arg(dir.path().join("data"))
        .status()
        .unwrap();
    assert!(status.success());

    let status = sdit()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--config"])
        .arg(&cfg)
        .args(["--strategy", "anchored", "--frames", "7", "--driving"])
        .arg(dir.path().join("data/clip_0000.avd"))
        .args(["--out"])
        .arg(dir.path().join("gen"))
        .status()
        .unwrap();
    assert!(status.success());

    let status = sdit()
        .args(["evaluate", "--generated"])
        .arg(dir.path().join("gen/video.avf"))
        .arg("--driving")
        .arg(dir.path().join("data/clip_0000.avd"))
        .arg("--out")
        .arg(dir.path().join("metrics.csv"))
        .status()
        .unwrap();
    assert!(status.success());

    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "metric,value");
    assert_eq!(lines.len(), 5, "four metrics plus header: {csv}");
    for line in &lines[1..] {
        let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(value.is_finite());
    }
}

#[test]
fn ablate_writes_ratio_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let status = sdit()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--bins", "2", "--evals", "2", "--seed", "1", "--out"])
        .arg(dir.path().join("ablation.csv"))
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin_lo,bin_hi,variant,mse,ratio");
    assert_eq!(lines.len(), 1 + 4 * 2, "4 variants x 2 bins plus header");
    // the unguided rows must carry ratio 1
    for line in lines[1..].iter().filter(|l| l.contains("unguided")) {
        let ratio: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!((ratio - 1.0).abs() < 1e-12);
    }
}
