// Calibration harness for the heavy acceptance runs: timing probes, a
// mini consistency study, and a guidance-ablation dry run.

use ndarray::s;
use sdit::config::{DataConfig, ScheduleConfig};
use sdit::diffusion::{train, TrainConfig};
use sdit::inference::{generate_video, ExecMode, Strategy};
use sdit::metrics::{
    consistency_curve, guidance_ablation, EmbeddingConfig, GuidanceVariant,
};
use sdit::model::{init_params, save_checkpoint, load_checkpoint, ModelConfig};
use sdit::synthetic::{generate_clip, SceneSpec};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("step-time") => step_time(),
        Some("gen-time") => gen_time(),
        Some("train-default") => train_default(&args[1..]),
        Some("mini-curve") => mini_curve(&args[1..]),
        Some("ablate-dry") => ablate_dry(&args[1..]),
        other => eprintln!("unknown or missing subcommand: {other:?}"),
    }
}

fn desk_setup() -> (ModelConfig, ScheduleConfig, DataConfig) {
    (ModelConfig::desk_default(), ScheduleConfig::default(), DataConfig::default())
}

fn step_time() {
    let (cfg, sched_cfg, data) = desk_setup();
    let sched = sched_cfg.build().unwrap();
    let clips = data.load(cfg.image_size).unwrap();
    let mut store = init_params(&cfg, 0).unwrap();
    let tc = TrainConfig { steps: 6, batch_size: 2, ..TrainConfig::default() };
    let t0 = Instant::now();
    let trace = train(&cfg, &mut store, &clips, &sched, &tc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("6 steps (batch 2) took {dt:.1}s -> {:.2}s/step; losses {:?}", dt / 6.0, trace);
}

fn gen_time() {
    let (cfg, sched_cfg, _) = desk_setup();
    let sched = sched_cfg.build().unwrap();
    let mut store = init_params(&cfg, 0).unwrap();
    store.randomize(0.02, 1);
    for n in [12usize, 28] {
        let clip = generate_clip(&SceneSpec::random(1), n, 32, 32).unwrap();
        for strategy in [Strategy::Anchored, Strategy::MultiDiffusion] {
            let t0 = Instant::now();
            let v = generate_video(&cfg, &store, &clip, strategy, n, &sched, 0, ExecMode::Parallel).unwrap();
            println!("{strategy:?} n={n}: {:.1}s ({} frames)", t0.elapsed().as_secs_f64(), v.dim().0);
        }
    }
}

fn train_default(args: &[String]) {
    let steps: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(600);
    let out = args.get(1).cloned().unwrap_or_else(|| "/tmp/desk_model".into());
    let resume: Option<String> = args.get(2).cloned();
    let (cfg, sched_cfg, data) = desk_setup();
    let sched = sched_cfg.build().unwrap();
    let clips = data.load(cfg.image_size).unwrap();
    let mut store = match &resume {
        Some(p) => load_checkpoint(std::path::Path::new(p)).unwrap().1,
        None => init_params(&cfg, 0).unwrap(),
    };
    let tc = TrainConfig { steps, batch_size: 2, ..TrainConfig::default() };
    let t0 = Instant::now();
    let trace = train(&cfg, &mut store, &clips, &sched, &tc).unwrap();
    let early: f64 = trace[..20.min(trace.len())].iter().sum::<f64>() / 20f64.min(trace.len() as f64);
    let late: f64 = trace[trace.len().saturating_sub(20)..].iter().sum::<f64>() / 20f64.min(trace.len() as f64);
    println!(
        "{steps} steps in {:.0}s; loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        early,
        late
    );
    std::fs::create_dir_all(&out).unwrap();
    save_checkpoint(std::path::Path::new(&format!("{out}/checkpoint.sdt")), &cfg, &store).unwrap();
    println!("saved {out}/checkpoint.sdt");
}

fn mini_curve(args: &[String]) {
    let ckpt = args.first().cloned().unwrap_or_else(|| "/tmp/desk_model/checkpoint.sdt".into());
    let seeds: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lengths: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![12, 28]);
    let (_, sched_cfg, _) = desk_setup();
    let sched = sched_cfg.build().unwrap();
    let (cfg, store) = load_checkpoint(std::path::Path::new(&ckpt)).unwrap();
    let embed = EmbeddingConfig::default();
    let t0 = Instant::now();
    let rows = consistency_curve(
        &cfg,
        &store,
        &lengths,
        &[Strategy::Anchored, Strategy::MultiDiffusion],
        seeds,
        0,
        &sched,
        &embed,
        ExecMode::Parallel,
    )
    .unwrap();
    println!("curve took {:.0}s", t0.elapsed().as_secs_f64());
    for r in rows {
        println!("{:?} len {}: mean self-csim {:.4} over {} runs", r.strategy, r.length, r.mean_self_csim, r.runs);
    }
}

fn ablate_dry(args: &[String]) {
    let steps: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(400);
    let seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let cfg = ModelConfig {
        image_size: 16,
        channels: 3,
        patch_size: 2,
        frames_per_sequence: 2,
        hidden_dim: 64,
        depth: 2,
        num_heads: 4,
        global_dim: sdit::synthetic::global_signal_dim(3),
        local_dim: sdit::synthetic::LOCAL_SIGNAL_DIM,
        timestep_embed_dim: 32,
        predict_sigma: false,
    };
    let data = DataConfig { clips: 32, frames_per_clip: 12, seed: 7, dir: None };
    let clips = data.load(cfg.image_size).unwrap();
    let sched = ScheduleConfig::default().build().unwrap();
    let t0 = Instant::now();
    for seed in 0..seeds {
        let tc = TrainConfig {
            steps,
            batch_size: 2,
            base_lr: 2e-3,
            seed,
            ..TrainConfig::default()
        };
        let rows = guidance_ablation(&cfg, &clips, &sched, &tc, 10, 8, seed).unwrap();
        println!("seed {seed} ({:.0}s):", t0.elapsed().as_secs_f64());
        for variant in GuidanceVariant::ALL {
            let ratios: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| (r.ratio * 1000.0).round() / 1000.0)
                .collect();
            let mid: f64 = rows
                .iter()
                .filter(|r| r.variant == variant)
                .skip(3)
                .take(4)
                .map(|r| r.ratio)
                .sum::<f64>()
                / 4.0;
            println!("  {:>12}: mid-mean {:.3} bins {:?}", variant.label(), mid, ratios);
        }
    }
    let _ = s![0..1, .., .., ..]; // keep ndarray macro import alive
}
