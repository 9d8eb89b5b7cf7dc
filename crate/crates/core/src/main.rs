//! Command-line surface: dataset generation, training, long-video
//! generation, evaluation and the guidance ablation.

use clap::{Parser, Subcommand};
use ndarray::s;
use sdit::config::{RunConfig, ScheduleConfig};
use sdit::diffusion::train;
use sdit::error::{Error, Result};
use sdit::inference::{
    anchored_generate_rows, generate_video, plan_for_length, plan_local_signals, reorder_frames,
    stack_rows, ExecMode, Strategy,
};
use sdit::io::{dump_pngs, read_video, write_csv, write_video};
use sdit::metrics::{
    csim, extract_control_points, guidance_ablation, lmse, self_csim, EmbeddingConfig,
};
use sdit::model::{init_params, load_checkpoint, save_checkpoint};
use sdit::synthetic::{
    clip_to_bytes, encode_global_signal, generate_clip, read_clip, SceneSpec, EXPRESSIVE_INDICES,
};
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sdit", version, about = "Sequence diffusion transformer with anchored long-video inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a directory of synthetic driving clips.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of clips (defaults to data.clips from the config).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also dump every frame as PNG.
        #[arg(long)]
        png: bool,
    },
    /// Train a model and write a checkpoint plus a loss trace.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Force single-threaded execution.
        #[arg(long)]
        deterministic: bool,
    },
    /// Generate a long video from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional config supplying the diffusion schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "anchored")]
        strategy: String,
        /// Output video length in frames.
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Driving clip file (AVD1); defaults to a synthetic scene.
        #[arg(long)]
        driving: Option<PathBuf>,
        /// Scene seed of the synthetic driving clip.
        #[arg(long, default_value_t = 0)]
        driving_seed: u64,
        /// Force single-threaded execution for exact reproducibility.
        #[arg(long)]
        deterministic: bool,
        /// For the anchored strategy, dump each generated row sequence.
        #[arg(long)]
        dump_rows: bool,
        #[arg(long)]
        png: bool,
    },
    /// Compute metrics between a generated video and its driving clip.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of csim,self_csim,lmse,expressive_lmse.
        #[arg(long, default_value = "csim,self_csim,lmse,expressive_lmse")]
        metrics: String,
    },
    /// Train the four guidance variants and write MSE ratios per timestep bin.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 8)]
        evals: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen_data(
    config: Option<PathBuf>,
    out: PathBuf,
    count: Option<usize>,
    seed: Option<u64>,
    png: bool,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let count = count.unwrap_or(cfg.data.clips);
    let seed = seed.unwrap_or(cfg.data.seed);
    fs::create_dir_all(&out)?;
    let mut manifest = String::new();
    for i in 0..count {
        let scene_seed = seed.wrapping_add(i as u64);
        let spec = SceneSpec::random(scene_seed);
        let clip = generate_clip(&spec, cfg.data.frames_per_clip, cfg.model.image_size, cfg.model.image_size)?;
        let name = format!("clip_{i:04}.avd");
        fs::write(out.join(&name), clip_to_bytes(&clip))?;
        manifest.push_str(&format!("{name} seed={scene_seed}\n"));
        if png {
            dump_pngs(&out, &clip.frames, &format!("clip_{i:04}_frame"))?;
        }
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {count} clips to {}", out.display());
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    resume: Option<PathBuf>,
    deterministic: bool,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.deterministic = deterministic;
    fs::create_dir_all(&out)?;
    let clips = cfg.data.load(cfg.model.image_size)?;
    let sched = cfg.schedule.build()?;

    let loss_path = out.join("loss.csv");
    let (mut store, step_offset, mut csv) = match &resume {
        Some(ckpt) => {
            let (loaded_cfg, store) = load_checkpoint(ckpt)?;
            if loaded_cfg != cfg.model {
                return Err(Error::Config(
                    "checkpoint model config does not match the run config".into(),
                ));
            }
            let existing = fs::read_to_string(&loss_path).unwrap_or_else(|_| "step,loss,lr\n".into());
            let offset = existing.lines().count().saturating_sub(1);
            (store, offset, existing)
        }
        None => (init_params(&cfg.model, cfg.train.seed)?, 0, "step,loss,lr\n".to_string()),
    };

    let trace = train(&cfg.model, &mut store, &clips, &sched, &cfg.train)?;
    for (i, loss) in trace.iter().enumerate() {
        let lr = sdit::diffusion::cosine_lr(i, cfg.train.steps, cfg.train.base_lr);
        csv.push_str(&format!("{},{},{}\n", step_offset + i, loss, lr));
    }
    fs::write(&loss_path, csv)?;
    save_checkpoint(&out.join("checkpoint.sdt"), &cfg.model, &store)?;
    fs::write(out.join("run.cfg"), cfg.to_text())?;
    println!(
        "trained {} steps; final loss {:.6}; checkpoint at {}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        out.join("checkpoint.sdt").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    strategy: String,
    frames: usize,
    seed: u64,
    driving: Option<PathBuf>,
    driving_seed: u64,
    deterministic: bool,
    dump_rows: bool,
    png: bool,
) -> Result<()> {
    let strategy: Strategy = strategy.parse()?;
    let (model_cfg, store) = load_checkpoint(&checkpoint)?;
    let sched = match &config {
        Some(p) => RunConfig::load(p)?.schedule.build()?,
        None => ScheduleConfig::default().build()?,
    };
    let clip = match &driving {
        Some(p) => read_clip(p)?,
        None => generate_clip(
            &SceneSpec::random(driving_seed),
            frames.max(2),
            model_cfg.image_size,
            model_cfg.image_size,
        )?,
    };
    let exec = if deterministic { ExecMode::Sequential } else { ExecMode::Parallel };
    fs::create_dir_all(&out)?;

    let video = if strategy == Strategy::Anchored && dump_rows {
        let plan = plan_for_length(frames, model_cfg.frames_per_sequence)?;
        let global = encode_global_signal(&clip, 0)?;
        let locals = plan_local_signals(&clip, &plan)?;
        let rows =
            anchored_generate_rows(&model_cfg, &store, &plan, &global, &locals, &sched, seed, exec)?;
        for (b, row) in rows.iter().enumerate() {
            write_video(&out.join(format!("row_{b:02}.avf")), row)?;
        }
        println!("anchor slot {} of {} rows", plan.anchor_slot, plan.batch);
        reorder_frames(&stack_rows(&rows), &plan)?
    } else {
        generate_video(&model_cfg, &store, &clip, strategy, frames, &sched, seed, exec)?
    };
    write_video(&out.join("video.avf"), &video)?;
    if png {
        dump_pngs(&out, &video, "frame_")?;
    }
    println!("wrote {} frames to {}", video.dim().0, out.join("video.avf").display());
    Ok(())
}

fn cmd_evaluate(generated: PathBuf, driving: PathBuf, out: PathBuf, metrics: String) -> Result<()> {
    let video = read_video(&generated)?;
    let clip = read_clip(&driving)?;
    let n = video.dim().0;
    if clip.num_frames() < n {
        return Err(Error::Validation(format!(
            "driving clip has {} frames, generated video has {n}",
            clip.num_frames()
        )));
    }
    let driving_frames = clip.frames.slice(s![0..n, .., .., ..]).to_owned();
    let embed = EmbeddingConfig::default();
    let mut rows = Vec::new();
    for metric in metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let value = match metric {
            "csim" => csim(clip.frames.slice(s![0, .., .., ..]), &video, &embed)?,
            "self_csim" => self_csim(&video, &driving_frames, &embed)?,
            "lmse" => {
                let pts = extract_control_points(&video, &clip.spec)?;
                lmse(&pts, &clip.control_points.slice(s![0..n, .., ..]).to_owned(), None)?
            }
            "expressive_lmse" => {
                let pts = extract_control_points(&video, &clip.spec)?;
                lmse(
                    &pts,
                    &clip.control_points.slice(s![0..n, .., ..]).to_owned(),
                    Some(&EXPRESSIVE_INDICES),
                )?
            }
            other => return Err(Error::Config(format!("unknown metric '{other}'"))),
        };
        rows.push(vec![metric.to_string(), format!("{value}")]);
    }
    write_csv(&out, "metric,value", &rows)?;
    println!("wrote {} metrics to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_ablate(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    bins: usize,
    evals: usize,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let clips = cfg.data.load(cfg.model.image_size)?;
    let sched = cfg.schedule.build()?;
    let rows = guidance_ablation(&cfg.model, &clips, &sched, &cfg.train, bins, evals, cfg.train.seed)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bin_lo.to_string(),
                r.bin_hi.to_string(),
                r.variant.label().to_string(),
                format!("{}", r.mse),
                format!("{}", r.ratio),
            ]
        })
        .collect();
    write_csv(&out, "bin_lo,bin_hi,variant,mse,ratio", &csv_rows)?;
    println!("wrote {} ablation rows to {}", csv_rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, count, seed, png } => cmd_gen_data(config, out, count, seed, png),
        Command::Train { config, out, seed, resume, deterministic } => {
            cmd_train(config, out, seed, resume, deterministic)
        }
        Command::Generate {
            checkpoint,
            config,
            out,
            strategy,
            frames,
            seed,
            driving,
            driving_seed,
            deterministic,
            dump_rows,
            png,
        } => cmd_generate(
            checkpoint,
            config,
            out,
            strategy,
            frames,
            seed,
            driving,
            driving_seed,
            deterministic,
            dump_rows,
            png,
        ),
        Command::Evaluate { generated, driving, out, metrics } => {
            cmd_evaluate(generated, driving, out, metrics)
        }
        Command::Ablate { config, out, seed, bins, evals } => cmd_ablate(config, out, seed, bins, evals),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
