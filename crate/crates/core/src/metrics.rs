//! Consistency and motion-fidelity metrics, plus the two study drivers
//! (consistency-vs-length and guidance ablation).
//!
//! Frame embeddings are coarse pooled renderings, optionally passed through
//! a fixed seeded random projection, then L2-normalized. CSIM measures the
//! worst similarity of any generated frame to the source; Self-CSIM compares
//! the worst intra-video similarity of the generated video against that of
//! the driving video; LMSE measures control-point error, with an analytic
//! centroid detector recovering points from generated frames.

use crate::diffusion::{
    add_noise, train, DiffusionSchedule, SignalMask, TrainConfig,
};
use crate::error::{Error, Result};
use crate::inference::{generate_video, ExecMode, Strategy};
use crate::model::{denoise_graph, frames_to_patch_mat, init_params, BoundParams, ModelConfig};
use crate::autodiff::{Graph, Mat};
use crate::params::ParameterStore;
use crate::rng::derive_rng;
use crate::synthetic::{
    generate_clip, sample_nonuniform_sequence, SceneSpec, VideoClip,
    NUM_CONTROL_POINTS,
};
use ndarray::{s, Array2, Array3, Array4, ArrayView3};
use rand::prelude::*;
use rand_distr::StandardNormal;

/// Pool size the embedding reduces every frame to.
const EMBED_POOL: usize = 8;

// Stream tags for the embedding projection and the curve study's scenes.
const PROJECTION_STREAM: u64 = 0x9f0e;
const CURVE_SCENE_STREAM: u64 = 0x00c1_1f00;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMethod {
    /// Pooled frame, flattened and normalized.
    DownsampleNorm,
    /// Pooled frame through a fixed seeded Gaussian projection.
    FixedRandomProjection,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingConfig {
    pub method: EmbedMethod,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { method: EmbedMethod::DownsampleNorm, output_dim: 64, seed: 0 }
    }
}

/// Unit-norm embedding of one frame.
pub fn embed_frame(frame: ArrayView3<f64>, cfg: &EmbeddingConfig) -> Result<Vec<f64>> {
    let (h, w, c) = frame.dim();
    if h < EMBED_POOL || w < EMBED_POOL {
        return Err(Error::Validation(format!(
            "frame {h}x{w} smaller than the {EMBED_POOL}x{EMBED_POOL} embedding pool"
        )));
    }
    let mut pooled = Vec::with_capacity(EMBED_POOL * EMBED_POOL * c);
    for bi in 0..EMBED_POOL {
        let r0 = bi * h / EMBED_POOL;
        let r1 = ((bi + 1) * h / EMBED_POOL).max(r0 + 1);
        for bj in 0..EMBED_POOL {
            let c0 = bj * w / EMBED_POOL;
            let c1 = ((bj + 1) * w / EMBED_POOL).max(c0 + 1);
            for ch in 0..c {
                let mut sum = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        sum += frame[[i, j, ch]];
                    }
                }
                pooled.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    let mut v = match cfg.method {
        EmbedMethod::DownsampleNorm => pooled,
        EmbedMethod::FixedRandomProjection => {
            let mut rng = derive_rng(cfg.seed, PROJECTION_STREAM, 0);
            let scale = 1.0 / (pooled.len() as f64).sqrt();
            (0..cfg.output_dim)
                .map(|_| {
                    pooled
                        .iter()
                        .map(|&p| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            p * g * scale
                        })
                        .sum()
                })
                .collect()
        }
    };
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Validation("degenerate frame: zero embedding norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // embeddings are unit norm, so the dot product is the cosine
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum cosine similarity between the source frame and any video frame.
pub fn csim(source: ArrayView3<f64>, video: &Array4<f64>, cfg: &EmbeddingConfig) -> Result<f64> {
    if video.dim().0 == 0 {
        return Err(Error::Validation("empty video".into()));
    }
    let src = embed_frame(source, cfg)?;
    let mut min = f64::INFINITY;
    for n in 0..video.dim().0 {
        let e = embed_frame(video.slice(s![n, .., .., ..]), cfg)?;
        min = min.min(cosine(&src, &e));
    }
    Ok(min)
}

/// Minimum cosine similarity over all unordered frame pairs of a video.
pub fn min_pairwise_cos(video: &Array4<f64>, cfg: &EmbeddingConfig) -> Result<f64> {
    let n = video.dim().0;
    if n < 2 {
        return Err(Error::Validation("need at least two frames for pairwise similarity".into()));
    }
    let embeds: Vec<Vec<f64>> = (0..n)
        .map(|i| embed_frame(video.slice(s![i, .., .., ..]), cfg))
        .collect::<Result<_>>()?;
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            min = min.min(cosine(&embeds[i], &embeds[j]));
        }
    }
    Ok(min)
}

/// Consistency gap: distance between the worst intra-video similarity of the
/// generated video and that of the driving video. Lower is better.
pub fn self_csim(generated: &Array4<f64>, driving: &Array4<f64>, cfg: &EmbeddingConfig) -> Result<f64> {
    if generated.dim().0 != driving.dim().0 {
        return Err(Error::Validation(format!(
            "video lengths differ: {} vs {}",
            generated.dim().0,
            driving.dim().0
        )));
    }
    Ok((min_pairwise_cos(generated, cfg)? - min_pairwise_cos(driving, cfg)?).abs())
}

/// Mean squared coordinate error between control-point tracks, optionally
/// restricted to a subset of point indices.
pub fn lmse(
    generated_points: &Array3<f64>,
    driving_points: &Array3<f64>,
    subset: Option<&[usize]>,
) -> Result<f64> {
    if generated_points.dim() != driving_points.dim() {
        return Err(Error::Validation(format!(
            "point track shapes differ: {:?} vs {:?}",
            generated_points.dim(),
            driving_points.dim()
        )));
    }
    let (n, k, two) = generated_points.dim();
    if two != 2 {
        return Err(Error::Validation("point tracks must have (x, y) coordinates".into()));
    }
    let all: Vec<usize> = (0..k).collect();
    let idx = subset.unwrap_or(&all);
    for &p in idx {
        if p >= k {
            return Err(Error::Validation(format!("point index {p} out of range for K={k}")));
        }
    }
    let mut sum = 0.0;
    for f in 0..n {
        for &p in idx {
            for d in 0..2 {
                let e = generated_points[[f, p, d]] - driving_points[[f, p, d]];
                sum += e * e;
            }
        }
    }
    Ok(sum / (n * idx.len() * 2) as f64)
}

/// Recover control points from a rendered frame by locating the shape
/// centroid: pixels are weighted by their color distance from the scene's
/// background, and the ring layout is reconstructed from the scene geometry.
pub fn detect_control_points(frame: ArrayView3<f64>, spec: &SceneSpec) -> Result<Array2<f64>> {
    let (h, w, c) = frame.dim();
    let bg: Vec<f64> = spec.background_color.iter().map(|&v| 2.0 * v - 1.0).collect();
    if c != bg.len() {
        return Err(Error::Validation(format!("expected {} channels, got {c}", bg.len())));
    }
    let mut mass = 0.0;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let mut d2 = 0.0;
            for ch in 0..c {
                let d = frame[[i, j, ch]] - bg[ch];
                d2 += d * d;
            }
            let wgt = d2.sqrt();
            mass += wgt;
            mx += wgt * (j as f64 + 0.5) / w as f64;
            my += wgt * (i as f64 + 0.5) / h as f64;
        }
    }
    if mass < 1e-9 {
        return Err(Error::Validation("no shape found: frame matches the background".into()));
    }
    let (cx, cy) = (mx / mass, my / mass);
    let r = 0.3 * spec.shape_size;
    let mut pts = Array2::zeros((NUM_CONTROL_POINTS, 2));
    pts[[0, 0]] = cx.clamp(0.0, 1.0);
    pts[[0, 1]] = cy.clamp(0.0, 1.0);
    for k in 1..NUM_CONTROL_POINTS {
        let theta = std::f64::consts::TAU * (k - 1) as f64 / (NUM_CONTROL_POINTS - 1) as f64;
        pts[[k, 0]] = (cx + r * theta.cos()).clamp(0.0, 1.0);
        pts[[k, 1]] = (cy + r * theta.sin()).clamp(0.0, 1.0);
    }
    Ok(pts)
}

/// Detect control points on every frame of a generated video.
pub fn extract_control_points(video: &Array4<f64>, spec: &SceneSpec) -> Result<Array3<f64>> {
    let n = video.dim().0;
    let mut out = Array3::zeros((n, NUM_CONTROL_POINTS, 2));
    for f in 0..n {
        let pts = detect_control_points(video.slice(s![f, .., .., ..]), spec)?;
        out.slice_mut(s![f, .., ..]).assign(&pts);
    }
    Ok(out)
}

/// One row of the consistency-vs-length study.
#[derive(Debug, Clone)]
pub struct CurveRow {
    pub strategy: Strategy,
    pub length: usize,
    pub mean_self_csim: f64,
    pub runs: usize,
}

/// Self-reenactment consistency study: generate `seeds` videos per
/// (strategy, length) pair and average their Self-CSIM against the driving
/// clip. Lengths no strategy can tile are skipped with a warning on stderr.
#[allow(clippy::too_many_arguments)]
pub fn consistency_curve(
    cfg: &ModelConfig,
    store: &ParameterStore,
    lengths: &[usize],
    strategies: &[Strategy],
    seeds: usize,
    base_seed: u64,
    sched: &DiffusionSchedule,
    embed: &EmbeddingConfig,
    exec: ExecMode,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &length in lengths {
            let mut total = 0.0;
            let mut runs = 0;
            for s_i in 0..seeds {
                let scene_seed = base_seed ^ (CURVE_SCENE_STREAM + (s_i as u64) * 7919 + length as u64);
                let clip = generate_clip(
                    &SceneSpec::random(scene_seed),
                    length,
                    cfg.image_size,
                    cfg.image_size,
                )?;
                let gen_seed = base_seed.wrapping_add(1000 * s_i as u64 + length as u64);
                match generate_video(cfg, store, &clip, strategy, length, sched, gen_seed, exec) {
                    Ok(video) => {
                        let driving = clip.frames.slice(s![0..length, .., .., ..]).to_owned();
                        total += self_csim(&video, &driving, embed)?;
                        runs += 1;
                    }
                    Err(Error::Planning(msg)) => {
                        eprintln!("warning: skipping {strategy:?} at length {length}: {msg}");
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if runs > 0 {
                rows.push(CurveRow { strategy, length, mean_self_csim: total / runs as f64, runs });
            }
        }
    }
    Ok(rows)
}

/// Guidance configurations compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceVariant {
    Unguided,
    LocalOnly,
    GlobalOnly,
    Combined,
}

impl GuidanceVariant {
    pub const ALL: [GuidanceVariant; 4] = [
        GuidanceVariant::Unguided,
        GuidanceVariant::LocalOnly,
        GuidanceVariant::GlobalOnly,
        GuidanceVariant::Combined,
    ];

    pub fn mask(self) -> SignalMask {
        match self {
            GuidanceVariant::Unguided => SignalMask { use_global: false, use_local: false },
            GuidanceVariant::LocalOnly => SignalMask { use_global: false, use_local: true },
            GuidanceVariant::GlobalOnly => SignalMask { use_global: true, use_local: false },
            GuidanceVariant::Combined => SignalMask { use_global: true, use_local: true },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GuidanceVariant::Unguided => "unguided",
            GuidanceVariant::LocalOnly => "local_only",
            GuidanceVariant::GlobalOnly => "global_only",
            GuidanceVariant::Combined => "combined",
        }
    }
}

/// Plain (unweighted) denoising MSE of a model on a fixed `(sample, t, eps)`
/// evaluation point, with the variant's signal mask applied.
pub fn denoise_mse(
    cfg: &ModelConfig,
    store: &ParameterStore,
    sample: &crate::synthetic::TrainingSample,
    sched: &DiffusionSchedule,
    t: usize,
    eps: &Array4<f64>,
    mask: SignalMask,
) -> Result<f64> {
    let mut sample = sample.clone();
    mask.apply(&mut sample);
    let x_t = add_noise(&sample.driving_frames, t, eps, sched)?;
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let patches = g.constant(frames_to_patch_mat(&x_t, cfg.patch_size)?);
    let gsig = g.constant(
        Mat::from_shape_vec((1, sample.global_signal.len()), sample.global_signal.clone())
            .map_err(|e| Error::Internal(e.to_string()))?,
    );
    let lsig = g.constant(sample.local_signals.clone());
    let pred = denoise_graph(&g, &bp, &patches, t, &gsig, &lsig, cfg)?;
    let target = frames_to_patch_mat(eps, cfg.patch_size)?;
    // compare noise channels only
    let pv = pred.value();
    let mut sum = 0.0;
    let mut count = 0usize;
    let pd = cfg.patch_dim();
    let per_pixel = cfg.out_channels();
    let c = cfg.channels;
    for (row, trow) in pv.rows().into_iter().zip(target.rows()) {
        for pix in 0..(pd / c) {
            for ch in 0..c {
                let d = row[pix * per_pixel + ch] - trow[pix * c + ch];
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// One row of the guidance-ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub bin_lo: usize,
    pub bin_hi: usize,
    pub variant: GuidanceVariant,
    pub mse: f64,
    /// `mse / mse_unguided` within the same bin.
    pub ratio: f64,
}

/// Train one model per guidance variant on the same data and seed, then
/// compare their denoising MSE per timestep bin against the unguided
/// baseline on a shared evaluation set.
#[allow(clippy::too_many_arguments)]
pub fn guidance_ablation(
    cfg: &ModelConfig,
    clips: &[VideoClip],
    sched: &DiffusionSchedule,
    base_train: &TrainConfig,
    bins: usize,
    evals_per_bin: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if bins == 0 || evals_per_bin == 0 {
        return Err(Error::Config("bins and evals_per_bin must be positive".into()));
    }
    if sched.t_max < bins {
        return Err(Error::Config(format!(
            "cannot split {} timesteps into {bins} bins",
            sched.t_max
        )));
    }
    let mut stores = Vec::new();
    for variant in GuidanceVariant::ALL {
        let mut store = init_params(cfg, seed)?;
        let tc = TrainConfig { signal_mask: variant.mask(), ..base_train.clone() };
        train(cfg, &mut store, clips, sched, &tc)?;
        stores.push((variant, store));
    }

    // shared evaluation grid: same samples, timesteps and noise across variants
    let mut eval_points = Vec::new();
    for bin in 0..bins {
        let lo = bin * sched.t_max / bins;
        let hi = ((bin + 1) * sched.t_max / bins).max(lo + 1);
        for e in 0..evals_per_bin {
            let mut rng = derive_rng(seed, 0xeba1, (bin * evals_per_bin + e) as u64);
            let clip = &clips[rng.random_range(0..clips.len())];
            let sample = sample_nonuniform_sequence(clip, cfg.frames_per_sequence, &mut rng)?;
            let t = lo + (hi - lo) * e / evals_per_bin;
            let mut eps = Array4::zeros(sample.driving_frames.dim());
            for v in eps.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            eval_points.push((bin, lo, hi, sample, t, eps));
        }
    }

    let mut per_variant: Vec<(GuidanceVariant, Vec<f64>)> = Vec::new();
    for (variant, store) in &stores {
        let mut per_bin = vec![0.0; bins];
        let mut counts = vec![0usize; bins];
        for (bin, _, _, sample, t, eps) in &eval_points {
            per_bin[*bin] += denoise_mse(cfg, store, sample, sched, *t, eps, variant.mask())?;
            counts[*bin] += 1;
        }
        for bin in 0..bins {
            per_bin[bin] /= counts[bin] as f64;
        }
        per_variant.push((*variant, per_bin));
    }
    let unguided_mse = per_variant
        .iter()
        .find(|(v, _)| *v == GuidanceVariant::Unguided)
        .map(|(_, m)| m.clone())
        .expect("unguided variant always present");

    let mut rows = Vec::new();
    for (variant, per_bin) in per_variant {
        for (bin, &mse) in per_bin.iter().enumerate() {
            let lo = bin * sched.t_max / bins;
            let hi = ((bin + 1) * sched.t_max / bins).max(lo + 1);
            rows.push(AblationRow { bin_lo: lo, bin_hi: hi, variant, mse, ratio: mse / unguided_mse[bin] });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{control_points_at, EXPRESSIVE_INDICES};
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
        Array::from_shape_fn((h, w, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let mut rng = derive_rng(1, 0, 0);
        let frame = rand_frame(&mut rng, 16, 16, 3);
        for method in [EmbedMethod::DownsampleNorm, EmbedMethod::FixedRandomProjection] {
            let cfg = EmbeddingConfig { method, output_dim: 32, seed: 4 };
            let a = embed_frame(frame.view(), &cfg).unwrap();
            let b = embed_frame(frame.view(), &cfg).unwrap();
            assert_eq!(a, b);
            let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
        }
        let zero = Array3::zeros((16, 16, 3));
        assert!(matches!(
            embed_frame(zero.view(), &EmbeddingConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn perturbed_frame_stays_closer_than_random() {
        let cfg = EmbeddingConfig::default();
        let mut wins = 0;
        for trial in 0..100u64 {
            let mut rng = derive_rng(trial, 1, 0);
            let frame = rand_frame(&mut rng, 16, 16, 3);
            let mut noisy = frame.clone();
            for v in noisy.iter_mut() {
                *v = (*v + 0.1 * (rng.random::<f64>() * 2.0 - 1.0)).clamp(-1.0, 1.0);
            }
            let other = rand_frame(&mut rng, 16, 16, 3);
            let e = embed_frame(frame.view(), &cfg).unwrap();
            let en = embed_frame(noisy.view(), &cfg).unwrap();
            let eo = embed_frame(other.view(), &cfg).unwrap();
            if cosine(&e, &en) > cosine(&e, &eo) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "perturbed similarity won only {wins}/100 trials");
    }

    #[test]
    fn csim_cases() {
        let cfg = EmbeddingConfig::default();
        let mut rng = derive_rng(2, 0, 0);
        let source = rand_frame(&mut rng, 16, 16, 3);
        // video = [source] -> exactly 1
        let mut video = Array4::zeros((1, 16, 16, 3));
        video.slice_mut(s![0, .., .., ..]).assign(&source);
        assert_abs_diff_eq!(csim(source.view(), &video, &cfg).unwrap(), 1.0, epsilon = 1e-9);

        // explicit-list oracle
        let mut video = Array4::zeros((4, 16, 16, 3));
        for n in 0..4 {
            video.slice_mut(s![n, .., .., ..]).assign(&rand_frame(&mut rng, 16, 16, 3));
        }
        let got = csim(source.view(), &video, &cfg).unwrap();
        let src = embed_frame(source.view(), &cfg).unwrap();
        let mut expect = f64::INFINITY;
        for n in 0..4 {
            let e = embed_frame(video.slice(s![n, .., .., ..]), &cfg).unwrap();
            expect = expect.min(cosine(&src, &e));
        }
        assert_eq!(got, expect);
        assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn self_csim_cases() {
        let cfg = EmbeddingConfig::default();
        let mut rng = derive_rng(3, 0, 0);
        let mut video = Array4::zeros((3, 16, 16, 3));
        for n in 0..3 {
            video.slice_mut(s![n, .., .., ..]).assign(&rand_frame(&mut rng, 16, 16, 3));
        }
        // generated == driving -> 0
        assert_eq!(self_csim(&video, &video, &cfg).unwrap(), 0.0);

        // two constant videos -> both minima are 1 -> 0
        let constant_a = Array4::from_elem((3, 16, 16, 3), 0.5);
        let constant_b = Array4::from_elem((3, 16, 16, 3), -0.25);
        assert_abs_diff_eq!(self_csim(&constant_a, &constant_b, &cfg).unwrap(), 0.0, epsilon = 1e-9);

        // exhaustive-pairs oracle on hand-built videos
        let mut other = Array4::zeros((3, 16, 16, 3));
        for n in 0..3 {
            other.slice_mut(s![n, .., .., ..]).assign(&rand_frame(&mut rng, 16, 16, 3));
        }
        let got = self_csim(&video, &other, &cfg).unwrap();
        let pairs = |v: &Array4<f64>| -> f64 {
            let mut min = f64::INFINITY;
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let a = embed_frame(v.slice(s![i, .., .., ..]), &cfg).unwrap();
                    let b = embed_frame(v.slice(s![j, .., .., ..]), &cfg).unwrap();
                    min = min.min(cosine(&a, &b));
                }
            }
            min
        };
        assert_abs_diff_eq!(got, (pairs(&video) - pairs(&other)).abs(), epsilon = 1e-12);

        let short = Array4::zeros((2, 16, 16, 3));
        assert!(matches!(self_csim(&short, &video, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn lmse_cases() {
        let mut rng = derive_rng(4, 0, 0);
        let a = Array::from_shape_fn((5, 8, 2), |_| rng.random::<f64>());
        // identical -> 0
        assert_eq!(lmse(&a, &a, None).unwrap(), 0.0);

        // uniform offset delta -> delta^2
        let delta = 0.03;
        let b = &a + delta;
        assert_abs_diff_eq!(lmse(&a, &b, None).unwrap(), delta * delta, epsilon = 1e-12);

        // scalar triple-loop oracle with a subset
        let c = Array::from_shape_fn((5, 8, 2), |_| rng.random::<f64>());
        let subset = [0usize, 1, 2];
        let got = lmse(&a, &c, Some(&subset)).unwrap();
        let mut sum = 0.0;
        for f in 0..5 {
            for &p in &subset {
                for d in 0..2 {
                    let e = a[[f, p, d]] - c[[f, p, d]];
                    sum += e * e;
                }
            }
        }
        assert_abs_diff_eq!(got, sum / (5.0 * 3.0 * 2.0), epsilon = 1e-12);

        let bad = Array3::zeros((5, 8, 3));
        assert!(lmse(&a, &bad, None).is_err());
    }

    #[test]
    fn detector_recovers_rendered_control_points() {
        // tolerance: half a pixel, in normalized units
        for seed in 0..10u64 {
            let spec = SceneSpec::random(seed);
            let clip = generate_clip(&spec, 6, 32, 32).unwrap();
            let tol = 0.5 / 32.0;
            for n in 0..6 {
                let detected = detect_control_points(clip.frames.slice(s![n, .., .., ..]), &spec).unwrap();
                let truth = control_points_at(&spec, n, 6);
                for k in 0..NUM_CONTROL_POINTS {
                    for d in 0..2 {
                        assert!(
                            (detected[[k, d]] - truth[[k, d]]).abs() <= tol,
                            "seed {seed} frame {n} point {k}: {} vs {}",
                            detected[[k, d]],
                            truth[[k, d]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lmse_via_detector_is_small_on_ground_truth() {
        let spec = SceneSpec::random(11);
        let clip = generate_clip(&spec, 5, 32, 32).unwrap();
        let detected = extract_control_points(&clip.frames, &spec).unwrap();
        let err = lmse(&detected, &clip.control_points, Some(&EXPRESSIVE_INDICES)).unwrap();
        assert!(err < (0.5f64 / 32.0).powi(2), "detector LMSE {err} too large");
    }

    #[test]
    fn curve_produces_single_row_for_single_config() {
        let cfg = ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            frames_per_sequence: 3,
            hidden_dim: 8,
            depth: 1,
            num_heads: 2,
            global_dim: crate::synthetic::global_signal_dim(3),
            local_dim: crate::synthetic::LOCAL_SIGNAL_DIM,
            timestep_embed_dim: 4,
            predict_sigma: false,
        };
        let mut store = init_params(&cfg, 0).unwrap();
        store.randomize(0.05, 1);
        let sched = crate::diffusion::build_schedule(3, 1e-3, 2e-2).unwrap();
        let embed = EmbeddingConfig::default();
        let rows = consistency_curve(
            &cfg,
            &store,
            &[5],
            &[Strategy::Anchored],
            1,
            7,
            &sched,
            &embed,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].length, 5);
        assert_eq!(rows[0].runs, 1);

        // deterministic rerun
        let rows2 = consistency_curve(
            &cfg,
            &store,
            &[5],
            &[Strategy::Anchored],
            1,
            7,
            &sched,
            &embed,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(rows[0].mean_self_csim, rows2[0].mean_self_csim);
    }

    #[test]
    fn ablation_unguided_ratio_is_one() {
        let cfg = ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            frames_per_sequence: 3,
            hidden_dim: 8,
            depth: 1,
            num_heads: 2,
            global_dim: crate::synthetic::global_signal_dim(3),
            local_dim: crate::synthetic::LOCAL_SIGNAL_DIM,
            timestep_embed_dim: 4,
            predict_sigma: false,
        };
        let clips = vec![generate_clip(&SceneSpec::random(0), 8, 8, 8).unwrap()];
        let sched = crate::diffusion::build_schedule(8, 1e-3, 2e-2).unwrap();
        let tc = TrainConfig { steps: 2, batch_size: 1, base_lr: 1e-4, ..TrainConfig::default() };
        let rows = guidance_ablation(&cfg, &clips, &sched, &tc, 2, 2, 3).unwrap();
        assert_eq!(rows.len(), 8); // 4 variants x 2 bins
        for row in rows.iter().filter(|r| r.variant == GuidanceVariant::Unguided) {
            assert_abs_diff_eq!(row.ratio, 1.0, epsilon = 1e-12);
        }
        // deterministic rerun
        let rows2 = guidance_ablation(&cfg, &clips, &sched, &tc, 2, 2, 3).unwrap();
        for (a, b) in rows.iter().zip(rows2.iter()) {
            assert_eq!(a.mse, b.mse);
            assert_eq!(a.ratio, b.ratio);
        }
    }
}
