//! Diffusion schedule, forward noising, weighted loss, sampler and training.
//!
//! The schedule is the standard linear-beta chain. Training draws one
//! timestep per sequence, adds Gaussian noise to the driving frames, and
//! minimizes a weighted mean-squared error between predicted and true noise,
//! where pixels near expressive control points carry weight `1 + lambda_ex`.
//! The reverse sampler is the ancestral update with the fixed-small posterior
//! variance, with an optional learned-variance interpolation channel.

use crate::autodiff::{Graph, Mat};
use crate::error::{Error, Result};
use crate::model::{
    denoise_graph, frames_to_patch_mat, is_mapping_segment, BoundParams, ModelConfig,
};
use crate::params::ParameterStore;
use crate::rng::derive_rng;
use crate::synthetic::{decode_local_signal, TrainingSample, VideoClip, EXPRESSIVE_INDICES};
use ndarray::{Array2, Array4, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Noise schedule arrays and timestep bookkeeping.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_max < 2 {
        return Err(Error::Config(format!("t_max must be >= 2, got {t_max}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let u = i as f64 / (t_max - 1) as f64;
        betas.push(beta_start + (beta_end - beta_start) * u);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule { t_max, betas, alphas, alpha_bars })
}

impl DiffusionSchedule {
    /// Desk default: a 100-step linear schedule with the usual beta range.
    pub fn desk_default() -> Self {
        build_schedule(100, 1e-4, 2e-2).expect("default schedule is valid")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_max {
            return Err(Error::Validation(format!(
                "timestep {t} out of range [0, {})",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Forward noising: `x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps`.
pub fn add_noise(
    x0: &Array4<f64>,
    t: usize,
    eps: &Array4<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array4<f64>> {
    sched.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Validation(format!(
            "noise shape {:?} does not match frames {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    let ab = sched.alpha_bars[t];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Per-frame pixel weights: `1 + lambda_ex` inside Chebyshev radius `r` of
/// any expressive control point, `1` elsewhere.
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub weights: Array2<f64>,
    pub lambda_ex: f64,
}

/// Build a weight map from one frame's control points. Points are scaled to
/// pixel coordinates by flooring and clamped to the image.
pub fn build_weight_map(
    points: ArrayView2<f64>,
    expressive: &[usize],
    height: usize,
    width: usize,
    radius: usize,
    lambda_ex: f64,
) -> WeightMap {
    let mut weights = Array2::from_elem((height, width), 1.0);
    for &k in expressive {
        let x = points[[k, 0]];
        let y = points[[k, 1]];
        let px = ((x * width as f64).floor() as isize).clamp(0, width as isize - 1) as usize;
        let py = ((y * height as f64).floor() as isize).clamp(0, height as isize - 1) as usize;
        let r0 = py.saturating_sub(radius);
        let r1 = (py + radius).min(height - 1);
        let c0 = px.saturating_sub(radius);
        let c1 = (px + radius).min(width - 1);
        for i in r0..=r1 {
            for j in c0..=c1 {
                weights[[i, j]] = 1.0 + lambda_ex;
            }
        }
    }
    WeightMap { weights, lambda_ex }
}

/// Weighted MSE: sum of `w * (pred - target)^2` over frames, pixels and
/// channels, divided by the weight sum times the channel count.
pub fn weighted_mse(pred: &Array4<f64>, target: &Array4<f64>, wmaps: &[WeightMap]) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Validation(format!(
            "prediction shape {:?} does not match target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (t, h, w, c) = pred.dim();
    if wmaps.len() != t {
        return Err(Error::Validation(format!(
            "got {} weight maps for {t} frames",
            wmaps.len()
        )));
    }
    let mut num = 0.0;
    let mut weight_sum = 0.0;
    for ti in 0..t {
        if wmaps[ti].weights.dim() != (h, w) {
            return Err(Error::Validation("weight map does not match frame size".into()));
        }
        for i in 0..h {
            for j in 0..w {
                let wv = wmaps[ti].weights[[i, j]];
                weight_sum += wv;
                for ch in 0..c {
                    let d = pred[[ti, i, j, ch]] - target[[ti, i, j, ch]];
                    num += wv * d * d;
                }
            }
        }
    }
    Ok(num / (weight_sum * c as f64))
}

/// Ancestral reverse step. `sigma_raw` is the optional learned-variance
/// channel in [-1, 1]; when absent the fixed-small posterior variance is
/// used. At `t = 0` the step is deterministic.
pub fn sampler_step(
    x_t: &Array4<f64>,
    eps_pred: &Array4<f64>,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    sigma_raw: Option<&Array4<f64>>,
) -> Result<Array4<f64>> {
    sched.check_t(t)?;
    if x_t.dim() != eps_pred.dim() {
        return Err(Error::Validation(format!(
            "noise prediction shape {:?} does not match state {:?}",
            eps_pred.dim(),
            x_t.dim()
        )));
    }
    let beta = sched.betas[t];
    let alpha = sched.alphas[t];
    let ab = sched.alpha_bars[t];
    let mut out = (x_t - &(eps_pred * (beta / (1.0 - ab).sqrt()))) / alpha.sqrt();
    if t > 0 {
        let ab_prev = sched.alpha_bars[t - 1];
        let fixed_var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let log_fixed = fixed_var.ln();
        let log_beta = beta.ln();
        match sigma_raw {
            None => {
                let sigma = fixed_var.sqrt();
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sigma * z;
                }
            }
            Some(raw) => {
                if raw.dim() != x_t.dim() {
                    return Err(Error::Validation("sigma channel shape mismatch".into()));
                }
                for (v, r) in out.iter_mut().zip(raw.iter()) {
                    let frac = (r.clamp(-1.0, 1.0) + 1.0) / 2.0;
                    let log_var = frac * log_beta + (1.0 - frac) * log_fixed;
                    let z: f64 = StandardNormal.sample(rng);
                    *v += (0.5 * log_var).exp() * z;
                }
            }
        }
    }
    Ok(out)
}

/// Which conditioning signals the model receives; withheld signals are
/// replaced by zeros at both training and evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalMask {
    pub use_global: bool,
    pub use_local: bool,
}

impl SignalMask {
    pub fn full() -> Self {
        SignalMask { use_global: true, use_local: true }
    }

    pub fn apply(&self, sample: &mut TrainingSample) {
        if !self.use_global {
            sample.global_signal.iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.use_local {
            sample.local_signals.fill(0.0);
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Base learning rate of the cosine schedule.
    pub base_lr: f64,
    /// Mapping-network learning-rate multiplier.
    pub mapping_lr_factor: f64,
    pub weight_decay: f64,
    /// Chebyshev radius of the expressive weight region, in pixels.
    pub expressive_radius: usize,
    pub lambda_ex: f64,
    pub seed: u64,
    /// Conditioning signals available to the model (ablation hook).
    pub signal_mask: SignalMask,
    /// Run batch elements sequentially for exact reproducibility checks.
    /// Results are bitwise identical either way; this only controls threads.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 2,
            base_lr: 6.4e-5,
            mapping_lr_factor: 0.1,
            weight_decay: 0.01,
            expressive_radius: 2,
            lambda_ex: 1.0,
            seed: 0,
            signal_mask: SignalMask::full(),
            deterministic: false,
        }
    }
}

/// Cosine-annealed learning rate: `base` at step 0, exactly 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let s = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// AdamW with decoupled weight decay. Frozen segments are skipped; mapping
/// segments use a scaled learning rate.
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(store: &ParameterStore) -> Self {
        let m = store.iter().map(|s| Mat::zeros(s.data.dim())).collect();
        let v = store.iter().map(|s| Mat::zeros(s.data.dim())).collect();
        AdamW { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn update(
        &mut self,
        store: &mut ParameterStore,
        grads: &[Option<Mat>],
        lr: f64,
        mapping_lr_factor: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let seg = store.segment_at(idx);
            if !seg.trainable {
                continue;
            }
            let Some(g) = &grads[idx] else { continue };
            let lr_eff = if is_mapping_segment(&seg.name) { lr * mapping_lr_factor } else { lr };
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mv, gv| *mv = beta1 * *mv + (1.0 - beta1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = beta2 * *vv + (1.0 - beta2) * gv * gv);
            let data = store.data_mut(idx);
            for ((p, mv), vv) in data.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= lr_eff * weight_decay * *p + lr_eff * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Weight maps for every frame of a sample, from its decoded control points.
pub fn sample_weight_maps(
    sample: &TrainingSample,
    height: usize,
    width: usize,
    radius: usize,
    lambda_ex: f64,
) -> Result<Vec<WeightMap>> {
    let t = sample.local_signals.nrows();
    let mut maps = Vec::with_capacity(t);
    for slot in 0..t {
        let row: Vec<f64> = sample.local_signals.row(slot).to_vec();
        let pts = decode_local_signal(&row)?;
        maps.push(build_weight_map(pts.view(), &EXPRESSIVE_INDICES, height, width, radius, lambda_ex));
    }
    Ok(maps)
}

/// Expand per-frame pixel weight maps to the `[T*Np, p*p*C_out]` patch
/// layout, zeroing any variance channels so they carry no loss.
fn weight_patch_mat(cfg: &ModelConfig, wmaps: &[WeightMap]) -> Result<Mat> {
    let (h, w) = (cfg.image_size, cfg.image_size);
    let c_out = cfg.out_channels();
    let t = wmaps.len();
    let mut per_pixel = Array4::zeros((t, h, w, c_out));
    for (ti, wm) in wmaps.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..cfg.channels {
                    per_pixel[[ti, i, j, ch]] = wm.weights[[i, j]];
                }
            }
        }
    }
    frames_to_patch_mat(&per_pixel, cfg.patch_size)
}

/// Zero-pad target noise to the head's output channel count.
fn target_patch_mat(cfg: &ModelConfig, eps: &Array4<f64>) -> Result<Mat> {
    if cfg.predict_sigma {
        let (t, h, w, _) = eps.dim();
        let mut padded = Array4::zeros((t, h, w, cfg.out_channels()));
        padded.slice_mut(ndarray::s![.., .., .., 0..cfg.channels]).assign(eps);
        frames_to_patch_mat(&padded, cfg.patch_size)
    } else {
        frames_to_patch_mat(eps, cfg.patch_size)
    }
}

/// One training step on one sample: returns the loss and per-segment
/// gradients (aligned with the store's segment order).
pub fn training_step(
    cfg: &ModelConfig,
    store: &ParameterStore,
    sample: &TrainingSample,
    sched: &DiffusionSchedule,
    radius: usize,
    lambda_ex: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let t = rng.random_range(0..sched.t_max);
    let mut eps = Array4::zeros(sample.driving_frames.dim());
    for v in eps.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    training_step_at(cfg, store, sample, sched, radius, lambda_ex, t, &eps)
}

/// Deterministic core of [`training_step`] with a fixed `(t, eps)` pair.
pub fn training_step_at(
    cfg: &ModelConfig,
    store: &ParameterStore,
    sample: &TrainingSample,
    sched: &DiffusionSchedule,
    radius: usize,
    lambda_ex: f64,
    t: usize,
    eps: &Array4<f64>,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let (frames, h, w, c) = sample.driving_frames.dim();
    if frames != cfg.frames_per_sequence || h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(Error::Validation(format!(
            "sample shape [{frames},{h},{w},{c}] does not match model config"
        )));
    }
    let x_t = add_noise(&sample.driving_frames, t, eps, sched)?;
    let wmaps = sample_weight_maps(sample, h, w, radius, lambda_ex)?;
    let weight_sum: f64 = wmaps.iter().map(|m| m.weights.sum()).sum();
    let denom = weight_sum * c as f64;

    let g = Graph::new();
    let bp = BoundParams::bind(&g, store);
    let patches = g.constant(frames_to_patch_mat(&x_t, cfg.patch_size)?);
    let gsig = g.constant(Mat::from_shape_vec((1, sample.global_signal.len()), sample.global_signal.clone()).map_err(|e| Error::Internal(e.to_string()))?);
    let lsig = g.constant(sample.local_signals.clone());
    let pred = denoise_graph(&g, &bp, &patches, t, &gsig, &lsig, cfg)?;
    let target = g.constant(target_patch_mat(cfg, eps)?);
    let weights = g.constant(weight_patch_mat(cfg, &wmaps)?);
    let diff = g.sub(&pred, &target);
    let sq = g.mul(&diff, &diff);
    let weighted = g.mul(&sq, &weights);
    let loss = g.mul_scalar(&g.sum_all(&weighted), 1.0 / denom);
    let loss_value = loss.value()[[0, 0]];

    let mut grads_store = g.backward(&loss);
    let grads: Vec<Option<Mat>> =
        (0..store.len()).map(|i| grads_store.take(bp.var_at(i))).collect();
    Ok((loss_value, grads))
}

/// Loss trace returned by [`train`].
pub type LossTrace = Vec<f64>;

/// Train on random non-uniform sequences drawn from `clips`.
///
/// Every step draws `batch_size` samples whose RNG streams depend only on
/// `(seed, step, element)`, computes the mean loss and gradient, and applies
/// an AdamW update under a cosine learning-rate schedule. Results are
/// bitwise reproducible for a fixed seed regardless of thread count.
pub fn train(
    cfg: &ModelConfig,
    store: &mut ParameterStore,
    clips: &[VideoClip],
    sched: &DiffusionSchedule,
    tc: &TrainConfig,
) -> Result<LossTrace> {
    if clips.is_empty() {
        return Err(Error::Validation("training requires at least one clip".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = AdamW::new(store);
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let lr = cosine_lr(step, tc.steps, tc.base_lr);
        let one = |i: usize| -> Result<(f64, Vec<Option<Mat>>)> {
            let mut rng = derive_rng(tc.seed, step as u64, i as u64);
            let clip = &clips[rng.random_range(0..clips.len())];
            let mut sample =
                crate::synthetic::sample_nonuniform_sequence(clip, cfg.frames_per_sequence, &mut rng)?;
            tc.signal_mask.apply(&mut sample);
            training_step(cfg, store, &sample, sched, tc.expressive_radius, tc.lambda_ex, &mut rng)
        };
        let results: Vec<Result<(f64, Vec<Option<Mat>>)>> = if tc.deterministic {
            (0..tc.batch_size).map(one).collect()
        } else {
            (0..tc.batch_size).into_par_iter().map(one).collect()
        };

        let mut mean_loss = 0.0;
        let mut mean_grads: Vec<Option<Mat>> = vec![None; store.len()];
        let scale = 1.0 / tc.batch_size as f64;
        for r in results {
            let (loss, grads) = r?;
            mean_loss += loss * scale;
            for (slot, g) in mean_grads.iter_mut().zip(grads.into_iter()) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => *acc += &(g * scale),
                    (None, Some(g)) => *slot = Some(g * scale),
                    _ => {}
                }
            }
        }
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {mean_loss} at step {step} (lr {lr:.3e})"
            )));
        }
        opt.update(store, &mean_grads, lr, tc.mapping_lr_factor, tc.weight_decay);
        trace.push(mean_loss);
    }
    Ok(trace)
}

/// Repeatedly descend on one fixed `(sample, t, eps)` denoising objective.
/// Returns the loss trace; used by the overfit sanity check.
pub fn overfit_fixed_objective(
    cfg: &ModelConfig,
    store: &mut ParameterStore,
    sample: &TrainingSample,
    sched: &DiffusionSchedule,
    steps: usize,
    base_lr: f64,
    seed: u64,
) -> Result<LossTrace> {
    let t = sched.t_max / 2;
    let mut rng = derive_rng(seed, 0xf17ed, 0);
    let mut eps = Array4::zeros(sample.driving_frames.dim());
    for v in eps.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut opt = AdamW::new(store);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = cosine_lr(step, steps, base_lr);
        let (loss, grads) = training_step_at(cfg, store, sample, sched, 2, 1.0, t, &eps)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step}")));
        }
        opt.update(store, &grads, lr, 0.1, 0.0);
        trace.push(loss);
    }
    Ok(trace)
}
