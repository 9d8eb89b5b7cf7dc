//! Long-video inference: anchored batches and the averaging baseline.
//!
//! Anchored generation plans a batch of non-uniform frame sequences that all
//! share one anchor frame at the central slot. During reverse diffusion the
//! anchor tokens of every sequence are overridden with the first sequence's
//! tokens after every transformer block, and the anchor's predicted noise
//! and sampled state are shared the same way, so the decoded anchor frame is
//! bitwise identical across the batch. Frames are then reordered
//! chronologically.
//!
//! The MultiDiffusion baseline instead tiles the video with overlapping
//! uniform windows and replaces shared frames by their mean after every
//! sampler step.

use crate::diffusion::{sampler_step, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{
    mapping_network, prepare_sequence, run_block, run_head, ConditioningSignal,
    DenoisePrediction, ModelConfig,
};
use crate::params::ParameterStore;
use crate::rng::derive_rng;
use crate::synthetic::{encode_global_signal, encode_local_signal, VideoClip};
use ndarray::{s, Array2, Array3, Array4, Array5};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Substream tag for generation rows; row index is the stream id.
const GEN_SUBSTREAM: u64 = 0x6e11;

/// Thread policy for batched inference. Results are bitwise identical either
/// way; `Sequential` exists for exact-reproducibility runs and debugging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Parallel,
    Sequential,
}

/// Long-video stitching strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Anchored,
    MultiDiffusion,
    Plain,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchored" => Ok(Strategy::Anchored),
            "multidiffusion" => Ok(Strategy::MultiDiffusion),
            "plain" => Ok(Strategy::Plain),
            other => Err(Error::Config(format!(
                "unknown strategy {other}; expected anchored, multidiffusion or plain"
            ))),
        }
    }
}

/// A batch of non-uniform index sequences sharing one anchor frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredBatchPlan {
    pub batch: usize,
    pub seq_len: usize,
    pub video_len: usize,
    /// Global frame index shared by every row.
    pub anchor_index: usize,
    /// Central slot `floor(T/2)` holding the anchor in every row.
    pub anchor_slot: usize,
    /// `[B][T]`, strictly increasing per row.
    pub sequences: Vec<Vec<usize>>,
}

impl AnchoredBatchPlan {
    /// Check the structural invariants: row shape, monotonicity, anchor
    /// placement, and that all of `0..N` is covered.
    pub fn validate(&self) -> Result<()> {
        if self.sequences.len() != self.batch {
            return Err(Error::Internal("plan row count mismatch".into()));
        }
        let mut covered = vec![false; self.video_len];
        for row in &self.sequences {
            if row.len() != self.seq_len {
                return Err(Error::Internal("plan row length mismatch".into()));
            }
            if !row.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Internal("plan row not strictly increasing".into()));
            }
            if row[self.anchor_slot] != self.anchor_index {
                return Err(Error::Internal("anchor missing from central slot".into()));
            }
            for &g in row {
                if g >= self.video_len {
                    return Err(Error::Internal("plan index out of range".into()));
                }
                covered[g] = true;
            }
        }
        if !covered.iter().all(|&c| c) {
            return Err(Error::Internal("plan does not cover every frame".into()));
        }
        Ok(())
    }
}

/// Round-robin deal of `items` into `rows` lists, preserving order.
fn deal(items: &[usize], rows: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); rows];
    for (i, &v) in items.iter().enumerate() {
        out[i % rows].push(v);
    }
    out
}

/// Exact-partition anchored plan.
///
/// Requires odd `t` (the anchor occupies the true central slot with
/// `(t-1)/2` frames on each side) and `n = b*(t-1) + 1`. The sorted
/// non-anchor indices below and above the anchor are each dealt round-robin
/// across rows, so every frame index appears exactly once outside the anchor.
pub fn plan_anchored_batch(n: usize, t: usize, b: usize) -> Result<AnchoredBatchPlan> {
    if t < 3 {
        return Err(Error::Planning(format!("sequence length {t} too short; need T >= 3")));
    }
    if t % 2 == 0 {
        return Err(Error::Planning(format!(
            "sequence length {t} is even; an exact-partition plan needs an odd T (use a covering plan)"
        )));
    }
    if b == 0 || n != b * (t - 1) + 1 {
        return Err(Error::Planning(format!(
            "video length {n} incompatible with B={b} sequences of T={t}; need N = B*(T-1)+1"
        )));
    }
    let anchor = n / 2;
    let below: Vec<usize> = (0..anchor).collect();
    let above: Vec<usize> = (anchor + 1..n).collect();
    let below_rows = deal(&below, b);
    let above_rows = deal(&above, b);
    let mut sequences = Vec::with_capacity(b);
    for (mut lo, hi) in below_rows.into_iter().zip(above_rows.into_iter()) {
        lo.push(anchor);
        lo.extend(hi);
        lo.sort_unstable();
        sequences.push(lo);
    }
    let plan = AnchoredBatchPlan {
        batch: b,
        seq_len: t,
        video_len: n,
        anchor_index: anchor,
        anchor_slot: t / 2,
        sequences,
    };
    plan.validate()?;
    Ok(plan)
}

/// Covering plan for arbitrary lengths.
///
/// When `n = b*(t-1)+1` with odd `t` this is exactly [`plan_anchored_batch`].
/// Otherwise rows may repeat a few non-anchor indices (the ones closest to
/// the anchor) so that every frame is covered at least once while each row
/// keeps `floor(t/2)` frames below the anchor and the rest above it.
pub fn plan_for_length(n: usize, t: usize) -> Result<AnchoredBatchPlan> {
    if t < 3 {
        return Err(Error::Planning(format!("sequence length {t} too short; need T >= 3")));
    }
    if t % 2 == 1 && (n >= t) && (n - 1) % (t - 1) == 0 {
        return plan_anchored_batch(n, t, (n - 1) / (t - 1));
    }
    let slot = t / 2;
    let after = t - 1 - slot;
    let anchor = n / 2;
    let below: Vec<usize> = (0..anchor).collect();
    let above: Vec<usize> = (anchor + 1..n).collect();
    if below.len() < slot || above.len() < after {
        return Err(Error::Planning(format!(
            "video length {n} too short for sequences of {t} around a central anchor"
        )));
    }
    let b = usize::max(below.len().div_ceil(slot.max(1)), above.len().div_ceil(after.max(1))).max(1);
    let mut below_rows = deal(&below, b);
    let mut above_rows = deal(&above, b);
    // Pad short rows with the indices nearest the anchor that they lack.
    for row in below_rows.iter_mut() {
        for &candidate in below.iter().rev() {
            if row.len() == slot {
                break;
            }
            if !row.contains(&candidate) {
                row.push(candidate);
            }
        }
        row.sort_unstable();
    }
    for row in above_rows.iter_mut() {
        for &candidate in above.iter() {
            if row.len() == after {
                break;
            }
            if !row.contains(&candidate) {
                row.push(candidate);
            }
        }
        row.sort_unstable();
    }
    let mut sequences = Vec::with_capacity(b);
    for (mut lo, hi) in below_rows.into_iter().zip(above_rows.into_iter()) {
        lo.push(anchor);
        lo.extend(hi);
        sequences.push(lo);
    }
    let plan = AnchoredBatchPlan {
        batch: b,
        seq_len: t,
        video_len: n,
        anchor_index: anchor,
        anchor_slot: slot,
        sequences,
    };
    plan.validate()?;
    Ok(plan)
}

/// Copy the first row's anchor tokens over every other row's anchor slot.
/// All other entries are untouched.
pub fn override_anchor_tokens(batch_tokens: &mut Array4<f64>, anchor_slot: usize) -> Result<()> {
    let (b, t, _np, _d) = batch_tokens.dim();
    if anchor_slot >= t {
        return Err(Error::Validation(format!(
            "anchor slot {anchor_slot} out of range for {t} slots"
        )));
    }
    if b <= 1 {
        return Ok(());
    }
    let anchor = batch_tokens.slice(s![0, anchor_slot, .., ..]).to_owned();
    for row in 1..b {
        batch_tokens.slice_mut(s![row, anchor_slot, .., ..]).assign(&anchor);
    }
    Ok(())
}

/// Chronological reassembly: `output[g]` is the first generated copy of
/// global frame `g` in row-major plan order.
pub fn reorder_frames(batch_outputs: &Array5<f64>, plan: &AnchoredBatchPlan) -> Result<Array4<f64>> {
    let (b, t, h, w, c) = batch_outputs.dim();
    if b != plan.batch || t != plan.seq_len {
        return Err(Error::Validation(format!(
            "batch outputs [{b},{t},..] do not match plan [{},{}]",
            plan.batch, plan.seq_len
        )));
    }
    let mut out = Array4::zeros((plan.video_len, h, w, c));
    for g in 0..plan.video_len {
        let mut found = None;
        'scan: for (row, seq) in plan.sequences.iter().enumerate() {
            for (slot, &idx) in seq.iter().enumerate() {
                if idx == g {
                    found = Some((row, slot));
                    break 'scan;
                }
            }
        }
        let Some((row, slot)) = found else {
            return Err(Error::Internal(format!("plan does not cover frame {g}")));
        };
        out.slice_mut(s![g, .., .., ..])
            .assign(&batch_outputs.slice(s![row, slot, .., .., ..]));
    }
    Ok(out)
}

/// How row states are merged between sampler steps.
enum MergeRule {
    /// Independent rows (plain sampling).
    None,
    /// Share the anchor slot: predicted noise and sampled state of the
    /// anchor are copied from row 0 into every row.
    Anchor { slot: usize },
    /// Average frames covered by several windows.
    Average { window_starts: Vec<usize>, video_len: usize },
}

/// Produces per-row noise predictions for the current batch state.
pub trait BatchDenoiser {
    fn denoise_batch(&mut self, states: &[Array4<f64>], t: usize) -> Result<Vec<DenoisePrediction>>;
}

impl<F> BatchDenoiser for F
where
    F: FnMut(&[Array4<f64>], usize) -> Result<Vec<DenoisePrediction>>,
{
    fn denoise_batch(&mut self, states: &[Array4<f64>], t: usize) -> Result<Vec<DenoisePrediction>> {
        self(states, t)
    }
}

/// The real sDiT batch denoiser: runs every row block by block with a
/// barrier after each block, applying the anchor-token override between
/// blocks when configured.
pub struct ModelBatchDenoiser<'a> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParameterStore,
    pub conds: Vec<ConditioningSignal>,
    /// Per-layer anchor override slot; `None` for independent rows.
    pub anchor_slot: Option<usize>,
    pub exec: ExecMode,
}

impl BatchDenoiser for ModelBatchDenoiser<'_> {
    fn denoise_batch(&mut self, states: &[Array4<f64>], t: usize) -> Result<Vec<DenoisePrediction>> {
        if states.len() != self.conds.len() {
            return Err(Error::Validation("conditioning count does not match batch".into()));
        }
        let prepare = |i: usize| prepare_sequence(self.store, &states[i], t, &self.conds[i], self.cfg);
        let mut seq_states = match self.exec {
            ExecMode::Sequential => (0..states.len()).map(prepare).collect::<Result<Vec<_>>>()?,
            ExecMode::Parallel => (0..states.len())
                .into_par_iter()
                .map(prepare)
                .collect::<Result<Vec<_>>>()?,
        };
        let np = self.cfg.num_patches();
        for block in 0..self.cfg.depth {
            match self.exec {
                ExecMode::Sequential => {
                    for st in seq_states.iter_mut() {
                        run_block(self.store, st, block, self.cfg);
                    }
                }
                ExecMode::Parallel => {
                    seq_states
                        .par_iter_mut()
                        .for_each(|st| run_block(self.store, st, block, self.cfg));
                }
            }
            // barrier: every row finished this block before any override
            if let Some(slot) = self.anchor_slot {
                if seq_states.len() > 1 {
                    let anchor = seq_states[0].tokens.slice(s![slot * np..(slot + 1) * np, ..]).to_owned();
                    for st in seq_states.iter_mut().skip(1) {
                        st.tokens.slice_mut(s![slot * np..(slot + 1) * np, ..]).assign(&anchor);
                    }
                }
            }
        }
        let head = |st: &crate::model::SequenceState| run_head(self.store, st, self.cfg);
        match self.exec {
            ExecMode::Sequential => seq_states.iter().map(head).collect(),
            ExecMode::Parallel => seq_states.par_iter().map(head).collect(),
        }
    }
}

fn draw_noise(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
    let mut x = Array4::zeros(shape);
    for v in x.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    x
}

/// Replace frames covered by several windows with their mean, in every
/// covering window. Accumulation runs in ascending window order so the
/// result does not depend on thread scheduling.
fn average_shared_frames(states: &mut [Array4<f64>], window_starts: &[usize], video_len: usize) {
    let t = states[0].dim().0;
    let mut coverage: Vec<Vec<(usize, usize)>> = vec![Vec::new(); video_len];
    for (w, &start) in window_starts.iter().enumerate() {
        for slot in 0..t {
            coverage[start + slot].push((w, slot));
        }
    }
    for views in coverage.iter().filter(|v| v.len() > 1) {
        let (w0, s0) = views[0];
        let mut mean = states[w0].slice(s![s0, .., .., ..]).to_owned();
        for &(w, slot) in views.iter().skip(1) {
            mean += &states[w].slice(s![slot, .., .., ..]);
        }
        mean /= views.len() as f64;
        for &(w, slot) in views {
            states[w].slice_mut(s![slot, .., .., ..]).assign(&mean);
        }
    }
}

/// Shared reverse-diffusion driver: initialize every row from its own noise
/// stream, then alternate denoise, merge, sample, merge.
fn reverse_diffusion_rows(
    rows: usize,
    frame_shape: (usize, usize, usize, usize),
    sched: &DiffusionSchedule,
    seed: u64,
    denoiser: &mut dyn BatchDenoiser,
    merge: MergeRule,
) -> Result<Vec<Array4<f64>>> {
    let mut rngs: Vec<ChaCha8Rng> =
        (0..rows).map(|r| derive_rng(seed, r as u64, GEN_SUBSTREAM)).collect();
    let mut xs: Vec<Array4<f64>> =
        rngs.iter_mut().map(|rng| draw_noise(frame_shape, rng)).collect();

    for t in (0..sched.t_max).rev() {
        let mut preds = denoiser.denoise_batch(&xs, t)?;
        if let MergeRule::Anchor { slot } = merge {
            if preds.len() > 1 {
                let anchor_noise = preds[0].noise.slice(s![slot, .., .., ..]).to_owned();
                let anchor_sigma =
                    preds[0].sigma_raw.as_ref().map(|sr| sr.slice(s![slot, .., .., ..]).to_owned());
                for p in preds.iter_mut().skip(1) {
                    p.noise.slice_mut(s![slot, .., .., ..]).assign(&anchor_noise);
                    if let (Some(sr), Some(asr)) = (p.sigma_raw.as_mut(), anchor_sigma.as_ref()) {
                        sr.slice_mut(s![slot, .., .., ..]).assign(asr);
                    }
                }
            }
        }
        for ((x, pred), rng) in xs.iter_mut().zip(preds.iter()).zip(rngs.iter_mut()) {
            *x = sampler_step(x, &pred.noise, t, sched, rng, pred.sigma_raw.as_ref())?;
        }
        match &merge {
            MergeRule::None => {}
            MergeRule::Anchor { slot } => {
                if xs.len() > 1 {
                    let anchor = xs[0].slice(s![*slot, .., .., ..]).to_owned();
                    for x in xs.iter_mut().skip(1) {
                        x.slice_mut(s![*slot, .., .., ..]).assign(&anchor);
                    }
                }
            }
            MergeRule::Average { window_starts, video_len } => {
                average_shared_frames(&mut xs, window_starts, *video_len);
            }
        }
    }
    Ok(xs)
}

/// Per-row conditioning for a plan: the shared global signal plus each
/// planned frame's local signal.
pub fn plan_conditioning(
    cfg: &ModelConfig,
    store: &ParameterStore,
    plan: &AnchoredBatchPlan,
    global_signal: &[f64],
    local_signals: &Array3<f64>,
) -> Result<Vec<ConditioningSignal>> {
    let (b, t, d) = local_signals.dim();
    if b != plan.batch || t != plan.seq_len || d != cfg.local_dim {
        return Err(Error::Validation(format!(
            "local signals [{b},{t},{d}] do not match plan [{},{}] and local dim {}",
            plan.batch, plan.seq_len, cfg.local_dim
        )));
    }
    (0..plan.batch)
        .map(|row| {
            let locals = local_signals.slice(s![row, .., ..]).to_owned();
            mapping_network(store, global_signal, &locals, cfg)
        })
        .collect()
}

/// Anchored generation returning the raw per-row sequences (before
/// reordering); the anchor frame is bitwise identical across rows.
pub fn anchored_generate_rows(
    cfg: &ModelConfig,
    store: &ParameterStore,
    plan: &AnchoredBatchPlan,
    global_signal: &[f64],
    local_signals: &Array3<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<Array4<f64>>> {
    plan.validate()?;
    if plan.seq_len != cfg.frames_per_sequence {
        return Err(Error::Validation(format!(
            "plan rows of {} frames do not match the model's T={}",
            plan.seq_len, cfg.frames_per_sequence
        )));
    }
    let conds = plan_conditioning(cfg, store, plan, global_signal, local_signals)?;
    let mut denoiser = ModelBatchDenoiser {
        cfg,
        store,
        conds,
        anchor_slot: Some(plan.anchor_slot),
        exec,
    };
    let shape = (cfg.frames_per_sequence, cfg.image_size, cfg.image_size, cfg.channels);
    reverse_diffusion_rows(
        plan.batch,
        shape,
        sched,
        seed,
        &mut denoiser,
        MergeRule::Anchor { slot: plan.anchor_slot },
    )
}

/// Anchored generation, reordered chronologically.
pub fn anchored_generate(
    cfg: &ModelConfig,
    store: &ParameterStore,
    plan: &AnchoredBatchPlan,
    global_signal: &[f64],
    local_signals: &Array3<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
    exec: ExecMode,
) -> Result<Array4<f64>> {
    let rows = anchored_generate_rows(cfg, store, plan, global_signal, local_signals, sched, seed, exec)?;
    reorder_frames(&stack_rows(&rows), plan)
}

/// Stack per-row frames into `[B, T, H, W, C]`.
pub fn stack_rows(rows: &[Array4<f64>]) -> Array5<f64> {
    let (t, h, w, c) = rows[0].dim();
    let mut out = Array5::zeros((rows.len(), t, h, w, c));
    for (b, row) in rows.iter().enumerate() {
        out.slice_mut(s![b, .., .., .., ..]).assign(row);
    }
    out
}

/// Plain single-sequence sampling: generates exactly T frames.
pub fn plain_generate(
    cfg: &ModelConfig,
    store: &ParameterStore,
    global_signal: &[f64],
    local_signals: &Array2<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
    exec: ExecMode,
) -> Result<Array4<f64>> {
    let cond = mapping_network(store, global_signal, local_signals, cfg)?;
    let mut denoiser = ModelBatchDenoiser { cfg, store, conds: vec![cond], anchor_slot: None, exec };
    let shape = (cfg.frames_per_sequence, cfg.image_size, cfg.image_size, cfg.channels);
    let mut rows = reverse_diffusion_rows(1, shape, sched, seed, &mut denoiser, MergeRule::None)?;
    Ok(rows.remove(0))
}

/// Window start offsets for a MultiDiffusion tiling, or a planning error if
/// the stride does not land exactly on the last frame.
pub fn multidiffusion_windows(n: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if window < 2 || overlap == 0 || overlap >= window {
        return Err(Error::Planning(format!(
            "invalid window/overlap {window}/{overlap}; need 0 < overlap < window"
        )));
    }
    if n < window {
        return Err(Error::Planning(format!("video length {n} shorter than window {window}")));
    }
    let stride = window - overlap;
    if (n - window) % stride != 0 {
        return Err(Error::Planning(format!(
            "video length {n} incompatible with window {window} and overlap {overlap}"
        )));
    }
    Ok((0..=(n - window)).step_by(stride).collect())
}

/// MultiDiffusion baseline: denoise all windows jointly, averaging shared
/// frames after every sampler step, then assemble by averaging once more.
pub fn multidiffusion_generate(
    cfg: &ModelConfig,
    store: &ParameterStore,
    n: usize,
    overlap: usize,
    global_signal: &[f64],
    local_signals: &Array2<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
    exec: ExecMode,
) -> Result<Array4<f64>> {
    let window = cfg.frames_per_sequence;
    let starts = multidiffusion_windows(n, window, overlap)?;
    if local_signals.nrows() != n || local_signals.ncols() != cfg.local_dim {
        return Err(Error::Validation(format!(
            "need one local signal per frame: got {:?}, want [{n}, {}]",
            local_signals.dim(),
            cfg.local_dim
        )));
    }
    let conds = starts
        .iter()
        .map(|&start| {
            let locals = local_signals.slice(s![start..start + window, ..]).to_owned();
            mapping_network(store, global_signal, &locals, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut denoiser = ModelBatchDenoiser { cfg, store, conds, anchor_slot: None, exec };
    let shape = (window, cfg.image_size, cfg.image_size, cfg.channels);
    let xs = reverse_diffusion_rows(
        starts.len(),
        shape,
        sched,
        seed,
        &mut denoiser,
        MergeRule::Average { window_starts: starts.clone(), video_len: n },
    )?;

    // decode-time average; shared frames already agree after the last step
    let (_, h, w, c) = xs[0].dim();
    let mut out = Array4::zeros((n, h, w, c));
    let mut counts = vec![0usize; n];
    for (&start, x) in starts.iter().zip(xs.iter()) {
        for slot in 0..window {
            let g = start + slot;
            let mut acc = out.slice_mut(s![g, .., .., ..]);
            acc += &x.slice(s![slot, .., .., ..]);
            counts[g] += 1;
        }
    }
    for g in 0..n {
        let mut frame = out.slice_mut(s![g, .., .., ..]);
        frame /= counts[g] as f64;
    }
    Ok(out)
}

/// Smallest overlap in `1..window` whose stride tiles a length-`n` video.
pub fn pick_overlap(n: usize, window: usize) -> Result<usize> {
    if n == window {
        return Ok(1);
    }
    for overlap in 1..window {
        let stride = window - overlap;
        if n >= window && (n - window) % stride == 0 {
            return Ok(overlap);
        }
    }
    Err(Error::Planning(format!(
        "no overlap in 1..{window} tiles a video of length {n}"
    )))
}

/// Local signals for every planned (row, slot) from a driving clip.
pub fn plan_local_signals(clip: &VideoClip, plan: &AnchoredBatchPlan) -> Result<Array3<f64>> {
    if clip.num_frames() < plan.video_len {
        return Err(Error::Validation(format!(
            "driving clip has {} frames, plan needs {}",
            clip.num_frames(),
            plan.video_len
        )));
    }
    let d = 2 * clip.control_points.dim().1;
    let mut out = Array3::zeros((plan.batch, plan.seq_len, d));
    for (row, seq) in plan.sequences.iter().enumerate() {
        for (slot, &g) in seq.iter().enumerate() {
            let sig = encode_local_signal(clip.control_points.slice(s![g, .., ..]))?;
            for (i, v) in sig.iter().enumerate() {
                out[[row, slot, i]] = *v;
            }
        }
    }
    Ok(out)
}

/// Local signals for frames `0..n` of a driving clip.
pub fn clip_local_signals(clip: &VideoClip, n: usize) -> Result<Array2<f64>> {
    if clip.num_frames() < n {
        return Err(Error::Validation(format!(
            "driving clip has {} frames, need {n}",
            clip.num_frames()
        )));
    }
    let d = 2 * clip.control_points.dim().1;
    let mut out = Array2::zeros((n, d));
    for g in 0..n {
        let sig = encode_local_signal(clip.control_points.slice(s![g, .., ..]))?;
        for (i, v) in sig.iter().enumerate() {
            out[[g, i]] = *v;
        }
    }
    Ok(out)
}

/// Self-reenactment generation: drive the model with a clip's own control
/// points and identity (source frame 0) and stitch `n` frames with the
/// chosen strategy.
pub fn generate_video(
    cfg: &ModelConfig,
    store: &ParameterStore,
    clip: &VideoClip,
    strategy: Strategy,
    n: usize,
    sched: &DiffusionSchedule,
    seed: u64,
    exec: ExecMode,
) -> Result<Array4<f64>> {
    let global = encode_global_signal(clip, 0)?;
    match strategy {
        Strategy::Plain => {
            if n != cfg.frames_per_sequence {
                return Err(Error::Planning(format!(
                    "plain sampling generates exactly T={} frames, asked for {n}",
                    cfg.frames_per_sequence
                )));
            }
            let locals = clip_local_signals(clip, n)?;
            plain_generate(cfg, store, &global, &locals, sched, seed, exec)
        }
        Strategy::Anchored => {
            let plan = plan_for_length(n, cfg.frames_per_sequence)?;
            let locals = plan_local_signals(clip, &plan)?;
            anchored_generate(cfg, store, &plan, &global, &locals, sched, seed, exec)
        }
        Strategy::MultiDiffusion => {
            let overlap = pick_overlap(n, cfg.frames_per_sequence)?;
            let locals = clip_local_signals(clip, n)?;
            multidiffusion_generate(cfg, store, n, overlap, &global, &locals, sched, seed, exec)
        }
    }
}
