//! Procedural moving-shapes video generator.
//!
//! Produces deterministic toy clips with a single colored shape following an
//! analytic trajectory over a flat background. Per-frame control points track
//! the trajectory exactly and stand in for landmark signals; a compact
//! identity code derived from the scene appearance stands in for a learned
//! global embedding.

use crate::error::{Error, Result};
use crate::DEFAULT_PATCH_SIZE;
use ndarray::{s, Array2, Array3, Array4, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Number of control points per frame.
pub const NUM_CONTROL_POINTS: usize = 8;

/// Fixed subset of control-point indices treated as "expressive" (the toy
/// analog of mouth/eye landmarks). Identical across frames and clips.
pub const EXPRESSIVE_INDICES: [usize; 3] = [0, 1, 2];

/// Side length of the coarse pooled rendering folded into the global signal.
pub const GLOBAL_COARSE: usize = 4;

/// Dimension of the per-frame local signal vector: flattened control points.
pub const LOCAL_SIGNAL_DIM: usize = 2 * NUM_CONTROL_POINTS;

/// Dimension of the global identity signal for a given channel count.
pub fn global_signal_dim(channels: usize) -> usize {
    // one-hot shape kind + size + color + background + coarse rendering
    3 + 1 + 3 + 3 + GLOBAL_COARSE * GLOBAL_COARSE * channels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn index(self) -> usize {
        match self {
            ShapeKind::Disk => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            0 => Ok(ShapeKind::Disk),
            1 => Ok(ShapeKind::Square),
            2 => Ok(ShapeKind::Triangle),
            _ => Err(Error::Format(format!("unknown shape kind {i}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Straight line across the clip: `0.5 + amp * (2n/(N-1) - 1)`.
    Linear,
    /// Sinusoid per axis: `0.5 + amp * sin(freq * n + phase)`.
    Sinusoidal,
}

impl TrajectoryKind {
    pub fn index(self) -> usize {
        match self {
            TrajectoryKind::Linear => 0,
            TrajectoryKind::Sinusoidal => 1,
        }
    }

    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            0 => Ok(TrajectoryKind::Linear),
            1 => Ok(TrajectoryKind::Sinusoidal),
            _ => Err(Error::Format(format!("unknown trajectory kind {i}"))),
        }
    }
}

/// Parametric trajectory of the shape center, in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSpec {
    pub kind: TrajectoryKind,
    pub amp_x: f64,
    pub amp_y: f64,
    pub freq_x: f64,
    pub freq_y: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

impl MotionSpec {
    pub fn still() -> Self {
        MotionSpec {
            kind: TrajectoryKind::Linear,
            amp_x: 0.0,
            amp_y: 0.0,
            freq_x: 0.0,
            freq_y: 0.0,
            phase_x: 0.0,
            phase_y: 0.0,
        }
    }
}

/// Full description of a synthetic scene. Identical specs render to
/// bit-identical clips.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub shape_kind: ShapeKind,
    /// Shape diameter as a fraction of image height, strictly inside (0, 1).
    pub shape_size: f64,
    /// Shape color, each channel in [0, 1].
    pub color: [f64; 3],
    /// Background color, each channel in [0, 1].
    pub background_color: [f64; 3],
    pub motion: MotionSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.shape_size > 0.0 && self.shape_size < 1.0) {
            return Err(Error::Config(format!(
                "shape_size must lie strictly inside (0,1), got {}",
                self.shape_size
            )));
        }
        for c in self.color.iter().chain(self.background_color.iter()) {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::Config(format!("color channel {c} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Draw a random in-bounds scene. All fields, including the trajectory,
    /// derive from `seed` alone.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SCENE_SEED_MARKER);
        let shape_kind = match rng.random_range(0..3u32) {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let shape_size = rng.random_range(0.2..0.4);
        let background_color = [rng.random(), rng.random(), rng.random()];
        let color = loop {
            let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let dist2: f64 = c
                .iter()
                .zip(background_color.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist2 > 0.16 {
                break c;
            }
        };
        // Keep the shape and its control ring inside the frame with margin.
        let reach = shape_size / 2.0 + 0.05;
        let max_amp = f64::max(0.5 - reach, 0.02);
        let motion = MotionSpec {
            kind: TrajectoryKind::Sinusoidal,
            amp_x: rng.random_range(0.3 * max_amp..max_amp),
            amp_y: rng.random_range(0.3 * max_amp..max_amp),
            freq_x: rng.random_range(0.2..0.9),
            freq_y: rng.random_range(0.2..0.9),
            phase_x: rng.random_range(0.0..std::f64::consts::TAU),
            phase_y: rng.random_range(0.0..std::f64::consts::TAU),
        };
        SceneSpec { seed, shape_kind, shape_size, color, background_color, motion }
    }
}

// Mixed into scene seeds so scene streams differ from other derived streams
// built from the same user seed.
const SCENE_SEED_MARKER: u64 = 0x5ce9_aa17_0f21_43c7;

/// A rendered clip: frames in [-1, 1], control points in [0, 1].
#[derive(Debug, Clone)]
pub struct VideoClip {
    /// Shape `[N, H, W, C]`.
    pub frames: Array4<f64>,
    /// Shape `[N, K, 2]`, coordinates ordered (x, y).
    pub control_points: Array3<f64>,
    pub spec: SceneSpec,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// Closed-form center of the shape at frame `n` of `num_frames`.
pub fn trajectory_center(spec: &SceneSpec, n: usize, num_frames: usize) -> (f64, f64) {
    let m = &spec.motion;
    match m.kind {
        TrajectoryKind::Linear => {
            let u = if num_frames > 1 { 2.0 * n as f64 / (num_frames - 1) as f64 - 1.0 } else { 0.0 };
            (0.5 + m.amp_x * u, 0.5 + m.amp_y * u)
        }
        TrajectoryKind::Sinusoidal => (
            0.5 + m.amp_x * (m.freq_x * n as f64 + m.phase_x).sin(),
            0.5 + m.amp_y * (m.freq_y * n as f64 + m.phase_y).sin(),
        ),
    }
}

/// Analytic control points for frame `n`: the shape center plus a ring of
/// seven points at fixed angles, radius 0.3 * shape_size. Coordinates are
/// clamped to [0, 1]; in-bounds specs are never clamped.
pub fn control_points_at(spec: &SceneSpec, n: usize, num_frames: usize) -> Array2<f64> {
    let (cx, cy) = trajectory_center(spec, n, num_frames);
    let r = 0.3 * spec.shape_size;
    let mut pts = Array2::zeros((NUM_CONTROL_POINTS, 2));
    pts[[0, 0]] = cx.clamp(0.0, 1.0);
    pts[[0, 1]] = cy.clamp(0.0, 1.0);
    for k in 1..NUM_CONTROL_POINTS {
        let theta = std::f64::consts::TAU * (k - 1) as f64 / (NUM_CONTROL_POINTS - 1) as f64;
        pts[[k, 0]] = (cx + r * theta.cos()).clamp(0.0, 1.0);
        pts[[k, 1]] = (cy + r * theta.sin()).clamp(0.0, 1.0);
    }
    pts
}

fn to_signed(c: f64) -> f64 {
    2.0 * c - 1.0
}

/// Coverage of the shape at a normalized point, softened over one pixel.
fn shape_alpha(spec: &SceneSpec, cx: f64, cy: f64, x: f64, y: f64, edge: f64) -> f64 {
    let radius = spec.shape_size / 2.0;
    let signed_dist = match spec.shape_kind {
        ShapeKind::Disk => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - radius,
        ShapeKind::Square => (x - cx).abs().max((y - cy).abs()) - radius,
        ShapeKind::Triangle => {
            // Equilateral triangle, apex up (negative y), circumradius = radius.
            let angles = [-0.5 * std::f64::consts::PI, std::f64::consts::PI / 6.0, 5.0 * std::f64::consts::PI / 6.0];
            let verts: Vec<(f64, f64)> = angles
                .iter()
                .map(|a| (cx + radius * a.cos(), cy + radius * a.sin()))
                .collect();
            let mut d = f64::NEG_INFINITY;
            for i in 0..3 {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                let (ex, ey) = (bx - ax, by - ay);
                let len = (ex * ex + ey * ey).sqrt();
                let (mut nx, mut ny) = (ey / len, -ex / len);
                if (cx - ax) * nx + (cy - ay) * ny > 0.0 {
                    nx = -nx;
                    ny = -ny;
                }
                d = d.max((x - ax) * nx + (y - ay) * ny);
            }
            d
        }
    };
    (0.5 - signed_dist / edge).clamp(0.0, 1.0)
}

/// Render a clip. Deterministic function of its inputs.
pub fn generate_clip(
    spec: &SceneSpec,
    num_frames: usize,
    height: usize,
    width: usize,
) -> Result<VideoClip> {
    spec.validate()?;
    if num_frames < 2 {
        return Err(Error::Config(format!("num_frames must be >= 2, got {num_frames}")));
    }
    if height < 8 || width < 8 {
        return Err(Error::Config(format!("dimensions must be >= 8, got {height}x{width}")));
    }
    if height % DEFAULT_PATCH_SIZE != 0 || width % DEFAULT_PATCH_SIZE != 0 {
        return Err(Error::Config(format!(
            "dimensions {height}x{width} not divisible by patch size {DEFAULT_PATCH_SIZE}"
        )));
    }
    let channels = 3usize;
    let mut frames = Array4::zeros((num_frames, height, width, channels));
    let mut control = Array3::zeros((num_frames, NUM_CONTROL_POINTS, 2));
    let edge = 1.0 / height as f64;
    let fg: Vec<f64> = spec.color.iter().map(|&c| to_signed(c)).collect();
    let bg: Vec<f64> = spec.background_color.iter().map(|&c| to_signed(c)).collect();
    for n in 0..num_frames {
        let (cx, cy) = trajectory_center(spec, n, num_frames);
        for i in 0..height {
            let y = (i as f64 + 0.5) / height as f64;
            for j in 0..width {
                let x = (j as f64 + 0.5) / width as f64;
                let a = shape_alpha(spec, cx, cy, x, y, edge);
                for c in 0..channels {
                    frames[[n, i, j, c]] = bg[c] + a * (fg[c] - bg[c]);
                }
            }
        }
        control.slice_mut(s![n, .., ..]).assign(&control_points_at(spec, n, num_frames));
    }
    Ok(VideoClip { frames, control_points: control, spec: spec.clone() })
}

/// Identity code: appearance fields verbatim plus a coarse pooled rendering
/// of the indicated frame. Scenes with equal appearance fields share the
/// leading sub-vector exactly.
pub fn encode_global_signal(clip: &VideoClip, frame_index: usize) -> Result<Vec<f64>> {
    if frame_index >= clip.num_frames() {
        return Err(Error::Validation(format!(
            "frame index {frame_index} out of range for clip of {} frames",
            clip.num_frames()
        )));
    }
    let mut v = Vec::with_capacity(global_signal_dim(clip.channels()));
    let mut one_hot = [0.0; 3];
    one_hot[clip.spec.shape_kind.index()] = 1.0;
    v.extend_from_slice(&one_hot);
    v.push(clip.spec.shape_size);
    v.extend_from_slice(&clip.spec.color);
    v.extend_from_slice(&clip.spec.background_color);

    let (h, w, c) = (clip.height(), clip.width(), clip.channels());
    for bi in 0..GLOBAL_COARSE {
        let r0 = bi * h / GLOBAL_COARSE;
        let r1 = (bi + 1) * h / GLOBAL_COARSE;
        for bj in 0..GLOBAL_COARSE {
            let c0 = bj * w / GLOBAL_COARSE;
            let c1 = (bj + 1) * w / GLOBAL_COARSE;
            for ch in 0..c {
                let mut sum = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        sum += clip.frames[[frame_index, i, j, ch]];
                    }
                }
                v.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    Ok(v)
}

/// Flatten a `[K, 2]` control-point frame into a fixed-order vector
/// `[x_0, y_0, x_1, y_1, ...]`.
pub fn encode_local_signal(points: ArrayView2<f64>) -> Result<Vec<f64>> {
    if points.ncols() != 2 {
        return Err(Error::Validation(format!(
            "control points must have 2 columns, got {}",
            points.ncols()
        )));
    }
    for &p in points.iter() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!("control coordinate {p} outside [0,1]")));
        }
    }
    Ok(points.iter().cloned().collect())
}

/// Inverse of [`encode_local_signal`].
pub fn decode_local_signal(v: &[f64]) -> Result<Array2<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Validation(format!("local signal length {} is odd", v.len())));
    }
    Ok(Array2::from_shape_vec((v.len() / 2, 2), v.to_vec())
        .expect("shape follows from length check"))
}

/// Training sample: a non-uniform frame sequence plus its conditioning.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Strictly increasing frame indices into the source clip.
    pub indices: Vec<usize>,
    /// Endpoint of the clip farthest from the selected sequence.
    pub source_index: usize,
    /// Shape `[T, H, W, C]`.
    pub driving_frames: Array4<f64>,
    /// Shape `[H, W, C]`.
    pub source_frame: Array3<f64>,
    /// Identity code of the source frame.
    pub global_signal: Vec<f64>,
    /// Shape `[T, 2K]`: flattened control points per selected frame.
    pub local_signals: Array2<f64>,
}

/// Endpoint of `[0, n-1]` farthest from the selected index range; ties go
/// to the left endpoint.
pub fn source_endpoint(first: usize, last: usize, n: usize) -> usize {
    let left_gap = first;
    let right_gap = n - 1 - last;
    if left_gap >= right_gap {
        0
    } else {
        n - 1
    }
}

/// Draw a sorted non-uniform sequence of `t` distinct frame indices and
/// assemble the conditioning signals around it.
pub fn sample_nonuniform_sequence(
    clip: &VideoClip,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let n = clip.num_frames();
    if t < 2 {
        return Err(Error::Validation(format!("sequence length must be >= 2, got {t}")));
    }
    if t + 1 > n {
        return Err(Error::Validation(format!(
            "insufficient frames: need at least {} frames for a sequence of {t}, clip has {n}",
            t + 1
        )));
    }
    let mut indices: Vec<usize> = rand::seq::index::sample(rng, n, t).into_vec();
    indices.sort_unstable();
    let source_index = source_endpoint(indices[0], indices[t - 1], n);

    let (h, w, c) = (clip.height(), clip.width(), clip.channels());
    let mut driving = Array4::zeros((t, h, w, c));
    let mut locals = Array2::zeros((t, LOCAL_SIGNAL_DIM));
    for (slot, &fi) in indices.iter().enumerate() {
        driving.slice_mut(s![slot, .., .., ..]).assign(&clip.frames.slice(s![fi, .., .., ..]));
        let sig = encode_local_signal(clip.control_points.slice(s![fi, .., ..]))?;
        for (d, v) in sig.iter().enumerate() {
            locals[[slot, d]] = *v;
        }
    }
    let source_frame = clip.frames.slice(s![source_index, .., .., ..]).to_owned();
    let global_signal = encode_global_signal(clip, source_index)?;
    Ok(TrainingSample {
        indices,
        source_index,
        driving_frames: driving,
        source_frame,
        global_signal,
        local_signals: locals,
    })
}

// ---- clip container (AVD1) ----

const CLIP_MAGIC: &[u8; 4] = b"AVD1";

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Serialize a clip to the little-endian AVD1 container.
pub fn clip_to_bytes(clip: &VideoClip) -> Vec<u8> {
    let (n, h, w, c) = (clip.num_frames(), clip.height(), clip.width(), clip.channels());
    let mut out = Vec::with_capacity(16 + 4 * n * h * w * c);
    out.extend_from_slice(CLIP_MAGIC);
    for v in [n, h, w, c, NUM_CONTROL_POINTS] {
        write_u32(&mut out, v as u32);
    }
    for v in clip.frames.iter() {
        write_f32(&mut out, *v);
    }
    for v in clip.control_points.iter() {
        write_f32(&mut out, *v);
    }
    let spec = &clip.spec;
    out.extend_from_slice(&spec.seed.to_le_bytes());
    write_u32(&mut out, spec.shape_kind.index() as u32);
    write_f32(&mut out, spec.shape_size);
    for v in spec.color.iter().chain(spec.background_color.iter()) {
        write_f32(&mut out, *v);
    }
    write_u32(&mut out, spec.motion.kind.index() as u32);
    for v in [
        spec.motion.amp_x,
        spec.motion.amp_y,
        spec.motion.freq_x,
        spec.motion.freq_y,
        spec.motion.phase_x,
        spec.motion.phase_y,
    ] {
        write_f32(&mut out, v);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of clip file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

/// Parse a clip from AVD1 bytes.
pub fn clip_from_bytes(buf: &[u8]) -> Result<VideoClip> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != CLIP_MAGIC {
        return Err(Error::Format("bad clip magic, expected AVD1".into()));
    }
    let n = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    if k != NUM_CONTROL_POINTS {
        return Err(Error::Format(format!(
            "clip has {k} control points, expected {NUM_CONTROL_POINTS}"
        )));
    }
    let mut frames = Array4::zeros((n, h, w, c));
    for v in frames.iter_mut() {
        *v = cur.f32()?;
    }
    let mut control = Array3::zeros((n, k, 2));
    for v in control.iter_mut() {
        *v = cur.f32()?;
    }
    let seed = cur.u64()?;
    let shape_kind = ShapeKind::from_index(cur.u32()?)?;
    let shape_size = cur.f32()?;
    let mut color = [0.0; 3];
    let mut background_color = [0.0; 3];
    for v in color.iter_mut() {
        *v = cur.f32()?;
    }
    for v in background_color.iter_mut() {
        *v = cur.f32()?;
    }
    let kind = TrajectoryKind::from_index(cur.u32()?)?;
    let motion = MotionSpec {
        kind,
        amp_x: cur.f32()?,
        amp_y: cur.f32()?,
        freq_x: cur.f32()?,
        freq_y: cur.f32()?,
        phase_x: cur.f32()?,
        phase_y: cur.f32()?,
    };
    Ok(VideoClip {
        frames,
        control_points: control,
        spec: SceneSpec { seed, shape_kind, shape_size, color, background_color, motion },
    })
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&clip_to_bytes(clip))?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    clip_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_spec() -> SceneSpec {
        SceneSpec {
            seed: 7,
            shape_kind: ShapeKind::Disk,
            shape_size: 0.3,
            color: [0.9, 0.2, 0.1],
            background_color: [0.1, 0.1, 0.4],
            motion: MotionSpec {
                kind: TrajectoryKind::Sinusoidal,
                amp_x: 0.2,
                amp_y: 0.1,
                freq_x: 0.5,
                freq_y: 0.7,
                phase_x: 0.3,
                phase_y: 1.1,
            },
        }
    }

    #[test]
    fn identical_specs_render_identically() {
        let spec = test_spec();
        let a = generate_clip(&spec, 6, 16, 16).unwrap();
        let b = generate_clip(&spec, 6, 16, 16).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.control_points, b.control_points);
    }

    #[test]
    fn zero_motion_freezes_the_clip() {
        let mut spec = test_spec();
        spec.motion = MotionSpec::still();
        let clip = generate_clip(&spec, 5, 16, 16).unwrap();
        for n in 1..5 {
            assert_eq!(clip.frames.slice(s![n, .., .., ..]), clip.frames.slice(s![0, .., .., ..]));
            assert_eq!(
                clip.control_points.slice(s![n, .., ..]),
                clip.control_points.slice(s![0, .., ..])
            );
        }
    }

    #[test]
    fn linear_trajectory_matches_independent_formula() {
        let mut spec = test_spec();
        let a = 0.15;
        spec.motion = MotionSpec {
            kind: TrajectoryKind::Linear,
            amp_x: a,
            amp_y: 0.0,
            freq_x: 0.0,
            freq_y: 0.0,
            phase_x: 0.0,
            phase_y: 0.0,
        };
        let n_frames = 9;
        let clip = generate_clip(&spec, n_frames, 16, 16).unwrap();
        for n in 0..n_frames {
            // independent closed form: linear sweep from 0.5-a to 0.5+a
            let expected = 0.5 - a + 2.0 * a * n as f64 / (n_frames - 1) as f64;
            assert_abs_diff_eq!(clip.control_points[[n, 0, 0]], expected, epsilon = 1e-12);
            assert_abs_diff_eq!(clip.control_points[[n, 0, 1]], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn pixel_and_point_ranges_hold() {
        let clip = generate_clip(&SceneSpec::random(3), 8, 16, 16).unwrap();
        assert!(clip.frames.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(clip.control_points.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bad_dimensions_are_config_errors() {
        let spec = test_spec();
        assert!(matches!(generate_clip(&spec, 1, 16, 16), Err(Error::Config(_))));
        assert!(matches!(generate_clip(&spec, 4, 7, 16), Err(Error::Config(_))));
        assert!(matches!(generate_clip(&spec, 4, 16, 15), Err(Error::Config(_))));
    }

    #[test]
    fn global_signal_copies_identity_fields() {
        let spec_a = test_spec();
        let mut spec_b = test_spec();
        spec_b.seed = 99;
        spec_b.motion.phase_x = 2.0; // different trajectory, same identity
        let a = generate_clip(&spec_a, 4, 16, 16).unwrap();
        let b = generate_clip(&spec_b, 4, 16, 16).unwrap();
        let ga = encode_global_signal(&a, 0).unwrap();
        let gb = encode_global_signal(&b, 0).unwrap();
        assert_eq!(ga[..10], gb[..10]);

        let mut spec_c = test_spec();
        spec_c.shape_kind = ShapeKind::Square;
        let c = generate_clip(&spec_c, 4, 16, 16).unwrap();
        let gc = encode_global_signal(&c, 0).unwrap();
        assert_ne!(ga[..3], gc[..3]);
        assert_eq!(&ga[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&gc[..3], &[0.0, 1.0, 0.0]);
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn same_scene_codes_are_closer_than_cross_scene() {
        // brute-force sampling oracle over 100 random spec pairs
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for seed in 0..100u64 {
            let a = generate_clip(&SceneSpec::random(seed), 6, 16, 16).unwrap();
            let b = generate_clip(&SceneSpec::random(seed + 1000), 6, 16, 16).unwrap();
            let a0 = encode_global_signal(&a, 0).unwrap();
            let a5 = encode_global_signal(&a, 5).unwrap();
            let b0 = encode_global_signal(&b, 0).unwrap();
            same.push(cosine(&a0, &a5));
            cross.push(cosine(&a0, &b0));
        }
        let mean_same: f64 = same.iter().sum::<f64>() / same.len() as f64;
        let mean_cross: f64 = cross.iter().sum::<f64>() / cross.len() as f64;
        assert!(
            mean_same >= mean_cross,
            "same-scene {mean_same} should be >= cross-scene {mean_cross}"
        );
    }

    #[test]
    fn local_signal_flattening() {
        let pts = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(encode_local_signal(pts.view()).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);

        let constant = Array2::from_elem((NUM_CONTROL_POINTS, 2), 0.5);
        let enc = encode_local_signal(constant.view()).unwrap();
        assert!(enc.iter().all(|&v| v == 0.5));

        let bad = Array2::from_elem((3, 2), 1.5);
        assert!(matches!(encode_local_signal(bad.view()), Err(Error::Validation(_))));
    }

    #[test]
    fn local_signal_round_trip() {
        let clip = generate_clip(&SceneSpec::random(11), 4, 16, 16).unwrap();
        let pts = clip.control_points.slice(s![2, .., ..]);
        let enc = encode_local_signal(pts).unwrap();
        let dec = decode_local_signal(&enc).unwrap();
        assert_eq!(dec, pts.to_owned());
    }

    #[test]
    fn source_rule_examples() {
        // selected {6,7,8,9} of 10 -> left endpoint
        assert_eq!(source_endpoint(6, 9, 10), 0);
        // selected {0,1,2,3} of 10 -> right endpoint
        assert_eq!(source_endpoint(0, 3, 10), 9);
    }

    #[test]
    fn source_rule_exhaustive_small_n() {
        // every subset of every N <= 12: endpoint rule with ties toward 0
        for n in 2..=12usize {
            for mask in 1u32..(1 << n) {
                let sel: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                if sel.len() < 2 {
                    continue;
                }
                let s = source_endpoint(sel[0], sel[sel.len() - 1], n);
                let left = sel[0];
                let right = n - 1 - sel[sel.len() - 1];
                let expected = if left >= right { 0 } else { n - 1 };
                assert_eq!(s, expected);
                assert!(s == 0 || s == n - 1);
            }
        }
    }

    #[test]
    fn sequence_sampler_contract() {
        let clip = generate_clip(&SceneSpec::random(5), 32, 16, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = 8;
        let draws = 10_000;
        let mut hits = vec![0usize; 32];
        for _ in 0..draws {
            let s = sample_nonuniform_sequence(&clip, t, &mut rng).unwrap();
            assert!(s.indices.windows(2).all(|w| w[0] < w[1]), "indices must strictly increase");
            assert!(s.source_index == 0 || s.source_index == 31);
            for &i in &s.indices {
                hits[i] += 1;
            }
        }
        // marginal inclusion probability T/N within 3 standard errors
        let p = t as f64 / 32.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "index {i}: inclusion {freq} vs expected {p} (3se = {})",
                3.0 * se
            );
        }
    }

    #[test]
    fn sampler_rejects_short_clips() {
        let clip = generate_clip(&SceneSpec::random(5), 4, 16, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_nonuniform_sequence(&clip, 4, &mut rng),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn clip_container_round_trip() {
        let clip = generate_clip(&SceneSpec::random(21), 3, 8, 8).unwrap();
        let bytes = clip_to_bytes(&clip);
        let back = clip_from_bytes(&bytes).unwrap();
        assert_eq!(back.num_frames(), 3);
        assert_eq!(back.spec.shape_kind, clip.spec.shape_kind);
        assert_eq!(back.spec.seed, clip.spec.seed);
        // payload is f32, so compare at f32 precision
        for (a, b) in clip.frames.iter().zip(back.frames.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // serialization is deterministic
        assert_eq!(bytes, clip_to_bytes(&clip));
    }
}
