//! Sequence diffusion transformer (sDiT).
//!
//! A DiT-style transformer extended with a temporal dimension: each input is
//! a sequence of T frames, patchified into tokens that carry both a spatial
//! and a temporal (slot) positional encoding. Per-frame conditioning vectors,
//! produced by a small residual mapping network from a global identity code
//! and per-frame local signals, modulate every block through adaptive layer
//! normalization. Attention is full joint self-attention over all T*Np
//! tokens.
//!
//! The same block code serves training (recording graph) and inference
//! (non-recording graph); inference exposes a per-block hook that may mutate
//! the token stream, which is the attachment point for anchored overrides.

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParameterStore};
use ndarray::{s, Array2, Array3, Array4};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Residual blocks in the conditioning mapping network.
pub const MAPPING_DEPTH: usize = 4;

/// Hidden expansion ratio of the per-block MLP.
pub const MLP_RATIO: usize = 4;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square frame side length (H = W).
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Frames generated jointly per sequence (T).
    pub frames_per_sequence: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    pub timestep_embed_dim: usize,
    /// When set the output head also predicts a per-pixel variance channel.
    pub predict_sigma: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default()
    }
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on a CPU.
    pub fn desk_default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 2,
            frames_per_sequence: 4,
            hidden_dim: 128,
            depth: 4,
            num_heads: 4,
            global_dim: crate::synthetic::global_signal_dim(3),
            local_dim: crate::synthetic::LOCAL_SIGNAL_DIM,
            timestep_embed_dim: 64,
            predict_sigma: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even for positional tables".into()));
        }
        if self.timestep_embed_dim % 2 != 0 {
            return Err(Error::Config("timestep_embed_dim must be even".into()));
        }
        if self.depth == 0 || self.frames_per_sequence < 2 || self.channels == 0 {
            return Err(Error::Config("depth, channels and frames_per_sequence must be positive (T >= 2)".into()));
        }
        Ok(())
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Tokens per sequence (T * Np).
    pub fn num_tokens(&self) -> usize {
        self.frames_per_sequence * self.num_patches()
    }

    /// Flattened input patch dimension (p*p*C).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Output channels: C, doubled when predicting sigma.
    pub fn out_channels(&self) -> usize {
        if self.predict_sigma { 2 * self.channels } else { self.channels }
    }
}

/// Per-sequence patch tokens with slot metadata. The token dimension is
/// `p*p*C` straight out of [`patchify`] and `hidden_dim` after projection.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    /// Shape `[T, Np, token_dim]`.
    pub tokens: Array3<f64>,
    pub slot_positions: Vec<usize>,
}

/// Per-frame conditioning vectors produced by the mapping network.
#[derive(Debug, Clone)]
pub struct ConditioningSignal {
    /// Shape `[T, hidden_dim]`.
    pub per_frame: Array2<f64>,
}

/// Model output in pixel space.
#[derive(Debug, Clone)]
pub struct DenoisePrediction {
    /// Predicted noise, shape `[T, H, W, C]`.
    pub noise: Array4<f64>,
    /// Raw variance-interpolation channel, present when `predict_sigma`.
    pub sigma_raw: Option<Array4<f64>>,
}

/// Callback invoked with `(block_index, tokens [T, Np, D])` after each block.
pub type LayerHook<'a> = dyn FnMut(usize, &mut Array3<f64>) + 'a;

// ---- patch layout ----

/// Split frames into non-overlapping p x p patches in raster order.
/// Within a patch, values are ordered (row, col, channel).
pub fn patchify(frames: &Array4<f64>, patch_size: usize) -> Result<TokenGrid> {
    let (t, h, w, c) = frames.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "frame size {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let np = gh * gw;
    let pd = patch_size * patch_size * c;
    let mut tokens = Array3::zeros((t, np, pd));
    for ti in 0..t {
        for gi in 0..gh {
            for gj in 0..gw {
                let p = gi * gw + gj;
                let mut d = 0;
                for pi in 0..patch_size {
                    for pj in 0..patch_size {
                        for ch in 0..c {
                            tokens[[ti, p, d]] =
                                frames[[ti, gi * patch_size + pi, gj * patch_size + pj, ch]];
                            d += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid { tokens, slot_positions: (0..t).collect() })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &TokenGrid, patch_size: usize, height: usize, width: usize) -> Result<Array4<f64>> {
    let (t, np, pd) = grid.tokens.dim();
    if height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::Config(format!(
            "frame size {height}x{width} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (height / patch_size, width / patch_size);
    if np != gh * gw || pd % (patch_size * patch_size) != 0 {
        return Err(Error::Validation(format!(
            "token grid {np}x{pd} does not match {height}x{width} at patch size {patch_size}"
        )));
    }
    let c = pd / (patch_size * patch_size);
    let mut frames = Array4::zeros((t, height, width, c));
    for ti in 0..t {
        for gi in 0..gh {
            for gj in 0..gw {
                let p = gi * gw + gj;
                let mut d = 0;
                for pi in 0..patch_size {
                    for pj in 0..patch_size {
                        for ch in 0..c {
                            frames[[ti, gi * patch_size + pi, gj * patch_size + pj, ch]] =
                                grid.tokens[[ti, p, d]];
                            d += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(frames)
}

/// Flatten frames straight to the `[T*Np, p*p*C]` matrix used by the graph.
pub fn frames_to_patch_mat(frames: &Array4<f64>, patch_size: usize) -> Result<Mat> {
    let grid = patchify(frames, patch_size)?;
    let (t, np, pd) = grid.tokens.dim();
    Ok(grid
        .tokens
        .into_shape_with_order((t * np, pd))
        .expect("contiguous reshape"))
}

/// Inverse of [`frames_to_patch_mat`].
pub fn patch_mat_to_frames(
    mat: &Mat,
    frames: usize,
    patch_size: usize,
    height: usize,
    width: usize,
) -> Result<Array4<f64>> {
    let (rows, pd) = mat.dim();
    if rows % frames != 0 {
        return Err(Error::Validation(format!("{rows} token rows not divisible by T={frames}")));
    }
    let np = rows / frames;
    let grid = TokenGrid {
        tokens: mat
            .clone()
            .into_shape_with_order((frames, np, pd))
            .expect("contiguous reshape"),
        slot_positions: (0..frames).collect(),
    };
    unpatchify(&grid, patch_size, height, width)
}

// ---- positional encodings ----

/// Sinusoidal table: row `t`, column `2i` holds `sin(t / 10000^(2i/dim))`
/// and column `2i+1` the matching cosine.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Result<Mat> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal encoding dim {dim} must be even")));
    }
    let mut table = Mat::zeros((positions, dim));
    for t in 0..positions {
        for i in 0..dim / 2 {
            let rate = (t as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            table[[t, 2 * i]] = rate.sin();
            table[[t, 2 * i + 1]] = rate.cos();
        }
    }
    Ok(table)
}

/// Temporal positional encoding over slot positions `0..T-1`.
pub fn temporal_positional_encoding(frames: usize, dim: usize) -> Result<Mat> {
    sinusoidal_table(frames, dim)
}

/// Sinusoidal embedding of a diffusion timestep, shape `[1, dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Mat> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding dim {dim} must be even")));
    }
    let mut row = Mat::zeros((1, dim));
    for i in 0..dim / 2 {
        let rate = (t as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
        row[[0, 2 * i]] = rate.sin();
        row[[0, 2 * i + 1]] = rate.cos();
    }
    Ok(row)
}

// ---- parameters ----

/// Names of all parameter segments for a config, in store order.
fn segment_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.hidden_dim;
    let mut out = Vec::new();
    let mut push = |name: String, dims: Vec<usize>, trainable: bool| out.push((name, dims, trainable));

    push("patch_embed.weight".into(), vec![cfg.patch_dim(), d], true);
    push("patch_embed.bias".into(), vec![d], true);
    push("pos.spatial".into(), vec![cfg.num_patches(), d], false);
    push("pos.temporal".into(), vec![cfg.frames_per_sequence, d], false);
    push("time_embed.w1".into(), vec![cfg.timestep_embed_dim, d], true);
    push("time_embed.b1".into(), vec![d], true);
    push("time_embed.w2".into(), vec![d, d], true);
    push("time_embed.b2".into(), vec![d], true);
    push("mapping.global_proj.weight".into(), vec![cfg.global_dim, d / 2], true);
    push("mapping.global_proj.bias".into(), vec![d / 2], true);
    push("mapping.local_proj.weight".into(), vec![cfg.local_dim, d - d / 2], true);
    push("mapping.local_proj.bias".into(), vec![d - d / 2], true);
    for i in 0..MAPPING_DEPTH {
        push(format!("mapping.block{i}.w1"), vec![d, d], true);
        push(format!("mapping.block{i}.b1"), vec![d], true);
        push(format!("mapping.block{i}.w2"), vec![d, d], true);
        push(format!("mapping.block{i}.b2"), vec![d], true);
    }
    for b in 0..cfg.depth {
        push(format!("block{b}.adaln.weight"), vec![d, 6 * d], true);
        push(format!("block{b}.adaln.bias"), vec![6 * d], true);
        for proj in ["wq", "wk", "wv", "wo"] {
            push(format!("block{b}.attn.{proj}"), vec![d, d], true);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            push(format!("block{b}.attn.{bias}"), vec![d], true);
        }
        push(format!("block{b}.mlp.w1"), vec![d, MLP_RATIO * d], true);
        push(format!("block{b}.mlp.b1"), vec![MLP_RATIO * d], true);
        push(format!("block{b}.mlp.w2"), vec![MLP_RATIO * d, d], true);
        push(format!("block{b}.mlp.b2"), vec![d], true);
    }
    push("final.adaln.weight".into(), vec![d, 2 * d], true);
    push("final.adaln.bias".into(), vec![2 * d], true);
    push("final.head.weight".into(), vec![d, cfg.patch_dim() / cfg.channels * cfg.out_channels()], true);
    push("final.head.bias".into(), vec![cfg.patch_dim() / cfg.channels * cfg.out_channels()], true);
    out
}

/// Total parameter count implied by a config.
pub fn count_params(cfg: &ModelConfig) -> usize {
    segment_layout(cfg).iter().map(|(_, dims, _)| dims.iter().product::<usize>()).sum()
}

fn as_mat(dims: &[usize], data: Mat) -> Mat {
    debug_assert_eq!(data.len(), dims.iter().product::<usize>());
    data
}

/// Initialize parameters: truncated-normal weights, zero biases, sinusoidal
/// positional tables, and zero-initialized modulation heads, residual output
/// projections and final head so the network starts as the identity map with
/// a zero prediction.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (name, dims, trainable) in segment_layout(cfg) {
        let (rows, cols) = match dims.len() {
            1 => (1, dims[0]),
            2 => (dims[0], dims[1]),
            _ => unreachable!("segments are rank 1 or 2"),
        };
        let zero_init = name.contains("adaln")
            || name.starts_with("final.head")
            || (name.starts_with("mapping.block") && (name.ends_with("w2") || name.ends_with("b2")))
            || dims.len() == 1; // biases start at zero
        let data = if name == "pos.spatial" {
            sinusoidal_table(cfg.num_patches(), cfg.hidden_dim)?
        } else if name == "pos.temporal" {
            sinusoidal_table(cfg.frames_per_sequence, cfg.hidden_dim)?
        } else if zero_init {
            Mat::zeros((rows, cols))
        } else {
            let mut m = Mat::zeros((rows, cols));
            for v in m.iter_mut() {
                *v = trunc_normal(&mut rng, 0.02);
            }
            m
        };
        store.add(&name, as_mat(&dims, data), dims, trainable);
    }
    Ok(store)
}

/// Whether a segment belongs to the mapping network (trains at 0.1x the
/// global learning rate).
pub fn is_mapping_segment(name: &str) -> bool {
    name.starts_with("mapping.")
}

// ---- checkpoint container (SDT1) ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDT1";

/// Serialize config and parameters to the little-endian SDT1 container.
pub fn checkpoint_to_bytes(cfg: &ModelConfig, store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        cfg.image_size,
        cfg.channels,
        cfg.patch_size,
        cfg.frames_per_sequence,
        cfg.hidden_dim,
        cfg.depth,
        cfg.num_heads,
        cfg.global_dim,
        cfg.local_dim,
        cfg.timestep_embed_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.predict_sigma as u8);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for seg in store.iter() {
        out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.dims.len() as u32).to_le_bytes());
        for d in &seg.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in seg.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse an SDT1 checkpoint, validating the segment layout and total
/// parameter count against the embedded config.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(ModelConfig, ParameterStore)> {
    let mut cur = ByteCursor { buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected SDT1".into()));
    }
    let mut fields = [0usize; 10];
    for f in fields.iter_mut() {
        *f = cur.u32()? as usize;
    }
    let predict_sigma = cur.take(1)?[0] != 0;
    let cfg = ModelConfig {
        image_size: fields[0],
        channels: fields[1],
        patch_size: fields[2],
        frames_per_sequence: fields[3],
        hidden_dim: fields[4],
        depth: fields[5],
        num_heads: fields[6],
        global_dim: fields[7],
        local_dim: fields[8],
        timestep_embed_dim: fields[9],
        predict_sigma,
    };
    cfg.validate()?;

    let expected = segment_layout(&cfg);
    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} segments, config implies {}",
            expected.len()
        )));
    }
    let mut store = ParameterStore::new();
    for (exp_name, exp_dims, trainable) in expected {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("segment name is not utf-8".into()))?
            .to_string();
        if name != exp_name {
            return Err(Error::Format(format!(
                "segment order mismatch: found {name}, expected {exp_name}"
            )));
        }
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        if dims != exp_dims {
            return Err(Error::Format(format!("segment {name} has dims {dims:?}, expected {exp_dims:?}")));
        }
        let numel: usize = dims.iter().product();
        let (rows, cols) = match dims.len() {
            1 => (1, dims[0]),
            _ => (dims[0], dims[1]),
        };
        let mut data = Mat::zeros((rows, cols));
        for v in data.iter_mut() {
            let b = cur.take(4)?;
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
        debug_assert_eq!(data.len(), numel);
        store.add(&name, data, dims, trainable);
    }
    if store.total_params() != count_params(&cfg) {
        return Err(Error::Format("checkpoint parameter count does not match config".into()));
    }
    Ok((cfg, store))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParameterStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(cfg, store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterStore)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}

// ---- graph forward ----

/// Parameter segments bound into a graph as leaf variables.
pub struct BoundParams<'s> {
    store: &'s ParameterStore,
    vars: Vec<Var>,
}

impl<'s> BoundParams<'s> {
    pub fn bind(graph: &Graph, store: &'s ParameterStore) -> Self {
        let vars = store.iter().map(|seg| graph.leaf(Arc::clone(&seg.data))).collect();
        BoundParams { store, vars }
    }

    pub fn var(&self, name: &str) -> &Var {
        let idx = self.store.index_of(name).unwrap_or_else(|| panic!("missing segment {name}"));
        &self.vars[idx]
    }

    pub fn var_at(&self, idx: usize) -> &Var {
        &self.vars[idx]
    }
}

fn linear(g: &Graph, x: &Var, w: &Var, b: &Var) -> Var {
    g.add_bias(&g.matmul(x, w), b)
}

/// Conditioning mapping: project the global and local signals, concatenate,
/// and refine through residual blocks whose output projections start at zero
/// (identity at init).
pub fn mapping_forward(g: &Graph, bp: &BoundParams, global: &Var, locals: &Var) -> Var {
    let t = locals.shape().0;
    let gh = linear(g, global, bp.var("mapping.global_proj.weight"), bp.var("mapping.global_proj.bias"));
    let gh = g.tile_rows(&gh, t);
    let lh = linear(g, locals, bp.var("mapping.local_proj.weight"), bp.var("mapping.local_proj.bias"));
    let mut c = g.concat_cols(&[&gh, &lh]);
    for i in 0..MAPPING_DEPTH {
        let h = linear(g, &c, bp.var(&format!("mapping.block{i}.w1")), bp.var(&format!("mapping.block{i}.b1")));
        let h = g.silu(&h);
        let r = linear(g, &h, bp.var(&format!("mapping.block{i}.w2")), bp.var(&format!("mapping.block{i}.b2")));
        c = g.add(&c, &r);
    }
    c
}

/// Add the MLP-projected timestep embedding to every conditioning row.
pub fn fuse_timestep(g: &Graph, bp: &BoundParams, cond: &Var, t: usize, cfg: &ModelConfig) -> Result<Var> {
    let freq = g.constant(timestep_embedding(t, cfg.timestep_embed_dim)?);
    let e = linear(g, &freq, bp.var("time_embed.w1"), bp.var("time_embed.b1"));
    let e = g.silu(&e);
    let e = linear(g, &e, bp.var("time_embed.w2"), bp.var("time_embed.b2"));
    let t_rows = cond.shape().0;
    Ok(g.add(cond, &g.tile_rows(&e, t_rows)))
}

/// Project raw patches and add both positional encodings.
pub fn embed_tokens_graph(g: &Graph, bp: &BoundParams, patches: &Var, cfg: &ModelConfig) -> Var {
    let tok = linear(g, patches, bp.var("patch_embed.weight"), bp.var("patch_embed.bias"));
    let spatial = g.tile_rows(bp.var("pos.spatial"), cfg.frames_per_sequence);
    let temporal = g.repeat_rows(bp.var("pos.temporal"), cfg.num_patches());
    g.add(&g.add(&tok, &spatial), &temporal)
}

fn attention(g: &Graph, bp: &BoundParams, block: usize, h: &Var, cfg: &ModelConfig) -> Var {
    let d = cfg.hidden_dim;
    let dh = d / cfg.num_heads;
    let q = linear(g, h, bp.var(&format!("block{block}.attn.wq")), bp.var(&format!("block{block}.attn.bq")));
    let k = linear(g, h, bp.var(&format!("block{block}.attn.wk")), bp.var(&format!("block{block}.attn.bk")));
    let v = linear(g, h, bp.var(&format!("block{block}.attn.wv")), bp.var(&format!("block{block}.attn.bv")));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let qh = g.slice_cols(&q, i * dh, dh);
        let kh = g.slice_cols(&k, i * dh, dh);
        let vh = g.slice_cols(&v, i * dh, dh);
        let scores = g.mul_scalar(&g.matmul(&qh, &g.transpose(&kh)), scale);
        let attn = g.row_softmax(&scores);
        heads.push(g.matmul(&attn, &vh));
    }
    let refs: Vec<&Var> = heads.iter().collect();
    let o = g.concat_cols(&refs);
    linear(g, &o, bp.var(&format!("block{block}.attn.wo")), bp.var(&format!("block{block}.attn.bo")))
}

fn modulate(g: &Graph, x: &Var, shift: &Var, scale: &Var, np: usize) -> Var {
    let scaled = g.mul(x, &g.repeat_rows(&g.add_scalar(scale, 1.0), np));
    g.add(&scaled, &g.repeat_rows(shift, np))
}

/// One transformer block with adaLN-zero modulation.
pub fn block_forward(g: &Graph, bp: &BoundParams, block: usize, x: &Var, cond_t: &Var, cfg: &ModelConfig) -> Var {
    let d = cfg.hidden_dim;
    let np = cfg.num_patches();
    let m = linear(
        g,
        &g.silu(cond_t),
        bp.var(&format!("block{block}.adaln.weight")),
        bp.var(&format!("block{block}.adaln.bias")),
    );
    let shift_attn = g.slice_cols(&m, 0, d);
    let scale_attn = g.slice_cols(&m, d, d);
    let gate_attn = g.slice_cols(&m, 2 * d, d);
    let shift_mlp = g.slice_cols(&m, 3 * d, d);
    let scale_mlp = g.slice_cols(&m, 4 * d, d);
    let gate_mlp = g.slice_cols(&m, 5 * d, d);

    let h = g.layer_norm_rows(x, LN_EPS);
    let h = modulate(g, &h, &shift_attn, &scale_attn, np);
    let a = attention(g, bp, block, &h, cfg);
    let x = g.add(x, &g.mul(&g.repeat_rows(&gate_attn, np), &a));

    let h2 = g.layer_norm_rows(&x, LN_EPS);
    let h2 = modulate(g, &h2, &shift_mlp, &scale_mlp, np);
    let m1 = linear(g, &h2, bp.var(&format!("block{block}.mlp.w1")), bp.var(&format!("block{block}.mlp.b1")));
    let m1 = g.gelu(&m1);
    let m2 = linear(g, &m1, bp.var(&format!("block{block}.mlp.w2")), bp.var(&format!("block{block}.mlp.b2")));
    g.add(&x, &g.mul(&g.repeat_rows(&gate_mlp, np), &m2))
}

/// Final modulated layer norm and linear head.
pub fn head_forward(g: &Graph, bp: &BoundParams, x: &Var, cond_t: &Var, cfg: &ModelConfig) -> Var {
    let d = cfg.hidden_dim;
    let np = cfg.num_patches();
    let m = linear(g, &g.silu(cond_t), bp.var("final.adaln.weight"), bp.var("final.adaln.bias"));
    let shift = g.slice_cols(&m, 0, d);
    let scale = g.slice_cols(&m, d, d);
    let h = g.layer_norm_rows(x, LN_EPS);
    let h = modulate(g, &h, &shift, &scale, np);
    linear(g, &h, bp.var("final.head.weight"), bp.var("final.head.bias"))
}

/// Full differentiable denoiser: raw noisy patches to predicted-noise
/// patches. Used by the training loss; inference goes through
/// [`forward_denoise`].
pub fn denoise_graph(
    g: &Graph,
    bp: &BoundParams,
    noisy_patches: &Var,
    t: usize,
    global: &Var,
    locals: &Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut tok = embed_tokens_graph(g, bp, noisy_patches, cfg);
    let cond = mapping_forward(g, bp, global, locals);
    let cond_t = fuse_timestep(g, bp, &cond, t, cfg)?;
    for b in 0..cfg.depth {
        tok = block_forward(g, bp, b, &tok, &cond_t, cfg);
    }
    Ok(head_forward(g, bp, &tok, &cond_t, cfg))
}

// ---- public inference ops ----

fn mat_from_grid(grid: &TokenGrid) -> Mat {
    let (t, np, d) = grid.tokens.dim();
    grid.tokens
        .clone()
        .into_shape_with_order((t * np, d))
        .expect("contiguous reshape")
}

fn grid_from_mat(mat: &Mat, t: usize) -> TokenGrid {
    let (rows, d) = mat.dim();
    TokenGrid {
        tokens: mat
            .clone()
            .into_shape_with_order((t, rows / t, d))
            .expect("contiguous reshape"),
        slot_positions: (0..t).collect(),
    }
}

/// Run the mapping network outside any training graph.
pub fn mapping_network(
    store: &ParameterStore,
    global_signal: &[f64],
    local_signals: &Array2<f64>,
    cfg: &ModelConfig,
) -> Result<ConditioningSignal> {
    if global_signal.len() != cfg.global_dim {
        return Err(Error::Validation(format!(
            "global signal has dim {}, config says {}",
            global_signal.len(),
            cfg.global_dim
        )));
    }
    if local_signals.ncols() != cfg.local_dim {
        return Err(Error::Validation(format!(
            "local signals have dim {}, config says {}",
            local_signals.ncols(),
            cfg.local_dim
        )));
    }
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let gv = g.constant(Mat::from_shape_vec((1, global_signal.len()), global_signal.to_vec()).unwrap());
    let lv = g.constant(local_signals.clone());
    let c = mapping_forward(&g, &bp, &gv, &lv);
    Ok(ConditioningSignal { per_frame: c.value().clone() })
}

/// Project raw patch tokens and attach positional encodings.
pub fn project_tokens(store: &ParameterStore, grid: &TokenGrid, cfg: &ModelConfig) -> Result<TokenGrid> {
    let (t, np, pd) = grid.tokens.dim();
    if t != cfg.frames_per_sequence || np != cfg.num_patches() || pd != cfg.patch_dim() {
        return Err(Error::Validation(format!(
            "token grid [{t},{np},{pd}] does not match config"
        )));
    }
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let patches = g.constant(mat_from_grid(grid));
    let tok = embed_tokens_graph(&g, &bp, &patches, cfg);
    Ok(grid_from_mat(tok.value(), t))
}

/// Per-sequence forward state used by the staged inference path.
pub struct SequenceState {
    pub tokens: Mat,
    cond_time: Mat,
}

impl SequenceState {
    pub fn cond(&self) -> &Mat {
        &self.cond_time
    }
}

/// Embed noisy frames and fuse conditioning for a staged forward pass.
pub fn prepare_sequence(
    store: &ParameterStore,
    noisy_frames: &Array4<f64>,
    t: usize,
    cond: &ConditioningSignal,
    cfg: &ModelConfig,
) -> Result<SequenceState> {
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let patches = g.constant(frames_to_patch_mat(noisy_frames, cfg.patch_size)?);
    let tok = embed_tokens_graph(&g, &bp, &patches, cfg);
    let cond_v = g.constant(cond.per_frame.clone());
    let cond_t = fuse_timestep(&g, &bp, &cond_v, t, cfg)?;
    Ok(SequenceState { tokens: tok.value().clone(), cond_time: cond_t.value().clone() })
}

/// Advance one block of a staged forward pass.
pub fn run_block(store: &ParameterStore, state: &mut SequenceState, block: usize, cfg: &ModelConfig) {
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let x = g.constant(state.tokens.clone());
    let cond_t = g.constant(state.cond_time.clone());
    let out = block_forward(&g, &bp, block, &x, &cond_t, cfg);
    state.tokens = out.value().clone();
}

/// Finish a staged forward pass: modulated head, unpatchify, sigma split.
pub fn run_head(store: &ParameterStore, state: &SequenceState, cfg: &ModelConfig) -> Result<DenoisePrediction> {
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let x = g.constant(state.tokens.clone());
    let cond_t = g.constant(state.cond_time.clone());
    let out = head_forward(&g, &bp, &x, &cond_t, cfg);
    split_prediction(out.value(), cfg)
}

/// Split the head output into noise (and optional sigma) pixel frames.
fn split_prediction(patches: &Mat, cfg: &ModelConfig) -> Result<DenoisePrediction> {
    let t = cfg.frames_per_sequence;
    let full = patch_mat_to_frames(patches, t, cfg.patch_size, cfg.image_size, cfg.image_size)?;
    if cfg.predict_sigma {
        let c = cfg.channels;
        let noise = full.slice(s![.., .., .., 0..c]).to_owned();
        let sigma = full.slice(s![.., .., .., c..2 * c]).to_owned();
        Ok(DenoisePrediction { noise, sigma_raw: Some(sigma) })
    } else {
        Ok(DenoisePrediction { noise: full, sigma_raw: None })
    }
}

/// Full inference forward pass over projected tokens.
///
/// `hook` is called after every block with the mutable token state; mutations
/// feed the next block. Timestep `t` must lie inside the diffusion schedule
/// (checked by callers that know `t_max`; here it only must be finite).
pub fn forward_denoise(
    store: &ParameterStore,
    grid: &TokenGrid,
    t: usize,
    cond: &ConditioningSignal,
    cfg: &ModelConfig,
    mut hook: Option<&mut LayerHook>,
) -> Result<DenoisePrediction> {
    let (tt, np, d) = grid.tokens.dim();
    if tt != cfg.frames_per_sequence || np != cfg.num_patches() || d != cfg.hidden_dim {
        return Err(Error::Validation(format!(
            "projected token grid [{tt},{np},{d}] does not match config"
        )));
    }
    if cond.per_frame.dim() != (cfg.frames_per_sequence, cfg.hidden_dim) {
        return Err(Error::Validation("conditioning shape does not match config".into()));
    }
    let g = Graph::inference();
    let bp = BoundParams::bind(&g, store);
    let cond_v = g.constant(cond.per_frame.clone());
    let cond_t = fuse_timestep(&g, &bp, &cond_v, t, cfg)?;
    let mut state = SequenceState { tokens: mat_from_grid(grid), cond_time: cond_t.value().clone() };
    for b in 0..cfg.depth {
        run_block(store, &mut state, b, cfg);
        if let Some(h) = hook.as_deref_mut() {
            let mut grid3 = state
                .tokens
                .clone()
                .into_shape_with_order((tt, np, cfg.hidden_dim))
                .expect("contiguous reshape");
            h(b, &mut grid3);
            state.tokens = grid3
                .into_shape_with_order((tt * np, cfg.hidden_dim))
                .expect("contiguous reshape");
        }
    }
    run_head(store, &state, cfg)
}
