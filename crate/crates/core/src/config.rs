//! Persistent run configuration.
//!
//! Configs are flat `section.key = value` text files; `#` starts a comment
//! and blank lines are ignored. Every run is reproducible from a config file
//! plus a seed. Unknown keys are rejected so typos fail loudly.

use crate::diffusion::{build_schedule, DiffusionSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::{generate_clip, SceneSpec, VideoClip};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_max: 100, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Number of clips in the synthetic dataset.
    pub clips: usize,
    pub frames_per_clip: usize,
    /// Base seed of the scene stream.
    pub seed: u64,
    /// When set, load AVD1 clips from this directory instead of generating.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { clips: 64, frames_per_clip: 16, seed: 0, dir: None }
    }
}

impl DataConfig {
    /// Materialize the dataset: read from `dir` when set, otherwise render
    /// the scene stream deterministically.
    pub fn load(&self, image_size: usize) -> Result<Vec<VideoClip>> {
        if let Some(dir) = &self.dir {
            let mut paths: Vec<_> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "avd"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::Config(format!("no .avd clips found in {}", dir.display())));
            }
            paths.iter().map(|p| crate::synthetic::read_clip(p)).collect()
        } else {
            (0..self.clips)
                .map(|i| {
                    let spec = SceneSpec::random(self.seed.wrapping_add(i as u64));
                    generate_clip(&spec, self.frames_per_clip, image_size, image_size)
                })
                .collect()
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "model.image_size" => self.model.image_size = num(key, value)?,
            "model.channels" => self.model.channels = num(key, value)?,
            "model.patch_size" => self.model.patch_size = num(key, value)?,
            "model.frames_per_sequence" => self.model.frames_per_sequence = num(key, value)?,
            "model.hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "model.depth" => self.model.depth = num(key, value)?,
            "model.num_heads" => self.model.num_heads = num(key, value)?,
            "model.timestep_embed_dim" => self.model.timestep_embed_dim = num(key, value)?,
            "model.predict_sigma" => self.model.predict_sigma = num(key, value)?,
            "schedule.t_max" => self.schedule.t_max = num(key, value)?,
            "schedule.beta_start" => self.schedule.beta_start = num(key, value)?,
            "schedule.beta_end" => self.schedule.beta_end = num(key, value)?,
            "data.clips" => self.data.clips = num(key, value)?,
            "data.frames_per_clip" => self.data.frames_per_clip = num(key, value)?,
            "data.seed" => self.data.seed = num(key, value)?,
            "data.dir" => self.data.dir = Some(PathBuf::from(value)),
            "train.steps" => self.train.steps = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.base_lr" => self.train.base_lr = num(key, value)?,
            "train.mapping_lr_factor" => self.train.mapping_lr_factor = num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = num(key, value)?,
            "train.expressive_radius" => self.train.expressive_radius = num(key, value)?,
            "train.lambda_ex" => self.train.lambda_ex = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        // channel count feeds the derived signal dimensions
        self.model.global_dim = crate::synthetic::global_signal_dim(self.model.channels);
        self.model.local_dim = crate::synthetic::LOCAL_SIGNAL_DIM;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# sdit run configuration\n");
        s.push_str(&format!("model.image_size = {}\n", self.model.image_size));
        s.push_str(&format!("model.channels = {}\n", self.model.channels));
        s.push_str(&format!("model.patch_size = {}\n", self.model.patch_size));
        s.push_str(&format!("model.frames_per_sequence = {}\n", self.model.frames_per_sequence));
        s.push_str(&format!("model.hidden_dim = {}\n", self.model.hidden_dim));
        s.push_str(&format!("model.depth = {}\n", self.model.depth));
        s.push_str(&format!("model.num_heads = {}\n", self.model.num_heads));
        s.push_str(&format!("model.timestep_embed_dim = {}\n", self.model.timestep_embed_dim));
        s.push_str(&format!("model.predict_sigma = {}\n", self.model.predict_sigma));
        s.push_str(&format!("schedule.t_max = {}\n", self.schedule.t_max));
        s.push_str(&format!("schedule.beta_start = {}\n", self.schedule.beta_start));
        s.push_str(&format!("schedule.beta_end = {}\n", self.schedule.beta_end));
        s.push_str(&format!("data.clips = {}\n", self.data.clips));
        s.push_str(&format!("data.frames_per_clip = {}\n", self.data.frames_per_clip));
        s.push_str(&format!("data.seed = {}\n", self.data.seed));
        if let Some(dir) = &self.data.dir {
            s.push_str(&format!("data.dir = {}\n", dir.display()));
        }
        s.push_str(&format!("train.steps = {}\n", self.train.steps));
        s.push_str(&format!("train.batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("train.base_lr = {}\n", self.train.base_lr));
        s.push_str(&format!("train.mapping_lr_factor = {}\n", self.train.mapping_lr_factor));
        s.push_str(&format!("train.weight_decay = {}\n", self.train.weight_decay));
        s.push_str(&format!("train.expressive_radius = {}\n", self.train.expressive_radius));
        s.push_str(&format!("train.lambda_ex = {}\n", self.train.lambda_ex));
        s.push_str(&format!("train.seed = {}\n", self.train.seed));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_config() {
        let mut cfg = RunConfig::default();
        cfg.model.hidden_dim = 64;
        cfg.train.steps = 77;
        cfg.schedule.t_max = 50;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# header\n\nmodel.hidden_dim = 64 # inline\n").unwrap();
        assert_eq!(cfg.model.hidden_dim, 64);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("nope.key = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.depth = banana"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.depth"), Err(Error::Config(_))));
        // config that fails model validation
        assert!(matches!(RunConfig::parse("model.image_size = 33"), Err(Error::Config(_))));
    }

    #[test]
    fn derived_dims_follow_channels() {
        let cfg = RunConfig::parse("model.channels = 1").unwrap();
        assert_eq!(cfg.model.global_dim, crate::synthetic::global_signal_dim(1));
    }

    #[test]
    fn data_config_generates_deterministically() {
        let d = DataConfig { clips: 2, frames_per_clip: 4, seed: 9, dir: None };
        let a = d.load(16).unwrap();
        let b = d.load(16).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].frames, b[0].frames);
    }
}
