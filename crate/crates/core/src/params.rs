//! Named, flat parameter storage.
//!
//! Every model weight lives in a [`ParameterStore`] segment: a 2-D matrix
//! plus its logical shape (rank 1 for biases and vectors, rank 2 for weight
//! matrices). Segments are addressed by name, ordered deterministically, and
//! shared by `Arc` so binding them into a compute graph never copies data.

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use ndarray::Array;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub data: Arc<Mat>,
    /// Logical shape as stored in checkpoints (rank 1 or 2).
    pub dims: Vec<usize>,
    /// Frozen segments (positional tables) are skipped by the optimizer.
    pub trainable: bool,
}

impl Segment {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    segments: Vec<Segment>,
    by_name: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, data: Mat, dims: Vec<usize>, trainable: bool) {
        assert_eq!(
            data.len(),
            dims.iter().product::<usize>(),
            "segment {name}: data does not match logical dims"
        );
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter segment {name}"
        );
        self.by_name.insert(name.to_string(), self.segments.len());
        self.segments.push(Segment {
            name: name.to_string(),
            data: Arc::new(data),
            dims,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Segment {
        let idx = self.index_of(name).unwrap_or_else(|| panic!("missing segment {name}"));
        &self.segments[idx]
    }

    pub fn segment_at(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter()
    }

    /// Replace a segment's data, keeping its logical shape.
    pub fn set_data(&mut self, name: &str, data: Mat) {
        let idx = self.index_of(name).unwrap_or_else(|| panic!("missing segment {name}"));
        assert_eq!(
            data.len(),
            self.segments[idx].numel(),
            "segment {name}: replacement has wrong size"
        );
        self.segments[idx].data = Arc::new(data);
    }

    /// In-place mutable access for the optimizer. Clones only if a forward
    /// pass still holds the previous value.
    pub fn data_mut(&mut self, idx: usize) -> &mut Mat {
        Arc::make_mut(&mut self.segments[idx].data)
    }

    pub fn total_params(&self) -> usize {
        self.segments.iter().map(|s| s.numel()).sum()
    }

    /// Fill every segment (including frozen and zero-initialized ones) with
    /// small Gaussian noise. Used for gradient checks and randomized models.
    pub fn randomize(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in &mut self.segments {
            let shape = seg.data.dim();
            seg.data = Arc::new(Array::from_shape_fn(shape, |_| normal(&mut rng) * std));
        }
    }

    /// Largest absolute difference across all segments; stores must have the
    /// same layout.
    pub fn max_abs_diff(&self, other: &ParameterStore) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Validation("parameter stores differ in layout".into()));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.segments.iter().zip(other.segments.iter()) {
            if a.name != b.name || a.dims != b.dims {
                return Err(Error::Validation("parameter stores differ in layout".into()));
            }
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }
}

/// Standard normal draw on the generator uniform stream.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// ViT-style truncated normal: redraw until within two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let v: f64 = rand_distr::StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_bookkeeping() {
        let mut store = ParameterStore::new();
        store.add("a.weight", Mat::zeros((2, 3)), vec![2, 3], true);
        store.add("a.bias", Mat::zeros((1, 3)), vec![3], true);
        assert_eq!(store.total_params(), 9);
        assert_eq!(store.get("a.bias").dims, vec![3]);
        assert!(store.index_of("missing").is_none());
    }

    #[test]
    fn randomize_is_seeded() {
        let mut a = ParameterStore::new();
        a.add("w", Mat::zeros((4, 4)), vec![4, 4], true);
        let mut b = a.clone();
        a.randomize(0.1, 9);
        b.randomize(0.1, 9);
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        assert!(a.get("w").data.iter().any(|&v| v != 0.0));
    }
}
