//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine records a flat tape of backward closures during the forward
//! pass. Node ids grow monotonically and every node's parents precede it, so
//! the backward sweep is a single reverse iteration over the tape. Values are
//! shared through `Arc`, which keeps saved activations cheap to capture.
//!
//! A graph created with [`Graph::inference`] runs the same operations without
//! recording anything; intermediate values are freed as soon as they go out
//! of scope.

use ndarray::{concatenate, s, Array2, Axis};
use std::cell::RefCell;
use std::sync::Arc;

/// Dense 2-D matrix used throughout the autodiff engine.
pub type Mat = Array2<f64>;

type BackwardOp = Box<dyn Fn(&Mat, &mut Gradients)>;

/// Recording tape. One per forward pass; not thread-safe by design: each
/// concurrent forward owns its own graph.
pub struct Graph {
    nodes: RefCell<Vec<Option<BackwardOp>>>,
    recording: bool,
}

/// A value tracked by a graph. `id` is `None` for constants and for every
/// value produced by a non-recording graph.
#[derive(Clone)]
pub struct Var {
    value: Arc<Mat>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Mat {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.value.nrows(), self.value.ncols())
    }

    /// Mutable access to the underlying matrix, cloning if it is shared.
    /// Only meaningful on non-recorded values (inference hooks).
    pub fn value_mut(&mut self) -> &mut Mat {
        Arc::make_mut(&mut self.value)
    }

    pub fn into_value(self) -> Arc<Mat> {
        self.value
    }
}

/// Per-node gradient storage produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Mat>>,
}

impl Gradients {
    fn accumulate(&mut self, id: usize, g: Mat) {
        match &mut self.by_node[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of the loss with respect to `var`, if it received one.
    pub fn get(&self, var: &Var) -> Option<&Mat> {
        var.id.and_then(|id| self.by_node[id].as_ref())
    }

    pub fn take(&mut self, var: &Var) -> Option<Mat> {
        var.id.and_then(|id| self.by_node[id].take())
    }
}

impl Graph {
    /// New recording graph for a differentiable forward pass.
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// Non-recording graph: same ops, no tape, no gradient support.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&self, op: Option<BackwardOp>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        nodes.len() - 1
    }

    fn finish(&self, value: Mat, parents_tracked: bool, op: BackwardOp) -> Var {
        let id = if self.recording && parents_tracked { Some(self.push(Some(op))) } else { None };
        Var { value: Arc::new(value), id }
    }

    /// A differentiable input. Its gradient is retained by `backward`.
    pub fn leaf(&self, value: Arc<Mat>) -> Var {
        let id = if self.recording { Some(self.push(None)) } else { None };
        Var { value, id }
    }

    pub fn leaf_from(&self, value: Mat) -> Var {
        self.leaf(Arc::new(value))
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Mat) -> Var {
        Var { value: Arc::new(value), id: None }
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; query
    /// them with the leaf `Var`s.
    pub fn backward(&self, loss: &Var) -> Gradients {
        assert!(self.recording, "backward on a non-recording graph");
        let loss_id = loss.id.expect("loss is not part of this graph");
        assert_eq!(loss.shape(), (1, 1), "loss must be a 1x1 scalar");
        let nodes = self.nodes.borrow();
        let mut grads = Gradients { by_node: vec![None; nodes.len()] };
        grads.by_node[loss_id] = Some(Mat::ones((1, 1)));
        for id in (0..=loss_id).rev() {
            if let Some(op) = &nodes[id] {
                if let Some(g) = grads.by_node[id].take() {
                    op(&g, &mut grads);
                }
            }
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = a.value() + b.value();
        let (ia, ib) = (a.id, b.id);
        self.finish(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g.clone());
                }
                if let Some(i) = ib {
                    grads.accumulate(i, g.clone());
                }
            }),
        )
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = a.value() - b.value();
        let (ia, ib) = (a.id, b.id);
        self.finish(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g.clone());
                }
                if let Some(i) = ib {
                    grads.accumulate(i, -g);
                }
            }),
        )
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = a.value() * b.value();
        let (ia, ib) = (a.id, b.id);
        let (va, vb) = (a.value.clone(), b.value.clone());
        self.finish(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g * &*vb);
                }
                if let Some(i) = ib {
                    grads.accumulate(i, g * &*va);
                }
            }),
        )
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Var {
        let out = a.value() + c;
        let ia = a.id;
        self.finish(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g.clone());
                }
            }),
        )
    }

    pub fn mul_scalar(&self, a: &Var, c: f64) -> Var {
        let out = a.value() * c;
        let ia = a.id;
        self.finish(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g * c);
                }
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape().1, b.shape().0, "matmul: inner dim mismatch");
        let out = a.value().dot(b.value());
        let (ia, ib) = (a.id, b.id);
        let (va, vb) = (a.value.clone(), b.value.clone());
        self.finish(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g.dot(&vb.t()));
                }
                if let Some(i) = ib {
                    grads.accumulate(i, va.t().dot(g));
                }
            }),
        )
    }

    pub fn transpose(&self, a: &Var) -> Var {
        let out = a.value().t().to_owned();
        let ia = a.id;
        self.finish(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ia {
                    grads.accumulate(i, g.t().to_owned());
                }
            }),
        )
    }

    /// `x + b` with `b` a `[1, n]` row broadcast over the rows of `x`.
    pub fn add_bias(&self, x: &Var, b: &Var) -> Var {
        assert_eq!(b.shape().0, 1, "add_bias: bias must be a row vector");
        assert_eq!(x.shape().1, b.shape().1, "add_bias: width mismatch");
        let out = x.value() + b.value();
        let (ix, ib) = (x.id, b.id);
        self.finish(
            out,
            ix.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    grads.accumulate(i, g.clone());
                }
                if let Some(i) = ib {
                    grads.accumulate(i, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }),
        )
    }

    // ---- row layout ----

    /// Repeat each row `k` times consecutively: `[t, d] -> [t*k, d]`.
    pub fn repeat_rows(&self, x: &Var, k: usize) -> Var {
        let (t, d) = x.shape();
        let mut out = Mat::zeros((t * k, d));
        for i in 0..t {
            for j in 0..k {
                out.row_mut(i * k + j).assign(&x.value().row(i));
            }
        }
        let ix = x.id;
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let mut dx = Mat::zeros((t, d));
                    for r in 0..t {
                        for j in 0..k {
                            let mut row = dx.row_mut(r);
                            row += &g.row(r * k + j);
                        }
                    }
                    grads.accumulate(i, dx);
                }
            }),
        )
    }

    /// Stack `k` copies of the whole matrix: `[r, d] -> [k*r, d]`.
    pub fn tile_rows(&self, x: &Var, k: usize) -> Var {
        let (r, d) = x.shape();
        let mut out = Mat::zeros((k * r, d));
        for j in 0..k {
            out.slice_mut(s![j * r..(j + 1) * r, ..]).assign(x.value());
        }
        let ix = x.id;
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let mut dx = Mat::zeros((r, d));
                    for j in 0..k {
                        dx += &g.slice(s![j * r..(j + 1) * r, ..]);
                    }
                    grads.accumulate(i, dx);
                }
            }),
        )
    }

    pub fn slice_cols(&self, x: &Var, lo: usize, len: usize) -> Var {
        let (m, n) = x.shape();
        assert!(lo + len <= n, "slice_cols: out of range");
        let out = x.value().slice(s![.., lo..lo + len]).to_owned();
        let ix = x.id;
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let mut dx = Mat::zeros((m, n));
                    dx.slice_mut(s![.., lo..lo + len]).assign(g);
                    grads.accumulate(i, dx);
                }
            }),
        )
    }

    pub fn concat_cols(&self, parts: &[&Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let meta: Vec<(Option<usize>, usize)> =
            parts.iter().map(|p| (p.id, p.shape().1)).collect();
        let tracked = meta.iter().any(|(id, _)| id.is_some());
        self.finish(
            out,
            tracked,
            Box::new(move |g, grads| {
                let mut lo = 0;
                for (id, w) in &meta {
                    if let Some(i) = id {
                        grads.accumulate(*i, g.slice(s![.., lo..lo + w]).to_owned());
                    }
                    lo += w;
                }
            }),
        )
    }

    // ---- nonlinearities ----

    pub fn row_softmax(&self, x: &Var) -> Var {
        let mut out = x.value().clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ix = x.id;
        let y = Arc::new(out.clone());
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let mut dx = g * &*y;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        drow.scaled_add(-dot, &yrow);
                    }
                    grads.accumulate(i, dx);
                }
            }),
        )
    }

    /// Per-row layer normalization without an affine transform.
    pub fn layer_norm_rows(&self, x: &Var, eps: f64) -> Var {
        let (m, d) = x.shape();
        let mut out = Mat::zeros((m, d));
        let mut inv_std = Vec::with_capacity(m);
        for (r, row) in x.value().rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                out[[r, c]] = (v - mean) * inv;
            }
        }
        let ix = x.id;
        let y = Arc::new(out.clone());
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let mut dx = Mat::zeros((m, d));
                    for r in 0..m {
                        let grow = g.row(r);
                        let yrow = y.row(r);
                        let gmean = grow.sum() / d as f64;
                        let gymean =
                            grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>()
                                / d as f64;
                        for c in 0..d {
                            dx[[r, c]] = inv_std[r] * (grow[c] - gmean - yrow[c] * gymean);
                        }
                    }
                    grads.accumulate(i, dx);
                }
            }),
        )
    }

    pub fn gelu(&self, x: &Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let out = x.value().mapv(|v| {
            let u = C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let ix = x.id;
        let vx = x.value.clone();
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let deriv = vx.mapv(|v| {
                        let u = C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * v * v)
                    });
                    grads.accumulate(i, g * &deriv);
                }
            }),
        )
    }

    pub fn silu(&self, x: &Var) -> Var {
        let out = x.value().mapv(|v| v / (1.0 + (-v).exp()));
        let ix = x.id;
        let vx = x.value.clone();
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    let deriv = vx.mapv(|v| {
                        let sig = 1.0 / (1.0 + (-v).exp());
                        sig * (1.0 + v * (1.0 - sig))
                    });
                    grads.accumulate(i, g * &deriv);
                }
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: &Var) -> Var {
        let (m, n) = x.shape();
        let out = Mat::from_elem((1, 1), x.value().sum());
        let ix = x.id;
        self.finish(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                if let Some(i) = ix {
                    grads.accumulate(i, Mat::from_elem((m, n), g[[0, 0]]));
                }
            }),
        )
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
        Array::from_shape_fn((m, n), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences on every coordinate of every input.
    fn check_grads(inputs: &[Mat], f: impl Fn(&Graph, &[Var]) -> Var, tol: f64) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf_from(m.clone())).collect();
        let loss = f(&g, &vars);
        assert_eq!(loss.shape(), (1, 1));
        let grads = g.backward(&loss);

        let eval = |mats: &[Mat]| -> f64 {
            let gi = Graph::inference();
            let vars: Vec<Var> = mats.iter().map(|m| gi.leaf_from(m.clone())).collect();
            f(&gi, &vars).value()[[0, 0]]
        };

        let h = 1e-6;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(&vars[vi])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(input.dim()));
            for ((r, c), _) in input.indexed_iter() {
                let mut plus = inputs.to_vec();
                plus[vi][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[vi][[r, c]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {vi} coord ({r},{c}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        check_grads(&[a, b], |g, v| {
            let s = g.add(&v[0], &v[1]);
            let d = g.sub(&s, &v[1]);
            let m = g.mul(&d, &v[0]);
            let m = g.mul_scalar(&m, 0.7);
            let m = g.add_scalar(&m, 0.3);
            g.sum_all(&m)
        }, 1e-6);
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 5);
        let b = rand_mat(&mut rng, 5, 2);
        check_grads(&[a, b], |g, v| {
            let c = g.matmul(&v[0], &v[1]);
            let ct = g.transpose(&c);
            g.sum_all(&g.mul(&ct, &ct))
        }, 1e-5);
    }

    #[test]
    fn bias_and_layout_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 1, 3);
        let t = rand_mat(&mut rng, 2, 3);
        check_grads(&[x, b, t], |g, v| {
            let h = g.add_bias(&v[0], &v[1]);
            let r = g.repeat_rows(&v[2], 2); // [4,3]
            let h = g.mul(&h, &r);
            let tl = g.tile_rows(&v[1], 4); // [4,3]
            let h = g.add(&h, &tl);
            g.sum_all(&h)
        }, 1e-6);
    }

    #[test]
    fn slice_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 6);
        check_grads(&[x], |g, v| {
            let a = g.slice_cols(&v[0], 0, 2);
            let b = g.slice_cols(&v[0], 2, 4);
            let joined = g.concat_cols(&[&b, &a]);
            g.sum_all(&g.mul(&joined, &joined))
        }, 1e-6);
    }

    #[test]
    fn softmax_layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 5);
        let w = rand_mat(&mut rng, 4, 5);
        check_grads(&[x.clone(), w.clone()], |g, v| {
            let s = g.row_softmax(&v[0]);
            let s = g.mul(&s, &v[1]);
            g.sum_all(&s)
        }, 1e-5);
        check_grads(&[x, w], |g, v| {
            let n = g.layer_norm_rows(&v[0], 1e-6);
            let n = g.mul(&n, &v[1]);
            g.sum_all(&n)
        }, 1e-5);
    }

    #[test]
    fn nonlinearity_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 3, 4);
        check_grads(&[x.clone()], |g, v| g.sum_all(&g.gelu(&v[0])), 1e-6);
        check_grads(&[x], |g, v| g.sum_all(&g.silu(&v[0])), 1e-6);
    }

    #[test]
    fn shared_input_grad_accumulates() {
        // d(x*x)/dx = 2x must come out of two accumulations on the same node.
        let g = Graph::new();
        let x = g.leaf_from(Mat::from_elem((1, 1), 3.0));
        let y = g.mul(&x, &x);
        let loss = g.sum_all(&y);
        let grads = g.backward(&loss);
        assert_eq!(grads.get(&x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let x = g.leaf_from(Mat::ones((2, 2)));
        let y = g.mul(&x, &x);
        assert!(y.id.is_none());
        assert_eq!(g.nodes.borrow().len(), 0);
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let g = Graph::new();
        let c1 = g.constant(Mat::ones((2, 2)));
        let c2 = g.constant(Mat::ones((2, 2)));
        let y = g.mul(&c1, &c2);
        assert!(y.id.is_none());
        assert_eq!(g.nodes.borrow().len(), 0);
    }
}
