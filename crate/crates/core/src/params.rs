//! Named parameters with gradients and Adam state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Name → (value, gradient, first and second Adam moments), plus a step
/// counter shared by every parameter in the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let zeros = Tensor::zeros(value.shape());
        self.entries.insert(
            name.into(),
            Entry {
                grad: zeros.clone(),
                m: zeros.clone(),
                v: zeros,
                value,
            },
        );
    }

    /// Glorot-uniform matrix: `U(−s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data).unwrap());
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every graph parameter that belongs to this store.
    /// Parameters registered from other stores are ignored.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (name, var) in graph.params() {
            if let (Some(e), Some(g)) = (self.entries.get_mut(name), grads.get(*var)) {
                e.grad.add_assign(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for e in self.entries.values_mut() {
                for g in e.grad.data_mut() {
                    *g *= s;
                }
            }
        }
        norm
    }

    /// Flips the sign of every gradient, turning the next descent step into
    /// an ascent step.
    pub fn negate_grads(&mut self) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g = -*g;
            }
        }
    }

    /// One bias-corrected Adam step over every parameter, then zero the
    /// gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.values_mut() {
            let Entry { value, grad, m, v } = e;
            for (((p, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * *g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * *g * *g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                *g = 0.0;
            }
        }
    }

    /// A copy whose values are exactly representable in `f32`, with fresh
    /// optimizer state.
    pub fn to_f32_precision(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, value) in self.iter() {
            out.insert(name, value.round_to_f32());
        }
        out
    }

    /// Adds every entry of `other`, failing on a name collision.
    pub fn merge(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, value) in other.iter() {
            if self.contains(name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter '{name}'"
                )));
            }
            self.insert(name, value.clone());
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, value) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name, value.clone());
        }
        out
    }
}

/// Builds the objective, runs the reverse pass and overwrites the store's
/// gradients with the result. Returns the objective value.
///
/// The objective registers the parameters it depends on through
/// [`Graph::param`]. Any non-finite intermediate is an error.
pub fn evaluate_with_gradients<F>(objective: &F, store: &mut ParameterStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut graph = Graph::checked();
    let out = objective(&mut graph, store)?;
    graph.check()?;
    let grads = graph.backward(out);
    store.zero_grads();
    store.accumulate(&graph, &grads);
    Ok(graph.scalar(out))
}

/// Forward value only.
pub fn evaluate<F>(objective: &F, store: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let out = objective(&mut graph, store)?;
    Ok(graph.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(value: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(value));
        s
    }

    fn set_grad(store: &mut ParameterStore, name: &str, g: f64) {
        store.entries.get_mut(name).unwrap().grad.data_mut()[0] = g;
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε) ≈ lr.
        let mut s = single(0.0);
        set_grad(&mut s, "p", 1.0);
        s.adam_step(&AdamConfig::with_lr(0.1));
        let p = s.value("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-6, "{p}");
        assert_eq!(s.step(), 1);
        assert_eq!(s.grad("p").unwrap().data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut s = single(0.7);
        s.adam_step(&AdamConfig::with_lr(0.1));
        assert_eq!(s.value("p").unwrap().data()[0], 0.7);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn two_steps_versus_one_doubled_step() {
        // With a constant gradient the bias-corrected moments are m̂ = v̂ = 1
        // at every step, so each step moves lr/(1 + ε). Two steps at lr and
        // one step at 2·lr land on the same value; only the optimizer state
        // (step counter, raw moments) tells them apart.
        let mut two = single(0.0);
        set_grad(&mut two, "p", 1.0);
        two.adam_step(&AdamConfig::with_lr(0.1));
        set_grad(&mut two, "p", 1.0);
        two.adam_step(&AdamConfig::with_lr(0.1));
        let mut one = single(0.0);
        set_grad(&mut one, "p", 1.0);
        one.adam_step(&AdamConfig::with_lr(0.2));
        let expected = -0.2 / (1.0 + 1e-8);
        assert!((two.value("p").unwrap().data()[0] - expected).abs() < 1e-12);
        assert!((one.value("p").unwrap().data()[0] - expected).abs() < 1e-12);
        assert_ne!(two.step(), one.step());
        assert_ne!(two.entries["p"].m, one.entries["p"].m);
    }

    #[test]
    fn bias_correction_on_first_step() {
        // Without correction the first step would be lr·0.1/sqrt(0.001) ≈ 3.16·lr.
        let mut s = single(0.0);
        set_grad(&mut s, "p", 0.5);
        s.adam_step(&AdamConfig::with_lr(0.01));
        let p = s.value("p").unwrap().data()[0];
        assert!((p + 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn clip_grad_norm_scales_down() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::row_vector(vec![0.0, 0.0]));
        s.entries.get_mut("a").unwrap().grad = Tensor::row_vector(vec![3.0, 4.0]);
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_with_gradients_writes_into_store() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::row_vector(vec![1.0, -3.0]));
        let obj = |g: &mut Graph, st: &ParameterStore| {
            let w = g.param(st, "w")?;
            let sq = g.mul(w, w);
            Ok(g.sum(sq))
        };
        let v = evaluate_with_gradients(&obj, &mut s).unwrap();
        assert_eq!(v, 10.0);
        assert_eq!(s.grad("w").unwrap().data(), &[2.0, -6.0]);
        // a second call overwrites rather than accumulates
        evaluate_with_gradients(&obj, &mut s).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[2.0, -6.0]);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        s.insert_glorot("w", 10, 14, &mut rng);
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(s.value("w").unwrap().data().iter().all(|v| v.abs() < bound));
    }
}
