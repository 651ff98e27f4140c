use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a new entry is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Zero-mean uniform with variance `2 / fan_in`, where `fan_in` is the
    /// product of every axis but the first.
    HeUniform,
    /// Zero-mean uniform in `±1 / sqrt(fan_in)`, for output layers.
    FanInUniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

impl ParamEntry {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Self {
        let n = value.len();
        Self {
            name,
            shape,
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            trainable,
        }
    }
}

/// Named trainable arrays with paired gradient and Adam moment buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    step_count: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, entry: ParamEntry) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", entry.name)));
        }
        self.entries.push(entry);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeUniform | Init::FanInUniform => {
                let fan_in = shape.iter().skip(1).product::<usize>().max(1) as f64;
                let bound = if init == Init::HeUniform { (6.0 / fan_in).sqrt() } else { 1.0 / fan_in.sqrt() };
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        self.push(ParamEntry::new(name.into(), shape.to_vec(), value, true))
    }

    /// Non-trainable state that still travels with checkpoints.
    pub fn add_buffer(&mut self, name: impl Into<String>, shape: &[usize], fill: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.push(ParamEntry::new(name.into(), shape.to_vec(), vec![fill; n], false))
    }

    pub(crate) fn push_loaded(&mut self, entry: ParamEntry) -> Result<ParamId> {
        self.push(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds backward results into the gradient buffers.
    pub fn accumulate(&mut self, grads: &super::Gradients) {
        for (i, g) in grads.iter() {
            let e = &mut self.entries[i.0];
            for (dst, src) in e.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    /// Overwrites buffers (batch-norm running statistics) recorded during a
    /// training-mode forward pass.
    pub fn apply_updates(&mut self, updates: &[(ParamId, Vec<f64>)]) {
        for (id, v) in updates {
            self.entries[id.0].value.copy_from_slice(v);
        }
    }

    /// Total number of scalar values in trainable entries whose name starts
    /// with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected update of every trainable entry, then zeroes the
    /// gradients. Nothing is modified if any gradient is non-finite.
    pub fn step(&self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        for e in store.entries.iter().filter(|e| e.trainable) {
            if e.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }
        store.step_count += 1;
        let t = store.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for e in store.entries.iter_mut().filter(|e| e.trainable) {
            for i in 0..e.value.len() {
                let g = e.grad[i];
                e.adam_m[i] = self.beta1 * e.adam_m[i] + (1.0 - self.beta1) * g;
                e.adam_v[i] = self.beta2 * e.adam_v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = e.adam_m[i] / c1;
                let v_hat = e.adam_v[i] / c2;
                e.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(x: f64) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("x", &[1], Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        s.value_mut(id)[0] = x;
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        s.entry_mut(id).grad[0] = 3.7;
        Adam::default().step(&mut s, 0.01).unwrap();
        assert!((s.value(id)[0] - 0.99).abs() < 1e-8);
        assert_eq!(s.entry(id).grad[0], 0.0);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = scalar_store(0.25);
        Adam::default().step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id)[0], 0.25);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let (mut s, id) = scalar_store(1.0);
        let adam = Adam::default();
        for _ in 0..500 {
            let x = s.value(id)[0];
            s.entry_mut(id).grad[0] = 2.0 * x;
            adam.step(&mut s, 0.05).unwrap();
        }
        assert!(s.value(id)[0].abs() < 1e-2, "x = {}", s.value(id)[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = scalar_store(1.0);
        s.entry_mut(id).grad[0] = f64::NAN;
        assert!(matches!(Adam::default().step(&mut s, 0.1), Err(Error::NonFiniteGradient(_))));
        assert_eq!(s.value(id)[0], 1.0);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn he_uniform_variance() {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = s.add("w", &[200, 50], Init::HeUniform, &mut rng).unwrap();
        let v = s.value(id);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 50.0).abs() < 0.003, "var {var}");
        assert!(s.add("w", &[1], Init::Zeros, &mut rng).is_err());
    }
}
