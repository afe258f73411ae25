//! Named parameter storage shared across training steps.
//!
//! A [`ParamSet`] owns the persistent weights; each step leases them onto a
//! fresh tape via [`crate::tensor::Tape::param`], and backward parks
//! gradients back here where the optimizer consumes them. A [`Binder`]
//! memoizes leases so a weight bound several times in one graph (shared
//! across iterations) accumulates one summed gradient.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(TensorError::Invalid {
                op: "param_add",
                msg: format!("duplicate parameter name '{name}'"),
            });
        }
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: None,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn add_fill(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * gauss(rng)).collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<(), TensorError> {
        let e = &mut self.entries[id.0];
        let n: usize = e.shape.iter().product();
        if data.len() != n {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: e.shape.clone(),
            });
        }
        e.data = data;
        Ok(())
    }

    pub fn nudge(&mut self, id: ParamId, coord: usize, delta: f64) {
        self.entries[id.0].data[coord] += delta;
    }

    pub(crate) fn snapshot(&self, id: ParamId) -> (Vec<usize>, Vec<f64>) {
        let e = &self.entries[id.0];
        (e.shape.clone(), e.data.clone())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let e = &mut self.entries[id.0];
        let g = e.grad.get_or_insert_with(|| vec![0.0; e.data.len()]);
        for (d, s) in g.iter_mut().zip(grad.iter()) {
            *d += s;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.entries[id.0].grad.as_mut()
    }

    pub fn take_grad(&mut self, id: ParamId) -> Option<Vec<f64>> {
        self.entries[id.0].grad.take()
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// Standard normal sample via Box-Muller; uses two uniforms per call so
/// the stream stays reproducible across platforms.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Kaiming-style standard deviation for ReLU layers.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Xavier-style standard deviation for linear/sigmoid/tanh layers.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One lease per parameter per tape. Repeated `get` calls return clones of
/// the same leaf node, so every use shares one gradient accumulator.
pub struct Binder<'a> {
    tape: &'a Tape,
    params: &'a ParamSet,
    cache: RefCell<HashMap<ParamId, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamSet) -> Self {
        Binder {
            tape,
            params,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        let mut cache = self.cache.borrow_mut();
        cache
            .entry(id)
            .or_insert_with(|| self.tape.param(self.params, id))
            .clone()
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add_zeros("w", &[2]).unwrap();
        assert!(ps.add_zeros("w", &[2]).is_err());
    }

    #[test]
    fn lease_accumulates_grad_into_set() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let t = Tape::new(Precision::F64);
        let wt = t.param(&ps, w);
        let loss = wt.mul(&wt).unwrap().sum();
        t.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_lease_gets_zero_grad() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let u = ps.add("u", &[1], vec![3.0]).unwrap();
        let t = Tape::new(Precision::F64);
        let wt = t.param(&ps, w);
        let _ut = t.param(&ps, u);
        let loss = wt.sum();
        t.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(w).unwrap(), &[1.0, 1.0]);
        assert_eq!(ps.grad(u).unwrap(), &[0.0]);
    }

    #[test]
    fn binder_shares_one_lease() {
        // w used along two paths: grads add up through the shared leaf.
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[1], vec![3.0]).unwrap();
        let t = Tape::new(Precision::F64);
        let b = Binder::new(&t, &ps);
        let w1 = b.get(w);
        let w2 = b.get(w);
        let loss = w1.mul(&w2).unwrap().sum(); // w^2 -> d/dw = 2w = 6
        t.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn normal_init_is_seed_deterministic() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let ia = a.add_normal("w", &[16], 0.5, &mut r1).unwrap();
        let ib = b.add_normal("w", &[16], 0.5, &mut r2).unwrap();
        assert_eq!(a.data(ia), b.data(ib));
    }
}
