//! Named parameter collections with gradient slots and seeded initialization.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{io, Tape, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Ordered, uniquely named tensors.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let idx = self.tensors.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    /// `(name, tensor)` pairs in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count over every tensor.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if t.shape() != value.shape() {
            return Err(Error::shape("set", t.shape(), value.shape()));
        }
        *t = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies gradients of bound parameters out of a tape after `backward`.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (idx, var) in tape.param_vars(self) {
            if let Some(g) = tape.grad(var) {
                self.tensors[idx].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Plain gradient descent step over every tensor holding a gradient.
    pub fn sgd_step(&mut self, lr: f64) {
        for t in &mut self.tensors {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            t.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(w, g)| *w -= lr * g);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save(path, self.iter())
    }

    /// Overwrites every stored tensor from a weight file; names and shapes
    /// must match exactly.
    pub fn load_values(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = io::load(path)?;
        if loaded.len() != self.len() {
            return Err(Error::Format(format!(
                "file holds {} tensors, store expects {}",
                loaded.len(),
                self.len()
            )));
        }
        for (name, tensor) in loaded {
            self.set(&name, tensor)?;
        }
        Ok(())
    }

    /// Bit-level equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Deterministic tensor initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to two standard deviations by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    /// Standard normal entries.
    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.count(), 2);
    }

    #[test]
    fn conv_kernel_plus_bias_counts_ten() {
        let mut s = ParamStore::new();
        s.insert("conv.weight", Tensor::zeros(&[3, 3, 1, 1]))
            .unwrap();
        s.insert("conv.bias", Tensor::zeros(&[1])).unwrap();
        assert_eq!(s.count(), 10);
    }

    #[test]
    fn initializer_is_seeded_and_truncated() {
        let a = Initializer::new(7).trunc_normal(&[1000], INIT_STD);
        let b = Initializer::new(7).trunc_normal(&[1000], INIT_STD);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert_ne!(a, Initializer::new(8).trunc_normal(&[1000], INIT_STD));
    }

    #[test]
    fn tape_gradients_flow_back_to_store() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[2], vec![2.0, 3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let again = tape.param(&s, "w").unwrap();
        assert_eq!(w, again);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        s.accumulate_grads(&tape).unwrap();
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[4.0, 6.0]);
        s.sgd_step(0.5);
        assert_eq!(s.get("w").unwrap().data(), &[0.0, 0.0]);
    }
}
