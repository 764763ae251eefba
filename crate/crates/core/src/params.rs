//! Named parameter arrays with paired gradient buffers.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut2, Dimension, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Every learnable array of a model, keyed by a dotted hierarchical name.
///
/// Iteration order is lexicographic by name, which fixes the order of
/// optimizer updates and serialized output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    seed: u64,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for one entry. Depends only on the store seed and the
    /// entry name, so registration order never changes initial values.
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name))
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        self.entries.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn register_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, ArrayD::from_elem(IxDyn(shape), value))
    }

    /// Uniform in +-sqrt(6 / (fan_in + fan_out)), shape `fan_in x fan_out`.
    pub fn register_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let value = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
            rng.random_range(-bound..=bound)
        });
        self.insert(name, value)
    }

    pub fn register_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std)
            .map_err(|e| Error::Config(format!("bad init std for '{name}': {e}")))?;
        let mut rng = self.rng_for(name);
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng));
        self.insert(name, value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("parameter '{name}' is not registered")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("parameter '{name}' is not registered")))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        view_as(self.get(name)?.value.view(), name)
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        view_as(self.get(name)?.value.view(), name)
    }

    pub fn tensor3(&self, name: &str) -> Result<ArrayView3<'_, f64>> {
        view_as(self.get(name)?.value.view(), name)
    }

    pub fn grad_matrix_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f64>> {
        let p = self.get_mut(name)?;
        p.grad
            .view_mut()
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("parameter '{name}' is not a matrix")))
    }

    /// Adds `delta` into the gradient buffer of `name`.
    pub fn accumulate<D: Dimension>(
        &mut self,
        name: &str,
        delta: ndarray::ArrayView<'_, f64, D>,
    ) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "gradient for '{name}' has shape {:?}, parameter is {:?}",
                delta.shape(),
                p.grad.shape()
            )));
        }
        p.grad
            .iter_mut()
            .zip(delta.iter())
            .for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            p.grad.mapv_inplace(|g| g * factor);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total count of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copies values from `other` for every shared name; shapes must match.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::State(format!("parameter '{name}' missing from source")))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}': shape {:?} vs {:?}",
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(&src.value);
        }
        Ok(())
    }
}

fn view_as<'a, D: Dimension>(v: ndarray::ArrayViewD<'a, f64>, name: &str) -> Result<ndarray::ArrayView<'a, f64, D>> {
    let shape = v.shape().to_vec();
    v.into_dimensionality::<D>().map_err(|_| {
        Error::Shape(format!(
            "parameter '{name}' has shape {shape:?}, wrong number of axes"
        ))
    })
}
