//! Named parameter registry shared by every model component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::numerics::init::truncated_normal;
use crate::numerics::{Scalar, Tensor};

/// Ordered list of named parameters. Order is construction order and is the
/// order used by checkpoints and optimizers.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<T>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            bail!(Argument, "parameter {name} registered twice");
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn extend(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (n, t) in &other.entries {
            self.insert(n.clone(), t.clone())?;
        }
        Ok(())
    }

    /// Copies values from `src` by name; every parameter must be present
    /// with an identical shape.
    pub fn copy_from<U: Scalar>(&self, src: &ParamStore<U>) -> Result<()> {
        for (name, dst) in &self.entries {
            let Some(s) = src.get(name) else {
                bail!(Argument, "source has no parameter {name}");
            };
            if s.shape() != dst.shape() {
                bail!(
                    Argument,
                    "parameter {name}: shape {:?} vs {:?}",
                    s.shape(),
                    dst.shape()
                );
            }
            dst.set_data(s.data().iter().map(|v| T::lit(v.as_f64())).collect())?;
        }
        Ok(())
    }
}

/// Hands out freshly initialized parameters under a dotted name prefix.
pub struct ParamBuilder<T: Scalar> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    std: f64,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn root(&mut self, prefix: &str) -> Scope<'_, T> {
        Scope {
            builder: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

pub struct Scope<'a, T: Scalar> {
    builder: &'a mut ParamBuilder<T>,
    prefix: String,
}

impl<T: Scalar> Scope<'_, T> {
    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        Scope {
            prefix: self.join(name),
            builder: self.builder,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        let full = self.join(name);
        let t = Tensor::param(data, shape).expect("builder shapes are consistent");
        self.builder
            .store
            .insert(full, t.clone())
            .expect("parameter names are unique by construction");
        t
    }

    /// Truncated-normal weights with the builder's standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let std = self.builder.std;
        let data = truncated_normal(n, std, &mut self.builder.rng);
        self.register(name, data, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        self.register(name, vec![T::zero(); n], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        self.register(name, vec![T::one(); n], shape)
    }
}
