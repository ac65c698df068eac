//! Named parameter storage, seeded initialization, and per-tape binding.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashMap;

/// Ordered map of named parameter arrays. Order is construction order and
/// is what checkpoints serialize.
#[derive(Debug, Clone)]
pub struct Parameters<T: Real> {
    entries: Vec<(String, ArrayD<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for Parameters<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Parameters<T> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let cur = self.get_mut(name);
        if cur.shape() != value.shape() {
            return Err(Error::shape(
                "Parameters::set",
                format!("{:?}", cur.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *cur = value;
        Ok(())
    }
}

/// Seeded initializer writing into a [`Parameters`] store.
pub struct ParamInit<'p, T: Real> {
    pub params: &'p mut Parameters<T>,
    pub rng: ChaCha8Rng,
}

impl<'p, T: Real> ParamInit<'p, T> {
    pub fn new(params: &'p mut Parameters<T>, rng: ChaCha8Rng) -> Self {
        ParamInit { params, rng }
    }

    fn normal(&mut self, std: f64) -> f64 {
        // Box-Muller on two uniform draws; deterministic per RNG stream.
        let u1: f64 = self.rng.random::<f64>().max(1e-12);
        let u2: f64 = self.rng.random::<f64>();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// He-normal initialized convolution kernel plus zero bias.
    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.conv_scaled(name, c_out, c_in, k, 1.0);
    }

    /// Convolution with the He-normal std shrunk by `scale` (residual
    /// output heads start near zero).
    pub fn conv_scaled(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, scale: f64) {
        let fan_in = (c_in * k * k) as f64;
        let std = scale * (2.0 / fan_in).sqrt();
        let w: Vec<T> = (0..c_out * c_in * k * k)
            .map(|_| T::of_f64(self.normal(std)))
            .collect();
        self.params.insert(
            format!("{name}.w"),
            ArrayD::from_shape_vec(IxDyn(&[c_out, c_in, k, k]), w).unwrap(),
        );
        self.params
            .insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
    }

    /// Xavier-normal initialized dense weight `(in, out)` plus zero bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let w: Vec<T> = (0..d_in * d_out)
            .map(|_| T::of_f64(self.normal(std)))
            .collect();
        self.params.insert(
            format!("{name}.w"),
            ArrayD::from_shape_vec(IxDyn(&[d_in, d_out]), w).unwrap(),
        );
        self.params
            .insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out])));
    }

    /// Overwrite a bias vector with a constant (gate biasing).
    pub fn set_bias(&mut self, name: &str, value: f64) {
        let b = self.params.get_mut(&format!("{name}.b"));
        b.fill(T::of_f64(value));
    }

    /// Layer-norm gain (ones) and bias (zeros).
    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params.insert(
            format!("{name}.g"),
            ArrayD::from_elem(IxDyn(&[dim]), T::one()),
        );
        self.params
            .insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[dim])));
    }
}

/// Lazily binds parameters onto one tape so each is a single leaf per
/// forward pass, and maps gradients back to names afterwards.
pub struct Binder<'t, 'p, T: Real> {
    tape: &'t Tape<T>,
    params: &'p Parameters<T>,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
}

impl<'t, 'p, T: Real> Binder<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p Parameters<T>) -> Self {
        Binder {
            tape,
            params,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let var = self.tape.leaf(self.params.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradient for every parameter bound during this forward pass.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> HashMap<String, ArrayD<T>> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, var)| (name.clone(), grads.wrt(*var)))
            .collect()
    }
}
