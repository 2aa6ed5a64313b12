//! Named parameter registry.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Xavier-uniform over a `[fan_in, fan_out]` matrix.
    Xavier,
    Zeros,
    Ones,
}

/// A trainable tensor plus its AdamW state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

impl Parameter {
    fn new(name: String, tensor: Tensor) -> Self {
        let n = tensor.numel();
        Parameter {
            name,
            tensor,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if !tensor.requires_grad() || !tensor.is_leaf() {
            return Err(Error::contract(format!("parameter {name} must be a gradient leaf")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, tensor.clone()));
        Ok(tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Element count of parameters under a dotted prefix.
    pub fn numel_under(&self, prefix: &str) -> usize {
        let dotted = format!("{prefix}.");
        self.params
            .iter()
            .filter(|p| p.name == prefix || p.name.starts_with(&dotted))
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// `(name, tensor)` pairs, for gradient checks.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Scope {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.path(name),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    _ => (n, n),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::leaf(data, shape)?;
        self.store.register(self.path(name), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn names_are_dotted_and_unique() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, Stream::Init, 0);
        let mut root = Scope::root(&mut store, &mut rng);
        let mut dec = root.child("decoder");
        let mut layer = dec.child("layer2");
        layer.param("w", &[2, 3], Init::Xavier).unwrap();
        assert!(layer.param("w", &[2, 3], Init::Zeros).is_err());
        assert!(store.get("decoder.layer2.w").is_some());
        assert_eq!(store.numel_under("decoder"), 6);
        assert_eq!(store.numel_under("decode"), 0);
    }

    #[test]
    fn xavier_bound() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, Stream::Init, 0);
        let w = Scope::root(&mut store, &mut rng)
            .param("w", &[10, 14], Init::Xavier)
            .unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(w.to_vec().iter().all(|v| v.abs() <= bound));
    }
}
