use std::collections::BTreeMap;

use crate::{Error, Gradients, Graph, Result, Scalar, Tensor, Var};

/// Named parameters, ordered by path (`"enc.conv1.weight"`, ...).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { tensors }
    }

    /// Overwrites every parameter of `other` that exists here.
    pub fn overwrite_from(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.tensors {
            let dst = self.get_mut(k)?;
            if dst.shape() != v.shape() {
                return Err(Error::Topology(format!("`{k}`: {:?} vs {:?}", dst.shape(), v.shape())));
            }
            *dst = v.clone();
        }
        Ok(())
    }

    /// True when both stores have the same paths and shapes.
    pub fn same_topology(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Places parameters on `graph`. `mode(name)` returns `None` to skip a
    /// parameter, `Some(true)` for a trainable leaf, `Some(false)` for a
    /// constant.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, mode: impl Fn(&str) -> Option<bool>) -> BoundParams<'g, T> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.tensors {
            match mode(name) {
                Some(true) => {
                    vars.insert(name.clone(), (graph.param(value.clone()), true));
                }
                Some(false) => {
                    vars.insert(name.clone(), (graph.constant(value.clone()), false));
                }
                None => {}
            }
        }
        BoundParams { vars }
    }

    /// Order-sensitive FNV-1a digest over names, shapes and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (k, v) in &self.tensors {
            eat(k.as_bytes());
            for &d in v.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameters placed on a graph.
pub struct BoundParams<'g, T: Scalar> {
    vars: BTreeMap<String, (Var<'g, T>, bool)>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars.get(name).map(|(v, _)| *v).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Gradients of trainable parameters that the loss reached.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .filter_map(|(k, (v, _))| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
