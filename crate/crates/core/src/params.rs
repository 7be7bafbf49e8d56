//! Named parameter storage shared by blocks, the model and the trainer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mbrt::Container;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; names are fixed by model construction.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor onto `g` as a leaf; the returned vector is indexed by [`ParamId`].
    pub fn to_graph(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, t) in self.iter() {
            c.push_tensor(name, t);
        }
        c
    }

    /// Replaces every tensor with the same-named entry of `c`. Fails on the
    /// first missing tensor, shape mismatch or dtype mismatch.
    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        let mut loaded = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.iter() {
            let stored = c.get(name).ok_or_else(|| Error::Load {
                name: name.to_owned(),
                reason: "missing from checkpoint".into(),
            })?;
            if stored.shape() != t.shape() {
                return Err(Error::Load {
                    name: name.to_owned(),
                    reason: format!(
                        "shape {:?} in checkpoint, model expects {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                });
            }
            if stored.dtype() != T::DTYPE {
                return Err(Error::Load {
                    name: name.to_owned(),
                    reason: format!(
                        "dtype {:?} in checkpoint, model uses {:?}",
                        stored.dtype(),
                        T::DTYPE
                    ),
                });
            }
            loaded.push(stored.to_tensor::<T>());
        }
        self.tensors = loaded;
        Ok(())
    }
}

pub(crate) fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| T::lit(dist.sample(rng))).collect(),
    )
}

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| T::lit(dist.sample(rng))).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_reports_first_mismatch() {
        let mut a = ParamStore::<f32>::new();
        a.register("w", Tensor::zeros(&[2, 2]));
        a.register("b", Tensor::zeros(&[2]));
        let mut b = ParamStore::<f32>::new();
        b.register("w", Tensor::zeros(&[2, 2]));
        b.register("b", Tensor::zeros(&[3]));
        let err = a.load_container(&b.to_container()).unwrap_err();
        assert!(matches!(err, Error::Load { ref name, .. } if name == "b"), "{err}");

        let mut c = ParamStore::<f32>::new();
        c.register("w", Tensor::zeros(&[2, 2]));
        let err = a.load_container(&c.to_container()).unwrap_err();
        assert!(err.to_string().contains("`b`"));

        let mut d = ParamStore::<f64>::new();
        d.register("w", Tensor::zeros(&[2, 2]));
        d.register("b", Tensor::zeros(&[2]));
        assert!(a.load_container(&d.to_container()).is_err());
    }

    #[test]
    fn container_round_trip_restores_values() {
        let mut a = ParamStore::<f32>::new();
        a.register("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let mut b = ParamStore::<f32>::new();
        b.register("w", Tensor::zeros(&[2]));
        b.load_container(&a.to_container()).unwrap();
        assert_eq!(b.get(ParamId(0)).data(), &[1.5, -2.0]);
    }
}
