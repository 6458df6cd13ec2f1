use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::named_stream;

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Tensor {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Tensor {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Moves every tensor of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every tensor as a graph leaf. Trainable stores become gradient
    /// leaves; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Tensor {
            name: name.to_string(),
            reason: "not bound".into(),
        })
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Xavier-uniform `[fan_in, fan_out]` matrix drawn from the stream named by
/// `(seed, name)`.
pub fn xavier<T: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(seed, name, &[fan_in, fan_out], -limit, limit)
}

pub fn uniform<T: Scalar>(seed: u64, name: &str, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = named_stream(seed, name);
    Tensor::from_fn(dims, |_| T::lit(rng.gen_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_is_seeded_and_bounded() {
        let a: Tensor<f32> = xavier(3, "w", 8, 8);
        let b: Tensor<f32> = xavier(3, "w", 8, 8);
        let c: Tensor<f32> = xavier(3, "v", 8, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f32 / 16.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn missing_names_are_reported() {
        let s = ParamStore::<f32>::new();
        let err = s.get("condenser/pca_i/w_q").unwrap_err();
        assert!(err.to_string().contains("condenser/pca_i/w_q"));
    }
}
