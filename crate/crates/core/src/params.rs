use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameter handles recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Points `name` at another variable on the same tape.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        *slot = var;
        Ok(())
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count over names starting with `prefix`.
    pub fn count_prefixed(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Collects per-parameter adjoints, substituting zeros for parameters
    /// the backward pass never reached.
    pub fn collect_grads(
        &self,
        bound: &BoundParams,
        grads: &mut Gradients<T>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let var = bound.get(k)?;
                let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(v.shape()));
                Ok((k.clone(), g))
            })
            .collect()
    }

    /// SHA-256 over names, shapes and the raw little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Adds a 3x3 conv layer `name.weight` / `name.bias` with weights and
/// biases uniform in `±sqrt(1 / fan_in)`.
pub(crate) fn init_conv<T: Real, R: Rng>(
    params: &mut ParameterSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (1.0 / (cin * 9) as f64).sqrt();
    let w = Tensor::from_fn([cout, cin, 3, 3], |_| T::of(rng.gen_range(-bound..bound)));
    let b = Tensor::from_fn([cout], |_| T::of(rng.gen_range(-bound..bound)));
    params.insert(format!("{name}.weight"), w)?;
    params.insert(format!("{name}.bias"), b)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("a", Tensor::zeros([1])).unwrap();
        assert!(matches!(
            p.insert("a", Tensor::zeros([2])),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn iteration_is_name_ordered() {
        let mut p = ParameterSet::<f32>::new();
        for n in ["z", "a", "m"] {
            p.insert(n, Tensor::zeros([1])).unwrap();
        }
        assert_eq!(p.names().collect::<Vec<_>>(), ["a", "m", "z"]);
    }

    #[test]
    fn digest_tracks_values() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::full([2], 1.0)).unwrap();
        let d0 = p.digest();
        assert_eq!(d0, p.clone().digest());
        p.get_mut("w").unwrap().data_mut()[1] = 1.0 + f32::EPSILON;
        assert_ne!(d0, p.digest());
    }
}
