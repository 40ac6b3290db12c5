use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::dense::Tensor;
use super::scalar::Scalar;
use super::tape::GradMap;
use crate::error::{Error, Result};

/// A named model tensor with a freeze flag and an optional gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

/// Every parameter of a model, keyed by hierarchical name (`vision.`,
/// `projector.`, `lm.`, `lora.`). Iteration order is the name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                tensor,
                trainable: true,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(rng)));
        self.insert(name, t)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::of(value)))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn numel(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Marks exactly the parameters under `prefixes` trainable; everything
    /// else is frozen.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[&str]) {
        for p in self.params.values_mut() {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Stores gradients from a backward pass. Gradients for frozen
    /// parameters are dropped.
    pub fn set_grads(&mut self, grads: GradMap<T>) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown `{name}`")))?;
            if !p.trainable {
                continue;
            }
            p.grad = Some(Tensor::new(p.tensor.shape().to_vec(), g)?);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                            grad: p.grad.as_ref().map(|g| g.cast()),
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian bytes of every parameter
    /// whose name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn digests(&self, prefixes: &[&str]) -> BTreeMap<String, String> {
        prefixes
            .iter()
            .map(|p| (p.to_string(), self.digest(p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert_const("a.w", &[2], 1.0).unwrap();
        assert!(s.insert_const("a.w", &[2], 1.0).is_err());
    }

    #[test]
    fn digest_tracks_content_per_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.insert_const("vision.w", &[2], 1.0).unwrap();
        s.insert_const("lm.w", &[2], 1.0).unwrap();
        let before = s.digests(&["vision.", "lm."]);
        s.get_mut("lm.w").unwrap().tensor.data_mut()[0] = 2.0;
        let after = s.digests(&["vision.", "lm."]);
        assert_eq!(before["vision."], after["vision."]);
        assert_ne!(before["lm."], after["lm."]);
    }
}
